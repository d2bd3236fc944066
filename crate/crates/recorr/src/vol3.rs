//! Reading and writing the ".vol3" container.
//!
//! Layout, all little-endian:
//! - 16-byte magic `RECORRVOL3` padded with NULs
//! - u32 channels, depth, height, width
//! - f32 spacing (z, y, x) in millimetres
//! - u32 dtype code (0 = f32)
//! - raw f32 values channel-major, index `((c*D + z)*H + y)*W + x`
//!
//! Displacement fields reuse the container with 3 channels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{RecorrError, Result};
use crate::vol::{Scalar, Volume};

const MAGIC: [u8; 16] = *b"RECORRVOL3\0\0\0\0\0\0";
const DTYPE_F32: u32 = 0;

/// Refuse to allocate volumes larger than this many values (16 GiB of f32);
/// a corrupt header must not trigger an absurd allocation.
const MAX_VALUES: u64 = 4 << 30;

pub fn write_vol3<T: Scalar>(path: &Path, vol: &Volume<T>) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&MAGIC)?;
    for v in [vol.channels, vol.dims[0], vol.dims[1], vol.dims[2]] {
        let v = u32::try_from(v).map_err(|_| {
            RecorrError::InvalidArgument(format!("dimension {v} exceeds u32 range"))
        })?;
        w.write_all(&v.to_le_bytes())?;
    }
    for s in vol.spacing {
        w.write_all(&(s as f32).to_le_bytes())?;
    }
    w.write_all(&DTYPE_F32.to_le_bytes())?;
    for v in &vol.data {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_vol3<T: Scalar>(path: &Path) -> Result<Volume<T>> {
    let file = File::open(path).map_err(|e| {
        RecorrError::Data(format!("cannot open {}: {e}", path.display()))
    })?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 16];
    read_exact(&mut r, &mut magic, path)?;
    if magic != MAGIC {
        return Err(RecorrError::Data(format!(
            "{} is not a .vol3 file (bad magic)",
            path.display()
        )));
    }

    let channels = read_u32(&mut r, path)? as usize;
    let d = read_u32(&mut r, path)? as usize;
    let h = read_u32(&mut r, path)? as usize;
    let w = read_u32(&mut r, path)? as usize;
    let mut spacing = [0.0f64; 3];
    for s in spacing.iter_mut() {
        *s = read_f32(&mut r, path)? as f64;
    }
    let dtype = read_u32(&mut r, path)?;
    if dtype != DTYPE_F32 {
        return Err(RecorrError::Data(format!(
            "{}: unsupported dtype code {dtype}",
            path.display()
        )));
    }
    if channels == 0 || d == 0 || h == 0 || w == 0 {
        return Err(RecorrError::Data(format!(
            "{}: degenerate shape {channels} x [{d}, {h}, {w}]",
            path.display()
        )));
    }
    let count = channels as u64 * d as u64 * h as u64 * w as u64;
    if count > MAX_VALUES {
        return Err(RecorrError::Data(format!(
            "{}: header declares {count} values, refusing",
            path.display()
        )));
    }

    let mut raw = vec![0u8; count as usize * 4];
    read_exact(&mut r, &mut raw, path)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(RecorrError::Data(format!(
            "{}: trailing bytes after payload",
            path.display()
        )));
    }

    let data: Vec<T> = raw
        .chunks_exact(4)
        .map(|b| T::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    Volume::new(channels, [d, h, w], spacing, data).map_err(|e| match e {
        RecorrError::NonFinite(_) => {
            RecorrError::Data(format!("{}: payload contains non-finite values", path.display()))
        }
        RecorrError::InvalidArgument(m) => RecorrError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|_| {
        RecorrError::Data(format!("{}: file truncated", path.display()))
    })
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R, path: &Path) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(f32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().expect("tempdir")
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tmp();
        let path = dir.path().join("a.vol3");
        let mut vol = Volume::<f32>::zeros(3, [2, 3, 4]).with_spacing([1.5, 2.0, 0.5]);
        for (i, v) in vol.data.iter_mut().enumerate() {
            *v = i as f32 * 0.25 - 3.0;
        }
        write_vol3(&path, &vol).unwrap();
        let back = read_vol3::<f32>(&path).unwrap();
        assert_eq!(back.channels, 3);
        assert_eq!(back.dims, [2, 3, 4]);
        assert_eq!(back.spacing, [1.5, 2.0, 0.5]);
        assert_eq!(back.data, vol.data);
    }

    #[test]
    fn header_layout_is_stable() {
        let dir = tmp();
        let path = dir.path().join("h.vol3");
        let vol = Volume::<f32>::filled(1, [1, 1, 2], 1.0);
        write_vol3(&path, &vol).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..16], b"RECORRVOL3\0\0\0\0\0\0");
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1); // C
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 1); // D
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 1); // H
        assert_eq!(u32::from_le_bytes(bytes[28..32].try_into().unwrap()), 2); // W
        assert_eq!(f32::from_le_bytes(bytes[32..36].try_into().unwrap()), 1.0);
        assert_eq!(u32::from_le_bytes(bytes[44..48].try_into().unwrap()), 0); // dtype
        assert_eq!(bytes.len(), 48 + 2 * 4);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tmp();
        let path = dir.path().join("bad.vol3");
        std::fs::write(&path, b"NOTAVOLUME000000rest").unwrap();
        let err = read_vol3::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tmp();
        let path = dir.path().join("t.vol3");
        let vol = Volume::<f32>::filled(1, [2, 2, 2], 1.0);
        write_vol3(&path, &vol).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = read_vol3::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn rejects_trailing_garbage() {
        let dir = tmp();
        let path = dir.path().join("g.vol3");
        let vol = Volume::<f32>::filled(1, [2, 2, 2], 1.0);
        write_vol3(&path, &vol).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        let err = read_vol3::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn rejects_unknown_dtype() {
        let dir = tmp();
        let path = dir.path().join("d.vol3");
        let vol = Volume::<f32>::filled(1, [1, 1, 1], 1.0);
        write_vol3(&path, &vol).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[44] = 7;
        std::fs::write(&path, &bytes).unwrap();
        let err = read_vol3::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("dtype"), "{err}");
    }

    #[test]
    fn rejects_absurd_header_dims() {
        let dir = tmp();
        let path = dir.path().join("a.vol3");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        for v in [u32::MAX, u32::MAX, u32::MAX, u32::MAX] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = read_vol3::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("refusing"), "{err}");
    }

    #[test]
    fn rejects_non_finite_payload() {
        let dir = tmp();
        let path = dir.path().join("n.vol3");
        let vol = Volume::<f32>::filled(1, [1, 1, 2], 1.0);
        write_vol3(&path, &vol).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let nan = f32::NAN.to_le_bytes();
        bytes[48..52].copy_from_slice(&nan);
        std::fs::write(&path, &bytes).unwrap();
        let err = read_vol3::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_random_shapes(
            c in 1usize..4,
            d in 1usize..6,
            h in 1usize..6,
            w in 1usize..6,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut vol = Volume::<f32>::zeros(c, [d, h, w])
                .with_spacing([0.5, 1.0, 2.0]);
            for v in vol.data.iter_mut() {
                *v = rng.gen_range(-10.0f32..10.0);
            }
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.vol3");
            write_vol3(&path, &vol).unwrap();
            let back = read_vol3::<f32>(&path).unwrap();
            prop_assert_eq!(back.data, vol.data);
            prop_assert_eq!(back.dims, [d, h, w]);
        }
    }
}
