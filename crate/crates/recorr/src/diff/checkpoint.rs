//! Checkpoint serialization for a [`ParamStore`].
//!
//! Layout, little-endian: magic `RECORRCKPT`, u32 version, then one
//! record per tensor sorted by name: u32 name length, name bytes,
//! u32 rank, u32 dims, f32 values. Optimizer moments ride along as
//! `<name>.m` / `<name>.v` tensors plus a rank-0 `step` scalar.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{RecorrError, Result};
use crate::vol::Scalar;

use super::params::ParamStore;

const MAGIC: &[u8; 10] = b"RECORRCKPT";
const VERSION: u32 = 1;

/// Suffixes reserved for optimizer state riding along with the weights.
const MOMENT_M: &str = ".m";
const MOMENT_V: &str = ".v";
const STEP_KEY: &str = "step";

fn write_tensor<W: Write, T: Scalar>(w: &mut W, name: &str, dims: &[usize], values: &[T]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        let d = u32::try_from(d)
            .map_err(|_| RecorrError::InvalidArgument(format!("dim {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for v in values {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Saves weights, optionally with optimizer moments and step for resume.
pub fn save_checkpoint<T: Scalar>(path: &Path, store: &ParamStore<T>, with_moments: bool) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    // ParamStore iterates name-sorted, so records come out sorted with
    // each entry's moments directly after it (".m" < ".v" and both sort
    // after the bare name among these fixed suffixes).
    for (name, e) in store.iter() {
        write_tensor(&mut w, name, &e.shape, &e.values)?;
        if with_moments {
            write_tensor(&mut w, &format!("{name}{MOMENT_M}"), &e.shape, &e.m)?;
            write_tensor(&mut w, &format!("{name}{MOMENT_V}"), &e.shape, &e.v)?;
        }
    }
    if with_moments {
        write_tensor::<_, T>(&mut w, STEP_KEY, &[], &[T::from_f64(store.step as f64)])?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| RecorrError::Data(format!("{}: checkpoint truncated", path.display())))?;
    Ok(u32::from_le_bytes(b))
}

/// Loads a checkpoint into a fresh store, restoring moments and step
/// when present.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let file = File::open(path)
        .map_err(|e| RecorrError::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 10];
    r.read_exact(&mut magic)
        .map_err(|_| RecorrError::Data(format!("{}: checkpoint truncated", path.display())))?;
    if &magic != MAGIC {
        return Err(RecorrError::Data(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(RecorrError::Data(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }

    let mut store = ParamStore::new();
    let mut moments: Vec<(String, Vec<T>)> = Vec::new();
    let mut step: Option<u64> = None;
    loop {
        let mut len_buf = [0u8; 4];
        match r.read(&mut len_buf)? {
            0 => break,
            4 => {}
            _ => {
                return Err(RecorrError::Data(format!(
                    "{}: checkpoint truncated",
                    path.display()
                )))
            }
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        if name_len > 4096 {
            return Err(RecorrError::Data(format!(
                "{}: implausible name length {name_len}",
                path.display()
            )));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| RecorrError::Data(format!("{}: checkpoint truncated", path.display())))?;
        let name = String::from_utf8(name)
            .map_err(|_| RecorrError::Data(format!("{}: non-UTF8 tensor name", path.display())))?;
        let rank = read_u32(&mut r, path)? as usize;
        if rank > 8 {
            return Err(RecorrError::Data(format!(
                "{}: implausible rank {rank} for {name:?}",
                path.display()
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut r, path)? as usize);
        }
        let count: usize = dims.iter().product();
        if count > (1 << 28) {
            return Err(RecorrError::Data(format!(
                "{}: tensor {name:?} declares {count} values, refusing",
                path.display()
            )));
        }
        let mut raw = vec![0u8; count * 4];
        r.read_exact(&mut raw)
            .map_err(|_| RecorrError::Data(format!("{}: checkpoint truncated", path.display())))?;
        let values: Vec<T> = raw
            .chunks_exact(4)
            .map(|b| T::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();

        if name == STEP_KEY {
            step = Some(values.first().map(|v| v.as_f64() as u64).unwrap_or(0));
        } else if name.ends_with(MOMENT_M) || name.ends_with(MOMENT_V) {
            moments.push((name, values));
        } else {
            store.insert(&name, dims, values)?;
        }
    }

    for (name, values) in moments {
        let (base, is_m) = if let Some(b) = name.strip_suffix(MOMENT_M) {
            (b, true)
        } else {
            (name.strip_suffix(MOMENT_V).unwrap(), false)
        };
        let e = store.get_mut(base).map_err(|_| {
            RecorrError::Data(format!("{}: moment {name:?} has no base tensor", path.display()))
        })?;
        if values.len() != e.values.len() {
            return Err(RecorrError::Data(format!(
                "{}: moment {name:?} length mismatch",
                path.display()
            )));
        }
        if is_m {
            e.m = values;
        } else {
            e.v = values;
        }
    }
    if let Some(s) = step {
        store.step = s;
    }
    Ok(store)
}
