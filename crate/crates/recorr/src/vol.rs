//! Volumes, displacement fields, and the geometric operations every other
//! module builds on: trilinear warping, field composition, resampling, and
//! Jacobian analysis.
//!
//! Conventions used throughout the crate:
//! - Axis order is (z, y, x) with dims `[d, h, w]`; the flat index is
//!   `((c*d + z)*h + y)*w + x` (channel-major, x fastest).
//! - Displacement fields store voxel-unit vectors as three channels in
//!   (z, y, x) component order; the induced map is `phi(p) = p + u(p)`.
//! - Sampling beyond the grid clamps to the border.
//! - Millimetre spacing is carried along but only surface metrics use it.

use num_traits::Float;

use crate::error::{RecorrError, Result};

/// Floating-point element type for volumes and the differentiation engine.
///
/// `f64` is used by the gradient audits, `f32` is the training default.
pub trait Scalar:
    Float
    + num_traits::NumAssignOps
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// A multi-channel 3-D grid of scalars with voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    pub channels: usize,
    /// Voxel counts `[d, h, w]` along (z, y, x).
    pub dims: [usize; 3],
    /// Millimetres per voxel along (z, y, x).
    pub spacing: [f64; 3],
    pub data: Vec<T>,
}

impl<T: Scalar> Volume<T> {
    pub fn new(channels: usize, dims: [usize; 3], spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        if channels == 0 || dims.iter().any(|&n| n == 0) {
            return Err(RecorrError::InvalidArgument(format!(
                "degenerate volume shape: {channels} x {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(RecorrError::InvalidArgument(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        let expect = channels * dims[0] * dims[1] * dims[2];
        if data.len() != expect {
            return Err(RecorrError::shape(
                "Volume::new",
                format!("{expect} values"),
                format!("{}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(RecorrError::NonFinite("volume contains non-finite values".into()));
        }
        Ok(Volume {
            channels,
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Volume {
            channels,
            dims,
            spacing: [1.0; 3],
            data: vec![T::zero(); channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn filled(channels: usize, dims: [usize; 3], value: T) -> Self {
        Volume {
            channels,
            dims,
            spacing: [1.0; 3],
            data: vec![value; channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    /// Voxels per channel.
    #[inline(always)]
    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline(always)]
    pub fn idx(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.dims[0] + z) * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline(always)]
    pub fn at(&self, c: usize, z: usize, y: usize, x: usize) -> T {
        self.data[self.idx(c, z, y, x)]
    }

    #[inline(always)]
    pub fn at_mut(&mut self, c: usize, z: usize, y: usize, x: usize) -> &mut T {
        let i = self.idx(c, z, y, x);
        &mut self.data[i]
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_grid(&self, other: &Volume<T>) -> bool {
        self.dims == other.dims
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Trilinear sample of channel `c` at continuous voxel coordinates,
    /// clamping out-of-grid coordinates to the border.
    #[inline]
    pub fn sample(&self, c: usize, z: T, y: T, x: T) -> T {
        let n = self.voxels();
        let ch = &self.data[c * n..(c + 1) * n];
        sample_channel(ch, self.dims, z, y, x)
    }

    /// Converts element type (used to move data between f32 storage and
    /// f64 audits).
    pub fn cast<U: Scalar>(&self) -> Volume<U> {
        Volume {
            channels: self.channels,
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Cell lookup for trilinear interpolation along one axis: returns
/// (lower index, fraction, clamped). At the exact upper border the cell
/// is the last one with fraction 1 so weights stay continuous.
#[inline(always)]
fn cell<T: Scalar>(coord: T, n: usize) -> (usize, T, bool) {
    debug_assert!(n >= 1);
    if n == 1 {
        return (0, T::zero(), true);
    }
    let max = T::from_f64((n - 1) as f64);
    if coord <= T::zero() {
        return (0, T::zero(), coord < T::zero());
    }
    if coord >= max {
        return (n - 2, T::one(), coord > max);
    }
    let f = coord.floor();
    let mut i = f.as_f64() as usize;
    if i > n - 2 {
        i = n - 2;
    }
    (i, coord - T::from_f64(i as f64), false)
}

/// Trilinear sample of one channel buffer with border clamp.
#[inline]
pub fn sample_channel<T: Scalar>(ch: &[T], dims: [usize; 3], z: T, y: T, x: T) -> T {
    let [d, h, w] = dims;
    let (z0, fz, _) = cell(z, d);
    let (y0, fy, _) = cell(y, h);
    let (x0, fx, _) = cell(x, w);
    let z1 = (z0 + 1).min(d - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let one = T::one();
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let c00 = ch[idx(z0, y0, x0)] * (one - fx) + ch[idx(z0, y0, x1)] * fx;
    let c01 = ch[idx(z0, y1, x0)] * (one - fx) + ch[idx(z0, y1, x1)] * fx;
    let c10 = ch[idx(z1, y0, x0)] * (one - fx) + ch[idx(z1, y0, x1)] * fx;
    let c11 = ch[idx(z1, y1, x0)] * (one - fx) + ch[idx(z1, y1, x1)] * fx;
    let c0 = c00 * (one - fy) + c01 * fy;
    let c1 = c10 * (one - fy) + c11 * fy;
    c0 * (one - fz) + c1 * fz
}

/// Per-voxel displacement u in voxel units, components ordered (z, y, x).
/// The induced deformation is `phi(p) = p + u(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField<T> {
    vol: Volume<T>,
}

impl<T: Scalar> DisplacementField<T> {
    pub fn zeros(dims: [usize; 3]) -> Self {
        DisplacementField {
            vol: Volume::zeros(3, dims),
        }
    }

    pub fn from_volume(vol: Volume<T>) -> Result<Self> {
        if vol.channels != 3 {
            return Err(RecorrError::shape(
                "DisplacementField::from_volume",
                "3 channels",
                format!("{}", vol.channels),
            ));
        }
        Ok(DisplacementField { vol })
    }

    #[inline]
    pub fn as_volume(&self) -> &Volume<T> {
        &self.vol
    }

    #[inline]
    pub fn as_volume_mut(&mut self) -> &mut Volume<T> {
        &mut self.vol
    }

    pub fn into_volume(self) -> Volume<T> {
        self.vol
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.vol.dims
    }

    /// Displacement vector (z, y, x) at a voxel.
    #[inline]
    pub fn u(&self, z: usize, y: usize, x: usize) -> [T; 3] {
        [
            self.vol.at(0, z, y, x),
            self.vol.at(1, z, y, x),
            self.vol.at(2, z, y, x),
        ]
    }

    #[inline]
    pub fn set_u(&mut self, z: usize, y: usize, x: usize, u: [T; 3]) {
        *self.vol.at_mut(0, z, y, x) = u[0];
        *self.vol.at_mut(1, z, y, x) = u[1];
        *self.vol.at_mut(2, z, y, x) = u[2];
    }

    /// Mean Euclidean norm of the displacement vectors.
    pub fn mean_norm(&self) -> f64 {
        let n = self.vol.voxels();
        let (uz, uy, ux) = (self.vol.channel(0), self.vol.channel(1), self.vol.channel(2));
        let mut acc = 0.0;
        for i in 0..n {
            let (a, b, c) = (uz[i].as_f64(), uy[i].as_f64(), ux[i].as_f64());
            acc += (a * a + b * b + c * c).sqrt();
        }
        acc / n as f64
    }
}

/// A stationary velocity field shares the representation of a displacement
/// field; `exp_field` in the pyramid driver integrates it.
pub type VelocityField<T> = DisplacementField<T>;

/// Determinant of the deformation Jacobian per interior voxel.
#[derive(Debug, Clone)]
pub struct JacobianMap<T> {
    /// Dims of the field the map was computed from.
    pub field_dims: [usize; 3],
    /// Interior dims, `field_dims - 2` per axis.
    pub dims: [usize; 3],
    pub det: Vec<T>,
}

/// Warps `image` by `field`: `out(p) = image(p + u(p))` with trilinear
/// sampling and border clamp. Channels are preserved.
pub fn warp<T: Scalar>(image: &Volume<T>, field: &DisplacementField<T>) -> Result<Volume<T>> {
    warp_by_volume(image, field.as_volume())
}

/// `warp` with the field given as its raw 3-channel volume.
pub(crate) fn warp_by_volume<T: Scalar>(image: &Volume<T>, fv: &Volume<T>) -> Result<Volume<T>> {
    if fv.channels != 3 {
        return Err(RecorrError::shape("warp field", "3 channels", format!("{}", fv.channels)));
    }
    if image.dims != fv.dims {
        return Err(RecorrError::shape(
            "warp",
            format!("{:?}", image.dims),
            format!("{:?}", fv.dims),
        ));
    }
    let [d, h, w] = image.dims;
    let mut out = Volume::zeros(image.channels, image.dims).with_spacing(image.spacing);
    let n = image.voxels();
    let (uz, uy, ux) = (fv.channel(0), fv.channel(1), fv.channel(2));
    for c in 0..image.channels {
        let src = image.channel(c);
        let dst = out.channel_mut(c);
        let mut i = 0usize;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let sz = T::from_f64(z as f64) + uz[i];
                    let sy = T::from_f64(y as f64) + uy[i];
                    let sx = T::from_f64(x as f64) + ux[i];
                    dst[i] = sample_channel(src, image.dims, sz, sy, sx);
                    i += 1;
                }
            }
        }
        debug_assert_eq!(i, n);
    }
    Ok(out)
}

/// Composes two fields so that warping by the result equals warping by
/// `outer` after `inner`: `u(p) = u_inner(p) + u_outer(p + u_inner(p))`.
pub fn compose<T: Scalar>(
    outer: &DisplacementField<T>,
    inner: &DisplacementField<T>,
) -> Result<DisplacementField<T>> {
    if outer.dims() != inner.dims() {
        return Err(RecorrError::shape(
            "compose",
            format!("{:?}", outer.dims()),
            format!("{:?}", inner.dims()),
        ));
    }
    let warped_outer = warp(outer.as_volume(), inner)?;
    let mut vol = warped_outer;
    for c in 0..3 {
        let src = inner.as_volume().channel(c).to_vec();
        let dst = vol.channel_mut(c);
        for (d, s) in dst.iter_mut().zip(src.iter()) {
            *d += *s;
        }
    }
    DisplacementField::from_volume(vol)
}

/// Trilinear upsampling by 2 with half-pixel-aligned sample centers:
/// output voxel `o` reads input coordinate `(o + 0.5)/2 - 0.5`.
pub fn upsample_volume2<T: Scalar>(vol: &Volume<T>) -> Volume<T> {
    let [d, h, w] = vol.dims;
    let od = [d * 2, h * 2, w * 2];
    let mut out = Volume::zeros(vol.channels, od).with_spacing(vol.spacing);
    let coord = |o: usize| T::from_f64((o as f64 + 0.5) / 2.0 - 0.5);
    for c in 0..vol.channels {
        let src = vol.channel(c);
        let dst = out.channel_mut(c);
        let mut i = 0usize;
        for z in 0..od[0] {
            let sz = coord(z);
            for y in 0..od[1] {
                let sy = coord(y);
                for x in 0..od[2] {
                    dst[i] = sample_channel(src, vol.dims, sz, sy, coord(x));
                    i += 1;
                }
            }
        }
    }
    out
}

/// Upsamples a displacement field by 2 and doubles its vectors so the
/// displacement stays metrically consistent on the finer grid.
pub fn upsample_field<T: Scalar>(field: &DisplacementField<T>) -> DisplacementField<T> {
    let mut vol = upsample_volume2(field.as_volume());
    let two = T::from_f64(2.0);
    for v in vol.data.iter_mut() {
        *v *= two;
    }
    DisplacementField::from_volume(vol).expect("3 channels preserved")
}

/// 2x2x2 mean pooling per channel. Dims must be even.
pub fn downsample_volume<T: Scalar>(vol: &Volume<T>) -> Result<Volume<T>> {
    let [d, h, w] = vol.dims;
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(RecorrError::InvalidArgument(format!(
            "downsample_volume requires even dims, got {:?}",
            vol.dims
        )));
    }
    let od = [d / 2, h / 2, w / 2];
    let mut out = Volume::zeros(vol.channels, od).with_spacing(vol.spacing);
    let eighth = T::from_f64(0.125);
    for c in 0..vol.channels {
        let src = vol.channel(c);
        let dst = out.channel_mut(c);
        let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
        let mut i = 0usize;
        for z in 0..od[0] {
            for y in 0..od[1] {
                for x in 0..od[2] {
                    let (z2, y2, x2) = (z * 2, y * 2, x * 2);
                    let mut s = T::zero();
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                s += src[idx(z2 + dz, y2 + dy, x2 + dx)];
                            }
                        }
                    }
                    dst[i] = s * eighth;
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Central-difference Jacobian determinant of `phi = id + u` per interior
/// voxel. The grid must be at least 3 voxels per axis.
pub fn jacobian_det<T: Scalar>(field: &DisplacementField<T>) -> Result<JacobianMap<T>> {
    let [d, h, w] = field.dims();
    if d < 3 || h < 3 || w < 3 {
        return Err(RecorrError::InvalidArgument(format!(
            "jacobian_det requires dims >= 3 per axis, got {:?}",
            field.dims()
        )));
    }
    let dims = [d - 2, h - 2, w - 2];
    let mut det = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    let fv = field.as_volume();
    let half = T::from_f64(0.5);
    for z in 1..d - 1 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                // J[a][b] = d phi_a / d p_b, component order (z, y, x).
                let mut j = [[T::zero(); 3]; 3];
                for (a, row) in j.iter_mut().enumerate() {
                    let dz = (fv.at(a, z + 1, y, x) - fv.at(a, z - 1, y, x)) * half;
                    let dy = (fv.at(a, z, y + 1, x) - fv.at(a, z, y - 1, x)) * half;
                    let dx = (fv.at(a, z, y, x + 1) - fv.at(a, z, y, x - 1)) * half;
                    *row = [dz, dy, dx];
                    row[a] += T::one();
                }
                det.push(det3(&j));
            }
        }
    }
    Ok(JacobianMap {
        field_dims: field.dims(),
        dims,
        det,
    })
}

#[inline]
fn det3<T: Scalar>(j: &[[T; 3]; 3]) -> T {
    j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
        - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
}

/// Fraction of interior voxels with non-positive Jacobian determinant.
pub fn fold_fraction<T: Scalar>(jmap: &JacobianMap<T>) -> f64 {
    if jmap.det.is_empty() {
        return 0.0;
    }
    let folded = jmap.det.iter().filter(|&&v| v <= T::zero()).count();
    folded as f64 / jmap.det.len() as f64
}

/// Pads a volume to the next multiple of `m` per axis by replicating the
/// border, returning the padded volume and the original dims.
pub fn pad_to_multiple<T: Scalar>(vol: &Volume<T>, m: usize) -> (Volume<T>, [usize; 3]) {
    let orig = vol.dims;
    let tgt = [
        orig[0].div_ceil(m) * m,
        orig[1].div_ceil(m) * m,
        orig[2].div_ceil(m) * m,
    ];
    if tgt == orig {
        return (vol.clone(), orig);
    }
    let mut out = Volume::zeros(vol.channels, tgt).with_spacing(vol.spacing);
    for c in 0..vol.channels {
        for z in 0..tgt[0] {
            for y in 0..tgt[1] {
                for x in 0..tgt[2] {
                    let v = vol.at(c, z.min(orig[0] - 1), y.min(orig[1] - 1), x.min(orig[2] - 1));
                    *out.at_mut(c, z, y, x) = v;
                }
            }
        }
    }
    (out, orig)
}

/// Crops a volume back to `dims` (inverse of `pad_to_multiple`).
pub fn crop_to<T: Scalar>(vol: &Volume<T>, dims: [usize; 3]) -> Volume<T> {
    if vol.dims == dims {
        return vol.clone();
    }
    let mut out = Volume::zeros(vol.channels, dims).with_spacing(vol.spacing);
    for c in 0..vol.channels {
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    *out.at_mut(c, z, y, x) = vol.at(c, z, y, x);
                }
            }
        }
    }
    out
}
