//! Forward and backward compute kernels shared by the tape ops.
//!
//! Every kernel uses a fixed loop order (channel, then z, y, x) so
//! reductions are bit-stable run to run. Hot inner loops run over
//! contiguous x rows so the compiler can vectorize them.

use crate::error::{RecorrError, Result};
use crate::vol::{Scalar, Volume};

/// Valid output range along one axis for a convolution tap: all `o` in
/// `lo..hi` satisfy `0 <= o*stride + k_off - pad < in_n`.
#[inline]
fn conv_axis_range(k_off: usize, pad: usize, stride: usize, in_n: usize, out_n: usize) -> (usize, usize) {
    let lo_num = pad as isize - k_off as isize;
    let lo = if lo_num <= 0 {
        0
    } else {
        (lo_num as usize).div_ceil(stride)
    };
    let hi_num = in_n as isize - 1 - k_off as isize + pad as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / stride + 1).min(out_n);
    (lo.min(hi), hi)
}

/// Weight layout for a 3-D convolution: `[c_out, c_in, kz, ky, kx]` with
/// flat index `(((co*c_in + ci)*kz + dz)*ky + dy)*kx + dx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_out: usize,
    pub c_in: usize,
    pub k: [usize; 3],
}

impl ConvShape {
    pub fn len(&self) -> usize {
        self.c_out * self.c_in * self.k[0] * self.k[1] * self.k[2]
    }

    pub fn dims_vec(&self) -> Vec<usize> {
        vec![self.c_out, self.c_in, self.k[0], self.k[1], self.k[2]]
    }

    #[inline]
    fn widx(&self, co: usize, ci: usize, dz: usize, dy: usize, dx: usize) -> usize {
        (((co * self.c_in + ci) * self.k[0] + dz) * self.k[1] + dy) * self.k[2] + dx
    }
}

fn conv_out_dims(in_dims: [usize; 3], stride: usize) -> Result<[usize; 3]> {
    match stride {
        1 => Ok(in_dims),
        2 => {
            if in_dims.iter().any(|&n| n % 2 != 0) {
                return Err(RecorrError::InvalidArgument(format!(
                    "stride-2 conv requires even dims, got {in_dims:?}"
                )));
            }
            Ok([in_dims[0] / 2, in_dims[1] / 2, in_dims[2] / 2])
        }
        s => Err(RecorrError::InvalidArgument(format!(
            "conv stride must be 1 or 2, got {s}"
        ))),
    }
}

/// 3-D convolution with zero padding of `k/2` per axis ("same" at stride 1,
/// halving at stride 2).
pub fn conv3d_forward<T: Scalar>(
    input: &Volume<T>,
    w: &[T],
    shape: ConvShape,
    bias: Option<&[T]>,
    stride: usize,
) -> Result<Volume<T>> {
    if input.channels != shape.c_in {
        return Err(RecorrError::shape(
            "conv3d",
            format!("{} input channels", shape.c_in),
            format!("{}", input.channels),
        ));
    }
    if w.len() != shape.len() {
        return Err(RecorrError::shape(
            "conv3d weights",
            format!("{} values", shape.len()),
            format!("{}", w.len()),
        ));
    }
    if let Some(b) = bias {
        if b.len() != shape.c_out {
            return Err(RecorrError::shape(
                "conv3d bias",
                format!("{} values", shape.c_out),
                format!("{}", b.len()),
            ));
        }
    }
    let out_dims = conv_out_dims(input.dims, stride)?;
    let [id, ih, iw] = input.dims;
    let [od, oh, ow] = out_dims;
    let pad = [shape.k[0] / 2, shape.k[1] / 2, shape.k[2] / 2];
    let mut out = Volume::zeros(shape.c_out, out_dims).with_spacing(input.spacing);

    for co in 0..shape.c_out {
        if let Some(b) = bias {
            out.channel_mut(co).fill(b[co]);
        }
        for ci in 0..shape.c_in {
            let src = input.channel(ci);
            let dst = out.channel_mut(co);
            for dz in 0..shape.k[0] {
                let (z0, z1) = conv_axis_range(dz, pad[0], stride, id, od);
                for dy in 0..shape.k[1] {
                    let (y0, y1) = conv_axis_range(dy, pad[1], stride, ih, oh);
                    for dx in 0..shape.k[2] {
                        let (x0, x1) = conv_axis_range(dx, pad[2], stride, iw, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = w[shape.widx(co, ci, dz, dy, dx)];
                        for z in z0..z1 {
                            let iz = z * stride + dz - pad[0];
                            for y in y0..y1 {
                                let iy = y * stride + dy - pad[1];
                                let ib = (iz * ih + iy) * iw + (x0 * stride + dx - pad[2]);
                                let ob = (z * oh + y) * ow + x0;
                                if stride == 1 {
                                    let s = &src[ib..ib + (x1 - x0)];
                                    let d = &mut dst[ob..ob + (x1 - x0)];
                                    for (dv, sv) in d.iter_mut().zip(s.iter()) {
                                        *dv += wv * *sv;
                                    }
                                } else {
                                    for x in 0..(x1 - x0) {
                                        dst[ob + x] += wv * src[ib + 2 * x];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of `conv3d_forward`. Accumulates into `d_input`, `d_w`,
/// and `d_bias` (all pre-sized by the caller).
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<T: Scalar>(
    input: &Volume<T>,
    w: &[T],
    shape: ConvShape,
    stride: usize,
    adj: &Volume<T>,
    d_input: &mut Volume<T>,
    d_w: &mut [T],
    mut d_bias: Option<&mut [T]>,
) {
    let [id, ih, iw] = input.dims;
    let [_, oh, ow] = adj.dims;
    let od = adj.dims[0];
    let pad = [shape.k[0] / 2, shape.k[1] / 2, shape.k[2] / 2];

    for co in 0..shape.c_out {
        let a = adj.channel(co);
        if let Some(db) = d_bias.as_deref_mut() {
            let mut s = T::zero();
            for v in a {
                s += *v;
            }
            db[co] += s;
        }
        for ci in 0..shape.c_in {
            let src = input.channel(ci);
            let din = d_input.channel_mut(ci);
            for dz in 0..shape.k[0] {
                let (z0, z1) = conv_axis_range(dz, pad[0], stride, id, od);
                for dy in 0..shape.k[1] {
                    let (y0, y1) = conv_axis_range(dy, pad[1], stride, ih, oh);
                    for dx in 0..shape.k[2] {
                        let (x0, x1) = conv_axis_range(dx, pad[2], stride, iw, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = w[shape.widx(co, ci, dz, dy, dx)];
                        let mut wg = T::zero();
                        for z in z0..z1 {
                            let iz = z * stride + dz - pad[0];
                            for y in y0..y1 {
                                let iy = y * stride + dy - pad[1];
                                let ib = (iz * ih + iy) * iw + (x0 * stride + dx - pad[2]);
                                let ob = (z * oh + y) * ow + x0;
                                if stride == 1 {
                                    let av = &a[ob..ob + (x1 - x0)];
                                    let sv = &src[ib..ib + (x1 - x0)];
                                    let dv = &mut din[ib..ib + (x1 - x0)];
                                    for i in 0..av.len() {
                                        wg += av[i] * sv[i];
                                        dv[i] += wv * av[i];
                                    }
                                } else {
                                    for x in 0..(x1 - x0) {
                                        wg += a[ob + x] * src[ib + 2 * x];
                                        din[ib + 2 * x] += wv * a[ob + x];
                                    }
                                }
                            }
                        }
                        d_w[shape.widx(co, ci, dz, dy, dx)] += wg;
                    }
                }
            }
        }
    }
}

/// Valid base range along one axis for an integer shift `off`: all `p`
/// in `lo..hi` satisfy `0 <= p + off < n`. Out-of-grid reads are zero.
#[inline]
fn shift_axis_range(off: isize, n: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off.max(0)) .max(0) as usize;
    (lo.min(hi), hi)
}

/// Correlation volume per the local search: channel for offset
/// `(dz, dy, dx)` over `[-r/2, r/2]^3` in lexicographic order holds
/// `(1/C) * <fixed(p), shifted(p + o)>` with zero padding outside.
pub fn correlation_forward<T: Scalar>(
    fixed: &Volume<T>,
    shifted_src: &Volume<T>,
    radius: usize,
) -> Result<Volume<T>> {
    if fixed.dims != shifted_src.dims || fixed.channels != shifted_src.channels {
        return Err(RecorrError::shape(
            "correlation",
            format!("{}x{:?}", fixed.channels, fixed.dims),
            format!("{}x{:?}", shifted_src.channels, shifted_src.dims),
        ));
    }
    if radius % 2 == 0 || radius == 0 {
        return Err(RecorrError::InvalidArgument(format!(
            "correlation radius must be odd and positive, got {radius}"
        )));
    }
    let h = (radius / 2) as isize;
    let [d, hh, w] = fixed.dims;
    let c_in = fixed.channels;
    let inv_c = T::from_f64(1.0 / c_in as f64);
    let mut out = Volume::zeros(radius * radius * radius, fixed.dims).with_spacing(fixed.spacing);

    let mut ch = 0usize;
    for oz in -h..=h {
        let (z0, z1) = shift_axis_range(oz, d);
        for oy in -h..=h {
            let (y0, y1) = shift_axis_range(oy, hh);
            for ox in -h..=h {
                let (x0, x1) = shift_axis_range(ox, w);
                let dst = out.channel_mut(ch);
                if x0 < x1 {
                    for ci in 0..c_in {
                        let f = fixed.channel(ci);
                        let g = shifted_src.channel(ci);
                        for z in z0..z1 {
                            let gz = (z as isize + oz) as usize;
                            for y in y0..y1 {
                                let gy = (y as isize + oy) as usize;
                                let fb = (z * hh + y) * w + x0;
                                let gb = (gz * hh + gy) * w + (x0 as isize + ox) as usize;
                                let n = x1 - x0;
                                let fr = &f[fb..fb + n];
                                let gr = &g[gb..gb + n];
                                let dr = &mut dst[fb..fb + n];
                                for i in 0..n {
                                    dr[i] += fr[i] * gr[i];
                                }
                            }
                        }
                    }
                }
                for v in dst.iter_mut() {
                    *v *= inv_c;
                }
                ch += 1;
            }
        }
    }
    Ok(out)
}

/// Backward pass of `correlation_forward`, accumulating into both
/// feature gradients.
pub fn correlation_backward<T: Scalar>(
    fixed: &Volume<T>,
    shifted_src: &Volume<T>,
    radius: usize,
    adj: &Volume<T>,
    d_fixed: &mut Volume<T>,
    d_shifted: &mut Volume<T>,
) {
    let h = (radius / 2) as isize;
    let [d, hh, w] = fixed.dims;
    let c_in = fixed.channels;
    let inv_c = T::from_f64(1.0 / c_in as f64);

    let mut ch = 0usize;
    for oz in -h..=h {
        let (z0, z1) = shift_axis_range(oz, d);
        for oy in -h..=h {
            let (y0, y1) = shift_axis_range(oy, hh);
            for ox in -h..=h {
                let (x0, x1) = shift_axis_range(ox, w);
                let a = adj.channel(ch);
                if x0 < x1 {
                    for ci in 0..c_in {
                        let f = fixed.channel(ci);
                        let g = shifted_src.channel(ci);
                        for z in z0..z1 {
                            let gz = (z as isize + oz) as usize;
                            for y in y0..y1 {
                                let gy = (y as isize + oy) as usize;
                                let fb = (z * hh + y) * w + x0;
                                let gb = (gz * hh + gy) * w + (x0 as isize + ox) as usize;
                                let n = x1 - x0;
                                // Two disjoint channel buffers; split borrows.
                                {
                                    let df = d_fixed.channel_mut(ci);
                                    for i in 0..n {
                                        df[fb + i] += inv_c * a[fb + i] * g[gb + i];
                                    }
                                }
                                {
                                    let dg = d_shifted.channel_mut(ci);
                                    for i in 0..n {
                                        dg[gb + i] += inv_c * a[fb + i] * f[fb + i];
                                    }
                                }
                            }
                        }
                    }
                }
                ch += 1;
            }
        }
    }
}

/// Per-axis interpolation cell with the derivative convention: `zero_d`
/// is true where the sample is constant in this coordinate (left of 0,
/// or at and beyond the last voxel, the right-continuous subgradient).
#[inline]
fn cell_d<T: Scalar>(coord: T, n: usize) -> (usize, T, bool) {
    if n == 1 {
        return (0, T::zero(), true);
    }
    let max = T::from_f64((n - 1) as f64);
    if coord <= T::zero() {
        return (0, T::zero(), coord < T::zero());
    }
    if coord >= max {
        return (n - 2, T::one(), true);
    }
    let mut i = coord.floor().as_f64() as usize;
    if i > n - 2 {
        i = n - 2;
    }
    (i, coord - T::from_f64(i as f64), false)
}

/// Backward pass of `vol::warp`, accumulating into the image gradient and
/// the 3-channel field gradient.
pub fn warp_backward<T: Scalar>(
    image: &Volume<T>,
    field: &Volume<T>,
    adj: &Volume<T>,
    d_image: &mut Volume<T>,
    d_field: &mut Volume<T>,
) {
    let [d, h, w] = image.dims;
    let (uz, uy, ux) = (field.channel(0), field.channel(1), field.channel(2));
    let one = T::one();
    let mut i = 0usize;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let sz = T::from_f64(z as f64) + uz[i];
                let sy = T::from_f64(y as f64) + uy[i];
                let sx = T::from_f64(x as f64) + ux[i];
                let (z0, fz, czd) = cell_d(sz, d);
                let (y0, fy, cyd) = cell_d(sy, h);
                let (x0, fx, cxd) = cell_d(sx, w);
                let z1 = (z0 + 1).min(d - 1);
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let idx = |zz: usize, yy: usize, xx: usize| (zz * h + yy) * w + xx;
                let corners = [
                    idx(z0, y0, x0),
                    idx(z0, y0, x1),
                    idx(z0, y1, x0),
                    idx(z0, y1, x1),
                    idx(z1, y0, x0),
                    idx(z1, y0, x1),
                    idx(z1, y1, x0),
                    idx(z1, y1, x1),
                ];
                let wz = [one - fz, fz];
                let wy = [one - fy, fy];
                let wx = [one - fx, fx];
                let (mut gz, mut gy, mut gx) = (T::zero(), T::zero(), T::zero());
                for c in 0..image.channels {
                    let a = adj.channel(c)[i];
                    if a == T::zero() {
                        continue;
                    }
                    let src = image.channel(c);
                    let v = [
                        src[corners[0]],
                        src[corners[1]],
                        src[corners[2]],
                        src[corners[3]],
                        src[corners[4]],
                        src[corners[5]],
                        src[corners[6]],
                        src[corners[7]],
                    ];
                    let dimg = d_image.channel_mut(c);
                    for (k, &ci) in corners.iter().enumerate() {
                        let wgt = wz[k >> 2] * wy[(k >> 1) & 1] * wx[k & 1];
                        dimg[ci] += a * wgt;
                    }
                    // Partials of the trilinear sample w.r.t. each fraction.
                    let dz_part = (v[4] - v[0]) * wy[0] * wx[0]
                        + (v[5] - v[1]) * wy[0] * wx[1]
                        + (v[6] - v[2]) * wy[1] * wx[0]
                        + (v[7] - v[3]) * wy[1] * wx[1];
                    let dy_part = (v[2] - v[0]) * wz[0] * wx[0]
                        + (v[3] - v[1]) * wz[0] * wx[1]
                        + (v[6] - v[4]) * wz[1] * wx[0]
                        + (v[7] - v[5]) * wz[1] * wx[1];
                    let dx_part = (v[1] - v[0]) * wz[0] * wy[0]
                        + (v[3] - v[2]) * wz[0] * wy[1]
                        + (v[5] - v[4]) * wz[1] * wy[0]
                        + (v[7] - v[6]) * wz[1] * wy[1];
                    gz += a * dz_part;
                    gy += a * dy_part;
                    gx += a * dx_part;
                }
                if !czd {
                    d_field.channel_mut(0)[i] += gz;
                }
                if !cyd {
                    d_field.channel_mut(1)[i] += gy;
                }
                if !cxd {
                    d_field.channel_mut(2)[i] += gx;
                }
                i += 1;
            }
        }
    }
}

/// Backward pass of `vol::upsample_volume2` (trilinear x2, half-pixel
/// centers): scatters the adjoint through the fixed interpolation weights.
pub fn upsample2_backward<T: Scalar>(adj: &Volume<T>, in_dims: [usize; 3], d_input: &mut Volume<T>) {
    let [d, h, w] = in_dims;
    let od = adj.dims;
    let one = T::one();
    let coord = |o: usize| T::from_f64((o as f64 + 0.5) / 2.0 - 0.5);
    for c in 0..adj.channels {
        let a = adj.channel(c);
        let dst = d_input.channel_mut(c);
        let mut i = 0usize;
        for z in 0..od[0] {
            let (z0, fz, _) = cell_d(coord(z), d);
            let z1 = (z0 + 1).min(d - 1);
            for y in 0..od[1] {
                let (y0, fy, _) = cell_d(coord(y), h);
                let y1 = (y0 + 1).min(h - 1);
                for x in 0..od[2] {
                    let (x0, fx, _) = cell_d(coord(x), w);
                    let x1 = (x0 + 1).min(w - 1);
                    let av = a[i];
                    let idx = |zz: usize, yy: usize, xx: usize| (zz * h + yy) * w + xx;
                    let wz = [one - fz, fz];
                    let wy = [one - fy, fy];
                    let wx = [one - fx, fx];
                    dst[idx(z0, y0, x0)] += av * wz[0] * wy[0] * wx[0];
                    dst[idx(z0, y0, x1)] += av * wz[0] * wy[0] * wx[1];
                    dst[idx(z0, y1, x0)] += av * wz[0] * wy[1] * wx[0];
                    dst[idx(z0, y1, x1)] += av * wz[0] * wy[1] * wx[1];
                    dst[idx(z1, y0, x0)] += av * wz[1] * wy[0] * wx[0];
                    dst[idx(z1, y0, x1)] += av * wz[1] * wy[0] * wx[1];
                    dst[idx(z1, y1, x0)] += av * wz[1] * wy[1] * wx[0];
                    dst[idx(z1, y1, x1)] += av * wz[1] * wy[1] * wx[1];
                    i += 1;
                }
            }
        }
    }
}

/// Sliding-window box sum over a clipped cube of half-width `radius`,
/// separable along the three axes. `out[p] = sum of src over the clipped
/// window around p`.
pub fn box_sum<T: Scalar>(src: &[T], dims: [usize; 3], radius: usize) -> Vec<T> {
    let [d, h, w] = dims;
    let mut a = src.to_vec();
    let mut b = vec![T::zero(); src.len()];
    // x axis: lines are contiguous.
    for line in 0..d * h {
        let base = line * w;
        line_box_sum(&a[base..base + w], radius, &mut b[base..base + w]);
    }
    std::mem::swap(&mut a, &mut b);
    // y axis: stride w within each z slab.
    strided_box_sum(&a, &mut b, d, h, w, radius, Axis::Y);
    std::mem::swap(&mut a, &mut b);
    // z axis: stride h*w.
    strided_box_sum(&a, &mut b, d, h, w, radius, Axis::Z);
    b
}

enum Axis {
    Y,
    Z,
}

fn line_box_sum<T: Scalar>(src: &[T], radius: usize, dst: &mut [T]) {
    let n = src.len();
    let mut s = T::zero();
    for v in src.iter().take((radius + 1).min(n)) {
        s += *v;
    }
    for i in 0..n {
        dst[i] = s;
        if i + radius + 1 < n {
            s += src[i + radius + 1];
        }
        if i >= radius {
            s -= src[i - radius];
        }
    }
}

fn strided_box_sum<T: Scalar>(
    src: &[T],
    dst: &mut [T],
    d: usize,
    h: usize,
    w: usize,
    radius: usize,
    axis: Axis,
) {
    // Runs the sliding window along y or z while striding the x row, so
    // the inner loop stays contiguous.
    match axis {
        Axis::Y => {
            for z in 0..d {
                let slab = z * h * w;
                // Accumulator row holds the running window sum per x.
                let mut acc = vec![T::zero(); w];
                for y in 0..(radius + 1).min(h) {
                    let row = slab + y * w;
                    for x in 0..w {
                        acc[x] += src[row + x];
                    }
                }
                for y in 0..h {
                    let out_row = slab + y * w;
                    dst[out_row..out_row + w].copy_from_slice(&acc);
                    if y + radius + 1 < h {
                        let row = slab + (y + radius + 1) * w;
                        for x in 0..w {
                            acc[x] += src[row + x];
                        }
                    }
                    if y >= radius {
                        let row = slab + (y - radius) * w;
                        for x in 0..w {
                            acc[x] -= src[row + x];
                        }
                    }
                }
            }
        }
        Axis::Z => {
            let hw = h * w;
            let mut acc = vec![T::zero(); hw];
            for z in 0..(radius + 1).min(d) {
                let slab = z * hw;
                for i in 0..hw {
                    acc[i] += src[slab + i];
                }
            }
            for z in 0..d {
                let out_slab = z * hw;
                dst[out_slab..out_slab + hw].copy_from_slice(&acc);
                if z + radius + 1 < d {
                    let slab = (z + radius + 1) * hw;
                    for i in 0..hw {
                        acc[i] += src[slab + i];
                    }
                }
                if z >= radius {
                    let slab = (z - radius) * hw;
                    for i in 0..hw {
                        acc[i] -= src[slab + i];
                    }
                }
            }
        }
    }
}

/// Clipped window volume per voxel for the box of half-width `radius`.
pub fn box_counts<T: Scalar>(dims: [usize; 3], radius: usize) -> Vec<T> {
    let [d, h, w] = dims;
    let len = |i: usize, n: usize| ((i + radius).min(n - 1) - i.saturating_sub(radius) + 1) as f64;
    let mut out = Vec::with_capacity(d * h * w);
    for z in 0..d {
        let lz = len(z, d);
        for y in 0..h {
            let ly = len(y, h);
            for x in 0..w {
                out.push(T::from_f64(lz * ly * len(x, w)));
            }
        }
    }
    out
}

pub fn mse_forward<T: Scalar>(a: &Volume<T>, b: &Volume<T>) -> T {
    let mut s = T::zero();
    for (x, y) in a.data.iter().zip(b.data.iter()) {
        let d = *x - *y;
        s += d * d;
    }
    s * T::from_f64(1.0 / a.data.len() as f64)
}

pub fn mse_backward<T: Scalar>(a: &Volume<T>, b: &Volume<T>, adj: T, d_a: &mut Volume<T>, d_b: &mut Volume<T>) {
    let k = adj * T::from_f64(2.0 / a.data.len() as f64);
    for i in 0..a.data.len() {
        let d = k * (a.data[i] - b.data[i]);
        d_a.data[i] += d;
        d_b.data[i] -= d;
    }
}

/// Per-voxel sums a local NCC needs; shared by forward and backward.
struct NccStats<T> {
    sf: Vec<T>,
    sm: Vec<T>,
    sff: Vec<T>,
    smm: Vec<T>,
    sfm: Vec<T>,
    cnt: Vec<T>,
}

fn ncc_stats<T: Scalar>(f: &[T], m: &[T], dims: [usize; 3], radius: usize) -> NccStats<T> {
    let sq: Vec<T> = f.iter().map(|v| *v * *v).collect();
    let sff = box_sum(&sq, dims, radius);
    let sq: Vec<T> = m.iter().map(|v| *v * *v).collect();
    let smm = box_sum(&sq, dims, radius);
    let pr: Vec<T> = f.iter().zip(m.iter()).map(|(a, b)| *a * *b).collect();
    let sfm = box_sum(&pr, dims, radius);
    NccStats {
        sf: box_sum(f, dims, radius),
        sm: box_sum(m, dims, radius),
        sff,
        smm,
        sfm,
        cnt: box_counts(dims, radius),
    }
}

/// Local squared normalized cross-correlation loss over clipped cubic
/// windows of side `2*radius + 1`:
/// `1 - mean( cross^2 / (var_f * var_m + eps) )`.
pub fn ncc_loss_forward<T: Scalar>(f: &Volume<T>, m: &Volume<T>, radius: usize, eps: T) -> T {
    let n = f.voxels();
    let mut total = T::zero();
    for c in 0..f.channels {
        let s = ncc_stats(f.channel(c), m.channel(c), f.dims, radius);
        for i in 0..n {
            let inv = T::one() / s.cnt[i];
            let cross = s.sfm[i] - s.sf[i] * s.sm[i] * inv;
            let var_f = s.sff[i] - s.sf[i] * s.sf[i] * inv;
            let var_m = s.smm[i] - s.sm[i] * s.sm[i] * inv;
            total += cross * cross / (var_f * var_m + eps);
        }
    }
    T::one() - total * T::from_f64(1.0 / (f.channels * n) as f64)
}

/// Backward pass of `ncc_loss_forward`. The chain rule turns per-window
/// coefficients into box sums again: each voxel's gradient gathers the
/// coefficients of every window containing it.
pub fn ncc_loss_backward<T: Scalar>(
    f: &Volume<T>,
    m: &Volume<T>,
    radius: usize,
    eps: T,
    adj: T,
    d_f: &mut Volume<T>,
    d_m: &mut Volume<T>,
) {
    let n = f.voxels();
    let dims = f.dims;
    let scale = adj * T::from_f64(-1.0 / (f.channels * n) as f64);
    for c in 0..f.channels {
        let fc = f.channel(c);
        let mc = m.channel(c);
        let s = ncc_stats(fc, mc, dims, radius);
        // Per-window coefficients of d(cc)/d(cross), d(cc)/d(var_f),
        // d(cc)/d(var_m), premultiplied with the means they touch.
        let mut a = vec![T::zero(); n]; // 2*cross / den
        let mut a_sm = vec![T::zero(); n]; // a * sm/cnt
        let mut a_sf = vec![T::zero(); n]; // a * sf/cnt
        let mut ef = vec![T::zero(); n]; // -2*cross^2*var_m / den^2
        let mut ef_sf = vec![T::zero(); n]; // ef * sf/cnt
        let mut em = vec![T::zero(); n]; // -2*cross^2*var_f / den^2
        let mut em_sm = vec![T::zero(); n]; // em * sm/cnt
        for i in 0..n {
            let inv = T::one() / s.cnt[i];
            let cross = s.sfm[i] - s.sf[i] * s.sm[i] * inv;
            let var_f = s.sff[i] - s.sf[i] * s.sf[i] * inv;
            let var_m = s.smm[i] - s.sm[i] * s.sm[i] * inv;
            let den = var_f * var_m + eps;
            let two = T::from_f64(2.0);
            a[i] = two * cross / den;
            a_sm[i] = a[i] * s.sm[i] * inv;
            a_sf[i] = a[i] * s.sf[i] * inv;
            let cc_over = cross * cross / (den * den);
            ef[i] = -(cc_over * var_m) * two;
            em[i] = -(cc_over * var_f) * two;
            ef_sf[i] = ef[i] * s.sf[i] * inv;
            em_sm[i] = em[i] * s.sm[i] * inv;
        }
        let box_a = box_sum(&a, dims, radius);
        let box_a_sm = box_sum(&a_sm, dims, radius);
        let box_a_sf = box_sum(&a_sf, dims, radius);
        let box_ef = box_sum(&ef, dims, radius);
        let box_ef_sf = box_sum(&ef_sf, dims, radius);
        let box_em = box_sum(&em, dims, radius);
        let box_em_sm = box_sum(&em_sm, dims, radius);
        let dfc = d_f.channel_mut(c);
        for i in 0..n {
            // d(cross)/df = m - mean_m; d(var_f)/df = 2f - 2*mean_f.
            let g = box_a[i] * mc[i] - box_a_sm[i] + box_ef[i] * fc[i] - box_ef_sf[i];
            dfc[i] += scale * g;
        }
        let dmc = d_m.channel_mut(c);
        for i in 0..n {
            let g = box_a[i] * fc[i] - box_a_sf[i] + box_em[i] * mc[i] - box_em_sm[i];
            dmc[i] += scale * g;
        }
    }
}

/// Diffusion regularizer: sum over the three axes of the mean (over
/// channels and valid positions) squared forward difference.
pub fn grad_l2_forward<T: Scalar>(u: &Volume<T>) -> Result<T> {
    let [d, h, w] = u.dims;
    if d < 2 || h < 2 || w < 2 {
        return Err(RecorrError::InvalidArgument(format!(
            "grad_l2 requires dims >= 2 per axis, got {:?}",
            u.dims
        )));
    }
    let c = u.channels;
    let mut total = T::zero();
    for (axis, count) in [(0usize, (d - 1) * h * w), (1, d * (h - 1) * w), (2, d * h * (w - 1))] {
        let stride = match axis {
            0 => h * w,
            1 => w,
            _ => 1,
        };
        let mut s = T::zero();
        for ci in 0..c {
            let ch = u.channel(ci);
            for z in 0..if axis == 0 { d - 1 } else { d } {
                for y in 0..if axis == 1 { h - 1 } else { h } {
                    let row = (z * h + y) * w;
                    let xe = if axis == 2 { w - 1 } else { w };
                    for x in 0..xe {
                        let i = row + x;
                        let df = ch[i + stride] - ch[i];
                        s += df * df;
                    }
                }
            }
        }
        total += s * T::from_f64(1.0 / (c * count) as f64);
    }
    Ok(total)
}

pub fn grad_l2_backward<T: Scalar>(u: &Volume<T>, adj: T, d_u: &mut Volume<T>) {
    let [d, h, w] = u.dims;
    let c = u.channels;
    for (axis, count) in [(0usize, (d - 1) * h * w), (1, d * (h - 1) * w), (2, d * h * (w - 1))] {
        let stride = match axis {
            0 => h * w,
            1 => w,
            _ => 1,
        };
        let k = adj * T::from_f64(2.0 / (c * count) as f64);
        for ci in 0..c {
            let ch = u.channel(ci);
            let dst = d_u.channel_mut(ci);
            for z in 0..if axis == 0 { d - 1 } else { d } {
                for y in 0..if axis == 1 { h - 1 } else { h } {
                    let row = (z * h + y) * w;
                    let xe = if axis == 2 { w - 1 } else { w };
                    for x in 0..xe {
                        let i = row + x;
                        let g = k * (ch[i + stride] - ch[i]);
                        dst[i + stride] += g;
                        dst[i] -= g;
                    }
                }
            }
        }
    }
}

/// Soft Dice loss over label channels: `1 - mean_l (2*sum(a*b) + eps) /
/// (sum(a) + sum(b) + eps)`.
pub fn dice_loss_forward<T: Scalar>(a: &Volume<T>, b: &Volume<T>, eps: T) -> T {
    let n = a.voxels();
    let mut mean = T::zero();
    for c in 0..a.channels {
        let (ac, bc) = (a.channel(c), b.channel(c));
        let mut inter = T::zero();
        let mut sa = T::zero();
        let mut sb = T::zero();
        for i in 0..n {
            inter += ac[i] * bc[i];
            sa += ac[i];
            sb += bc[i];
        }
        mean += (T::from_f64(2.0) * inter + eps) / (sa + sb + eps);
    }
    T::one() - mean * T::from_f64(1.0 / a.channels as f64)
}

pub fn dice_loss_backward<T: Scalar>(
    a: &Volume<T>,
    b: &Volume<T>,
    eps: T,
    adj: T,
    d_a: &mut Volume<T>,
    d_b: &mut Volume<T>,
) {
    let n = a.voxels();
    let k = adj * T::from_f64(-1.0 / a.channels as f64);
    let two = T::from_f64(2.0);
    for c in 0..a.channels {
        let (ac, bc) = (a.channel(c), b.channel(c));
        let mut inter = T::zero();
        let mut sa = T::zero();
        let mut sb = T::zero();
        for i in 0..n {
            inter += ac[i] * bc[i];
            sa += ac[i];
            sb += bc[i];
        }
        let den = sa + sb + eps;
        let num = two * inter + eps;
        let inv_den = T::one() / den;
        let frac = num * inv_den * inv_den;
        let dac = d_a.channel_mut(c);
        for i in 0..n {
            dac[i] += k * (two * bc[i] * inv_den - frac);
        }
        let dbc = d_b.channel_mut(c);
        for i in 0..n {
            dbc[i] += k * (two * ac[i] * inv_den - frac);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_volume(channels: usize, dims: [usize; 3], seed: u64) -> Volume<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Volume::zeros(channels, dims);
        for e in v.data.iter_mut() {
            *e = r.gen_range(-1.0..1.0);
        }
        v
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let input = random_volume(2, [4, 5, 6], 1);
        let shape = ConvShape {
            c_out: 2,
            c_in: 2,
            k: [3, 3, 3],
        };
        let mut w = vec![0.0f64; shape.len()];
        // Identity: center tap 1 on the diagonal channels.
        for c in 0..2 {
            w[shape.widx(c, c, 1, 1, 1)] = 1.0;
        }
        let out = conv3d_forward(&input, &w, shape, None, 1).unwrap();
        assert_eq!(out.data, input.data);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let input = random_volume(3, [4, 4, 5], 2);
        let shape = ConvShape {
            c_out: 2,
            c_in: 3,
            k: [3, 1, 5],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = conv3d_forward(&input, &w, shape, Some(&bias), 1).unwrap();

        let pad = [1isize, 0, 2];
        for co in 0..2 {
            for z in 0..4i64 {
                for y in 0..4i64 {
                    for x in 0..5i64 {
                        let mut acc = bias[co];
                        for ci in 0..3 {
                            for dz in 0..3i64 {
                                for dy in 0..1i64 {
                                    for dx in 0..5i64 {
                                        let iz = z + dz - pad[0] as i64;
                                        let iy = y + dy - pad[1] as i64;
                                        let ix = x + dx - pad[2] as i64;
                                        if iz < 0 || iz >= 4 || iy < 0 || iy >= 4 || ix < 0 || ix >= 5 {
                                            continue;
                                        }
                                        acc += w[shape.widx(co, ci, dz as usize, dy as usize, dx as usize)]
                                            * input.at(ci, iz as usize, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        let got = out.at(co, z as usize, y as usize, x as usize);
                        assert!((acc - got).abs() < 1e-12, "({co},{z},{y},{x}): {acc} vs {got}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_stride2_matches_oracle() {
        let input = random_volume(2, [4, 6, 4], 4);
        let shape = ConvShape {
            c_out: 3,
            c_in: 2,
            k: [3, 3, 3],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w: Vec<f64> = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = conv3d_forward(&input, &w, shape, None, 2).unwrap();
        assert_eq!(out.dims, [2, 3, 2]);
        for co in 0..3 {
            for z in 0..2i64 {
                for y in 0..3i64 {
                    for x in 0..2i64 {
                        let mut acc = 0.0;
                        for ci in 0..2 {
                            for dz in 0..3i64 {
                                for dy in 0..3i64 {
                                    for dx in 0..3i64 {
                                        let iz = 2 * z + dz - 1;
                                        let iy = 2 * y + dy - 1;
                                        let ix = 2 * x + dx - 1;
                                        if iz < 0 || iz >= 4 || iy < 0 || iy >= 6 || ix < 0 || ix >= 4 {
                                            continue;
                                        }
                                        acc += w[shape.widx(co, ci, dz as usize, dy as usize, dx as usize)]
                                            * input.at(ci, iz as usize, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        let got = out.at(co, z as usize, y as usize, x as usize);
                        assert!((acc - got).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn correlation_matches_brute_force() {
        for (r, seed) in [(1usize, 10u64), (3, 11), (5, 12)] {
            let ff = random_volume(4, [5, 5, 5], seed);
            let g = random_volume(4, [5, 5, 5], seed + 100);
            let out = correlation_forward(&ff, &g, r).unwrap();
            assert_eq!(out.channels, r * r * r);
            let h = (r / 2) as i64;
            let mut ch = 0usize;
            for oz in -h..=h {
                for oy in -h..=h {
                    for ox in -h..=h {
                        for z in 0..5i64 {
                            for y in 0..5i64 {
                                for x in 0..5i64 {
                                    let (gz, gy, gx) = (z + oz, y + oy, x + ox);
                                    let mut acc = 0.0;
                                    if (0..5).contains(&gz) && (0..5).contains(&gy) && (0..5).contains(&gx) {
                                        for ci in 0..4 {
                                            acc += ff.at(ci, z as usize, y as usize, x as usize)
                                                * g.at(ci, gz as usize, gy as usize, gx as usize);
                                        }
                                    }
                                    acc /= 4.0;
                                    let got = out.at(ch, z as usize, y as usize, x as usize);
                                    assert!((acc - got).abs() < 1e-12);
                                }
                            }
                        }
                        ch += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn box_sum_matches_nested_loops() {
        let v = random_volume(1, [5, 6, 7], 20);
        for radius in [1usize, 2, 4] {
            let got = box_sum(v.channel(0), v.dims, radius);
            let counts: Vec<f64> = box_counts(v.dims, radius);
            let r = radius as i64;
            let mut i = 0usize;
            for z in 0..5i64 {
                for y in 0..6i64 {
                    for x in 0..7i64 {
                        let mut acc = 0.0;
                        let mut cnt = 0.0;
                        for dz in -r..=r {
                            for dy in -r..=r {
                                for dx in -r..=r {
                                    let (zz, yy, xx) = (z + dz, y + dy, x + dx);
                                    if (0..5).contains(&zz) && (0..6).contains(&yy) && (0..7).contains(&xx) {
                                        acc += v.at(0, zz as usize, yy as usize, xx as usize);
                                        cnt += 1.0;
                                    }
                                }
                            }
                        }
                        assert!((got[i] - acc).abs() < 1e-10, "r={radius} i={i}");
                        assert_eq!(counts[i], cnt);
                        i += 1;
                    }
                }
            }
        }
    }
}
