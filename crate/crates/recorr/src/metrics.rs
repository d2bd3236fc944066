//! Evaluation metrics on integer label maps: Dice overlap, 95th-percentile
//! Hausdorff distance, and average symmetric surface distance, plus
//! nearest-neighbor label warping.
//!
//! Surface distances work on boundary voxels: a voxel belongs to the
//! surface of its label when at least one of its six face neighbors lies
//! outside the grid or carries a different label. Distances are measured
//! between voxel centers in millimeters, so anisotropic spacing scales
//! each axis independently. Label 0 is background and never enters
//! per-label reports or means.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{RecorrError, Result};
use crate::vol::{DisplacementField, Scalar, Volume};

/// Integer label per voxel.
pub type Label = u16;

/// A dense integer segmentation over a voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub dims: [usize; 3],
    /// Voxel size in millimeters per axis, ordered (z, y, x).
    pub spacing: [f64; 3],
    /// One label per voxel, x fastest.
    pub voxels: Vec<Label>,
}

impl LabelMap {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<Label>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if voxels.len() != n {
            return Err(RecorrError::shape(
                "LabelMap::new",
                format!("{n} voxels for dims {dims:?}"),
                format!("{}", voxels.len()),
            ));
        }
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(RecorrError::InvalidArgument(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            voxels,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], label: Label) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self {
            dims,
            spacing,
            voxels: vec![label; n],
        }
    }

    #[inline]
    pub fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> Label {
        self.voxels[self.idx(z, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, z: usize, y: usize, x: usize) -> &mut Label {
        let i = self.idx(z, y, x);
        &mut self.voxels[i]
    }

    /// Distinct labels present, including background if present.
    pub fn labels(&self) -> BTreeSet<Label> {
        self.voxels.iter().copied().collect()
    }

    /// Voxel count of one label.
    pub fn volume_of(&self, label: Label) -> usize {
        self.voxels.iter().filter(|&&v| v == label).count()
    }
}

/// Per-label Dice coefficients and their mean.
#[derive(Debug, Clone)]
pub struct DiceReport {
    /// Dice per foreground label present in either map.
    pub per_label: BTreeMap<Label, f64>,
    /// Mean over `per_label`.
    pub mean: f64,
}

fn check_same_grid(context: &'static str, a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.dims != b.dims {
        return Err(RecorrError::shape(
            context,
            format!("{:?}", a.dims),
            format!("{:?}", b.dims),
        ));
    }
    if a.spacing != b.spacing {
        return Err(RecorrError::InvalidArgument(format!(
            "{context}: spacing mismatch {:?} vs {:?}",
            a.spacing, b.spacing
        )));
    }
    Ok(())
}

/// Dice overlap per foreground label, `2|A∩B| / (|A| + |B|)`, averaged over
/// every label present in at least one of the maps. Background (label 0)
/// is excluded; labels absent from both maps are excluded.
pub fn dice(a: &LabelMap, b: &LabelMap) -> Result<DiceReport> {
    check_same_grid("dice", a, b)?;
    let mut counts: BTreeMap<Label, (usize, usize, usize)> = BTreeMap::new();
    for (&la, &lb) in a.voxels.iter().zip(b.voxels.iter()) {
        if la != 0 {
            counts.entry(la).or_default().0 += 1;
        }
        if lb != 0 {
            counts.entry(lb).or_default().1 += 1;
        }
        if la == lb && la != 0 {
            counts.entry(la).or_default().2 += 1;
        }
    }
    if counts.is_empty() {
        return Err(RecorrError::Data(
            "dice: no foreground labels in either map".into(),
        ));
    }
    let per_label: BTreeMap<Label, f64> = counts
        .into_iter()
        .map(|(label, (na, nb, inter))| (label, 2.0 * inter as f64 / (na + nb) as f64))
        .collect();
    let mean = per_label.values().sum::<f64>() / per_label.len() as f64;
    Ok(DiceReport { per_label, mean })
}

/// Voxel-center coordinates (mm) of the boundary voxels of one label.
fn surface_points(map: &LabelMap, label: Label) -> Vec<[f64; 3]> {
    let [d, h, w] = map.dims;
    let mut points = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if map.at(z, y, x) != label {
                    continue;
                }
                let on_boundary = (z == 0 || map.at(z - 1, y, x) != label)
                    || (z + 1 == d || map.at(z + 1, y, x) != label)
                    || (y == 0 || map.at(z, y - 1, x) != label)
                    || (y + 1 == h || map.at(z, y + 1, x) != label)
                    || (x == 0 || map.at(z, y, x - 1) != label)
                    || (x + 1 == w || map.at(z, y, x + 1) != label);
                if on_boundary {
                    points.push([
                        z as f64 * map.spacing[0],
                        y as f64 * map.spacing[1],
                        x as f64 * map.spacing[2],
                    ]);
                }
            }
        }
    }
    points
}

/// For every point of `from`, the Euclidean distance to the nearest point
/// of `to`, by exhaustive search.
fn directed_distances(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    let dz = p[0] - q[0];
                    let dy = p[1] - q[1];
                    let dx = p[2] - q[2];
                    (dz * dz + dy * dy + dx * dx).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Nearest-rank percentile of an unsorted sample: the smallest value such
/// that at least `q` of the sample is at or below it.
fn nearest_rank(values: &mut [f64], q: f64) -> f64 {
    debug_assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let rank = (q * values.len() as f64).ceil() as usize;
    values[rank.max(1) - 1]
}

fn surface_pair(
    context: &'static str,
    a: &LabelMap,
    b: &LabelMap,
    label: Label,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_same_grid(context, a, b)?;
    let sa = surface_points(a, label);
    let sb = surface_points(b, label);
    if sa.is_empty() || sb.is_empty() {
        return Err(RecorrError::Data(format!(
            "{context}: label {label} is empty in {}",
            if sa.is_empty() { "first map" } else { "second map" }
        )));
    }
    Ok((directed_distances(&sa, &sb), directed_distances(&sb, &sa)))
}

/// 95th-percentile Hausdorff distance (mm) of one label: the nearest-rank
/// 95th percentile of each directed surface-distance set, then the larger
/// of the two directions.
pub fn hd95(a: &LabelMap, b: &LabelMap, label: Label) -> Result<f64> {
    let (mut d_ab, mut d_ba) = surface_pair("hd95", a, b, label)?;
    Ok(nearest_rank(&mut d_ab, 0.95).max(nearest_rank(&mut d_ba, 0.95)))
}

/// Average symmetric surface distance (mm) of one label: the mean over
/// both directed surface-distance sets pooled together.
pub fn assd(a: &LabelMap, b: &LabelMap, label: Label) -> Result<f64> {
    let (d_ab, d_ba) = surface_pair("assd", a, b, label)?;
    let total: f64 = d_ab.iter().sum::<f64>() + d_ba.iter().sum::<f64>();
    Ok(total / (d_ab.len() + d_ba.len()) as f64)
}

/// Warps a label map by a displacement field with nearest-neighbor
/// sampling: the output at `p` is the label at `round(p + u(p))`, with
/// coordinates clamped to the grid.
pub fn warp_labels<T: Scalar>(map: &LabelMap, field: &DisplacementField<T>) -> Result<LabelMap> {
    if field.dims() != map.dims {
        return Err(RecorrError::shape(
            "warp_labels",
            format!("{:?}", map.dims),
            format!("{:?}", field.dims()),
        ));
    }
    let [d, h, w] = map.dims;
    let mut out = Vec::with_capacity(map.voxels.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let u = field.u(z, y, x);
                let sz = (z as f64 + u[0].as_f64()).round().clamp(0.0, (d - 1) as f64);
                let sy = (y as f64 + u[1].as_f64()).round().clamp(0.0, (h - 1) as f64);
                let sx = (x as f64 + u[2].as_f64()).round().clamp(0.0, (w - 1) as f64);
                out.push(map.at(sz as usize, sy as usize, sx as usize));
            }
        }
    }
    LabelMap::new(map.dims, map.spacing, out)
}

/// One-hot encodes a label map into a float volume with one channel per
/// entry of `labels`, in that order. Useful as soft masks for overlap
/// losses.
pub fn one_hot<T: Scalar>(map: &LabelMap, labels: &[Label]) -> Result<Volume<T>> {
    if labels.is_empty() {
        return Err(RecorrError::InvalidArgument(
            "one_hot needs at least one label".into(),
        ));
    }
    let mut vol = Volume::zeros(labels.len(), map.dims);
    for (c, &label) in labels.iter().enumerate() {
        let channel = vol.channel_mut(c);
        for (o, &v) in channel.iter_mut().zip(map.voxels.iter()) {
            if v == label {
                *o = T::one();
            }
        }
    }
    vol.spacing = map.spacing;
    Ok(vol)
}
