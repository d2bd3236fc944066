//! Training-free feature pyramids for direct mode.
//!
//! Direct mode drives the correlation search without any learned
//! parameters, so it needs features whose dot products are meaningful out
//! of the box. Each pyramid level is built by 2x2x2 mean-pooling the
//! image, then lifting every voxel to a 27-channel descriptor: its 3-cube
//! neighborhood, mean-centered and divided by the neighborhood standard
//! deviation. The correlation of two such descriptors (divided by the
//! channel count) is the normalized cross-correlation of the underlying
//! patches, so a true match scores close to 1 while mismatches fall off
//! sharply — exactly what the softmax readout needs.
//!
//! Descriptors carry a fixed gain (see [`MATCH_SHARPNESS`]): adjacent
//! patches overlap in 18 of 27 voxels, so even a wrong shift correlates
//! around 0.7, and at the default softmax temperature the raw score gap
//! is too small to resolve. Scaling the scores widens the gap without
//! touching the readout itself.

use crate::error::{RecorrError, Result};
use crate::search::shift_offsets;
use crate::vol::{downsample_volume, Scalar, Volume};

/// Minimum patch standard deviation for a descriptor to carry signal,
/// on a unit intensity scale. Patches below it are noise: normalizing
/// them would produce structureless unit-norm directions that correlate
/// randomly, so they emit all-zero descriptors instead — zero
/// correlations at every offset, a uniform softmax, and exactly zero
/// displacement. Keeping every non-flat descriptor at exactly unit norm
/// matters: if norms varied with texture strength, a weak voxel's
/// self-match could score below its correlation with a stronger
/// neighbor, dragging the readout sideways even on identical images.
const PATCH_EPS: f64 = 1e-2;

/// Factor by which descriptor correlations exceed plain patch NCC;
/// equivalent to dividing the softmax temperature by this value.
pub const MATCH_SHARPNESS: f64 = 50.0;

/// Number of pyramid levels, matching the learned encoder.
pub const LEVELS: usize = 5;

/// Lifts a single-channel image to 27 channels: for each voxel, the
/// surrounding 3-cube (border-clamped), mean-centered and normalized by
/// the patch standard deviation.
pub fn patch_features<T: Scalar>(image: &Volume<T>) -> Result<Volume<T>> {
    if image.channels != 1 {
        return Err(RecorrError::shape(
            "patch_features",
            "1 channel",
            format!("{} channels", image.channels),
        ));
    }
    let [d, h, w] = image.dims;
    let offsets = shift_offsets(3);
    let mut out = Volume::zeros(offsets.len(), image.dims);
    let n = image.voxels();
    let mut patch = [T::zero(); 27];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                // A patch that straddles the border reuses clamped samples.
                // With two or more axes clamped, most of the 27 samples are
                // duplicates and neighboring patches become near-identical,
                // which turns the correlation readout into noise; treat such
                // patches as textureless. Face voxels (one clamped axis)
                // still carry enough signal to vote.
                let clamped_axes = usize::from(z == 0 || z + 1 == d)
                    + usize::from(y == 0 || y + 1 == h)
                    + usize::from(x == 0 || x + 1 == w);
                if clamped_axes >= 2 {
                    continue;
                }
                for (c, off) in offsets.iter().enumerate() {
                    let zz = (z as i64 + off[0]).clamp(0, d as i64 - 1) as usize;
                    let yy = (y as i64 + off[1]).clamp(0, h as i64 - 1) as usize;
                    let xx = (x as i64 + off[2]).clamp(0, w as i64 - 1) as usize;
                    patch[c] = image.at(0, zz, yy, xx);
                }
                let count = T::from_f64(offsets.len() as f64);
                let mean = patch.iter().copied().sum::<T>() / count;
                let var = patch
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<T>()
                    / count;
                let sd = var.sqrt();
                let i = (z * h + y) * w + x;
                if sd < T::from_f64(PATCH_EPS) {
                    continue; // flat patch: leave the descriptor at zero
                }
                // Per-channel z-score times the gain root. Every textured
                // descriptor then has the same norm, so the channel-averaged
                // self-correlation is exactly the gain and cross-correlations
                // sit strictly below it (Cauchy-Schwarz).
                let scale = T::from_f64(MATCH_SHARPNESS.sqrt()) / sd;
                for c in 0..offsets.len() {
                    out.data[c * n + i] = scale * (patch[c] - mean);
                }
            }
        }
    }
    Ok(out)
}

/// Builds five descriptor volumes at 1/16 .. 1 of the input resolution,
/// coarsest first, mirroring the learned encoder's level layout.
pub fn feature_pyramid<T: Scalar>(image: &Volume<T>) -> Result<Vec<Volume<T>>> {
    if image.channels != 1 {
        return Err(RecorrError::shape(
            "feature_pyramid",
            "1 channel",
            format!("{} channels", image.channels),
        ));
    }
    if image.dims.iter().any(|&d| d % 16 != 0) {
        return Err(RecorrError::shape(
            "feature_pyramid",
            "dims divisible by 16",
            format!("{:?}", image.dims),
        ));
    }
    let mut images = Vec::with_capacity(LEVELS);
    images.push(image.clone());
    for _ in 0..LEVELS - 1 {
        let next = downsample_volume(images.last().expect("non-empty"))?;
        images.push(next);
    }
    // `images` runs fine-to-coarse; emit coarsest first.
    images
        .iter()
        .rev()
        .map(patch_features)
        .collect::<Result<Vec<_>>>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::gradcheck::smooth_random_volume;

    #[test]
    fn constant_image_has_zero_descriptors() {
        // The patch mean rounds, so residuals are at the level of the
        // epsilon-guarded quotient rather than exactly zero.
        let img = Volume::<f64>::filled(1, [4, 4, 4], 3.7);
        let f = patch_features(&img).unwrap();
        assert_eq!(f.channels, 27);
        assert!(f.data.iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn self_correlation_equals_the_descriptor_gain() {
        // Descriptors are bimodal by design: textured patches score exactly
        // the gain against themselves (channel-averaged), flat patches score
        // exactly zero against everything.
        let img = smooth_random_volume(1, [6, 6, 6], 1);
        let f = patch_features(&img).unwrap();
        let n = img.voxels();
        for i in 0..n {
            let dot: f64 = (0..27).map(|c| f.data[c * n + i].powi(2)).sum::<f64>() / 27.0;
            assert!(
                dot == 0.0 || (dot - MATCH_SHARPNESS).abs() < 1e-9,
                "voxel {i}: {dot}"
            );
        }
    }

    #[test]
    fn flat_noise_patches_map_to_zero_descriptors() {
        // Background-like content: a constant plus noise far below the
        // texture threshold. Full normalization would inflate it to the
        // gain norm; the cutoff must zero it out entirely so flat regions
        // cannot vote for any offset.
        let mut img = Volume::<f64>::filled(1, [6, 6, 6], 0.3);
        let mut state = 11u64;
        for e in img.data.iter_mut() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            *e += 1e-4 * (((state >> 33) as f64 / 2f64.powi(31)) - 1.0);
        }
        let f = patch_features(&img).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn integer_translation_translates_descriptors_exactly() {
        let d = 8usize;
        let a = smooth_random_volume(1, [d, d, d], 2);
        let mut b = Volume::<f64>::zeros(1, [d, d, d]);
        for z in 0..d {
            for y in 0..d {
                for x in 2..d {
                    *b.at_mut(0, z, y, x) = a.at(0, z, y, x - 2);
                }
            }
        }
        let fa = patch_features(&a).unwrap();
        let fb = patch_features(&b).unwrap();
        // Interior: descriptor of b at x equals descriptor of a at x-2.
        for c in 0..27 {
            for z in 1..d - 1 {
                for y in 1..d - 1 {
                    for x in 3..d - 1 {
                        assert_eq!(fb.at(c, z, y, x), fa.at(c, z, y, x - 2));
                    }
                }
            }
        }
    }

    #[test]
    fn pyramid_levels_have_expected_shapes() {
        let img = smooth_random_volume(1, [32, 32, 32], 3);
        let pyr = feature_pyramid(&img).unwrap();
        assert_eq!(pyr.len(), 5);
        for (level, expect) in [(0usize, 2usize), (1, 4), (2, 8), (3, 16), (4, 32)] {
            assert_eq!(pyr[level].dims, [expect; 3], "level {level}");
            assert_eq!(pyr[level].channels, 27);
        }
        let odd = smooth_random_volume(1, [8, 8, 8], 4);
        assert!(feature_pyramid(&odd).is_err());
    }
}
