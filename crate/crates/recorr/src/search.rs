//! Voxel-to-region correlation search.
//!
//! Each iteration warps the moving features by the current field, shifts
//! the result over the r³ integer offsets of a cube around every voxel,
//! and correlates each shift against the fixed features, producing an
//! r³-channel correlation volume. `soft_argmax` converts such a volume
//! into an expected residual displacement for the training-free direct
//! mode.

use crate::diff::{NodeId, Tape};
use crate::error::{RecorrError, Result};
use crate::vol::{DisplacementField, Scalar, Volume};

/// Integer shift offsets in channel order: lexicographic (dz, dy, dx)
/// over [-r/2, r/2]³. Channel c of a correlation volume corresponds to
/// `shift_offsets(r)[c]`.
pub fn shift_offsets(radius: usize) -> Vec<[i64; 3]> {
    let half = (radius / 2) as i64;
    let mut out = Vec::with_capacity(radius * radius * radius);
    for dz in -half..=half {
        for dy in -half..=half {
            for dx in -half..=half {
                out.push([dz, dy, dx]);
            }
        }
    }
    out
}

/// Warps the moving features by `field`, then correlates the fixed
/// features against every integer shift in the search cube. Fully
/// differentiable with respect to both feature maps and the field.
pub fn local_search<T: Scalar>(
    tape: &mut Tape<T>,
    fixed: NodeId,
    moving: NodeId,
    field: NodeId,
    radius: usize,
) -> Result<NodeId> {
    let warped = tape.warp(moving, field)?;
    tape.correlation(fixed, warped, radius)
}

/// Per-voxel softmax over the r³ correlation channels followed by the
/// expected shift offset: a training-free residual-field readout.
pub fn soft_argmax<T: Scalar>(
    corr: &Volume<T>,
    temperature: f64,
) -> Result<DisplacementField<T>> {
    if !(temperature > 0.0) {
        return Err(RecorrError::InvalidArgument(format!(
            "soft_argmax temperature must be positive, got {temperature}"
        )));
    }
    let c = corr.channels;
    let radius = (c as f64).cbrt().round() as usize;
    if radius * radius * radius != c || radius % 2 == 0 {
        return Err(RecorrError::shape(
            "soft_argmax",
            "r^3 channels for odd r",
            format!("{c} channels"),
        ));
    }
    let offsets = shift_offsets(radius);
    let inv_t = T::from_f64(1.0 / temperature);
    let n = corr.voxels();
    let mut out = DisplacementField::zeros(corr.dims);
    let field = out.as_volume_mut();
    for i in 0..n {
        let mut max = corr.data[i];
        for ch in 1..c {
            let v = corr.data[ch * n + i];
            if v > max {
                max = v;
            }
        }
        let mut total = T::zero();
        let mut acc = [T::zero(); 3];
        for (ch, off) in offsets.iter().enumerate() {
            let w = ((corr.data[ch * n + i] - max) * inv_t).exp();
            total += w;
            for a in 0..3 {
                acc[a] += w * T::from_f64(off[a] as f64);
            }
        }
        for a in 0..3 {
            field.data[a * n + i] = acc[a] / total;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::gradcheck::{fd_check, off_lattice_field, smooth_random_volume};
    use crate::diff::ParamStore;
    use crate::vol::warp;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn channel_counts_are_cubes_of_radius() {
        for r in [1usize, 3, 5] {
            let mut tape = Tape::<f32>::new();
            let f = tape.input(Volume::filled(2, [6, 6, 6], 1.0));
            let m = tape.input(Volume::filled(2, [6, 6, 6], 1.0));
            let field = tape.input(Volume::zeros(3, [6, 6, 6]));
            let corr = local_search(&mut tape, f, m, field, r).unwrap();
            assert_eq!(tape.value(corr).channels, r * r * r);
            assert_eq!(shift_offsets(r).len(), r * r * r);
        }
    }

    #[test]
    fn unit_features_fill_center_channel_and_zero_pad_edges() {
        let dims = [4, 4, 5];
        let mut tape = Tape::<f64>::new();
        let f = tape.input(Volume::filled(3, dims, 1.0));
        let m = tape.input(Volume::filled(3, dims, 1.0));
        let field = tape.input(Volume::zeros(3, dims));
        let corr = local_search(&mut tape, f, m, field, 3).unwrap();
        let v = tape.value(corr);
        let n = v.voxels();
        // Center offset (0,0,0) is channel 13.
        for i in 0..n {
            assert!((v.data[13 * n + i] - 1.0).abs() < 1e-12);
        }
        // Offset (0,0,+1) is channel 14: ones on the interior, zero where
        // the shift falls off the +x face.
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let got = v.at(14, z, y, x);
                    let expect = if x + 1 < dims[2] { 1.0 } else { 0.0 };
                    assert!((got - expect).abs() < 1e-12, "at x={x}");
                }
            }
        }
    }

    #[test]
    fn matches_brute_force_oracle_with_warping() {
        let dims = [5, 5, 5];
        let c = 4usize;
        let r = 3usize;
        let fixed = smooth_random_volume(c, dims, 21);
        let moving = smooth_random_volume(c, dims, 22);
        let fieldv = off_lattice_field(dims, 1.2, 23);

        let mut tape = Tape::<f64>::new();
        let f = tape.input(fixed.clone());
        let m = tape.input(moving.clone());
        let fl = tape.input(fieldv.clone());
        let corr = local_search(&mut tape, f, m, fl, r).unwrap();
        let got = tape.value(corr).clone();

        // Oracle: warp explicitly, then per-voxel per-offset dot products.
        let warped = warp(&moving, &DisplacementField::from_volume(fieldv).unwrap()).unwrap();
        let offsets = shift_offsets(r);
        let [d, h, w] = dims;
        for (chan, off) in offsets.iter().enumerate() {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let sz = z as i64 + off[0];
                        let sy = y as i64 + off[1];
                        let sx = x as i64 + off[2];
                        let mut dot = 0.0;
                        if sz >= 0
                            && sy >= 0
                            && sx >= 0
                            && (sz as usize) < d
                            && (sy as usize) < h
                            && (sx as usize) < w
                        {
                            for cc in 0..c {
                                dot += fixed.at(cc, z, y, x)
                                    * warped.at(cc, sz as usize, sy as usize, sx as usize);
                            }
                        }
                        let expect = dot / c as f64;
                        assert!(
                            (got.at(chan, z, y, x) - expect).abs() < 1e-6,
                            "chan {chan} at ({z},{y},{x})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn circular_shift_puts_argmax_on_plus_x_offset() {
        // With unit-normalized feature vectors the self match scores
        // exactly 1 while every cross match is strictly below 1, so the
        // winning channel must be the true (0,0,+1) shift.
        let dims = [4, 4, 6];
        let c = 6usize;
        let mut fixed = smooth_random_volume(c, dims, 30);
        let n = fixed.voxels();
        for i in 0..n {
            let norm: f64 = (0..c).map(|ch| fixed.data[ch * n + i].powi(2)).sum::<f64>().sqrt();
            for ch in 0..c {
                fixed.data[ch * n + i] /= norm;
            }
        }
        let mut moving = Volume::zeros(c, dims);
        let [d, h, w] = dims;
        for ch in 0..c {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let src_x = (x + w - 1) % w;
                        *moving.at_mut(ch, z, y, x) = fixed.at(ch, z, y, src_x);
                    }
                }
            }
        }

        let mut tape = Tape::<f64>::new();
        let f = tape.input(fixed);
        let m = tape.input(moving);
        let fl = tape.input(Volume::zeros(3, dims));
        let corr = local_search(&mut tape, f, m, fl, 3).unwrap();
        let v = tape.value(corr);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w - 1 {
                    let mut best = 0usize;
                    let mut best_v = f64::NEG_INFINITY;
                    for ch in 0..27 {
                        let val = v.at(ch, z, y, x);
                        if val > best_v {
                            best_v = val;
                            best = ch;
                        }
                    }
                    assert_eq!(best, 14, "argmax off at ({z},{y},{x})");
                }
            }
        }
    }

    #[test]
    fn soft_argmax_uniform_is_zero_and_saturates_to_dominant_offset() {
        let dims = [3, 3, 3];
        let uniform = Volume::filled(27, dims, 0.4);
        let res = soft_argmax::<f64>(&uniform, 0.1).unwrap();
        assert!(res.as_volume().data.iter().all(|&v| v.abs() < 1e-12));

        // A +100 boost on one channel saturates the softmax at
        // temperature 0.1, so the residual is that channel's offset.
        let offsets = shift_offsets(3);
        let mut boosted = Volume::filled(27, dims, 0.0);
        let n = boosted.voxels();
        for i in 0..n {
            boosted.data[20 * n + i] = 100.0;
        }
        let res = soft_argmax::<f64>(&boosted, 0.1).unwrap();
        let v = res.as_volume();
        for i in 0..n {
            for a in 0..3 {
                assert!((v.data[a * n + i] - offsets[20][a] as f64).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn soft_argmax_matches_direct_softmax_oracle() {
        let dims = [3, 4, 3];
        let corr = smooth_random_volume(27, dims, 33);
        let t = 0.25;
        let res = soft_argmax(&corr, t).unwrap();
        let offsets = shift_offsets(3);
        let n = corr.voxels();
        for i in 0..n {
            let weights: Vec<f64> = (0..27)
                .map(|ch| (corr.data[ch * n + i] / t).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            for a in 0..3 {
                let expect: f64 = weights
                    .iter()
                    .zip(&offsets)
                    .map(|(w, o)| w * o[a] as f64)
                    .sum::<f64>()
                    / total;
                assert!((res.as_volume().data[a * n + i] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn soft_argmax_rejects_bad_arguments() {
        let corr = Volume::<f64>::filled(27, [2, 2, 2], 0.0);
        assert!(soft_argmax(&corr, 0.0).is_err());
        assert!(soft_argmax(&corr, -1.0).is_err());
        let eight = Volume::<f64>::filled(8, [2, 2, 2], 0.0);
        assert!(soft_argmax(&eight, 0.1).is_err());
    }

    #[test]
    fn search_gradients_match_finite_differences() {
        let dims = [4, 4, 4];
        let store = ParamStore::<f64>::new();
        let inputs = vec![
            smooth_random_volume(2, dims, 40),
            smooth_random_volume(2, dims, 41),
            off_lattice_field(dims, 1.0, 42),
            smooth_random_volume(27, dims, 43),
        ];
        let report = fd_check(
            "local_search",
            &store,
            &inputs,
            &|t, _, ids| {
                let corr = local_search(t, ids[0], ids[1], ids[2], 3)?;
                t.mse(corr, ids[3])
            },
            14,
            44,
        )
        .unwrap();
        assert!(report.passed(), "max rel {:.3e}", report.max_rel);
    }

    #[test]
    fn mean_inference_residual_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let corr = {
            let mut v = Volume::zeros(27, [4, 4, 4]);
            for e in v.data.iter_mut() {
                *e = rng.gen_range(-1.0..1.0f64);
            }
            v
        };
        let a = soft_argmax(&corr, 0.1).unwrap();
        let b = soft_argmax(&corr, 0.1).unwrap();
        assert_eq!(a.as_volume().data, b.as_volume().data);
    }
}
