//! Shared convolutional feature extractor.
//!
//! One stem convolution at full resolution followed by four stride-2
//! convolutions yields a five-level feature pyramid at 1, 1/2, 1/4, 1/8
//! and 1/16 of the input resolution. The same parameters encode both the
//! fixed and the moving image, so each image is encoded exactly once per
//! registration.

use rand::Rng;

use crate::diff::{ConvShape, NodeId, ParamStore, Tape};
use crate::error::{RecorrError, Result};
use crate::vol::Scalar;

/// Negative slope shared by every leaky ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Number of pyramid levels (level 0 is coarsest, level 4 full resolution).
pub const LEVELS: usize = 5;

/// Channel widths listed from full resolution down to the coarsest level,
/// i.e. `channels[j]` is the width of pyramid level `4 - j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub channels: [usize; LEVELS],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: [8, 16, 16, 32, 32],
        }
    }
}

impl EncoderConfig {
    /// Channel count of pyramid level `level` (0 = coarsest).
    pub fn level_channels(&self, level: usize) -> usize {
        self.channels[LEVELS - 1 - level]
    }

    pub fn validate(&self) -> Result<()> {
        for (j, &c) in self.channels.iter().enumerate() {
            if c == 0 {
                return Err(RecorrError::Config(format!(
                    "encoder channel width {j} is zero"
                )));
            }
        }
        // Levels 0..=3 feed the updater, whose state splits the features
        // in half, so those widths must be even.
        for level in 0..LEVELS - 1 {
            if self.level_channels(level) % 2 != 0 {
                return Err(RecorrError::Config(format!(
                    "encoder channels at level {level} must be even to split \
                     into hidden state and context"
                )));
            }
        }
        Ok(())
    }
}

/// Names of the five convolution stages, full resolution first.
fn stage_names() -> [&'static str; LEVELS] {
    ["enc.stem", "enc.down1", "enc.down2", "enc.down3", "enc.down4"]
}

/// Registers all encoder weights (biases start at zero).
pub fn init_params<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    cfg: &EncoderConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let mut c_in = 1;
    for (j, name) in stage_names().iter().enumerate() {
        let shape = ConvShape {
            c_out: cfg.channels[j],
            c_in,
            k: [3, 3, 3],
        };
        store.init_conv(name, shape, true, rng)?;
        c_in = cfg.channels[j];
    }
    Ok(())
}

/// Feature maps for one image; `levels[0]` is the coarsest (1/16) map and
/// `levels[4]` the full-resolution map.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub levels: [NodeId; LEVELS],
}

/// Runs the encoder over a single-channel image whose dims are multiples
/// of 16. The channel widths come from the convolution weights already
/// registered in `store`.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    image: NodeId,
) -> Result<FeaturePyramid> {
    let v = tape.value(image);
    if v.channels != 1 {
        return Err(RecorrError::shape(
            "encode input",
            "1 channel",
            format!("{} channels", v.channels),
        ));
    }
    let dims = v.dims;
    if dims.iter().any(|&d| d % 16 != 0) {
        return Err(RecorrError::shape(
            "encode input",
            "dims divisible by 16",
            format!("{dims:?}"),
        ));
    }

    let names = stage_names();
    let mut levels = [image; LEVELS];
    let mut x = image;
    for (j, name) in names.iter().enumerate() {
        let stride = if j == 0 { 1 } else { 2 };
        let c = tape.conv3d(store, x, name, Some(&format!("{name}.b")), stride)?;
        x = tape.leaky_relu(c, LEAKY_SLOPE);
        // Stage j emits pyramid level 4 - j.
        levels[LEVELS - 1 - j] = x;
    }
    Ok(FeaturePyramid { levels })
}

/// Splits a feature map into the updater's initial hidden state (first
/// half of the channels through tanh) and its contextual guidance (second
/// half through leaky ReLU).
pub fn split_context<T: Scalar>(
    tape: &mut Tape<T>,
    features: NodeId,
) -> Result<(NodeId, NodeId)> {
    let c = tape.value(features).channels;
    if c % 2 != 0 {
        return Err(RecorrError::shape(
            "split_context",
            "even channel count",
            format!("{c} channels"),
        ));
    }
    let half = c / 2;
    let first = tape.slice_channels(features, 0, half)?;
    let second = tape.slice_channels(features, half, half)?;
    let h0 = tape.tanh(first);
    let fc = tape.leaky_relu(second, LEAKY_SLOPE);
    Ok((h0, fc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::gradcheck::{fd_check, smooth_random_volume};
    use crate::vol::Volume;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            channels: [2, 2, 2, 4, 4],
        }
    }

    #[test]
    fn pyramid_dims_and_channels_match_config() {
        let cfg = EncoderConfig::default();
        let mut store = ParamStore::<f32>::new();
        init_params(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut tape = Tape::new();
        let img = tape.input(Volume::filled(1, [32, 32, 32], 0.5));
        let pyr = encode(&mut tape, &store, img).unwrap();
        for (level, expect_d) in [(0usize, 2usize), (1, 4), (2, 8), (3, 16), (4, 32)] {
            let v = tape.value(pyr.levels[level]);
            assert_eq!(v.dims, [expect_d; 3], "level {level}");
            assert_eq!(v.channels, cfg.level_channels(level), "level {level}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f32>::new();
        init_params(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut tape = Tape::new();
        let multi = tape.input(Volume::filled(2, [16, 16, 16], 0.0));
        assert!(encode(&mut tape, &store, multi).is_err());
        let odd = tape.input(Volume::filled(1, [17, 16, 16], 0.0));
        assert!(encode(&mut tape, &store, odd).is_err());
    }

    #[test]
    fn identical_inputs_give_bit_equal_pyramids() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f32>::new();
        init_params(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let image = smooth_random_volume(1, [16, 16, 16], 4).cast::<f32>();

        let run = |img: &Volume<f32>| -> Vec<Vec<f32>> {
            let mut tape = Tape::new();
            let id = tape.input(img.clone());
            let pyr = encode(&mut tape, &store, id).unwrap();
            pyr.levels
                .iter()
                .map(|&l| tape.value(l).data.clone())
                .collect()
        };
        assert_eq!(run(&image), run(&image));
    }

    #[test]
    fn zero_input_with_zero_biases_yields_zero_features() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f32>::new();
        init_params(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut tape = Tape::new();
        let img = tape.input(Volume::zeros(1, [16, 16, 16]));
        let pyr = encode(&mut tape, &store, img).unwrap();
        for &l in &pyr.levels {
            assert!(tape.value(l).data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn shifting_input_by_16_shifts_coarsest_level_by_one() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f32>::new();
        init_params(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();

        let d = 64usize;
        let a = smooth_random_volume(1, [d, d, d], 7).cast::<f32>();
        let mut b = Volume::zeros(1, [d, d, d]);
        for z in 0..d {
            for y in 0..d {
                for x in 16..d {
                    *b.at_mut(0, z, y, x) = a.at(0, z, y, x - 16);
                }
            }
        }

        let level0 = |img: Volume<f32>| -> Volume<f32> {
            let mut tape = Tape::new();
            let id = tape.input(img);
            let pyr = encode(&mut tape, &store, id).unwrap();
            tape.value(pyr.levels[0]).clone()
        };
        let a0 = level0(a);
        let b0 = level0(b);

        // A coarsest-level voxel at index x depends on input columns
        // [16x - 16, 16x + 16]; indices 1 and 2 keep that window inside a
        // 64-wide grid, so the shifted pair must agree bit for bit.
        for z in 1..=2 {
            for y in 1..=2 {
                for c in 0..a0.channels {
                    assert_eq!(b0.at(c, z, y, 2), a0.at(c, z, y, 1));
                }
            }
        }
    }

    #[test]
    fn split_context_halves_and_activates() {
        let mut tape = Tape::<f64>::new();
        let feats = tape.input(smooth_random_volume(4, [3, 3, 3], 8));
        let (h0, fc) = split_context(&mut tape, feats).unwrap();
        let src = tape.value(feats).clone();
        let hv = tape.value(h0).clone();
        let fv = tape.value(fc).clone();
        assert_eq!(hv.channels, 2);
        assert_eq!(fv.channels, 2);
        for i in 0..hv.data.len() {
            assert!((hv.data[i] - src.data[i].tanh()).abs() < 1e-12);
        }
        let base = 2 * 27;
        for i in 0..fv.data.len() {
            let x = src.data[base + i];
            let expect = if x >= 0.0 { x } else { LEAKY_SLOPE * x };
            assert!((fv.data[i] - expect).abs() < 1e-12);
        }

        let odd = tape.input(smooth_random_volume(3, [3, 3, 3], 9));
        assert!(split_context(&mut tape, odd).is_err());
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        init_params(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let mut tape = Tape::new();
        let img = tape.input(smooth_random_volume(1, [16, 16, 16], 11));
        let pyr = encode(&mut tape, &store, img).unwrap();
        let mut loss = tape.sum_all_squared(pyr.levels[0]);
        for &l in &pyr.levels[1..] {
            let s = tape.sum_all_squared(l);
            loss = tape.add(loss, s).unwrap();
        }
        tape.backward(loss, &mut store).unwrap();
        for name in store.names().map(str::to_string).collect::<Vec<_>>() {
            let g = &store.get(&name).unwrap().grad;
            assert!(
                g.iter().any(|&v| v != 0.0),
                "no gradient reached {name}"
            );
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        init_params(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        let inputs = vec![smooth_random_volume(1, [16, 16, 16], 13)];
        let report = fd_check(
            "encoder",
            &store,
            &inputs,
            &|t, s, ids| {
                let pyr = encode(t, s, ids[0])?;
                let mut loss = t.sum_all_squared(pyr.levels[0]);
                for &l in &pyr.levels[1..] {
                    let sq = t.sum_all_squared(l);
                    loss = t.add(loss, sq)?;
                }
                Ok(loss)
            },
            4,
            14,
        )
        .unwrap();
        assert!(report.passed(), "max rel {:.3e}", report.max_rel);
    }
}
