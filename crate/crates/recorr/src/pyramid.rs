//! Coarse-to-fine registration driver.
//!
//! Runs the recurrent correlation search across four pyramid scales,
//! accumulating a displacement (or stationary velocity) field that each
//! scale hands to the next at doubled resolution, then optionally refines
//! at full resolution with a small convolution block over the
//! full-resolution features. Every forward pass is recorded on a [`Tape`],
//! so the same code path serves training (backward over the whole
//! sequence) and inference (forward only).

use crate::diff::{ConvShape, NodeId, ParamStore, Tape};
use crate::direct;
use crate::encoder::{self, EncoderConfig, FeaturePyramid, LEAKY_SLOPE};
use crate::error::{RecorrError, Result};
use crate::search::{local_search, soft_argmax};
use crate::updater::{self, UpdaterConfig};
use crate::vol::{compose, DisplacementField, Scalar, VelocityField, Volume};

/// Squaring steps used by `exp_field`; the initial scaling is 1/2^5.
pub const EXP_STEPS: usize = 5;

/// Number of iteration scales (pyramid levels 0..=3; level 4 only feeds
/// the refinement block).
pub const SCALES: usize = 4;

/// Per-scale iteration counts plus the full-resolution refinement flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IterationSchedule {
    /// Iterations at scales 0 (coarsest) through 3.
    pub iterations: [usize; SCALES],
    /// Apply the full-resolution refinement block after scale 3.
    pub refine: bool,
}

impl IterationSchedule {
    /// Full schedule: {3, 3, 2, 2} plus refinement.
    pub fn full() -> Self {
        Self {
            iterations: [3, 3, 2, 2],
            refine: true,
        }
    }

    /// Small schedule: {1, 1, 1, 1} plus refinement.
    pub fn small() -> Self {
        Self {
            iterations: [1, 1, 1, 1],
            refine: true,
        }
    }

    /// Number of supervised output fields (one per iteration, plus one
    /// for the refinement stage when enabled).
    pub fn total_outputs(&self) -> usize {
        self.iterations.iter().sum::<usize>() + usize::from(self.refine)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations.iter().sum::<usize>() == 0 {
            return Err(RecorrError::Config(
                "iteration schedule must run at least one iteration".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Trained updater: motion detector + GRU + head.
    Learned,
    /// Training-free readout: softmax expectation over the search cube.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Accumulate displacements directly.
    Standard,
    /// Accumulate a stationary velocity; warp through its exponential.
    Diffeo,
}

/// Hyperparameters that define the network topology.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub updater: UpdaterConfig,
    /// Search cube side length (odd).
    pub radius: usize,
    /// Softmax temperature for direct mode.
    pub temperature: f64,
    /// Width of the refinement convolutions.
    pub refine_channels: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            updater: UpdaterConfig::default(),
            radius: 3,
            temperature: 0.1,
            refine_channels: 16,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.radius % 2 == 0 || self.radius == 0 {
            return Err(RecorrError::Config(format!(
                "search radius must be odd and positive, got {}",
                self.radius
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(RecorrError::Config(format!(
                "direct-mode temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.refine_channels == 0 {
            return Err(RecorrError::Config("refine_channels must be positive".into()));
        }
        Ok(())
    }

    /// Registers every trainable parameter: encoder, one updater per
    /// scale, and the refinement block.
    pub fn init_params<T: Scalar, R: rand::Rng>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<()> {
        self.validate()?;
        encoder::init_params(store, &self.encoder, rng)?;
        let corr_channels = self.radius.pow(3);
        for scale in 0..SCALES {
            let hidden = self.encoder.level_channels(scale) / 2;
            updater::init_scale_params(store, scale, corr_channels, hidden, &self.updater, rng)?;
        }
        let c4 = self.encoder.level_channels(4);
        let rc = self.refine_channels;
        store.init_conv(
            "refine.c0",
            ConvShape {
                c_out: rc,
                c_in: 2 * c4 + 3,
                k: [3, 3, 3],
            },
            true,
            rng,
        )?;
        store.init_conv(
            "refine.c1",
            ConvShape {
                c_out: rc,
                c_in: rc,
                k: [3, 3, 3],
            },
            true,
            rng,
        )?;
        store.init_conv_zero(
            "refine.head",
            ConvShape {
                c_out: 3,
                c_in: rc,
                k: [3, 3, 3],
            },
            true,
        )?;
        Ok(())
    }
}

/// Per-iteration diagnostics recorded in the trace.
#[derive(Debug, Clone, Copy)]
pub struct IterationDiag {
    /// Scale the iteration ran at; `SCALES` marks the refinement stage.
    pub scale: usize,
    /// Mean Euclidean norm of the residual update, in voxels of the scale
    /// it was predicted at.
    pub mean_residual: f64,
    /// Mean squared intensity error of the moving image warped by the
    /// full-resolution field of this iteration.
    pub similarity_mse: f64,
}

/// The full sequence of predicted deformation fields, each upsampled to
/// the input resolution, plus per-iteration diagnostics.
#[derive(Debug)]
pub struct RegistrationTrace<T> {
    /// Tape nodes of the full-resolution deformation fields, in
    /// prediction order; usable as loss inputs in learned mode.
    pub field_nodes: Vec<NodeId>,
    /// Materialized copies of those fields.
    pub fields: Vec<DisplacementField<T>>,
    pub diagnostics: Vec<IterationDiag>,
}

impl<T: Scalar> RegistrationTrace<T> {
    pub fn final_field(&self) -> &DisplacementField<T> {
        self.fields.last().expect("trace is never empty")
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }
}

/// Integrates a stationary velocity field by scaling and squaring:
/// u = v / 2^steps, then u <- u o u applied `steps` times.
pub fn exp_field<T: Scalar>(v: &VelocityField<T>, steps: usize) -> Result<DisplacementField<T>> {
    if steps == 0 {
        return Err(RecorrError::InvalidArgument(
            "exp_field needs at least one squaring step".into(),
        ));
    }
    let scale = T::from_f64(1.0 / (1u64 << steps) as f64);
    let mut vol = v.as_volume().clone();
    for e in vol.data.iter_mut() {
        *e = *e * scale;
    }
    let mut u = DisplacementField::from_volume(vol)?;
    for _ in 0..steps {
        u = compose(&u, &u)?;
    }
    Ok(u)
}

/// Tape counterpart of [`exp_field`].
pub fn exp_field_node<T: Scalar>(tape: &mut Tape<T>, v: NodeId, steps: usize) -> Result<NodeId> {
    if steps == 0 {
        return Err(RecorrError::InvalidArgument(
            "exp_field needs at least one squaring step".into(),
        ));
    }
    let mut u = tape.affine(v, 1.0 / (1u64 << steps) as f64, 0.0);
    for _ in 0..steps {
        // compose(u, u): sample u at p + u(p) and add.
        let sampled = tape.warp(u, u)?;
        u = tape.add(u, sampled)?;
    }
    Ok(u)
}

/// Doubles a field's resolution on the tape: trilinear upsampling of the
/// components followed by doubling the vector magnitudes, so the
/// displacement keeps its physical extent in the finer voxel units.
fn upsample_field_node<T: Scalar>(tape: &mut Tape<T>, field: NodeId) -> NodeId {
    let up = tape.upsample2(field);
    tape.affine(up, 2.0, 0.0)
}

fn to_full_resolution<T: Scalar>(tape: &mut Tape<T>, field: NodeId, levels_up: usize) -> NodeId {
    let mut f = field;
    for _ in 0..levels_up {
        f = upsample_field_node(tape, f);
    }
    f
}

/// Registers `moving` onto `fixed`: encodes both images once, runs the
/// per-scale iteration loops, and returns the full sequence of predicted
/// fields. In the diffeo variant the accumulated state is a velocity and
/// every reported field is its exponential.
pub fn register<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    fixed: &Volume<T>,
    moving: &Volume<T>,
    spec: &ModelSpec,
    schedule: &IterationSchedule,
    mode: Mode,
    variant: Variant,
) -> Result<RegistrationTrace<T>> {
    spec.validate()?;
    schedule.validate()?;
    if fixed.dims != moving.dims {
        return Err(RecorrError::shape(
            "register",
            format!("matching dims {:?}", fixed.dims),
            format!("{:?}", moving.dims),
        ));
    }

    // Learned mode extracts features with the trained encoder; direct
    // mode uses training-free normalized patch descriptors, so it needs
    // no parameters at all.
    let (pyr_f, pyr_m) = match mode {
        Mode::Learned => {
            let fixed_id = tape.input(fixed.clone());
            let moving_id = tape.input(moving.clone());
            (
                encoder::encode(tape, store, fixed_id)?,
                encoder::encode(tape, store, moving_id)?,
            )
        }
        Mode::Direct => {
            let mut wrap = |img: &Volume<T>| -> Result<FeaturePyramid> {
                let levels_vec = direct::feature_pyramid(img)?;
                let mut it = levels_vec.into_iter();
                Ok(FeaturePyramid {
                    levels: core::array::from_fn(|_| {
                        tape.input(it.next().expect("five levels"))
                    }),
                })
            };
            let pf = wrap(fixed)?;
            let pm = wrap(moving)?;
            (pf, pm)
        }
    };

    let mut trace = RegistrationTrace {
        field_nodes: Vec::new(),
        fields: Vec::new(),
        diagnostics: Vec::new(),
    };

    // Accumulated displacement or velocity at the current scale.
    let coarsest_dims = tape.value(pyr_f.levels[0]).dims;
    let mut acc = tape.input(Volume::zeros(3, coarsest_dims));

    for scale in 0..SCALES {
        if scale > 0 {
            acc = upsample_field_node(tape, acc);
        }
        let f_feat = pyr_f.levels[scale];
        let m_feat = pyr_m.levels[scale];
        let mut hidden = None;
        let mut context = None;
        if mode == Mode::Learned {
            let (h0, fc) = encoder::split_context(tape, f_feat)?;
            hidden = Some(h0);
            context = Some(fc);
        }

        for _ in 0..schedule.iterations[scale] {
            let warp_field = match variant {
                Variant::Standard => acc,
                Variant::Diffeo => exp_field_node(tape, acc, EXP_STEPS)?,
            };
            let corr = local_search(tape, f_feat, m_feat, warp_field, spec.radius)?;
            let delta = match mode {
                Mode::Learned => {
                    let m = updater::motion_detect(tape, store, scale, corr, acc)?;
                    let h = updater::gru_step(
                        tape,
                        store,
                        scale,
                        hidden.expect("learned mode has state"),
                        m,
                        context.expect("learned mode has context"),
                    )?;
                    hidden = Some(h);
                    updater::head(tape, store, scale, h)?
                }
                Mode::Direct => {
                    let residual = soft_argmax(tape.value(corr), spec.temperature)?;
                    tape.input(residual.into_volume())
                }
            };
            acc = tape.add(acc, delta)?;
            push_trace_entry(tape, &mut trace, acc, delta, scale, 4 - scale, variant, fixed, moving)?;
        }
    }

    // Scale 3 ran at half resolution; bring the state to full resolution.
    acc = upsample_field_node(tape, acc);

    if schedule.refine {
        let delta = match mode {
            Mode::Learned => {
                let warp_field = match variant {
                    Variant::Standard => acc,
                    Variant::Diffeo => exp_field_node(tape, acc, EXP_STEPS)?,
                };
                let warped_m = tape.warp(pyr_m.levels[SCALES], warp_field)?;
                let cat = tape.concat(&[pyr_f.levels[SCALES], warped_m, acc])?;
                let c0 = tape.conv3d(store, cat, "refine.c0", Some("refine.c0.b"), 1)?;
                let a0 = tape.leaky_relu(c0, LEAKY_SLOPE);
                let c1 = tape.conv3d(store, a0, "refine.c1", Some("refine.c1.b"), 1)?;
                let a1 = tape.leaky_relu(c1, LEAKY_SLOPE);
                tape.conv3d(store, a1, "refine.head", Some("refine.head.b"), 1)?
            }
            // Direct mode has no trained refinement block; the slot
            // contributes a zero residual so trace lengths still match
            // the schedule.
            Mode::Direct => tape.input(Volume::zeros(3, fixed.dims)),
        };
        acc = tape.add(acc, delta)?;
        push_trace_entry(tape, &mut trace, acc, delta, SCALES, 0, variant, fixed, moving)?;
    }

    Ok(trace)
}

/// Converts the accumulated state into a full-resolution deformation and
/// appends it (with diagnostics) to the trace.
#[allow(clippy::too_many_arguments)]
fn push_trace_entry<T: Scalar>(
    tape: &mut Tape<T>,
    trace: &mut RegistrationTrace<T>,
    acc: NodeId,
    delta: NodeId,
    scale: usize,
    levels_up: usize,
    variant: Variant,
    fixed: &Volume<T>,
    moving: &Volume<T>,
) -> Result<()> {
    let full_state = to_full_resolution(tape, acc, levels_up);
    let deform = match variant {
        Variant::Standard => full_state,
        Variant::Diffeo => exp_field_node(tape, full_state, EXP_STEPS)?,
    };
    let field = DisplacementField::from_volume(tape.value(deform).clone())?;
    let warped = crate::vol::warp(moving, &field)?;
    let mut mse = 0.0;
    for (a, b) in warped.data.iter().zip(fixed.data.iter()) {
        let d = a.as_f64() - b.as_f64();
        mse += d * d;
    }
    mse /= warped.data.len() as f64;
    let mean_residual = DisplacementField::from_volume(tape.value(delta).clone())?.mean_norm();
    trace.field_nodes.push(deform);
    trace.fields.push(field);
    trace.diagnostics.push(IterationDiag {
        scale,
        mean_residual,
        similarity_mse: mse,
    });
    Ok(())
}

/// Synthetic texture with content at every pyramid level: random noise
/// laid down at several grid resolutions and upsampled to full size, so
/// even the coarsest search scale sees structure. Dimensions must be
/// divisible by 8. Intended for demos, benchmarks, and tests.
pub fn multiscale_texture<T: Scalar>(dims: [usize; 3], seed: u64) -> Volume<T> {
    let mut out = Volume::<f64>::zeros(1, dims);
    let mut amplitude = 1.0;
    for factor in [8usize, 4, 2, 1] {
        let base = [dims[0] / factor, dims[1] / factor, dims[2] / factor];
        let mut layer =
            crate::diff::gradcheck::smooth_random_volume(1, base, seed + factor as u64);
        let mut f = factor;
        while f > 1 {
            layer = crate::vol::upsample_volume2(&layer);
            f /= 2;
        }
        for (o, l) in out.data.iter_mut().zip(layer.data.iter()) {
            *o += amplitude * l;
        }
        amplitude *= 0.5;
    }
    out.cast()
}

/// Finite-difference audit of a composed two-scale miniature of the
/// network on 8-cubed inputs: a small convolutional encoder feeding the
/// real correlation search, motion detector, GRU update, and residual
/// head at each scale, topped by the discounted sequence loss. Where
/// [`crate::diff::gradcheck::op_suite`] checks each operation in
/// isolation, this checks gradients flowing through the whole chain,
/// including the cross-scale upsampling of the accumulated field.
pub fn composed_suite(seed: u64) -> Result<Vec<crate::diff::gradcheck::CheckReport>> {
    use crate::diff::gradcheck::{fd_check, smooth_random_volume};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const DIMS: [usize; 3] = [8, 8, 8];
    // Split evenly into hidden state and context by split_context.
    const FEAT: usize = 4;
    const HIDDEN: usize = FEAT / 2;
    const RADIUS: usize = 3;
    let updater_cfg = UpdaterConfig { motion_channels: 3 };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    store.init_conv(
        "mini.enc0",
        ConvShape {
            c_out: FEAT,
            c_in: 1,
            k: [3, 3, 3],
        },
        true,
        &mut rng,
    )?;
    store.init_conv(
        "mini.enc1",
        ConvShape {
            c_out: FEAT,
            c_in: FEAT,
            k: [3, 3, 3],
        },
        true,
        &mut rng,
    )?;
    for scale in 0..2 {
        updater::init_scale_params(
            &mut store,
            scale,
            RADIUS * RADIUS * RADIUS,
            HIDDEN,
            &updater_cfg,
            &mut rng,
        )?;
    }

    let inputs = vec![
        smooth_random_volume(1, DIMS, seed + 11),
        smooth_random_volume(1, DIMS, seed + 12),
    ];

    let build = |tape: &mut Tape<f64>,
                 store: &ParamStore<f64>,
                 ids: &[NodeId]|
     -> Result<NodeId> {
        // Two-level feature pyramid: half and full resolution.
        let encode = |tape: &mut Tape<f64>, img: NodeId| -> Result<[NodeId; 2]> {
            let c0 = tape.conv3d(store, img, "mini.enc0", Some("mini.enc0.b"), 1)?;
            let fine = tape.leaky_relu(c0, LEAKY_SLOPE);
            let c1 = tape.conv3d(store, fine, "mini.enc1", Some("mini.enc1.b"), 2)?;
            let coarse = tape.leaky_relu(c1, LEAKY_SLOPE);
            Ok([coarse, fine])
        };
        let pyr_f = encode(tape, ids[0])?;
        let pyr_m = encode(tape, ids[1])?;

        let coarse_dims = tape.value(pyr_f[0]).dims;
        // Start the accumulated field at a generic off-lattice point:
        // finite differences straddle interpolation kinks when a warp
        // samples on (or within a finite-difference step of) the voxel
        // lattice. Constant per-channel offsets stay constant through the
        // trilinear field upsampling, and both they and their doubles
        // keep every sampling coordinate clear of integer planes; the
        // residuals are damped below so the coordinates remain clear.
        let mut start = Volume::zeros(3, coarse_dims);
        for (ch, v) in [0.3, -0.35, 0.45].into_iter().enumerate() {
            for e in start.channel_mut(ch) {
                *e = v;
            }
        }
        let mut acc = tape.input(start);
        let mut per_step = Vec::new();
        for scale in 0..2 {
            if scale > 0 {
                acc = upsample_field_node(tape, acc);
            }
            let (h0, context) = encoder::split_context(tape, pyr_f[scale])?;
            let corr = local_search(tape, pyr_f[scale], pyr_m[scale], acc, RADIUS)?;
            let m = updater::motion_detect(tape, store, scale, corr, acc)?;
            let h = updater::gru_step(tape, store, scale, h0, m, context)?;
            let raw = updater::head(tape, store, scale, h)?;
            let delta = tape.affine(raw, 0.05, 0.0);
            acc = tape.add(acc, delta)?;
            // Per-step loss at full resolution, as in training.
            let full = to_full_resolution(tape, acc, 1 - scale);
            let warped = tape.warp(ids[1], full)?;
            let sim = tape.mse(warped, ids[0])?;
            let reg = tape.grad_l2(full)?;
            let reg_scaled = tape.affine(reg, 0.02, 0.0);
            per_step.push(tape.add(sim, reg_scaled)?);
        }
        // Discounted two-step sequence sum.
        let discounted = tape.affine(per_step[0], 0.7, 0.0);
        tape.add(discounted, per_step[1])
    };

    Ok(vec![fd_check(
        "composed_2scale",
        &store,
        &inputs,
        &build,
        4,
        seed + 99,
    )?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::gradcheck::smooth_random_volume;
    use crate::vol::{fold_fraction, jacobian_det, upsample_field};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            encoder: EncoderConfig {
                channels: [2, 2, 2, 4, 4],
            },
            updater: UpdaterConfig { motion_channels: 3 },
            radius: 3,
            temperature: 0.1,
            refine_channels: 4,
        }
    }

    fn init_store(spec: &ModelSpec, seed: u64) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        spec.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        store
    }

    /// Smooth random velocity: coarse noise upsampled twice.
    fn smooth_velocity(dims: [usize; 3], amplitude: f64, seed: u64) -> VelocityField<f64> {
        let coarse_dims = [dims[0] / 4, dims[1] / 4, dims[2] / 4];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coarse = Volume::zeros(3, coarse_dims);
        for e in coarse.data.iter_mut() {
            *e = rng.gen_range(-amplitude..amplitude);
        }
        let f = DisplacementField::from_volume(coarse).unwrap();
        // upsample_field doubles magnitudes; undo to keep the amplitude.
        let mut up = upsample_field(&upsample_field(&f)).into_volume();
        for e in up.data.iter_mut() {
            *e *= 0.25;
        }
        DisplacementField::from_volume(up).unwrap()
    }

    #[test]
    fn exp_of_zero_velocity_is_exact_identity() {
        let v = VelocityField::<f64>::zeros([8, 8, 8]);
        let u = exp_field(&v, EXP_STEPS).unwrap();
        assert!(u.as_volume().data.iter().all(|&e| e == 0.0));
        assert!(exp_field(&v, 0).is_err());
    }

    #[test]
    fn exp_of_constant_velocity_matches_euler_integration() {
        let dims = [8, 8, 24];
        let mut vol = Volume::zeros(3, dims);
        vol.channel_mut(2).fill(4.0f64);
        let v = VelocityField::from_volume(vol).unwrap();
        let u = exp_field(&v, EXP_STEPS).unwrap();

        // Euler oracle: 1024 explicit steps along the clamped field. For
        // a spatially constant field this is a pure translation wherever
        // the trajectory stays inside the grid.
        let steps = 1024;
        let dt = 1.0 / steps as f64;
        for z in 2..6 {
            for y in 2..6 {
                for x in 0..dims[2] - 6 {
                    let (mut pz, mut py, mut px) = (z as f64, y as f64, x as f64);
                    for _ in 0..steps {
                        pz += dt * v.as_volume().sample(0, pz, py, px);
                        py += dt * v.as_volume().sample(1, pz, py, px);
                        px += dt * v.as_volume().sample(2, pz, py, px);
                    }
                    let got = u.u(z, y, x);
                    let expect = [pz - z as f64, py - y as f64, px - x as f64];
                    for a in 0..3 {
                        assert!(
                            (got[a] - expect[a]).abs() < 1e-3,
                            "axis {a} at ({z},{y},{x}): {} vs {}",
                            got[a],
                            expect[a]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn exp_taylor_error_decays_cubically() {
        let dims = [16, 16, 16];
        let v = smooth_velocity(dims, 1.0, 3);

        // First-plus-second-order prediction: u = v + (1/2)(grad v) v,
        // with the Jacobian from central differences.
        let taylor_error = |s: f64| -> f64 {
            let mut scaled = v.as_volume().clone();
            for e in scaled.data.iter_mut() {
                *e *= s;
            }
            let vs = VelocityField::from_volume(scaled).unwrap();
            let u = exp_field(&vs, EXP_STEPS).unwrap();
            let mut worst = 0.0f64;
            for z in 2..dims[0] - 2 {
                for y in 2..dims[1] - 2 {
                    for x in 2..dims[2] - 2 {
                        let vv = vs.u(z, y, x);
                        let mut pred = vv;
                        for a in 0..3 {
                            let grad = [
                                (vs.as_volume().at(a, z + 1, y, x)
                                    - vs.as_volume().at(a, z - 1, y, x))
                                    / 2.0,
                                (vs.as_volume().at(a, z, y + 1, x)
                                    - vs.as_volume().at(a, z, y - 1, x))
                                    / 2.0,
                                (vs.as_volume().at(a, z, y, x + 1)
                                    - vs.as_volume().at(a, z, y, x - 1))
                                    / 2.0,
                            ];
                            pred[a] += 0.5 * (grad[0] * vv[0] + grad[1] * vv[1] + grad[2] * vv[2]);
                        }
                        let got = u.u(z, y, x);
                        for a in 0..3 {
                            worst = worst.max((got[a] - pred[a]).abs());
                        }
                    }
                }
            }
            worst
        };

        let e1 = taylor_error(0.2);
        let e2 = taylor_error(0.1);
        let ratio = e1 / e2;
        // Cubic error means halving the magnitude divides the error by 8.
        assert!(
            (3.0..20.0).contains(&ratio),
            "expected roughly cubic decay, got ratio {ratio} (e1={e1:.2e}, e2={e2:.2e})"
        );
    }

    #[test]
    fn exp_of_smooth_velocities_never_folds() {
        for seed in 0..5 {
            let v = smooth_velocity([16, 16, 16], 2.0, 100 + seed);
            let u = exp_field(&v, EXP_STEPS).unwrap();
            let jac = jacobian_det(&u).unwrap();
            assert_eq!(fold_fraction(&jac), 0.0, "seed {seed}");
        }
    }

    #[test]
    fn trace_lengths_match_schedule() {
        let spec = tiny_spec();
        let store = init_store(&spec, 1);
        let fixed = smooth_random_volume(1, [16, 16, 16], 2).cast::<f32>();
        let moving = smooth_random_volume(1, [16, 16, 16], 3).cast::<f32>();

        for (schedule, expect) in [
            (IterationSchedule::full(), 11usize),
            (IterationSchedule::small(), 5),
            (
                IterationSchedule {
                    iterations: [1, 1, 1, 1],
                    refine: false,
                },
                4,
            ),
        ] {
            let mut tape = Tape::new();
            let trace = register(
                &mut tape,
                &store,
                &fixed,
                &moving,
                &spec,
                &schedule,
                Mode::Learned,
                Variant::Standard,
            )
            .unwrap();
            assert_eq!(trace.len(), expect);
            assert_eq!(trace.len(), schedule.total_outputs());
            for f in &trace.fields {
                assert_eq!(f.dims(), [16, 16, 16]);
            }
            assert_eq!(trace.diagnostics.len(), expect);
        }
    }

    #[test]
    fn cold_start_emits_exact_identity() {
        let spec = tiny_spec();
        let store = init_store(&spec, 4);
        let fixed = smooth_random_volume(1, [16, 16, 16], 5).cast::<f32>();
        let moving = smooth_random_volume(1, [16, 16, 16], 6).cast::<f32>();
        for refine in [false, true] {
            let schedule = IterationSchedule {
                iterations: [1, 1, 1, 1],
                refine,
            };
            let mut tape = Tape::new();
            let trace = register(
                &mut tape,
                &store,
                &fixed,
                &moving,
                &spec,
                &schedule,
                Mode::Learned,
                Variant::Standard,
            )
            .unwrap();
            assert!(trace
                .final_field()
                .as_volume()
                .data
                .iter()
                .all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identical_images_in_direct_mode_stay_near_identity() {
        let spec = tiny_spec();
        let store = init_store(&spec, 7);
        let img = smooth_random_volume(1, [16, 16, 16], 8).cast::<f32>();
        let mut tape = Tape::new();
        let trace = register(
            &mut tape,
            &store,
            &img,
            &img,
            &spec,
            &IterationSchedule::small(),
            Mode::Direct,
            Variant::Standard,
        )
        .unwrap();
        let mean = trace.final_field().mean_norm();
        assert!(mean < 0.05, "mean displacement {mean}");
    }

    #[test]
    fn rejects_mismatched_inputs_and_empty_schedules() {
        let spec = tiny_spec();
        let store = init_store(&spec, 9);
        let a = Volume::<f32>::zeros(1, [16, 16, 16]);
        let b = Volume::<f32>::zeros(1, [16, 16, 32]);
        let mut tape = Tape::new();
        assert!(register(
            &mut tape,
            &store,
            &a,
            &b,
            &spec,
            &IterationSchedule::small(),
            Mode::Learned,
            Variant::Standard,
        )
        .is_err());
        let empty = IterationSchedule {
            iterations: [0; 4],
            refine: true,
        };
        assert!(register(
            &mut tape,
            &store,
            &a,
            &a,
            &spec,
            &empty,
            Mode::Learned,
            Variant::Standard,
        )
        .is_err());
    }

    #[test]
    fn diffeo_variant_produces_fold_free_fields() {
        let spec = tiny_spec();
        let store = init_store(&spec, 10);
        let fixed = smooth_random_volume(1, [16, 16, 16], 11).cast::<f32>();
        let moving = smooth_random_volume(1, [16, 16, 16], 12).cast::<f32>();
        let mut tape = Tape::new();
        let trace = register(
            &mut tape,
            &store,
            &fixed,
            &moving,
            &spec,
            &IterationSchedule::small(),
            Mode::Direct,
            Variant::Diffeo,
        )
        .unwrap();
        for field in &trace.fields {
            let f64_field =
                DisplacementField::from_volume(field.as_volume().cast::<f64>()).unwrap();
            let jac = jacobian_det(&f64_field).unwrap();
            assert_eq!(fold_fraction(&jac), 0.0);
        }
    }

    #[test]
    fn direct_mode_reduces_translation_error() {
        // A textured image translated by 3 voxels along x: the pyramid
        // search in direct mode must recover most of the shift.
        let dims = [32, 32, 32];
        let fixed = multiscale_texture(dims, 77);
        // moving(p) = fixed(p + 3) along x, so the field that aligns
        // moving onto fixed is u = (0,0,-3).
        let mut shift = Volume::<f32>::zeros(3, dims);
        shift.channel_mut(2).fill(3.0);
        let gen = DisplacementField::from_volume(shift).unwrap();
        let moving = crate::vol::warp(&fixed, &gen).unwrap();

        let spec = ModelSpec::default();
        let store = {
            let mut s = ParamStore::<f32>::new();
            spec.init_params(&mut s, &mut ChaCha8Rng::seed_from_u64(13))
                .unwrap();
            s
        };
        let mut tape = Tape::new();
        let trace = register(
            &mut tape,
            &store,
            &fixed,
            &moving,
            &spec,
            &IterationSchedule {
                iterations: [1, 1, 1, 1],
                refine: false,
            },
            Mode::Direct,
            Variant::Standard,
        )
        .unwrap();

        // Endpoint error over the central region.
        let field = trace.final_field();
        let mut err = 0.0f64;
        let mut count = 0usize;
        for z in 8..24 {
            for y in 8..24 {
                for x in 8..24 {
                    let u = field.u(z, y, x);
                    let e = [u[0] as f64, u[1] as f64, u[2] as f64 + 3.0];
                    err += (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
                    count += 1;
                }
            }
        }
        err /= count as f64;
        assert!(err < 1.0, "central endpoint error {err}");
    }

    #[test]
    fn identical_phantoms_in_direct_mode_stay_near_identity() {
        // Phantoms have large weak-texture regions whose descriptors carry
        // almost no signal; without confidence gating these regions pick
        // up random offsets that cross-scale upsampling amplifies.
        let (img, _) = crate::synth::make_phantom(&crate::synth::PhantomSpec {
            dims: [16, 16, 16],
            ..Default::default()
        })
        .unwrap();
        let store = ParamStore::<f32>::new();
        let mut tape = Tape::new();
        let trace = register(
            &mut tape,
            &store,
            &img,
            &img,
            &ModelSpec::default(),
            &IterationSchedule::full(),
            Mode::Direct,
            Variant::Standard,
        )
        .unwrap();
        let mean = trace.final_field().mean_norm();
        assert!(mean < 0.05, "mean displacement {mean}");
    }

    #[test]
    fn composed_network_gradients_match_finite_differences() {
        for report in composed_suite(41).unwrap() {
            assert!(
                report.passed(),
                "{}: max rel {:.3e}",
                report.name,
                report.max_rel
            );
            assert!(report.probes > 50, "too few probes: {}", report.probes);
        }
    }
}
