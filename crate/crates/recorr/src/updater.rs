//! Recurrent field updater: motion detector, separable-convolution GRU,
//! and residual head.
//!
//! One updater instance exists per pyramid scale (its parameters are
//! namespaced by scale index); every iteration at a scale reuses the same
//! entries. The GRU is applied three times in sequence, once per
//! one-dimensional kernel orientation (1x1x5, 1x5x1, 5x1x1), which gives
//! it a 5-cube receptive field at a fraction of the dense-kernel cost.

use rand::Rng;

use crate::diff::{ConvShape, NodeId, ParamStore, Tape};
use crate::encoder::LEAKY_SLOPE;
use crate::error::{RecorrError, Result};
use crate::vol::Scalar;

/// Kernel orientations of the three chained GRU applications, in the
/// order they run.
pub const GRU_ORIENTATIONS: [[usize; 3]; 3] = [[1, 1, 5], [1, 5, 1], [5, 1, 1]];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdaterConfig {
    /// Output width of the two motion-detector convolutions.
    pub motion_channels: usize,
}

impl Default for UpdaterConfig {
    fn default() -> Self {
        Self {
            motion_channels: 16,
        }
    }
}

fn det_name(scale: usize, layer: usize) -> String {
    format!("upd{scale}.det{layer}")
}

fn gate_name(scale: usize, orientation: usize, gate: char) -> String {
    format!("upd{scale}.gru{orientation}.{gate}")
}

fn head_name(scale: usize) -> String {
    format!("upd{scale}.head")
}

/// Registers one scale's updater parameters.
///
/// `corr_channels` is the correlation-volume width (r³), `hidden` the
/// width of both the GRU state and the context features (each half of the
/// encoder output at this scale). The final head is zero-initialized so a
/// freshly constructed network emits the identity deformation.
pub fn init_scale_params<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    scale: usize,
    corr_channels: usize,
    hidden: usize,
    cfg: &UpdaterConfig,
    rng: &mut R,
) -> Result<()> {
    if cfg.motion_channels == 0 || hidden == 0 {
        return Err(RecorrError::Config(
            "updater channel widths must be positive".into(),
        ));
    }
    let m = cfg.motion_channels;
    store.init_conv(
        &det_name(scale, 0),
        ConvShape {
            c_out: m,
            c_in: corr_channels + 3,
            k: [3, 3, 3],
        },
        true,
        rng,
    )?;
    store.init_conv(
        &det_name(scale, 1),
        ConvShape {
            c_out: m,
            c_in: m,
            k: [3, 3, 3],
        },
        true,
        rng,
    )?;
    // Each GRU application sees concat(h, m, Fc) = hidden + motion + hidden.
    let gate_in = hidden + m + hidden;
    for (o, k) in GRU_ORIENTATIONS.iter().enumerate() {
        for gate in ['z', 'r', 'h'] {
            store.init_conv(
                &gate_name(scale, o, gate),
                ConvShape {
                    c_out: hidden,
                    c_in: gate_in,
                    k: *k,
                },
                true,
                rng,
            )?;
        }
    }
    store.init_conv_zero(
        &head_name(scale),
        ConvShape {
            c_out: 3,
            c_in: hidden,
            k: [3, 3, 3],
        },
        true,
    )?;
    Ok(())
}

/// Two conv + leaky ReLU layers over concat(correlation volume, current
/// field), producing the motion features fed to the GRU.
pub fn motion_detect<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    scale: usize,
    corr: NodeId,
    field: NodeId,
) -> Result<NodeId> {
    if tape.value(field).channels != 3 {
        return Err(RecorrError::shape(
            "motion_detect field",
            "3 channels",
            format!("{}", tape.value(field).channels),
        ));
    }
    let cat = tape.concat(&[corr, field])?;
    let mut x = cat;
    for layer in 0..2 {
        let name = det_name(scale, layer);
        let c = tape.conv3d(store, x, &name, Some(&format!("{name}.b")), 1)?;
        x = tape.leaky_relu(c, LEAKY_SLOPE);
    }
    Ok(x)
}

/// One gated recurrent update with a single kernel orientation:
/// z = sigma(conv([h, m, Fc])), r = sigma(conv([h, m, Fc])),
/// h~ = tanh(conv([r*h, m, Fc])), h' = (1 - z)*h + z*h~.
fn gru_apply<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    scale: usize,
    orientation: usize,
    h: NodeId,
    m: NodeId,
    fc: NodeId,
) -> Result<NodeId> {
    let cat = tape.concat(&[h, m, fc])?;
    let zn = gate_name(scale, orientation, 'z');
    let rn = gate_name(scale, orientation, 'r');
    let hn = gate_name(scale, orientation, 'h');
    let zc = tape.conv3d(store, cat, &zn, Some(&format!("{zn}.b")), 1)?;
    let z = tape.sigmoid(zc);
    let rc = tape.conv3d(store, cat, &rn, Some(&format!("{rn}.b")), 1)?;
    let r = tape.sigmoid(rc);
    let rh = tape.mul(r, h)?;
    let cat2 = tape.concat(&[rh, m, fc])?;
    let hc = tape.conv3d(store, cat2, &hn, Some(&format!("{hn}.b")), 1)?;
    let h_tilde = tape.tanh(hc);
    let keep = tape.affine(z, -1.0, 1.0);
    let kept = tape.mul(keep, h)?;
    let new = tape.mul(z, h_tilde)?;
    tape.add(kept, new)
}

/// Full separable GRU step: the three orientations applied in sequence,
/// each with its own gate weights.
pub fn gru_step<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    scale: usize,
    h: NodeId,
    m: NodeId,
    fc: NodeId,
) -> Result<NodeId> {
    let mut state = h;
    for o in 0..GRU_ORIENTATIONS.len() {
        state = gru_apply(tape, store, scale, o, state, m, fc)?;
    }
    Ok(state)
}

/// Residual-field head: one 3-cubed convolution from the hidden state to
/// a 3-channel displacement increment.
pub fn head<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    scale: usize,
    h: NodeId,
) -> Result<NodeId> {
    let name = head_name(scale);
    tape.conv3d(store, h, &name, Some(&format!("{name}.b")), 1)
}
