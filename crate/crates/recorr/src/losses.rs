//! Training objectives for registration.
//!
//! The objective applied to one predicted field is
//! `L = L_sim(fixed, warp(moving, u)) + lambda * grad_l2(u)`, optionally
//! plus a weighted soft-Dice term on warped label masks. A registration
//! produces a whole sequence of intermediate fields; [`sequence_loss`]
//! supervises that sequence with exponentially decaying weights
//! `gamma^(T - t)` so late iterations dominate, either over every
//! iteration or only over the last iteration of each scale.

use crate::diff::{NodeId, Tape};
use crate::error::{RecorrError, Result};
use crate::pyramid::RegistrationTrace;
use crate::vol::{Scalar, Volume};

use crate::diff::kernels;

/// Intensity similarity term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    /// Mean squared intensity error.
    Mse,
    /// One minus mean squared local normalized cross-correlation.
    Ncc,
}

/// Which predicted fields of a sequence receive supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Supervision {
    /// Every intermediate field.
    FullSequence,
    /// Only the last field of each scale (and the refinement output).
    LastOfScale,
}

/// Weights and switches for [`sequence_loss`].
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub similarity: Similarity,
    /// Weight of the displacement-gradient penalty.
    pub lambda: f64,
    /// Decay base of the per-iteration weights, in (0, 1].
    pub gamma: f64,
    pub supervision: Supervision,
    /// Weight of the soft-Dice term on warped label masks; 0 disables it.
    pub dice_weight: f64,
    /// Window width of the local normalized cross-correlation, odd.
    pub ncc_window: usize,
    /// Variance floor of the local normalized cross-correlation.
    pub ncc_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            similarity: Similarity::Mse,
            lambda: 0.02,
            gamma: 0.7,
            supervision: Supervision::FullSequence,
            dice_weight: 0.0,
            ncc_window: 9,
            ncc_eps: 1e-5,
        }
    }
}

impl LossConfig {
    /// The conventional pairing for normalized cross-correlation: unit
    /// similarity weight expects a unit-scale regularizer weight.
    pub fn ncc() -> Self {
        Self {
            similarity: Similarity::Ncc,
            lambda: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(RecorrError::Config(format!(
                "gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(RecorrError::Config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if self.dice_weight < 0.0 || !self.dice_weight.is_finite() {
            return Err(RecorrError::Config(format!(
                "dice_weight must be finite and non-negative, got {}",
                self.dice_weight
            )));
        }
        if self.ncc_window % 2 == 0 {
            return Err(RecorrError::Config(format!(
                "ncc_window must be odd, got {}",
                self.ncc_window
            )));
        }
        if self.ncc_eps <= 0.0 {
            return Err(RecorrError::Config(format!(
                "ncc_eps must be positive, got {}",
                self.ncc_eps
            )));
        }
        Ok(())
    }
}

/// Mean squared error between two volumes of identical shape.
pub fn mse<T: Scalar>(a: &Volume<T>, b: &Volume<T>) -> Result<T> {
    if a.channels != b.channels || a.dims != b.dims {
        return Err(RecorrError::shape(
            "mse",
            format!("{}x{:?}", a.channels, a.dims),
            format!("{}x{:?}", b.channels, b.dims),
        ));
    }
    Ok(kernels::mse_forward(a, b))
}

/// One minus the mean squared local normalized cross-correlation over a
/// cubic window.
pub fn ncc<T: Scalar>(a: &Volume<T>, b: &Volume<T>, window: usize, eps: f64) -> Result<T> {
    if a.channels != b.channels || a.dims != b.dims {
        return Err(RecorrError::shape(
            "ncc",
            format!("{}x{:?}", a.channels, a.dims),
            format!("{}x{:?}", b.channels, b.dims),
        ));
    }
    if window % 2 == 0 {
        return Err(RecorrError::InvalidArgument(format!(
            "ncc window must be odd, got {window}"
        )));
    }
    Ok(kernels::ncc_loss_forward(
        a,
        b,
        window / 2,
        T::from_f64(eps),
    ))
}

/// Mean squared forward difference of a displacement field, averaged per
/// axis over all channels and valid positions, then summed over the three
/// axes.
pub fn grad_l2<T: Scalar>(u: &Volume<T>) -> Result<T> {
    kernels::grad_l2_forward(u)
}

/// One minus mean soft Dice overlap across channels.
pub fn dice_loss<T: Scalar>(a: &Volume<T>, b: &Volume<T>, eps: f64) -> Result<T> {
    if a.channels != b.channels || a.dims != b.dims {
        return Err(RecorrError::shape(
            "dice_loss",
            format!("{}x{:?}", a.channels, a.dims),
            format!("{}x{:?}", b.channels, b.dims),
        ));
    }
    Ok(kernels::dice_loss_forward(a, b, T::from_f64(eps)))
}

/// Per-iteration weights `gamma^(len - 1 - t)` for `t` in `0..len`; the
/// final iteration always has weight one.
pub fn sequence_weights(len: usize, gamma: f64) -> Vec<f64> {
    (0..len).map(|t| gamma.powi((len - 1 - t) as i32)).collect()
}

/// Soft label masks used by the Dice term: one channel per foreground
/// label, already one-hot encoded (see `metrics::one_hot`).
#[derive(Debug, Clone, Copy)]
pub struct LabelNodes {
    pub moving: NodeId,
    pub fixed: NodeId,
}

/// Builds the discounted sequence objective over a registration trace,
/// on the same tape the trace was recorded on.
///
/// Each supervised field `u_t` contributes
/// `gamma^(T-t) * (L_sim + lambda * grad_l2 + dice_weight * dice)`, with
/// the similarity and Dice terms measured after warping the moving image
/// (and moving label masks) by `u_t`. Returns the scalar loss node.
pub fn sequence_loss<T: Scalar>(
    tape: &mut Tape<T>,
    trace: &RegistrationTrace<T>,
    fixed: NodeId,
    moving: NodeId,
    labels: Option<LabelNodes>,
    cfg: &LossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    if trace.is_empty() {
        return Err(RecorrError::InvalidArgument(
            "sequence_loss needs a non-empty trace".into(),
        ));
    }
    if trace.field_nodes.len() != trace.len() || trace.diagnostics.len() != trace.len() {
        return Err(RecorrError::InvalidArgument(
            "trace field nodes and diagnostics must cover every iteration".into(),
        ));
    }
    let weights = sequence_weights(trace.len(), cfg.gamma);
    let mut total: Option<NodeId> = None;
    for t in supervised_steps(trace, cfg.supervision) {
        let single = single_loss(tape, trace.field_nodes[t], fixed, moving, labels, cfg)?;
        let weighted = tape.affine(single, weights[t], 0.0);
        total = Some(match total {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    total.ok_or_else(|| RecorrError::InvalidArgument("no supervised iterations".into()))
}

/// The objective applied to a single predicted field.
pub fn single_loss<T: Scalar>(
    tape: &mut Tape<T>,
    field: NodeId,
    fixed: NodeId,
    moving: NodeId,
    labels: Option<LabelNodes>,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let warped = tape.warp(moving, field)?;
    let sim = match cfg.similarity {
        Similarity::Mse => tape.mse(warped, fixed)?,
        Similarity::Ncc => tape.ncc_loss(warped, fixed, cfg.ncc_window, cfg.ncc_eps)?,
    };
    let reg = tape.grad_l2(field)?;
    let reg_scaled = tape.affine(reg, cfg.lambda, 0.0);
    let mut loss = tape.add(sim, reg_scaled)?;
    if let Some(masks) = labels {
        if cfg.dice_weight > 0.0 {
            let warped_masks = tape.warp(masks.moving, field)?;
            let dice = tape.dice_loss(warped_masks, masks.fixed, 1.0)?;
            let dice_scaled = tape.affine(dice, cfg.dice_weight, 0.0);
            loss = tape.add(loss, dice_scaled)?;
        }
    }
    Ok(loss)
}

/// Iteration indices that receive supervision. Scale boundaries are read
/// from the trace diagnostics; the final iteration is always included.
fn supervised_steps<T: Scalar>(
    trace: &RegistrationTrace<T>,
    supervision: Supervision,
) -> Vec<usize> {
    match supervision {
        Supervision::FullSequence => (0..trace.len()).collect(),
        Supervision::LastOfScale => (0..trace.len())
            .filter(|&t| {
                t + 1 == trace.len() || trace.diagnostics[t + 1].scale != trace.diagnostics[t].scale
            })
            .collect(),
    }
}
