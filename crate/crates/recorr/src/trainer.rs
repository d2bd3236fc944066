//! End-to-end training on synthetic pairs, plus batch evaluation.
//!
//! Training runs one pair at a time: record a full registration on the
//! tape, apply the discounted sequence objective, backpropagate, clip the
//! global gradient norm, and take an AdamW step. Validation Dice picks the
//! checkpoint to keep. Everything is seeded, so two runs with the same
//! configuration produce byte-identical checkpoints and reports.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::checkpoint::save_checkpoint;
use crate::diff::params::{AdamW, ParamStore};
use crate::diff::Tape;
use crate::error::{RecorrError, Result};
use crate::losses::{sequence_loss, LabelNodes, LossConfig};
use crate::metrics::{self, warp_labels, Label};
use crate::pyramid::{register, IterationSchedule, Mode, ModelSpec, Variant};
use crate::synth::RegistrationPair;
use crate::vol::{fold_fraction, jacobian_det, DisplacementField};

/// Everything a training run needs besides the data.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub loss: LossConfig,
    pub model: ModelSpec,
    pub schedule: IterationSchedule,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 50,
            lr: 7e-4,
            weight_decay: 4e-4,
            clip_norm: Some(1.0),
            loss: LossConfig::default(),
            model: ModelSpec::default(),
            schedule: IterationSchedule::small(),
            variant: Variant::Standard,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(RecorrError::Config("epochs must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(RecorrError::Config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(RecorrError::Config(format!(
                "weight_decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(RecorrError::Config(format!(
                    "clip_norm must be positive, got {c}"
                )));
            }
        }
        self.loss.validate()?;
        self.model.validate()?;
        self.schedule.validate()?;
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean sequence loss over the epoch's pairs.
    pub mean_loss: f64,
    /// Mean validation Dice after the epoch.
    pub val_dice: f64,
    /// Steps whose gradient norm hit the clipping ceiling.
    pub clipped_steps: usize,
    pub wall_secs: f64,
}

/// What a finished run reports back.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub history: Vec<EpochRecord>,
}

fn foreground_labels(pair: &RegistrationPair) -> Vec<Label> {
    pair.fixed_labels
        .labels()
        .union(&pair.moving_labels.labels())
        .copied()
        .filter(|&l| l != 0)
        .collect()
}

/// One optimization step on one pair. Returns the loss value and whether
/// the gradient was clipped.
fn train_step(
    store: &mut ParamStore<f32>,
    pair: &RegistrationPair,
    id: &str,
    cfg: &TrainConfig,
    hp: &AdamW,
) -> Result<(f64, bool)> {
    let mut tape = Tape::<f32>::new();
    let trace = register(
        &mut tape,
        store,
        &pair.fixed,
        &pair.moving,
        &cfg.model,
        &cfg.schedule,
        Mode::Learned,
        cfg.variant,
    )?;
    let fixed = tape.input(pair.fixed.clone());
    let moving = tape.input(pair.moving.clone());
    let labels = if cfg.loss.dice_weight > 0.0 {
        let fg = foreground_labels(pair);
        Some(LabelNodes {
            moving: tape.input(metrics::one_hot(&pair.moving_labels, &fg)?),
            fixed: tape.input(metrics::one_hot(&pair.fixed_labels, &fg)?),
        })
    } else {
        None
    };
    let loss = sequence_loss(&mut tape, &trace, fixed, moving, labels, &cfg.loss)?;
    let value = tape.scalar_value(loss)?.as_f64_checked(id)?;

    store.zero_grads();
    tape.backward(loss, store)?;
    if !store.grads_all_finite() {
        return Err(RecorrError::NonFinite(format!(
            "gradient is not finite on pair {id}"
        )));
    }
    let clipped = match cfg.clip_norm {
        Some(c) => store.clip_grad_norm(c).is_some(),
        None => false,
    };
    store.adamw_step(hp);
    Ok((value, clipped))
}

trait FiniteCheck {
    fn as_f64_checked(self, id: &str) -> Result<f64>;
}

impl FiniteCheck for f32 {
    fn as_f64_checked(self, id: &str) -> Result<f64> {
        if self.is_finite() {
            Ok(self as f64)
        } else {
            Err(RecorrError::NonFinite(format!(
                "loss is not finite on pair {id}"
            )))
        }
    }
}

/// Registers one pair without recording gradients and returns the final
/// field.
pub fn infer_field(
    store: &ParamStore<f32>,
    pair: &RegistrationPair,
    model: &ModelSpec,
    schedule: &IterationSchedule,
    mode: Mode,
    variant: Variant,
) -> Result<DisplacementField<f32>> {
    let mut tape = Tape::<f32>::new();
    let trace = register(
        &mut tape,
        store,
        &pair.fixed,
        &pair.moving,
        model,
        schedule,
        mode,
        variant,
    )?;
    Ok(trace.final_field().clone())
}

/// Mean Dice between warped moving labels and fixed labels over pairs.
fn mean_val_dice(
    store: &ParamStore<f32>,
    pairs: &[(String, RegistrationPair)],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for (_, pair) in pairs {
        let field = infer_field(
            store,
            pair,
            &cfg.model,
            &cfg.schedule,
            Mode::Learned,
            cfg.variant,
        )?;
        let warped = warp_labels(&pair.moving_labels, &field)?;
        total += metrics::dice(&warped, &pair.fixed_labels)?.mean;
    }
    Ok(total / pairs.len() as f64)
}

/// Trains on `train_pairs`, validates on `val_pairs` each epoch, writes
/// the best-validation checkpoint to `checkpoint_path`, and appends one
/// JSON line per epoch to `log` when given.
pub fn train(
    train_pairs: &[(String, RegistrationPair)],
    val_pairs: &[(String, RegistrationPair)],
    cfg: &TrainConfig,
    checkpoint_path: &Path,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(RecorrError::Data(
            "training needs non-empty train and val splits".into(),
        ));
    }
    let mut store = ParamStore::<f32>::new();
    cfg.model
        .init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let hp = AdamW {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };

    let mut best_store = store.clone();
    let mut best_epoch = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut clipped_steps = 0usize;
        for &i in &order {
            let (id, pair) = &train_pairs[i];
            let (value, clipped) = train_step(&mut store, pair, id, cfg, &hp)?;
            loss_sum += value;
            clipped_steps += usize::from(clipped);
        }

        let val_dice = mean_val_dice(&store, val_pairs, cfg)?;
        if val_dice > best_val {
            best_val = val_dice;
            best_epoch = epoch;
            best_store = store.clone();
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / train_pairs.len() as f64,
            val_dice,
            clipped_steps,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        if let Some(sink) = log.as_deref_mut() {
            let line = serde_json::to_string(&record)
                .map_err(|e| RecorrError::Data(format!("log serialization failed: {e}")))?;
            writeln!(sink, "{line}")?;
        }
        history.push(record);
    }

    save_checkpoint(checkpoint_path, &best_store, false)?;
    Ok(TrainOutcome {
        best_epoch,
        best_val_dice: best_val,
        history,
    })
}

/// Mean and population standard deviation of a sample.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stat {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Metrics of one registered pair. `*_initial` columns describe the
/// unregistered starting point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairReport {
    pub id: String,
    pub dice_initial: f64,
    pub dice: f64,
    /// Mean 95th-percentile Hausdorff distance (mm) over labels present
    /// in both maps.
    pub hd95: f64,
    /// Mean average symmetric surface distance (mm) over the same labels.
    pub assd: f64,
    /// Fraction of voxels with non-positive deformation Jacobian.
    pub fold_fraction: f64,
    /// Mean endpoint error (voxels) of the zero field against the truth.
    pub epe_initial: f64,
    /// Mean endpoint error (voxels) of the predicted field.
    pub epe: f64,
}

/// Aggregate of an evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub mode: String,
    pub variant: String,
    pub pairs: Vec<PairReport>,
    pub dice_initial: Stat,
    pub dice: Stat,
    pub hd95: Stat,
    pub assd: Stat,
    pub fold_fraction: Stat,
    pub epe_initial: Stat,
    pub epe: Stat,
}

/// Mean Euclidean distance between two fields, in voxels.
pub fn endpoint_error(pred: &DisplacementField<f32>, truth: &DisplacementField<f32>) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(RecorrError::shape(
            "endpoint_error",
            format!("{:?}", truth.dims()),
            format!("{:?}", pred.dims()),
        ));
    }
    let [d, h, w] = pred.dims();
    let mut total = 0.0f64;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let a = pred.u(z, y, x);
                let b = truth.u(z, y, x);
                let dz = (a[0] - b[0]) as f64;
                let dy = (a[1] - b[1]) as f64;
                let dx = (a[2] - b[2]) as f64;
                total += (dz * dz + dy * dy + dx * dx).sqrt();
            }
        }
    }
    Ok(total / (d * h * w) as f64)
}

/// Which parameters drive an evaluation.
pub enum EvalModel<'a> {
    /// Trained weights.
    Learned(&'a ParamStore<f32>),
    /// The training-free descriptor pathway.
    Direct,
}

/// Registers every pair and reports overlap, surface, folding, and
/// endpoint-error metrics with their unregistered baselines.
pub fn evaluate(
    pairs: &[(String, RegistrationPair)],
    model: &ModelSpec,
    schedule: &IterationSchedule,
    variant: Variant,
    eval_model: &EvalModel,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(RecorrError::Data("evaluation needs at least one pair".into()));
    }
    let empty = ParamStore::<f32>::new();
    let (mode, store) = match eval_model {
        EvalModel::Learned(store) => (Mode::Learned, *store),
        EvalModel::Direct => (Mode::Direct, &empty),
    };
    let mut reports = Vec::with_capacity(pairs.len());
    for (id, pair) in pairs {
        let field = infer_field(store, pair, model, schedule, mode, variant)?;
        let warped = warp_labels(&pair.moving_labels, &field)?;
        let dice = metrics::dice(&warped, &pair.fixed_labels)?;
        let dice_initial = metrics::dice(&pair.moving_labels, &pair.fixed_labels)?.mean;

        // Surface metrics need the label on both sides; skip the ones a
        // deformation pushed out of view entirely.
        let mut hd_sum = 0.0;
        let mut assd_sum = 0.0;
        let mut surf_n = 0usize;
        for &label in dice.per_label.keys() {
            if warped.volume_of(label) == 0 || pair.fixed_labels.volume_of(label) == 0 {
                continue;
            }
            hd_sum += metrics::hd95(&warped, &pair.fixed_labels, label)?;
            assd_sum += metrics::assd(&warped, &pair.fixed_labels, label)?;
            surf_n += 1;
        }
        if surf_n == 0 {
            return Err(RecorrError::Data(format!(
                "pair {id}: no label present in both maps after warping"
            )));
        }

        let jac = jacobian_det(&field)?;
        let zero = DisplacementField::<f32>::zeros(field.dims());
        reports.push(PairReport {
            id: id.clone(),
            dice_initial,
            dice: dice.mean,
            hd95: hd_sum / surf_n as f64,
            assd: assd_sum / surf_n as f64,
            fold_fraction: fold_fraction(&jac),
            epe_initial: endpoint_error(&zero, &pair.true_field)?,
            epe: endpoint_error(&field, &pair.true_field)?,
        });
    }
    let col = |f: fn(&PairReport) -> f64| Stat::of(&reports.iter().map(f).collect::<Vec<_>>());
    let (dice_initial, dice) = (col(|r| r.dice_initial), col(|r| r.dice));
    let (hd95, assd) = (col(|r| r.hd95), col(|r| r.assd));
    let fold = col(|r| r.fold_fraction);
    let (epe_initial, epe) = (col(|r| r.epe_initial), col(|r| r.epe));
    Ok(EvalReport {
        schema_version: 1,
        mode: match mode {
            Mode::Learned => "learned".into(),
            Mode::Direct => "direct".into(),
        },
        variant: match variant {
            Variant::Standard => "standard".into(),
            Variant::Diffeo => "diffeo".into(),
        },
        pairs: reports,
        dice_initial,
        dice,
        hd95,
        assd,
        fold_fraction: fold,
        epe_initial,
        epe,
    })
}
