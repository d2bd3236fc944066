//! JSON run configuration for the command-line tools.
//!
//! Every key has a default, so an empty object `{}` is a valid config;
//! unknown keys are rejected rather than silently ignored. The parsed
//! struct converts into the typed configs of the engine modules, and
//! serializing it back out echoes the fully resolved settings.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{RecorrError, Result};
use crate::losses::{LossConfig, Similarity, Supervision};
use crate::pyramid::{IterationSchedule, Mode, ModelSpec, Variant};
use crate::synth::{DatasetSpec, PerturbKind, PhantomSpec};
use crate::trainer::TrainConfig;
use crate::updater::UpdaterConfig;

const SCHEMA_VERSION: u32 = 1;

/// Registration pathway: trained weights or training-free descriptors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Learned,
    Direct,
}

/// Field parameterization: plain displacement or exponentiated velocity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    Standard,
    Diffeo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityName {
    Mse,
    Ncc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionName {
    FullSequence,
    LastOfScale,
}

/// Network shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Encoder channels, full resolution first.
    pub encoder_channels: [usize; 5],
    /// Width of the motion-feature convolutions in the updater.
    pub motion_channels: usize,
    /// Search cube side length (odd).
    pub search_radius: usize,
    /// Softmax temperature of the direct-mode search readout.
    pub temperature: f64,
    /// Width of the full-resolution refinement convolutions.
    pub refine_channels: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let model = ModelSpec::default();
        Self {
            encoder_channels: model.encoder.channels,
            motion_channels: model.updater.motion_channels,
            search_radius: model.radius,
            temperature: model.temperature,
            refine_channels: model.refine_channels,
        }
    }
}

/// Iteration counts per scale, coarse to fine.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub iterations: [usize; 4],
    pub refine: bool,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = IterationSchedule::full();
        Self {
            iterations: s.iterations,
            refine: s.refine,
        }
    }
}

/// Objective weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub similarity: SimilarityName,
    pub lambda: f64,
    pub gamma: f64,
    pub supervision: SupervisionName,
    pub dice_weight: f64,
    pub ncc_window: usize,
    pub ncc_eps: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::default();
        Self {
            similarity: SimilarityName::Mse,
            lambda: l.lambda,
            gamma: l.gamma,
            supervision: SupervisionName::FullSequence,
            dice_weight: l.dice_weight,
            ncc_window: l.ncc_window,
            ncc_eps: l.ncc_eps,
        }
    }
}

/// Optimization settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            lr: t.lr,
            weight_decay: t.weight_decay,
            clip_norm: t.clip_norm.unwrap_or(0.0),
        }
    }
}

/// Synthetic dataset settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub dims: [usize; 3],
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub label_count: usize,
    pub noise_sigma: f64,
    pub smooth_width: usize,
    pub perturb: PerturbKind,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DatasetSpec::default();
        Self {
            dims: d.phantom.dims,
            train: d.train,
            val: d.val,
            test: d.test,
            label_count: d.phantom.label_count,
            noise_sigma: d.phantom.noise_sigma,
            smooth_width: d.phantom.smooth_width,
            perturb: d.perturb,
        }
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: SchemaVersion,
    pub seed: u64,
    pub mode: ModeName,
    pub variant: VariantName,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub data: DataSection,
}

/// Newtype so the default schema version serializes as a number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SchemaVersion(pub u32);

impl Default for SchemaVersion {
    fn default() -> Self {
        SchemaVersion(SCHEMA_VERSION)
    }
}

impl Default for ModeName {
    fn default() -> Self {
        ModeName::Learned
    }
}

impl Default for VariantName {
    fn default() -> Self {
        VariantName::Standard
    }
}

impl RunConfig {
    /// Parses a config, rejecting unknown keys, and validates every
    /// section.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| RecorrError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The fully resolved configuration as pretty JSON.
    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version.0 != SCHEMA_VERSION {
            return Err(RecorrError::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version.0
            )));
        }
        self.model_spec().validate()?;
        self.iteration_schedule().validate()?;
        self.loss_config().validate()?;
        self.train_config().validate()?;
        self.dataset_spec().phantom.validate()?;
        Ok(())
    }

    pub fn mode(&self) -> Mode {
        match self.mode {
            ModeName::Learned => Mode::Learned,
            ModeName::Direct => Mode::Direct,
        }
    }

    pub fn variant(&self) -> Variant {
        match self.variant {
            VariantName::Standard => Variant::Standard,
            VariantName::Diffeo => Variant::Diffeo,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            encoder: EncoderConfig {
                channels: self.model.encoder_channels,
            },
            updater: UpdaterConfig {
                motion_channels: self.model.motion_channels,
            },
            radius: self.model.search_radius,
            temperature: self.model.temperature,
            refine_channels: self.model.refine_channels,
        }
    }

    pub fn iteration_schedule(&self) -> IterationSchedule {
        IterationSchedule {
            iterations: self.schedule.iterations,
            refine: self.schedule.refine,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            similarity: match self.loss.similarity {
                SimilarityName::Mse => Similarity::Mse,
                SimilarityName::Ncc => Similarity::Ncc,
            },
            lambda: self.loss.lambda,
            gamma: self.loss.gamma,
            supervision: match self.loss.supervision {
                SupervisionName::FullSequence => Supervision::FullSequence,
                SupervisionName::LastOfScale => Supervision::LastOfScale,
            },
            dice_weight: self.loss.dice_weight,
            ncc_window: self.loss.ncc_window,
            ncc_eps: self.loss.ncc_eps,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            epochs: self.train.epochs,
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            clip_norm: if self.train.clip_norm > 0.0 {
                Some(self.train.clip_norm)
            } else {
                None
            },
            loss: self.loss_config(),
            model: self.model_spec(),
            schedule: self.iteration_schedule(),
            variant: self.variant(),
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: self.seed,
            train: self.data.train,
            val: self.data.val,
            test: self.data.test,
            phantom: PhantomSpec {
                seed: self.seed,
                dims: self.data.dims,
                label_count: self.data.label_count,
                noise_sigma: self.data.noise_sigma,
                smooth_width: self.data.smooth_width,
            },
            perturb: self.data.perturb.clone(),
        }
    }
}

/// One line per config key with its default, for `--help` output.
pub fn describe_keys() -> String {
    let defaults = RunConfig::default();
    let mut out = String::from("Config keys (JSON) and defaults:\n");
    let json = serde_json::to_value(&defaults).expect("config serializes");
    fn walk(prefix: &str, value: &serde_json::Value, out: &mut String) {
        match value {
            serde_json::Value::Object(map) => {
                for (k, v) in map {
                    let path = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&path, v, out);
                }
            }
            other => {
                out.push_str(&format!("  {prefix} = {other}\n"));
            }
        }
    }
    walk("", &json, &mut out);
    out
}
