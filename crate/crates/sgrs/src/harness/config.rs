//! Run configuration: one flat JSON document with strict unknown-key
//! rejection, plus the variant/augmentation/region-assignment vocabulary
//! used by the ablation grids.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AlphaPolicy;
use crate::error::{config_err, Result};
use crate::loss::{LossConfig, Normalization};
use crate::net::OptimizerConfig;

/// Pipeline components enabled for a run, mirroring the component
/// ablation rows: the baseline self-labels with a single network, `ma`
/// adds mix augmentation, `mt` swaps the pseudo-label source to the EMA
/// teacher, and `full` adds the synergy partition with regional losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Ma,
    Mt,
    MaMt,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::Ma,
        Variant::Mt,
        Variant::MaMt,
        Variant::Full,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Ma => "ma",
            Variant::Mt => "mt",
            Variant::MaMt => "ma_mt",
            Variant::Full => "full",
        }
    }

    /// Does the run maintain and use an EMA teacher for pseudo labels?
    pub fn uses_teacher(&self) -> bool {
        matches!(self, Variant::Mt | Variant::MaMt | Variant::Full)
    }

    /// Does the run build a perturbed (mixed/flipped) stream?
    pub fn uses_mixed_stream(&self) -> bool {
        matches!(self, Variant::Ma | Variant::MaMt | Variant::Full)
    }

    /// Does the run partition pixels and apply regional losses?
    pub fn uses_regions(&self) -> bool {
        matches!(self, Variant::Full)
    }
}

/// How the perturbed unlabeled stream is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    #[default]
    Ma,
    FlipH,
    FlipV,
}

impl Augmentation {
    pub const ALL: [Augmentation; 3] = [Augmentation::FlipH, Augmentation::FlipV, Augmentation::Ma];

    pub fn name(&self) -> &'static str {
        match self {
            Augmentation::Ma => "ma",
            Augmentation::FlipH => "flip_h",
            Augmentation::FlipV => "flip_v",
        }
    }
}

/// Loss applied to one region of the partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionLoss {
    /// Plain CE + Dice against the pseudo labels.
    Con,
    /// Label-smoothed CE + eta-smoothed Dice.
    Nr,
    /// Region contributes nothing.
    Excluded,
}

/// Which loss supervises each region; the default is the scheme's
/// choice (consistency on omega, noise-robust on theta, delta excluded).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionAssignment {
    pub omega: RegionLoss,
    pub theta: RegionLoss,
    pub delta: RegionLoss,
}

impl Default for RegionAssignment {
    fn default() -> Self {
        RegionAssignment {
            omega: RegionLoss::Con,
            theta: RegionLoss::Nr,
            delta: RegionLoss::Excluded,
        }
    }
}

impl RegionAssignment {
    pub fn name(&self) -> String {
        let tag = |r: RegionLoss| match r {
            RegionLoss::Con => "con",
            RegionLoss::Nr => "nr",
            RegionLoss::Excluded => "x",
        };
        format!("{}_{}_{}", tag(self.omega), tag(self.theta), tag(self.delta))
    }
}

fn default_labeled_ratio() -> f64 {
    0.05
}
fn default_total_steps() -> usize {
    2000
}
fn default_tau() -> f64 {
    0.296
}
fn default_epsilon() -> f64 {
    0.2
}
fn default_eta() -> f64 {
    20.0
}
fn default_lr() -> f64 {
    0.01
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_ema_decay() -> f64 {
    0.99
}
fn default_eval_every() -> usize {
    200
}
fn default_variant() -> Variant {
    Variant::Full
}
fn default_base_width() -> usize {
    8
}
fn default_batch() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Directory produced by `gen-data`.
    pub dataset: PathBuf,
    /// Run output directory (config snapshot, CSVs, checkpoints).
    pub output: PathBuf,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_labeled_ratio")]
    pub labeled_ratio: f64,
    #[serde(default = "default_total_steps")]
    pub total_steps: usize,
    /// Warmup horizon; defaults to 0.4 x total_steps when absent.
    #[serde(default)]
    pub t_warm: Option<usize>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
    #[serde(default)]
    pub alpha_policy: AlphaPolicy,
    #[serde(default)]
    pub augmentation: Augmentation,
    #[serde(default)]
    pub loss_normalization: Normalization,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_base_width")]
    pub base_width: usize,
    #[serde(default = "default_batch")]
    pub batch_labeled: usize,
    #[serde(default = "default_batch")]
    pub batch_unlabeled: usize,
    /// Region-loss reassignment for the grid ablation; only meaningful
    /// for the full variant.
    #[serde(default)]
    pub region_losses: Option<RegionAssignment>,
    /// Write per-step region code maps as TSR u8 files.
    #[serde(default)]
    pub dump_regions: bool,
}

impl RunConfig {
    /// A config with required paths filled and every other field at its
    /// default.
    pub fn new(dataset: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        RunConfig {
            dataset: dataset.into(),
            output: output.into(),
            variant: default_variant(),
            labeled_ratio: default_labeled_ratio(),
            total_steps: default_total_steps(),
            t_warm: None,
            tau: default_tau(),
            epsilon: default_epsilon(),
            eta: default_eta(),
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            ema_decay: default_ema_decay(),
            alpha_policy: AlphaPolicy::default(),
            augmentation: Augmentation::default(),
            loss_normalization: Normalization::default(),
            seed: 0,
            eval_every: default_eval_every(),
            base_width: default_base_width(),
            batch_labeled: default_batch(),
            batch_unlabeled: default_batch(),
            region_losses: None,
            dump_regions: false,
        }
    }

    /// Effective warmup horizon: explicit value, or 40% of the schedule.
    pub fn effective_t_warm(&self) -> usize {
        self.t_warm
            .unwrap_or(((self.total_steps as f64) * 0.4).round() as usize)
            .max(1)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            epsilon: self.epsilon,
            eta: self.eta,
            t_warm: self.effective_t_warm(),
            normalization: self.loss_normalization,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
        }
    }

    pub fn region_assignment(&self) -> RegionAssignment {
        self.region_losses.unwrap_or_default()
    }

    /// Validates every range this module owns; submodule configs carry
    /// their own checks which run here too.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.labeled_ratio > 0.0 && self.labeled_ratio < 1.0) {
            return Err(config_err(format!(
                "labeled_ratio must lie in (0, 1), got {}",
                self.labeled_ratio
            )));
        }
        let max_tau = (num_classes as f64).ln();
        if !(self.tau.is_finite() && (0.0..=max_tau).contains(&self.tau)) {
            return Err(config_err(format!(
                "tau must lie in [0, ln {num_classes} = {max_tau:.4}], got {}",
                self.tau
            )));
        }
        if !(self.ema_decay.is_finite() && (0.0..1.0).contains(&self.ema_decay)) {
            return Err(config_err(format!(
                "ema_decay must lie in [0, 1), got {}",
                self.ema_decay
            )));
        }
        if self.eval_every == 0 {
            return Err(config_err("eval_every must be positive".to_string()));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return Err(config_err("batch sizes must be positive".to_string()));
        }
        if self.base_width < 2 {
            return Err(config_err(format!(
                "base_width must be at least 2, got {}",
                self.base_width
            )));
        }
        if self.region_losses.is_some() && self.variant != Variant::Full {
            return Err(config_err(format!(
                "region_losses only applies to the full variant, not {}",
                self.variant.name()
            )));
        }
        self.loss_config().validate()?;
        self.optimizer_config().validate()?;
        self.alpha_policy.validate()?;
        Ok(())
    }

    /// Hash of every field that shapes the training dynamics (not the
    /// schedule length or output paths), used to pair checkpoints with
    /// compatible configs across resume.
    pub fn dynamics_hash(&self) -> String {
        let mut h = Sha256::new();
        let fields = serde_json::json!({
            "dataset": self.dataset,
            "variant": self.variant,
            "labeled_ratio": self.labeled_ratio,
            "t_warm": self.effective_t_warm(),
            "tau": self.tau,
            "epsilon": self.epsilon,
            "eta": self.eta,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "ema_decay": self.ema_decay,
            "alpha_policy": self.alpha_policy,
            "augmentation": self.augmentation,
            "loss_normalization": self.loss_normalization,
            "seed": self.seed,
            "base_width": self.base_width,
            "batch_labeled": self.batch_labeled,
            "batch_unlabeled": self.batch_unlabeled,
            "region_losses": self.region_losses,
        });
        h.update(serde_json::to_string(&fields).expect("config serializes").as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
