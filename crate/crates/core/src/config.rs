//! Experiment configuration, read from TOML.
//!
//! Every section has defaults, so an empty file is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acquisition::{ScoringConfig, Strategy};
use crate::data::GeneratorConfig;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory written by `generate`. Only the command-line driver reads it.
    pub dir: Option<PathBuf>,
    pub seed: u64,
    /// Q, total images including the test split.
    pub num_images: usize,
    pub test_fraction: f64,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            seed: 0,
            num_images: 500,
            test_fraction: 0.2,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    /// Fraction of the training split labeled before cycle 0.
    pub initial_fraction: f64,
    pub budget_per_cycle: usize,
    /// P; the run trains P + 1 models (cycles 0..=P).
    pub num_cycles: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            initial_fraction: 0.05,
            budget_per_cycle: 25,
            num_cycles: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs_labeled: usize,
    pub epochs_unlabeled: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Committee learning rate in the unlabeled phase; `learning_rate` when unset.
    pub unlabeled_learning_rate: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip for labeled-phase steps.
    pub grad_clip_norm: Option<f64>,
    /// Continue from the previous cycle's weights instead of re-initializing.
    pub warm_start: bool,
    /// Alternate labeled and unlabeled epochs instead of running the phases
    /// back to back.
    pub interleaved: bool,
    /// Also run the unlabeled phase for strategies that never read the
    /// committee.
    pub always_train_committee: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs_labeled: 20,
            epochs_unlabeled: 4,
            batch_size: 8,
            learning_rate: 1.0,
            unlabeled_learning_rate: Some(0.1),
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip_norm: Some(0.1),
            warm_start: false,
            interleaved: false,
            always_train_committee: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    /// Number of top instances averaged into an image score.
    pub z: usize,
    /// Apply the background weighting when scoring, not only in training.
    pub weighted: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Committee,
            z: 50,
            weighted: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
            iou_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Background weighting of the discrepancy in the unlabeled phase.
    pub fpil: bool,
    pub data: DataConfig,
    pub pool: PoolConfig,
    pub training: TrainingConfig,
    pub loss: LossConfig,
    pub selection: SelectionConfig,
    pub eval: EvalConfig,
    pub detector: DetectorConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            fpil: true,
            data: DataConfig::default(),
            pool: PoolConfig::default(),
            training: TrainingConfig::default(),
            loss: LossConfig::default(),
            selection: SelectionConfig::default(),
            eval: EvalConfig::default(),
            detector: DetectorConfig::default(),
        }
    }
}

fn check(ok: bool, what: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(what()))
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.data.generator.validate()?;
        let t = &self.training;
        check(t.batch_size > 0, || "training.batch_size must be positive".into())?;
        check(t.learning_rate > 0.0 && t.learning_rate.is_finite(), || {
            format!("training.learning_rate must be positive, got {}", t.learning_rate)
        })?;
        check(t.unlabeled_learning_rate.is_none_or(|v| v > 0.0 && v.is_finite()), || {
            "training.unlabeled_learning_rate must be positive".into()
        })?;
        check((0.0..1.0).contains(&t.momentum), || format!("training.momentum must lie in [0, 1), got {}", t.momentum))?;
        check(t.grad_clip_norm.is_none_or(|v| v > 0.0), || "training.grad_clip_norm must be positive".into())?;
        check(t.weight_decay >= 0.0, || "training.weight_decay must be non-negative".into())?;
        check(self.loss.lambda > 0.0, || format!("loss.lambda must be positive, got {}", self.loss.lambda))?;
        check(self.loss.gamma_fpil > 0.0, || {
            format!("loss.gamma_fpil must be positive, got {}", self.loss.gamma_fpil)
        })?;
        check((0.0..=1.0).contains(&self.loss.focal_alpha), || "loss.focal_alpha must lie in [0, 1]".into())?;
        check(self.selection.z >= 1, || "selection.z must be at least 1".into())?;
        check(
            !self.selection.strategy.uses_committee() || self.detector.committee_size >= 2,
            || "the committee strategy needs detector.committee_size >= 2".into(),
        )?;
        check(self.pool.budget_per_cycle > 0, || "pool.budget_per_cycle must be positive".into())?;
        check(self.pool.initial_fraction > 0.0 && self.pool.initial_fraction < 1.0, || {
            "pool.initial_fraction must lie in (0, 1)".into()
        })?;
        check(self.data.num_images > 0, || "data.num_images must be positive".into())?;
        check(self.data.generator.image_size == self.detector.image_size, || {
            "data.generator.image_size and detector.image_size differ".into()
        })?;
        check(self.data.generator.channels == self.detector.in_channels, || {
            "data.generator.channels and detector.in_channels differ".into()
        })?;
        check(self.data.generator.num_classes == self.detector.num_classes, || {
            "data.generator.num_classes and detector.num_classes differ".into()
        })?;
        let e = &self.eval;
        for (name, v) in [("score_threshold", e.score_threshold), ("nms_iou", e.nms_iou), ("iou_threshold", e.iou_threshold)] {
            check(v > 0.0 && v < 1.0, || format!("eval.{name} must lie in (0, 1), got {v}"))?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form (object keys sorted), so the
    /// hash does not depend on key order in the source file.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            z: self.selection.z,
            weighted_gamma: self.selection.weighted.then_some(self.loss.gamma_fpil),
        }
    }

    /// Run label: the strategy name, with `-nofpil` for the unweighted
    /// committee variant.
    pub fn variant_name(&self) -> String {
        match (self.selection.strategy, self.fpil) {
            (Strategy::Committee, false) => "committee-nofpil".into(),
            (s, _) => s.name().into(),
        }
    }

    /// Inverse of [`variant_name`](Self::variant_name).
    pub fn with_variant(&self, name: &str) -> Result<Self> {
        let mut cfg = self.clone();
        if name == "committee-nofpil" {
            cfg.selection.strategy = Strategy::Committee;
            cfg.fpil = false;
        } else {
            cfg.selection.strategy = name.parse()?;
        }
        Ok(cfg)
    }
}
