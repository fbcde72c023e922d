//! Configuration records for models, training, evaluation and experiments.
//! Every field has a default, so a JSON config only needs the overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assign::{AnchorConfig, AssignConfig};
use crate::dcloss::DcLossParams;
use crate::error::{Error, Result};
use crate::fbsm::FbsmConfig;
use crate::pyramid::{BackboneConfig, Level};
use crate::synth::SceneSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub fbsm: FbsmConfig,
    /// Apply CEM + FBSM enhancement.
    pub enhance: bool,
    pub enhance_levels: Vec<Level>,
    /// Levels that carry anchors and head outputs.
    pub levels: Vec<Level>,
    pub num_classes: usize,
    pub base_anchor_size: f64,
    /// Initial foreground probability encoded in the classifier bias.
    pub cls_prior: f64,
    /// Images enter the network as `(x - input_mean) / input_std`.
    pub input_mean: f64,
    pub input_std: f64,
    /// Regression targets are `encode_deltas / box_stds`.
    pub box_stds: [f64; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            fbsm: FbsmConfig::default(),
            enhance: true,
            enhance_levels: vec![Level::P2],
            levels: Level::ALL.to_vec(),
            num_classes: 3,
            base_anchor_size: 2.0,
            cls_prior: 0.01,
            input_mean: 0.5,
            input_std: 0.25,
            box_stds: [0.1, 0.1, 0.2, 0.2],
        }
    }
}

impl ModelConfig {
    pub fn anchors(&self) -> AnchorConfig {
        AnchorConfig { base_size: self.base_anchor_size, levels: self.levels.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.num_classes == 0 {
            return Err(Error::Invalid("model needs at least one level and one class".into()));
        }
        let mut sorted = self.levels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != self.levels {
            return Err(Error::Invalid(format!("levels must be strictly increasing, got {:?}", self.levels)));
        }
        if !(self.cls_prior > 0.0 && self.cls_prior < 1.0) {
            return Err(Error::Invalid(format!("cls_prior must lie in (0, 1), got {}", self.cls_prior)));
        }
        if !(self.input_std > 0.0 && self.input_mean.is_finite()) {
            return Err(Error::Invalid("input_std must be positive and input_mean finite".into()));
        }
        if !self.box_stds.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::Invalid("box_stds must be positive".into()));
        }
        if !(self.base_anchor_size > 0.0) {
            return Err(Error::Invalid("base_anchor_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionLoss {
    SmoothL1,
    Dcloss,
    DclossSwapped,
}

impl RegressionLoss {
    pub fn name(self) -> &'static str {
        match self {
            RegressionLoss::SmoothL1 => "smooth_l1",
            RegressionLoss::Dcloss => "dcloss",
            RegressionLoss::DclossSwapped => "dcloss_swapped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// The learning rate is multiplied by `decay_factor` once each of these
    /// epochs has finished.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Linear warm-up from `warmup_ratio * lr` over this many iterations.
    pub warmup_iters: usize,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub regression: RegressionLoss,
    pub smooth_l1_beta: f64,
    pub dcloss: DcLossParams,
    pub seed: u64,
    /// Compute per-image gradients on the rayon pool. Reduction order is
    /// fixed, so results do not depend on this flag.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 12,
            decay_epochs: vec![8, 11],
            decay_factor: 0.1,
            warmup_iters: 0,
            warmup_ratio: 0.001,
            batch_size: 4,
            regression: RegressionLoss::Dcloss,
            smooth_l1_beta: 1.0,
            dcloss: DcLossParams::default(),
            seed: 0,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Invalid("momentum must be in [0, 1) and weight decay non-negative".into()));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::Invalid("smooth_l1_beta must be positive".into()));
        }
        self.dcloss.validate()
    }

    /// Learning rate for a 1-based epoch and 0-based global iteration.
    pub fn lr_at(&self, epoch: usize, iter: usize) -> f64 {
        let steps = self.decay_epochs.iter().filter(|&&d| epoch > d).count() as i32;
        let lr = self.lr * self.decay_factor.powi(steps);
        if iter < self.warmup_iters {
            let t = iter as f64 / self.warmup_iters as f64;
            lr * (self.warmup_ratio + (1.0 - self.warmup_ratio) * t)
        } else {
            lr
        }
    }

    /// Loss parameters actually used for the configured regression loss.
    pub fn effective_dcloss(&self) -> DcLossParams {
        DcLossParams { swap_weights: self.regression == RegressionLoss::DclossSwapped, ..self.dcloss }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub score_thr: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    /// Candidates kept per level before NMS.
    pub pre_nms_top_k: usize,
    pub iou_thresholds: Vec<f64>,
    /// Size bucket `(lo, hi]` on the `sqrt(w * h)` scale.
    pub very_tiny: (f64, f64),
    pub tiny: (f64, f64),
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            score_thr: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
            pre_nms_top_k: 1000,
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            very_tiny: (2.0, 8.0),
            tiny: (8.0, 16.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub subsets: Vec<Vec<Level>>,
    /// Dataset and epoch budget; `None` keeps the run config's values.
    pub train_scenes: Option<usize>,
    pub val_scenes: Option<usize>,
    pub epochs: Option<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![0, 1, 2],
            subsets: vec![vec![Level::P2, Level::P3], Level::ALL.to_vec()],
            train_scenes: None,
            val_scenes: None,
            epochs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub deltas: Vec<f64>,
    pub k: f64,
    pub train_scenes: Option<usize>,
    pub val_scenes: Option<usize>,
    pub epochs: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { deltas: vec![0.05, 0.1, 0.15, 0.3, 0.5], k: 10.0, train_scenes: None, val_scenes: None, epochs: None }
    }
}

/// Everything one CLI invocation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: SceneSpec,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub assign: AssignConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: SceneSpec::default(),
            train_scenes: 200,
            val_scenes: 50,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            assign: AssignConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::parse(path, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.assign.validate()?;
        if self.model.num_classes < self.data.num_classes {
            return Err(Error::Invalid(format!(
                "model has {} classes but the data has {}",
                self.model.num_classes, self.data.num_classes
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(1, 100), 0.005);
        assert_eq!(c.lr_at(8, 100), 0.005);
        assert!((c.lr_at(9, 100) - 0.0005).abs() < 1e-15);
        assert!((c.lr_at(12, 100) - 0.000_05).abs() < 1e-15);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let c = TrainConfig { warmup_iters: 10, warmup_ratio: 0.1, ..Default::default() };
        assert!((c.lr_at(1, 0) - 0.0005).abs() < 1e-15);
        assert!((c.lr_at(1, 5) - 0.00275).abs() < 1e-15);
        assert_eq!(c.lr_at(1, 10), 0.005);
    }

    #[test]
    fn partial_json_keeps_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 3}, "train_scenes": 8}"#).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.lr, 0.005);
        assert_eq!(c.train_scenes, 8);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let c = TrainConfig { epochs: 0, ..Default::default() };
        assert!(c.validate().is_err());
        let m = ModelConfig { levels: vec![Level::P3, Level::P2], ..Default::default() };
        assert!(m.validate().is_err());
    }
}
