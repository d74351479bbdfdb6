//! Run configuration: model shape, training schedule, thresholds, and the
//! sensor dropout mask, loadable from a TOML document with CLI overrides on
//! top.

use serde::{Deserialize, Serialize};

use crate::adjacency::{CorrelationOp, LossWeights, RankCombine};
use crate::error::{Error, Result};
use crate::fusion::FusionVariant;
use crate::ingest::Interval;

/// Feature widths the configuration accepts: the desk-scale default and the
/// full-scale width.
pub const FEATURE_DIM_OPTIONS: [usize; 2] = [64, 512];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelSection {
    pub feature_dim: usize,
    pub fusion_variant: String,
    pub correlation_op: String,
    pub ranking_enabled: bool,
    pub ranking_combine: String,
    /// Loss weight on start scores.
    pub loss_alpha: f64,
    /// Loss weight on end scores.
    pub loss_gamma: f64,
    /// Loss weight on confidence scores.
    pub loss_beta: f64,
    pub point_hidden: usize,
    pub image_bins: usize,
    pub image_hidden: usize,
    pub use_reflectivity: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            feature_dim: 64,
            fusion_variant: "C".into(),
            correlation_op: "abs_sub".into(),
            ranking_enabled: true,
            ranking_combine: "add".into(),
            loss_alpha: 0.4,
            loss_gamma: 0.4,
            loss_beta: 1.5,
            point_hidden: 32,
            image_bins: 8,
            image_hidden: 32,
            use_reflectivity: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            epochs: 40,
            learning_rate: 6e-4,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ThresholdSection {
    /// Confidence probability below which detections are pinned out of the
    /// assignment.
    pub confidence_gate: f64,
    /// Detector score below which detections are discarded outright.
    pub detection_filter: f64,
    /// Strict IoU threshold for ground-truth assignment.
    pub gt_iou: f64,
}

impl Default for ThresholdSection {
    fn default() -> Self {
        ThresholdSection {
            confidence_gate: 0.2,
            detection_filter: 0.3,
            gt_iou: 0.5,
        }
    }
}

/// Per-frame modality availability: a modality is off for every frame in
/// any of its intervals.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct DropoutSection {
    pub image_off: Vec<Interval>,
    pub cloud_off: Vec<Interval>,
}

impl DropoutSection {
    pub fn image_on(&self, frame: usize) -> bool {
        !self.image_off.iter().any(|i| i.contains(frame))
    }

    pub fn cloud_on(&self, frame: usize) -> bool {
        !self.cloud_off.iter().any(|i| i.contains(frame))
    }

    /// Whole-run masks used by the `--mask` shorthand.
    pub fn lose_image() -> Self {
        DropoutSection {
            image_off: vec![Interval {
                start: 0,
                end: usize::MAX,
            }],
            cloud_off: Vec::new(),
        }
    }

    pub fn lose_cloud() -> Self {
        DropoutSection {
            image_off: Vec::new(),
            cloud_off: vec![Interval {
                start: 0,
                end: usize::MAX,
            }],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub training: TrainingSection,
    pub thresholds: ThresholdSection,
    pub dropout: DropoutSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !FEATURE_DIM_OPTIONS.contains(&self.model.feature_dim) {
            return Err(Error::Config(format!(
                "feature_dim {} unsupported; options are {FEATURE_DIM_OPTIONS:?}",
                self.model.feature_dim
            )));
        }
        self.fusion_variant()?;
        self.correlation_op()?;
        self.ranking_combine()?;
        if self.training.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.training.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        let t = &self.thresholds;
        if !(0.0..=1.0).contains(&t.confidence_gate)
            || !(0.0..=1.0).contains(&t.detection_filter)
            || !(0.0..=1.0).contains(&t.gt_iou)
        {
            return Err(Error::Config("thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn fusion_variant(&self) -> Result<FusionVariant> {
        self.model.fusion_variant.parse()
    }

    pub fn correlation_op(&self) -> Result<CorrelationOp> {
        self.model.correlation_op.parse()
    }

    pub fn ranking_combine(&self) -> Result<RankCombine> {
        self.model.ranking_combine.parse()
    }

    pub fn ranking_enabled(&self) -> bool {
        self.model.ranking_enabled
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            start: self.model.loss_alpha,
            end: self.model.loss_gamma,
            truth: self.model.loss_beta,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_config_reports_paper_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.loss_alpha, 0.4);
        assert_eq!(cfg.model.loss_gamma, 0.4);
        assert_eq!(cfg.model.loss_beta, 1.5);
        assert_eq!(cfg.training.learning_rate, 6e-4);
        assert_eq!(cfg.training.epochs, 40);
        assert_eq!(cfg.thresholds.confidence_gate, 0.2);
        assert_eq!(cfg.thresholds.detection_filter, 0.3);
        assert_eq!(cfg.model.feature_dim, 64);
        assert_eq!(FEATURE_DIM_OPTIONS, [64, 512]);
        assert!(cfg.validate().is_ok());
        // Default estimator wiring: attention fusion, absolute-subtraction
        // correlation, additive ranking.
        assert_eq!(cfg.fusion_variant().unwrap(), FusionVariant::C);
        assert_eq!(cfg.correlation_op().unwrap(), CorrelationOp::AbsSub);
        assert!(cfg.ranking_enabled());
        assert_eq!(cfg.ranking_combine().unwrap(), RankCombine::Add);
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let mut cfg = RunConfig::default();
        cfg.model.feature_dim = 512;
        cfg.dropout = DropoutSection {
            image_off: vec![Interval { start: 5, end: 10 }],
            cloud_off: Vec::new(),
        };
        let text = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert!(!back.dropout.image_on(7));
        assert!(back.dropout.image_on(11));
        assert!(back.dropout.cloud_on(7));
    }

    #[test]
    fn partial_document_fills_defaults() {
        let cfg = RunConfig::from_toml_str("[training]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.training.epochs, 3);
        assert_eq!(cfg.training.learning_rate, 6e-4);
        assert_eq!(cfg.model.feature_dim, 64);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(RunConfig::from_toml_str("[model]\nfeature_dim = 100\n").is_err());
        assert!(RunConfig::from_toml_str("[model]\nfusion_variant = \"Z\"\n").is_err());
        assert!(RunConfig::from_toml_str("[training]\nlearning_rate = 0.0\n").is_err());
        assert!(RunConfig::from_toml_str("[thresholds]\nconfidence_gate = 1.5\n").is_err());
    }

    #[test]
    fn mask_shorthands_cover_all_frames() {
        let lose_img = DropoutSection::lose_image();
        assert!(!lose_img.image_on(0));
        assert!(!lose_img.image_on(1_000_000));
        assert!(lose_img.cloud_on(0));
        let lose_cloud = DropoutSection::lose_cloud();
        assert!(lose_cloud.image_on(3));
        assert!(!lose_cloud.cloud_on(3));
    }
}
