//! Detector, training and ablation configuration.

use serde::{Deserialize, Serialize};

use super::anchors::AnchorConfig;
use super::matching::MatchThresholds;
use crate::error::{Error, Result};
use crate::loss::FocalParams;
use crate::optim::{LrSchedule, SgdConfig};
use crate::roi_align::{LevelMapper, RoiAlignConfig};

/// The four architecture switches of the ablation lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub fpn: bool,
    pub dcn: bool,
    pub cbam: bool,
    pub focal: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles::ALL
    }
}

impl Toggles {
    pub const ALL: Toggles = Toggles {
        fpn: true,
        dcn: true,
        cbam: true,
        focal: true,
    };
    pub const NONE: Toggles = Toggles {
        fpn: false,
        dcn: false,
        cbam: false,
        focal: false,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub blocks_per_stage: usize,
    pub base_width: usize,
    /// Stages (1..=4) whose second block convolution is deformable when
    /// the `dcn` toggle is on.
    pub deform_stages: Vec<usize>,
    pub cbam_reduction: usize,
    pub cbam_mlp_bias: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            blocks_per_stage: 2,
            base_width: 16,
            deform_stages: vec![3, 4],
            cbam_reduction: 16,
            cbam_mlp_bias: false,
        }
    }
}

impl BackboneConfig {
    pub fn stage_width(&self, stage: usize) -> usize {
        self.base_width << (stage - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RpnConfig {
    pub thresholds: MatchThresholds,
    /// Anchors sampled per image when training with cross-entropy.
    pub batch_per_image: usize,
    pub positive_fraction: f64,
    pub pre_nms_top_n: usize,
    pub post_nms_top_n: usize,
    pub nms_iou: f64,
    pub min_size: f64,
}

impl Default for RpnConfig {
    fn default() -> Self {
        RpnConfig {
            thresholds: MatchThresholds::RPN,
            batch_per_image: 256,
            positive_fraction: 0.5,
            pre_nms_top_n: 1000,
            post_nms_top_n: 100,
            nms_iou: 0.7,
            min_size: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub positive_iou: f64,
    pub batch_per_image: usize,
    pub positive_fraction: f64,
    pub fc_dim: usize,
    pub roi_align: RoiAlignConfig,
    pub level_mapper: LevelMapper,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            positive_iou: 0.5,
            batch_per_image: 64,
            positive_fraction: 0.25,
            fc_dim: 128,
            roi_align: RoiAlignConfig::default(),
            level_mapper: LevelMapper::default(),
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub rpn_cls: f64,
    pub rpn_box: f64,
    pub head_cls: f64,
    pub head_box: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rpn_cls: 1.0,
            rpn_box: 1.0,
            head_cls: 1.0,
            head_box: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub toggles: Toggles,
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    /// Channel width of every pyramid level.
    pub pyramid_channels: usize,
    pub anchors: AnchorConfig,
    pub rpn: RpnConfig,
    pub head: HeadConfig,
    pub focal: FocalParams,
    pub loss_weights: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            toggles: Toggles::ALL,
            num_classes: 2,
            backbone: BackboneConfig::default(),
            pyramid_channels: crate::fpn::PYRAMID_CHANNELS,
            anchors: AnchorConfig::default(),
            rpn: RpnConfig::default(),
            head: HeadConfig::default(),
            focal: FocalParams::default(),
            loss_weights: LossWeights::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        let b = &self.backbone;
        if b.blocks_per_stage == 0 || b.base_width < 2 || b.in_channels == 0 {
            return Err(Error::Config("backbone needs positive blocks, base width >= 2 and input channels".into()));
        }
        if let Some(s) = b.deform_stages.iter().find(|s| !(1..=4).contains(*s)) {
            return Err(Error::Config(format!("deform stage {s} is outside 1..=4")));
        }
        if self.toggles.cbam {
            for s in 1..=4 {
                crate::cbam::hidden_width(b.stage_width(s), b.cbam_reduction)
                    .map_err(|e| Error::Config(format!("cbam at stage {s}: {e}")))?;
            }
        }
        if self.pyramid_channels == 0 {
            return Err(Error::Config("pyramid_channels must be positive".into()));
        }
        self.anchors.validate()?;
        if self.toggles.fpn && self.anchors.sizes.len() != 4 {
            return Err(Error::Config(format!(
                "the pyramid needs one anchor size per level (4), got {}",
                self.anchors.sizes.len()
            )));
        }
        self.rpn.thresholds.validate()?;
        self.focal.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.head.roi_align.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.rpn.positive_fraction) || !(0.0..=1.0).contains(&self.head.positive_fraction) {
            return Err(Error::Config("positive fractions must lie in [0, 1]".into()));
        }
        if self.head.fc_dim == 0 || self.head.batch_per_image == 0 || self.rpn.post_nms_top_n == 0 {
            return Err(Error::Config("head width, head batch and proposal count must be positive".into()));
        }
        Ok(())
    }

    /// Small-image settings used by the desk-scale experiments: anchors
    /// sized for 96-pixel images and a narrower pyramid.
    pub fn toy() -> Self {
        ModelConfig {
            pyramid_channels: 64,
            anchors: AnchorConfig {
                sizes: vec![8.0, 16.0, 32.0, 64.0],
                ..Default::default()
            },
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub schedule: LrSchedule,
    /// Linear warm-up length in steps (0 disables it).
    pub warmup_steps: usize,
    /// Global gradient-norm cap (0 disables it).
    pub clip_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            sgd: SgdConfig::default(),
            schedule: LrSchedule::default(),
            warmup_steps: 0,
            clip_grad_norm: 0.0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale recipe: the default optimiser with a short warm-up, a
    /// gradient-norm cap and rate drops at two thirds and nine tenths of
    /// the run. The network has no normalisation layers, so without the
    /// warm-up and cap the first steps at rate 0.02 can diverge.
    pub fn toy(epochs: usize) -> Self {
        TrainConfig {
            epochs,
            schedule: LrSchedule {
                milestones: vec![epochs * 2 / 3, epochs * 9 / 10],
                ..Default::default()
            },
            warmup_steps: 50,
            clip_grad_norm: 10.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.clip_grad_norm >= 0.0) {
            return Err(Error::Config("clip_grad_norm must be non-negative".into()));
        }
        self.sgd.validate()
    }
}
