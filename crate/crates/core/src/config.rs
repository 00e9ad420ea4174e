//! The single declarative run configuration.
//!
//! Every section rejects unknown keys. Missing keys take the full-scale
//! defaults; [`RunConfig::tiny`] is the desk-scale preset used by tests and
//! the synthetic experiments.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::SoftmaxAxis;
use crate::data::synthetic::SyntheticSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub attention: AttentionConfig,
    pub rpn: RpnConfig,
    pub refinement: RefinementConfig,
    pub training: TrainingConfig,
    pub tracker: TrackerConfig,
    pub data: DataConfig,
    pub synthetic: SyntheticSpec,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backbone: BackboneConfig::default(),
            attention: AttentionConfig::default(),
            rpn: RpnConfig::default(),
            refinement: RefinementConfig::default(),
            training: TrainingConfig::default(),
            tracker: TrackerConfig::default(),
            data: DataConfig::default(),
            synthetic: SyntheticSpec::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub num_stages: usize,
    pub channels_per_stage: Vec<usize>,
    pub final_stride: usize,
    pub adjusted_channels: usize,
    pub tiny_mode: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            num_stages: 5,
            channels_per_stage: vec![64, 256, 512, 1024, 2048],
            final_stride: 8,
            adjusted_channels: 256,
            tiny_mode: false,
        }
    }
}

impl BackboneConfig {
    pub fn tiny() -> Self {
        Self {
            num_stages: 5,
            channels_per_stage: vec![8, 12, 16, 16, 16],
            final_stride: 8,
            adjusted_channels: 16,
            tiny_mode: true,
        }
    }
}

/// Toggles mirror the ablation study: spatial/channel self-attention,
/// cross-attention, deformable convolution and deformable RoI pooling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub spatial_sa: bool,
    pub channel_sa: bool,
    pub cross_attn: bool,
    pub deform_conv: bool,
    pub deform_pool: bool,
    /// Normalization axis of the channel self-attention map.
    pub channel_softmax: SoftmaxAxis,
    /// Apply the 3×3 (deformable) convolution after summing the attentional
    /// features (`true`) or to each term before the sum (`false`).
    pub conv_after_sum: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            spatial_sa: true,
            channel_sa: true,
            cross_attn: true,
            deform_conv: true,
            deform_pool: true,
            channel_softmax: SoftmaxAxis::Row,
            conv_after_sum: true,
        }
    }
}

impl AttentionConfig {
    pub fn any_enabled(&self) -> bool {
        self.spatial_sa || self.channel_sa || self.cross_attn || self.deform_conv
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RpnConfig {
    pub anchor_ratios: Vec<f64>,
    pub anchor_base_scale: f64,
    /// Side of the center crop taken from template features.
    pub template_crop: usize,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub max_samples: usize,
    pub max_positive: usize,
}

impl Default for RpnConfig {
    fn default() -> Self {
        Self {
            anchor_ratios: vec![0.33, 0.5, 1.0, 2.0, 3.0],
            anchor_base_scale: 8.0,
            template_crop: 7,
            pos_iou: 0.6,
            neg_iou: 0.3,
            max_samples: 64,
            max_positive: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinementConfig {
    /// The RR toggle.
    pub enabled: bool,
    pub channels: usize,
    pub box_branch_size: usize,
    pub mask_branch_size: usize,
    pub box_pool: usize,
    pub mask_pool: usize,
    pub box_hidden: usize,
    pub mask_channels: usize,
    pub mask_size: usize,
    pub pool_samples: usize,
    pub deform_pool_gamma: f64,
    pub mask_threshold: f64,
    pub regions_per_image: usize,
    pub region_iou: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            channels: 256,
            box_branch_size: 25,
            mask_branch_size: 64,
            box_pool: 4,
            mask_pool: 16,
            box_hidden: 512,
            mask_channels: 256,
            mask_size: 64,
            pool_samples: 2,
            deform_pool_gamma: 0.1,
            mask_threshold: 0.5,
            regions_per_image: 16,
            region_iou: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub start_lr: f64,
    pub end_lr: f64,
    pub backbone_frozen_epochs: usize,
    pub backbone_lr_factor: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Maximum frame distance between exemplar and search frames.
    pub pair_frame_range: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub smooth_l1_beta: f64,
    /// Random search-center shift as a fraction of the target size.
    pub shift_jitter: f64,
    /// Random log-scale jitter of the search window.
    pub scale_jitter: f64,
    pub train_sequences: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            steps_per_epoch: 1000,
            warmup_epochs: 5,
            warmup_lr: 1e-3,
            start_lr: 5e-3,
            end_lr: 5e-4,
            backbone_frozen_epochs: 10,
            backbone_lr_factor: 1.0 / 20.0,
            batch_size: 12,
            momentum: 0.9,
            weight_decay: 1e-5,
            lambda1: 0.2,
            lambda2: 0.2,
            lambda3: 0.1,
            pair_frame_range: 50,
            grad_clip: 0.0,
            smooth_l1_beta: 1.0 / 9.0,
            shift_jitter: 0.5,
            scale_jitter: 0.15,
            train_sequences: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// Axis-aligned boxes (OTB/UAV/LaSOT/TrackingNet style).
    Axis,
    /// Minimum-area rectangle of the predicted mask (VOT style).
    Rotated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub window_influence: f64,
    pub penalty_k: f64,
    pub size_lr: f64,
    pub mode: OutputMode,
    pub min_size: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            window_influence: 0.4,
            penalty_k: 0.05,
            size_lr: 0.3,
            mode: OutputMode::Axis,
            min_size: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: Option<String>,
    pub exemplar_size: usize,
    pub search_size: usize,
    /// Context margin as a fraction of `w + h` (0.5 gives `p = (w + h)/2`).
    pub context_amount: f64,
    /// Search window side relative to the exemplar context side.
    pub search_scale: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            exemplar_size: 127,
            search_size: 255,
            context_amount: 0.5,
            search_scale: None,
        }
    }
}

impl DataConfig {
    /// Defaults to `search_size / exemplar_size`.
    pub fn search_scale(&self) -> f64 {
        self.search_scale
            .unwrap_or(self.search_size as f64 / self.exemplar_size as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub precision_threshold: f64,
    pub reinit_gap: usize,
    pub burn_in: usize,
    pub benchmark_sequences: usize,
    pub benchmark_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            precision_threshold: 20.0,
            reinit_gap: 5,
            burn_in: 5,
            benchmark_sequences: 20,
            benchmark_seed: 1000,
        }
    }
}

impl RunConfig {
    /// Desk-scale preset: reduced widths and crops with the same stride
    /// contract, few refinement regions, short schedule.
    pub fn tiny() -> Self {
        let mut c = Self {
            backbone: BackboneConfig::tiny(),
            ..Self::default()
        };
        c.rpn.anchor_base_scale = 4.0;
        c.rpn.template_crop = 4;
        c.refinement.channels = 8;
        c.refinement.box_branch_size = 13;
        c.refinement.box_hidden = 64;
        c.refinement.mask_channels = 8;
        c.refinement.regions_per_image = 4;
        c.data.exemplar_size = 64;
        c.data.search_size = 128;
        c.training.epochs = 6;
        c.training.steps_per_epoch = 40;
        c.training.warmup_epochs = 1;
        c.training.warmup_lr = 2e-3;
        c.training.start_lr = 1e-2;
        c.training.end_lr = 1e-3;
        c.training.backbone_frozen_epochs = 0;
        c.training.backbone_lr_factor = 1.0;
        c.training.batch_size = 4;
        c.training.grad_clip = 5.0;
        c.synthetic = SyntheticSpec::tiny();
        c
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 over the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.num_stages != 5 {
            return Err(Error::Config(format!("num_stages must be 5, got {}", b.num_stages)));
        }
        if b.final_stride != 8 {
            return Err(Error::Config(format!("final_stride must be 8, got {}", b.final_stride)));
        }
        if b.channels_per_stage.len() != 5 || b.channels_per_stage.contains(&0) {
            return Err(Error::Config("channels_per_stage needs 5 positive widths".into()));
        }
        if b.adjusted_channels == 0 || b.adjusted_channels % 8 != 0 {
            return Err(Error::Config("adjusted_channels must be a positive multiple of 8".into()));
        }
        let d = &self.data;
        let feat_z = d.exemplar_size / 8;
        let feat_x = d.search_size / 8;
        if self.rpn.template_crop == 0 || self.rpn.template_crop > feat_z || feat_z > feat_x {
            return Err(Error::Config(format!(
                "template_crop {} incompatible with exemplar features {feat_z} and search features {feat_x}",
                self.rpn.template_crop
            )));
        }
        if self.rpn.anchor_ratios.is_empty() || self.rpn.anchor_ratios.iter().any(|r| *r <= 0.0) {
            return Err(Error::Config("anchor ratios must be positive".into()));
        }
        if !(self.rpn.neg_iou <= self.rpn.pos_iou) {
            return Err(Error::Config("neg_iou must not exceed pos_iou".into()));
        }
        let t = &self.training;
        for (name, v) in [
            ("lambda1", t.lambda1),
            ("lambda2", t.lambda2),
            ("lambda3", t.lambda3),
            ("weight_decay", t.weight_decay),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        if t.epochs == 0 || t.batch_size == 0 || t.warmup_epochs > t.epochs {
            return Err(Error::Config("invalid training schedule".into()));
        }
        let r = &self.refinement;
        if r.mask_size != 4 * r.mask_pool {
            return Err(Error::Config("mask_size must be 4 × mask_pool".into()));
        }
        if !(0.0..=1.0).contains(&self.tracker.window_influence) || self.tracker.size_lr < 0.0 {
            return Err(Error::Config("tracker penalties out of range".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_values() {
        let c = RunConfig::default();
        assert_eq!(c.training.lambda1, 0.2);
        assert_eq!(c.training.lambda2, 0.2);
        assert_eq!(c.training.lambda3, 0.1);
        assert_eq!(c.rpn.anchor_ratios, vec![0.33, 0.5, 1.0, 2.0, 3.0]);
        assert_eq!((c.data.exemplar_size, c.data.search_size), (127, 255));
        assert!(c.attention.spatial_sa && c.attention.cross_attn && c.refinement.enabled);
        c.validate().unwrap();
        RunConfig::tiny().validate().unwrap();
    }

    #[test]
    fn unknown_key_is_rejected_with_its_name() {
        let err = RunConfig::from_toml_str("[attention]\nspatial_sa = true\nbogus_toggle = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus_toggle"), "{err}");
        let err = RunConfig::from_toml_str("mystery = 3\n").unwrap_err();
        assert!(err.to_string().contains("mystery"), "{err}");
    }

    #[test]
    fn toml_round_trip_and_hash_stability() {
        let c = RunConfig::tiny();
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut d = c.clone();
        d.seed += 1;
        assert_ne!(d.hash(), c.hash());
    }

    #[test]
    fn rejects_wrong_stage_count_and_stride() {
        let mut c = RunConfig::default();
        c.backbone.num_stages = 4;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.backbone.final_stride = 16;
        assert!(c.validate().is_err());
    }
}
