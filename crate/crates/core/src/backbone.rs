//! Five-stage residual feature extractor with a fixed stride-8 contract.
//!
//! Layout and stride arithmetic (input side `s`):
//!
//! | stage | op                                               | side       | stride |
//! |-------|--------------------------------------------------|------------|--------|
//! | 1     | conv 4×4 /2 pad 1, ReLU                          | ⌊s/2⌋      | 2      |
//! | 2     | residual block, conv 4×4 /2 pad 1 + conv 3×3     | ⌊s/4⌋      | 4      |
//! | 3     | residual block, conv 4×4 /2 pad 1 + conv 3×3     | ⌊s/8⌋      | 8      |
//! | 4     | residual block, 3×3 dilation 2                   | ⌊s/8⌋      | 8      |
//! | 5     | residual block, 3×3 dilation 4                   | ⌊s/8⌋      | 8      |
//!
//! A 4×4 stride-2 convolution with padding 1 maps `n ↦ ⌊n/2⌋`, and the
//! matching 2×2 stride-2 projection shortcut does the same, so 127 → 15 and
//! 255 → 31. Stages 3–5 are then projected to `adjusted_channels` by a 1×1
//! convolution without nonlinearity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvGeometry, Tape, Var};
use crate::config::BackboneConfig;
use crate::error::{shape_err, Error, Result};
use crate::nn::Conv2d;
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

const PREFIX: &str = "backbone";

/// Pixel scaling applied to `[0, 255]` crops before the stem.
const PIXEL_SCALE: f64 = 1.0 / 63.75;
const PIXEL_SHIFT: f64 = -2.0;

/// Dense `C×H×W` activation with its stride in input pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn side(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }
}

/// Stage outputs: 1–2 raw, 3–5 after channel adjustment.
#[derive(Clone, Debug)]
pub struct StageBundle {
    pub stages: [FeatureMap; 5],
}

impl StageBundle {
    pub fn stage(&self, k: usize) -> &FeatureMap {
        &self.stages[k - 1]
    }
}

/// Tape-level stage outputs.
#[derive(Clone, Copy, Debug)]
pub struct StageVars<'t> {
    pub stages: [Var<'t>; 5],
}

impl<'t> StageVars<'t> {
    /// Adjusted stages 3, 4 and 5.
    pub fn deep(&self) -> [Var<'t>; 3] {
        [self.stages[2], self.stages[3], self.stages[4]]
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResidualBlock {
    fn down(name: &str, cin: usize, cout: usize) -> Self {
        Self {
            conv1: Conv2d::new(format!("{name}.conv1"), cin, cout, ConvGeometry::new(4, 2, 1, 1), true),
            conv2: Conv2d::new(format!("{name}.conv2"), cout, cout, ConvGeometry::same(3, 1), true),
            shortcut: Some(Conv2d::new(format!("{name}.proj"), cin, cout, ConvGeometry::new(2, 2, 0, 1), false)),
        }
    }

    fn dilated(name: &str, cin: usize, cout: usize, dilation: usize) -> Self {
        Self {
            conv1: Conv2d::new(format!("{name}.conv1"), cin, cout, ConvGeometry::same(3, dilation), true),
            conv2: Conv2d::new(format!("{name}.conv2"), cout, cout, ConvGeometry::same(3, dilation), true),
            shortcut: (cin != cout)
                .then(|| Conv2d::new(format!("{name}.proj"), cin, cout, ConvGeometry::new(1, 1, 0, 1), false)),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.conv1.init(store, Init::he(), rng);
        // damp the residual branch; there is no normalization layer
        self.conv2.init(store, Init::FanIn { gain: 0.5 }, rng);
        if let Some(s) = &self.shortcut {
            s.init(store, Init::FanIn { gain: 1.0 }, rng);
        }
    }

    fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let y = self.conv1.forward(tape, store, x).relu();
        let y = self.conv2.forward(tape, store, y);
        let skip = match &self.shortcut {
            Some(s) => s.forward(tape, store, x),
            None => x,
        };
        y.add(skip).relu()
    }
}

/// Parameter-free description of the extractor.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    stem: Conv2d,
    blocks: [ResidualBlock; 4],
    adjust: [Conv2d; 3],
}

impl Backbone {
    pub fn new(config: &BackboneConfig) -> Result<Self> {
        if config.num_stages != 5 {
            return Err(Error::Config(format!("backbone needs 5 stages, got {}", config.num_stages)));
        }
        if config.final_stride != 8 {
            return Err(Error::Config(format!("final stride must be 8, got {}", config.final_stride)));
        }
        let ch = &config.channels_per_stage;
        if ch.len() != 5 || ch.contains(&0) || config.adjusted_channels == 0 {
            return Err(Error::Config("channels_per_stage needs 5 positive widths".into()));
        }
        let a = config.adjusted_channels;
        Ok(Self {
            config: config.clone(),
            stem: Conv2d::new(format!("{PREFIX}.stage1.conv"), 3, ch[0], ConvGeometry::new(4, 2, 1, 1), true),
            blocks: [
                ResidualBlock::down(&format!("{PREFIX}.stage2"), ch[0], ch[1]),
                ResidualBlock::down(&format!("{PREFIX}.stage3"), ch[1], ch[2]),
                ResidualBlock::dilated(&format!("{PREFIX}.stage4"), ch[2], ch[3], 2),
                ResidualBlock::dilated(&format!("{PREFIX}.stage5"), ch[3], ch[4], 4),
            ],
            adjust: [
                Conv2d::new(format!("{PREFIX}.adjust3"), ch[2], a, ConvGeometry::new(1, 1, 0, 1), true),
                Conv2d::new(format!("{PREFIX}.adjust4"), ch[3], a, ConvGeometry::new(1, 1, 0, 1), true),
                Conv2d::new(format!("{PREFIX}.adjust5"), ch[4], a, ConvGeometry::new(1, 1, 0, 1), true),
            ],
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.stem.init(store, Init::he(), rng);
        for b in &self.blocks {
            b.init(store, rng);
        }
        for a in &self.adjust {
            a.init(store, Init::FanIn { gain: 1.0 }, rng);
        }
    }

    /// Strides of stages 1..=5.
    pub fn strides() -> [usize; 5] {
        [2, 4, 8, 8, 8]
    }

    /// Spatial side of each stage for a square input of side `s`, from the
    /// layer geometry.
    pub fn stage_sides(&self, s: usize) -> Option<[usize; 5]> {
        let s1 = self.stem.geom.out_len(s)?;
        let s2 = self.blocks[0].conv1.geom.out_len(s1)?;
        let s3 = self.blocks[1].conv1.geom.out_len(s2)?;
        let s4 = self.blocks[2].conv1.geom.out_len(s3)?;
        let s5 = self.blocks[3].conv1.geom.out_len(s4)?;
        Some([s1, s2, s3, s4, s5])
    }

    /// Smallest accepted crop side (stage 3 must be at least 1×1).
    pub const MIN_SIDE: usize = 8;

    pub fn check_crop(&self, shape: &[usize]) -> Result<usize> {
        let &[c, h, w] = shape else {
            return shape_err(format!("crop must be 3×S×S, got {shape:?}"));
        };
        if c != 3 || h != w {
            return shape_err(format!("crop must be a square 3-channel image, got {shape:?}"));
        }
        if h < Self::MIN_SIDE {
            return shape_err(format!("crop side {h} smaller than {}", Self::MIN_SIDE));
        }
        if self.config.tiny_mode {
            if h % self.config.final_stride != 0 {
                return shape_err(format!("tiny-mode crop side {h} is not a multiple of 8"));
            }
        } else if h != 127 && h != 255 {
            return shape_err(format!("crop side must be 127 or 255, got {h}"));
        }
        Ok(h)
    }

    /// Forward pass on a `3×S×S` crop with pixel values in `[0, 255]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, crop: Var<'t>) -> StageVars<'t> {
        let x = crop.affine(PIXEL_SCALE, PIXEL_SHIFT);
        let s1 = self.stem.forward(tape, store, x).relu();
        let s2 = self.blocks[0].forward(tape, store, s1);
        let s3 = self.blocks[1].forward(tape, store, s2);
        let s4 = self.blocks[2].forward(tape, store, s3);
        let s5 = self.blocks[3].forward(tape, store, s4);
        StageVars {
            stages: [
                s1,
                s2,
                self.adjust[0].forward(tape, store, s3),
                self.adjust[1].forward(tape, store, s4),
                self.adjust[2].forward(tape, store, s5),
            ],
        }
    }
}

/// A backbone together with its parameters.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub backbone: Backbone,
    pub params: ParamStore,
}

/// Build a randomly initialized (fan-in scaled) extractor.
pub fn build_backbone(config: &BackboneConfig, seed: u64) -> Result<FeatureExtractor> {
    let backbone = Backbone::new(config)?;
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    backbone.init(&mut params, &mut rng);
    Ok(FeatureExtractor { backbone, params })
}

impl FeatureExtractor {
    pub fn extract(&self, crop: &Tensor) -> Result<StageBundle> {
        self.backbone.check_crop(crop.shape())?;
        let tape = Tape::inference();
        let vars = self.backbone.forward(&tape, &self.params, tape.constant(crop.clone()));
        let strides = Backbone::strides();
        Ok(StageBundle {
            stages: std::array::from_fn(|i| FeatureMap {
                data: (*vars.stages[i].value()).clone(),
                stride: strides[i],
            }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_configs() {
        let mut c = BackboneConfig::tiny();
        c.num_stages = 4;
        assert!(build_backbone(&c, 0).is_err());
        let mut c = BackboneConfig::tiny();
        c.final_stride = 16;
        assert!(build_backbone(&c, 0).is_err());
    }

    #[test]
    fn rejects_bad_crops() {
        let ex = build_backbone(&BackboneConfig::tiny(), 0).unwrap();
        assert!(ex.extract(&Tensor::zeros(&[3, 64, 56])).is_err());
        assert!(ex.extract(&Tensor::zeros(&[3, 60, 60])).is_err());
        assert!(ex.extract(&Tensor::zeros(&[1, 64, 64])).is_err());
        let default_layout = Backbone::new(&BackboneConfig::default()).unwrap();
        assert!(default_layout.check_crop(&[3, 128, 128]).is_err());
        assert!(default_layout.check_crop(&[3, 127, 127]).is_ok());
    }

    #[test]
    fn tiny_64_gives_8x8_stride_8() {
        let ex = build_backbone(&BackboneConfig::tiny(), 1).unwrap();
        let b = ex.extract(&Tensor::full(&[3, 64, 64], 100.0)).unwrap();
        assert_eq!(b.stage(5).side(), (8, 8));
        assert_eq!(b.stage(5).stride, 8);
        assert_eq!(b.stage(5).channels(), 16);
        assert_eq!(b.stage(1).side(), (32, 32));
        assert_eq!(b.stage(2).side(), (16, 16));
    }

    #[test]
    fn default_layout_shape_arithmetic() {
        let bb = Backbone::new(&BackboneConfig::default()).unwrap();
        assert_eq!(bb.stage_sides(127).unwrap(), [63, 31, 15, 15, 15]);
        assert_eq!(bb.stage_sides(255).unwrap(), [127, 63, 31, 31, 31]);
    }
}
