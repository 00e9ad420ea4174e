//! Single-region refinement: fused correlation features, deformable RoI
//! pooling, a box head and a mask head.
//!
//! Per-stage correlations of the attentional features are projected by 1×1
//! convolutions and summed into a trunk at response resolution. The box
//! branch resamples the trunk to `box_branch_size`, the mask branch to
//! `mask_branch_size` and adds stage-1/2 search features sampled at the same
//! crop positions. Each branch carries a [`FeatureFrame`] mapping search-crop
//! pixels to its cell coordinates, so regions given in crop pixels can be
//! pooled directly.

use rand::Rng;

use crate::autograd::{ConvGeometry, RoiBox, SampleMode, Tape, Var};
use crate::config::RefinementConfig;
use crate::error::{Error, Result};
use crate::geometry::{BBox, BoxDelta};
use crate::nn::{Conv2d, Linear};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

/// Cell `u` of a feature map is centered on crop pixel `origin + stride·u`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureFrame {
    pub origin: f64,
    pub stride: f64,
}

impl FeatureFrame {
    pub fn to_cell(&self, px: f64) -> f64 {
        (px - self.origin) / self.stride
    }

    pub fn to_pixel(&self, u: f64) -> f64 {
        self.origin + self.stride * u
    }

    /// The frame after a half-pixel-center resize from `from` to `to` cells.
    pub fn resized(&self, from: usize, to: usize) -> FeatureFrame {
        let r = from as f64 / to as f64;
        FeatureFrame {
            origin: self.to_pixel(0.5 * r - 0.5),
            stride: self.stride * r,
        }
    }

    pub fn roi(&self, b: &BBox) -> RoiBox {
        RoiBox {
            y0: self.to_cell(b.y0()),
            x0: self.to_cell(b.x0()),
            y1: self.to_cell(b.y1()),
            x1: self.to_cell(b.x1()),
        }
    }
}

/// Sample `src` (whose cells follow `src_frame`) at the cell centers of an
/// `n×n` grid following `dst_frame`.
pub fn align<'t>(src: Var<'t>, src_frame: FeatureFrame, dst_frame: FeatureFrame, n: usize) -> Var<'t> {
    let scale = dst_frame.stride / src_frame.stride;
    let off = src_frame.to_cell(dst_frame.origin);
    src.affine_resample(n, n, (scale, off), (scale, off), SampleMode::Clamp)
}

#[derive(Clone, Copy, Debug)]
pub struct FusedVars<'t> {
    pub box_branch: Var<'t>,
    pub mask_branch: Var<'t>,
    pub box_frame: FeatureFrame,
    pub mask_frame: FeatureFrame,
}

/// Frames of the raw backbone stages 1 and 2.
pub fn low_stage_frames() -> [FeatureFrame; 2] {
    [
        FeatureFrame { origin: 0.5, stride: 2.0 },
        FeatureFrame { origin: 1.5, stride: 4.0 },
    ]
}

/// Clip a crop-pixel box to `[-0.5, side-0.5]²` and reject empty results.
pub fn clip_region(b: &BBox, side: usize) -> Result<BBox> {
    let c = b.clip_to_image(side, side);
    if c.w > 1e-6 && c.h > 1e-6 && c.is_valid() {
        Ok(c)
    } else {
        Err(Error::InvalidBox(format!("region {b:?} is empty after clipping")))
    }
}

/// Deformable RoI pooling on tensors. `offsets` is `[2, out, out]` in units
/// of the RoI size, scaled by `gamma`; `None` gives plain aligned pooling.
pub fn deformable_roi_pool(features: &Tensor, roi: RoiBox, out: usize, samples: usize, offsets: Option<(&Tensor, f64)>) -> Result<Tensor> {
    features.dims3()?;
    if !(roi.height() > 0.0 && roi.width() > 0.0) {
        return Err(Error::InvalidBox(format!("degenerate RoI {roi:?}")));
    }
    let tape = Tape::inference();
    let off = offsets.map(|(o, g)| (tape.constant(o.clone()), g));
    Ok((*tape.constant(features.clone()).roi_pool(roi, out, samples, off).value()).clone())
}

#[derive(Clone, Debug)]
pub struct RefineModule {
    pub cfg: RefinementConfig,
    pub deform_pool: bool,
    pub response: usize,
    pub response_frame: FeatureFrame,
    pub template_crop: usize,
    fuse: [Conv2d; 3],
    box_align: Conv2d,
    mask_align: Conv2d,
    low: [Conv2d; 2],
    box_offset: Linear,
    mask_offset: Conv2d,
    box_fc: [Linear; 3],
    mask_conv: [Conv2d; 4],
    mask_deconv: Conv2d,
}

impl RefineModule {
    /// `channels` is the attentional feature width, `low_channels` the
    /// widths of backbone stages 1 and 2.
    pub fn new(
        cfg: &RefinementConfig,
        deform_pool: bool,
        channels: usize,
        low_channels: [usize; 2],
        response: usize,
        response_frame: FeatureFrame,
        template_crop: usize,
    ) -> Self {
        let cr = cfg.channels;
        let one = ConvGeometry::new(1, 1, 0, 1);
        let three = ConvGeometry::same(3, 1);
        let pooled = cr * cfg.box_pool * cfg.box_pool;
        let cm = cfg.mask_channels;
        Self {
            fuse: [3, 4, 5].map(|k| Conv2d::new(format!("refine.fuse{k}"), channels, cr, one, false)),
            box_align: Conv2d::new("refine.box_align", cr, cr, one, true),
            mask_align: Conv2d::new("refine.mask_align", cr, cr, one, true),
            low: [0, 1].map(|i| Conv2d::new(format!("refine.low{}", i + 1), low_channels[i], cr, one, false)),
            box_offset: Linear::new("refine.box_offset", pooled, 2 * cfg.box_pool * cfg.box_pool),
            mask_offset: Conv2d::new("refine.mask_offset", cr, 2, three, true),
            box_fc: [
                Linear::new("refine.box_fc1", pooled, cfg.box_hidden),
                Linear::new("refine.box_fc2", cfg.box_hidden, cfg.box_hidden),
                Linear::new("refine.box_fc3", cfg.box_hidden, 4),
            ],
            mask_conv: [0, 1, 2, 3].map(|i| Conv2d::new(format!("refine.mask_conv{}", i + 1), if i == 0 { cr } else { cm }, cm, three, true)),
            mask_deconv: Conv2d::new("refine.mask_deconv", cm, 1, ConvGeometry::new(4, 4, 0, 1), true),
            cfg: cfg.clone(),
            deform_pool,
            response,
            response_frame,
            template_crop,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for c in &self.fuse {
            c.init(store, Init::FanIn { gain: 1.0 }, rng);
        }
        self.box_align.init(store, Init::FanIn { gain: 1.0 }, rng);
        self.mask_align.init(store, Init::FanIn { gain: 1.0 }, rng);
        for c in &self.low {
            c.init(store, Init::FanIn { gain: 0.5 }, rng);
        }
        self.box_offset.init(store, Init::Zeros, rng);
        self.mask_offset.init(store, Init::Zeros, rng);
        self.box_fc[0].init(store, Init::he(), rng);
        self.box_fc[1].init(store, Init::he(), rng);
        self.box_fc[2].init(store, Init::Zeros, rng);
        for c in &self.mask_conv {
            c.init(store, Init::he(), rng);
        }
        // deconv weight is Ci × Co × k × k
        let k = self.mask_deconv.geom.kernel;
        store.insert(
            self.mask_deconv.weight_name(),
            Init::FanIn { gain: 1.0 }.sample(&[self.cfg.mask_channels, 1, k, k], self.cfg.mask_channels, rng),
        );
        store.insert(self.mask_deconv.bias_name(), Tensor::zeros(&[1]));
    }

    /// Number of weights in the two hidden box layers.
    pub fn box_hidden_param_count(&self) -> usize {
        self.box_fc[0].param_count() + self.box_fc[1].param_count()
    }

    pub fn fused<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        z_attn: [Var<'t>; 3],
        x_attn: [Var<'t>; 3],
        low: [Var<'t>; 2],
    ) -> FusedVars<'t> {
        let mut trunk: Option<Var<'t>> = None;
        for s in 0..3 {
            let corr = x_attn[s].depthwise_xcorr(z_attn[s].center_crop(self.template_crop));
            let p = self.fuse[s].forward(tape, store, corr);
            trunk = Some(match trunk {
                Some(t) => t.add(p),
                None => p,
            });
        }
        let trunk = trunk.expect("three stages");
        let r = self.response;
        let (nb, nm) = (self.cfg.box_branch_size, self.cfg.mask_branch_size);
        let box_frame = self.response_frame.resized(r, nb);
        let mask_frame = self.response_frame.resized(r, nm);
        let box_branch = self.box_align.forward(tape, store, trunk.resize_bilinear(nb, nb)).relu();
        let mut mask = self.mask_align.forward(tape, store, trunk.resize_bilinear(nm, nm));
        for (i, f) in low_stage_frames().iter().enumerate() {
            let aligned = align(low[i], *f, mask_frame, nm);
            mask = mask.add(self.low[i].forward(tape, store, aligned));
        }
        FusedVars {
            box_branch,
            mask_branch: mask.relu(),
            box_frame,
            mask_frame,
        }
    }

    pub fn pool_box<'t>(&self, tape: &'t Tape, store: &ParamStore, feat: Var<'t>, roi: RoiBox) -> Var<'t> {
        let (n, s) = (self.cfg.box_pool, self.cfg.pool_samples);
        let plain = feat.roi_pool(roi, n, s, None);
        if !self.deform_pool {
            return plain;
        }
        let off = self.box_offset.forward(tape, store, plain).reshape(&[2, n, n]);
        feat.roi_pool(roi, n, s, Some((off, self.cfg.deform_pool_gamma)))
    }

    pub fn pool_mask<'t>(&self, tape: &'t Tape, store: &ParamStore, feat: Var<'t>, roi: RoiBox) -> Var<'t> {
        let (n, s) = (self.cfg.mask_pool, self.cfg.pool_samples);
        let plain = feat.roi_pool(roi, n, s, None);
        if !self.deform_pool {
            return plain;
        }
        let off = self.mask_offset.forward(tape, store, plain);
        feat.roi_pool(roi, n, s, Some((off, self.cfg.deform_pool_gamma)))
    }

    /// Box head on pooled `C×4×4` features; returns `[1, 4]` deltas.
    pub fn box_head<'t>(&self, tape: &'t Tape, store: &ParamStore, pooled: Var<'t>) -> Var<'t> {
        let h = self.box_fc[0].forward(tape, store, pooled).relu();
        let h = self.box_fc[1].forward(tape, store, h).relu();
        self.box_fc[2].forward(tape, store, h)
    }

    /// Mask head on pooled `C×16×16` features; returns `[1, 64, 64]` logits.
    pub fn mask_head<'t>(&self, tape: &'t Tape, store: &ParamStore, pooled: Var<'t>) -> Var<'t> {
        let mut h = pooled;
        for c in &self.mask_conv {
            h = c.forward(tape, store, h).relu();
        }
        let w = tape.param(store, &self.mask_deconv.weight_name());
        let b = tape.param(store, &self.mask_deconv.bias_name());
        h.conv_transpose2d(w, Some(b), self.mask_deconv.geom)
    }

    /// Box deltas for a region in crop pixels.
    pub fn refine_box<'t>(&self, tape: &'t Tape, store: &ParamStore, fused: &FusedVars<'t>, region: &BBox) -> Var<'t> {
        let pooled = self.pool_box(tape, store, fused.box_branch, fused.box_frame.roi(region));
        self.box_head(tape, store, pooled)
    }

    /// Mask logits over a region in crop pixels.
    pub fn refine_mask<'t>(&self, tape: &'t Tape, store: &ParamStore, fused: &FusedVars<'t>, region: &BBox) -> Var<'t> {
        let pooled = self.pool_mask(tape, store, fused.mask_branch, fused.mask_frame.roi(region));
        self.mask_head(tape, store, pooled)
    }
}

/// Apply `[1, 4]` head output to a region.
pub fn apply_delta(delta: &Tensor, region: &BBox) -> BBox {
    let d = delta.data();
    BoxDelta::from_array([d[0], d[1], d[2], d[3]]).decode(region)
}

/// Resample a soft `1×S×S` crop mask onto the `m×m` grid of a region.
pub fn region_mask_target(mask: &Tensor, region: &BBox, m: usize) -> Tensor {
    let tape = Tape::inference();
    let (sy, sx) = (region.h / m as f64, region.w / m as f64);
    let t = tape.constant(mask.clone()).affine_resample(
        m,
        m,
        (sy, region.y0() + 0.5 * sy),
        (sx, region.x0() + 0.5 * sx),
        SampleMode::Zero,
    );
    (*t.value()).clone()
}
