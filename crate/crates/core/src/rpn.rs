//! Siamese region proposal blocks on depth-wise correlation, weighted stage
//! fusion, anchors and anchor labels.
//!
//! Channel layouts on an `R×R` response map with `k` anchors per cell:
//! classification `[2k, R, R]` with background logits in channels `0..k` and
//! target logits in `k..2k`; regression `[4k, R, R]` with coordinate `d` of
//! anchor `a` in channel `d·k + a`. Flat anchor index is `a·R² + i·R + j`.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::{sigmoid, ConvGeometry, SoftmaxAxis, Tape, Var};
use crate::config::RpnConfig;
use crate::error::{shape_err, Error, Result};
use crate::geometry::{BBox, BoxDelta};
use crate::nn::Conv2d;
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

/// Pre-defined boxes over the response grid, in search-crop pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub ratios: Vec<f64>,
    pub base_scale: f64,
    pub stride: usize,
    /// Response side `R`.
    pub size: usize,
    /// Crop-pixel coordinate of response cell 0.
    pub origin: f64,
    pub boxes: Vec<BBox>,
}

impl AnchorSet {
    /// Anchors for a response map produced by correlating a `template_side`
    /// kernel over stride-8 search features. A stride-8 feature cell `u` is
    /// centered on crop pixel `8u + 3.5`, so response cell `j` sits at
    /// `8(j + (T−1)/2) + 3.5`.
    pub fn new(cfg: &RpnConfig, size: usize, stride: usize) -> Self {
        let s = stride as f64;
        let origin = s * (cfg.template_crop as f64 - 1.0) / 2.0 + (s - 1.0) / 2.0;
        let area = (s * cfg.anchor_base_scale).powi(2);
        let mut boxes = Vec::with_capacity(cfg.anchor_ratios.len() * size * size);
        for &r in &cfg.anchor_ratios {
            // r = h / w
            let w = (area / r).sqrt();
            let h = w * r;
            for i in 0..size {
                for j in 0..size {
                    boxes.push(BBox::new(origin + s * j as f64, origin + s * i as f64, w, h));
                }
            }
        }
        Self {
            ratios: cfg.anchor_ratios.clone(),
            base_scale: cfg.anchor_base_scale,
            stride,
            size,
            origin,
            boxes,
        }
    }

    pub fn k(&self) -> usize {
        self.ratios.len()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// `(anchor, row, col)` of a flat index.
    pub fn unflatten(&self, idx: usize) -> (usize, usize, usize) {
        let rr = self.size * self.size;
        (idx / rr, (idx % rr) / self.size, idx % self.size)
    }

    /// Flat index of the cell nearest the response-map center for anchor 0.
    pub fn center_cell(&self) -> (usize, usize) {
        (self.size / 2, self.size / 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

pub fn label_anchors(anchors: &AnchorSet, gt: &BBox, pos_iou: f64, neg_iou: f64) -> Result<Vec<AnchorLabel>> {
    if !gt.is_valid() {
        return Err(Error::InvalidBox(format!("degenerate ground truth {gt:?}")));
    }
    Ok(anchors
        .boxes
        .iter()
        .map(|a| {
            let iou = a.iou(gt);
            if iou > pos_iou {
                AnchorLabel::Positive
            } else if iou < neg_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect())
}

/// Loss targets for one search image.
#[derive(Clone, Debug)]
pub struct AnchorTargets {
    /// `[k, R, R]`, 1 for target.
    pub cls_labels: Tensor,
    /// `[k, R, R]`; `1/n` on the `n` sampled anchors.
    pub cls_weight: Tensor,
    /// `[4k, R, R]` deltas for positive anchors.
    pub reg_target: Tensor,
    /// `[4k, R, R]`; `1/n_pos` on positive anchors.
    pub reg_weight: Tensor,
    pub num_pos: usize,
    pub num_neg: usize,
}

/// Subsample at most `max_total` labeled anchors with at most `max_pos`
/// positives and build the regression targets.
pub fn anchor_targets(
    anchors: &AnchorSet,
    labels: &[AnchorLabel],
    gt: &BBox,
    max_total: usize,
    max_pos: usize,
    rng: &mut impl Rng,
) -> AnchorTargets {
    let (k, r) = (anchors.k(), anchors.size);
    let rr = r * r;
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == AnchorLabel::Positive).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == AnchorLabel::Negative).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(max_pos);
    neg.truncate(max_total.saturating_sub(pos.len()));
    let mut cls_labels = Tensor::zeros(&[k, r, r]);
    let mut cls_weight = Tensor::zeros(&[k, r, r]);
    let mut reg_target = Tensor::zeros(&[4 * k, r, r]);
    let mut reg_weight = Tensor::zeros(&[4 * k, r, r]);
    let n = pos.len() + neg.len();
    for &i in pos.iter().chain(&neg) {
        cls_weight.data_mut()[i] = 1.0 / n as f64;
    }
    for &i in &pos {
        cls_labels.data_mut()[i] = 1.0;
        let (a, cell) = (i / rr, i % rr);
        let d = BoxDelta::encode(gt, &anchors.boxes[i]).as_array();
        for (c, v) in d.iter().enumerate() {
            let ch = c * k + a;
            reg_target.data_mut()[ch * rr + cell] = *v;
            reg_weight.data_mut()[ch * rr + cell] = 1.0 / pos.len() as f64;
        }
    }
    AnchorTargets {
        cls_labels,
        cls_weight,
        reg_target,
        reg_weight,
        num_pos: pos.len(),
        num_neg: neg.len(),
    }
}

/// Depth-wise valid cross-correlation on tensors.
pub fn depthwise_xcorr(search: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (cs, hs, ws) = search.dims3()?;
    let (ck, hk, wk) = kernel.dims3()?;
    if cs != ck {
        return shape_err(format!("xcorr channel mismatch {cs} vs {ck}"));
    }
    if hk > hs || wk > ws {
        return shape_err(format!("xcorr kernel {hk}×{wk} larger than search {hs}×{ws}"));
    }
    let tape = Tape::inference();
    let out = tape.constant(search.clone()).depthwise_xcorr(tape.constant(kernel.clone()));
    Ok((*out.value()).clone())
}

/// Per-stage outputs (or their fusion).
#[derive(Clone, Debug)]
pub struct RpnOutput {
    pub cls: Tensor,
    pub reg: Tensor,
    pub fusion_weights: Option<[f64; 3]>,
}

impl RpnOutput {
    /// Target probability per anchor, flat anchor-major order.
    pub fn scores(&self) -> Vec<f64> {
        target_probabilities(&self.cls)
    }

    pub fn deltas(&self, idx: usize, k: usize) -> BoxDelta {
        let rr = self.reg.len() / (4 * k);
        let (a, cell) = (idx / rr, idx % rr);
        BoxDelta::from_array(std::array::from_fn(|d| self.reg.data()[(d * k + a) * rr + cell]))
    }
}

/// Two-way softmax target probability for each anchor of a `[2k, R, R]` map.
pub fn target_probabilities(cls: &Tensor) -> Vec<f64> {
    let n = cls.len() / 2;
    (0..n).map(|i| sigmoid(cls.data()[n + i] - cls.data()[i])).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct RpnVars<'t> {
    pub cls: Var<'t>,
    pub reg: Var<'t>,
}

/// One stage's proposal block: a 3×3 adjust conv (+ReLU) per branch and
/// head, depth-wise correlation, then a 1×1 hidden layer and 1×1 output.
#[derive(Clone, Debug)]
pub struct RpnBlock {
    pub prefix: String,
    pub channels: usize,
    pub k: usize,
    pub template_crop: usize,
    adjust: [Conv2d; 4],
    hidden: [Conv2d; 2],
    head: [Conv2d; 2],
}

impl RpnBlock {
    pub fn new(prefix: impl Into<String>, channels: usize, k: usize, template_crop: usize) -> Self {
        let prefix = prefix.into();
        let c = channels;
        let three = ConvGeometry::same(3, 1);
        let one = ConvGeometry::new(1, 1, 0, 1);
        Self {
            adjust: ["cls_z", "cls_x", "reg_z", "reg_x"].map(|n| Conv2d::new(format!("{prefix}.{n}"), c, c, three, true)),
            hidden: ["cls_hidden", "reg_hidden"].map(|n| Conv2d::new(format!("{prefix}.{n}"), c, c, one, true)),
            head: [
                Conv2d::new(format!("{prefix}.cls_head"), c, 2 * k, one, true),
                Conv2d::new(format!("{prefix}.reg_head"), c, 4 * k, one, true),
            ],
            prefix,
            channels,
            k,
            template_crop,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for c in self.adjust.iter().chain(&self.hidden) {
            c.init(store, Init::he(), rng);
        }
        for c in &self.head {
            c.init(store, Init::FanIn { gain: 0.1 }, rng);
        }
    }

    /// Conv layers for parameter counting and inspection.
    pub fn layers(&self) -> impl Iterator<Item = &Conv2d> {
        self.adjust.iter().chain(&self.hidden).chain(&self.head)
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, z: Var<'t>, x: Var<'t>) -> RpnVars<'t> {
        let zc = z.center_crop(self.template_crop);
        let branch = |i: usize| {
            let kz = self.adjust[2 * i].forward(tape, store, zc).relu();
            let sx = self.adjust[2 * i + 1].forward(tape, store, x).relu();
            let corr = sx.depthwise_xcorr(kz);
            let h = self.hidden[i].forward(tape, store, corr).relu();
            self.head[i].forward(tape, store, h)
        };
        RpnVars {
            cls: branch(0),
            reg: branch(1),
        }
    }
}

pub const FUSION_CLS: &str = "rpn.fusion.cls";
pub const FUSION_REG: &str = "rpn.fusion.reg";

/// Softmax-normalized weighted sum of per-stage maps. `logits` is `[1, n]`.
pub fn fuse<'t>(maps: &[Var<'t>], logits: Var<'t>) -> Var<'t> {
    let w = logits.softmax(SoftmaxAxis::Row);
    let mut acc: Option<Var<'t>> = None;
    for (i, m) in maps.iter().enumerate() {
        let t = m.scaled_by(w.element(i));
        acc = Some(match acc {
            Some(a) => a.add(t),
            None => t,
        });
    }
    acc.expect("fuse needs at least one map")
}

pub fn fuse_stages<'t>(outputs: &[RpnVars<'t>], cls_logits: Var<'t>, reg_logits: Var<'t>) -> RpnVars<'t> {
    let cls: Vec<_> = outputs.iter().map(|o| o.cls).collect();
    let reg: Vec<_> = outputs.iter().map(|o| o.reg).collect();
    RpnVars {
        cls: fuse(&cls, cls_logits),
        reg: fuse(&reg, reg_logits),
    }
}

/// Tensor-level fusion of exactly three stage outputs.
pub fn fuse_outputs(outputs: &[RpnOutput], cls_logits: [f64; 3], reg_logits: [f64; 3]) -> Result<RpnOutput> {
    if outputs.len() != 3 {
        return Err(Error::Shape(format!("fusion expects 3 stage outputs, got {}", outputs.len())));
    }
    if outputs.iter().any(|o| o.cls.shape() != outputs[0].cls.shape() || o.reg.shape() != outputs[0].reg.shape()) {
        return shape_err("stage outputs differ in shape");
    }
    let tape = Tape::inference();
    let vars: Vec<RpnVars> = outputs
        .iter()
        .map(|o| RpnVars {
            cls: tape.constant(o.cls.clone()),
            reg: tape.constant(o.reg.clone()),
        })
        .collect();
    let cl = tape.constant(Tensor::from_parts(vec![1, 3], cls_logits.to_vec()));
    let rl = tape.constant(Tensor::from_parts(vec![1, 3], reg_logits.to_vec()));
    let f = fuse_stages(&vars, cl, rl);
    let w = cl.softmax(SoftmaxAxis::Row).value();
    Ok(RpnOutput {
        cls: (*f.cls.value()).clone(),
        reg: (*f.reg.value()).clone(),
        fusion_weights: Some([w.data()[0], w.data()[1], w.data()[2]]),
    })
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub index: usize,
    /// Decoded box in search-crop pixels.
    pub bbox: BBox,
    /// Unpenalized target probability.
    pub score: f64,
    pub penalized: f64,
}

/// Decode every anchor of a `[4k, R, R]` regression map.
pub fn decode_all(reg: &Tensor, anchors: &AnchorSet) -> Vec<BBox> {
    let k = anchors.k();
    let rr = anchors.size * anchors.size;
    anchors
        .boxes
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let (an, cell) = (i / rr, i % rr);
            BoxDelta::from_array(std::array::from_fn(|d| reg.data()[(d * k + an) * rr + cell])).decode(a)
        })
        .collect()
}

/// Highest penalized score. `penalize` maps raw scores and decoded boxes to
/// penalized scores (identity when no penalties apply).
pub fn select_best_proposal(
    out: &RpnOutput,
    anchors: &AnchorSet,
    penalize: impl Fn(&[f64], &[BBox]) -> Vec<f64>,
) -> Proposal {
    let scores = out.scores();
    let boxes = decode_all(&out.reg, anchors);
    let pen = penalize(&scores, &boxes);
    let index = argmax_first(&pen);
    Proposal {
        index,
        bbox: boxes[index],
        score: scores[index],
        penalized: pen[index],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_anchors() -> AnchorSet {
        AnchorSet::new(&RpnConfig::default(), 25, 8)
    }

    #[test]
    fn anchor_count_and_positive_sizes() {
        let a = default_anchors();
        assert_eq!(a.len(), 25 * 25 * 5);
        assert!(a.boxes.iter().all(|b| b.w > 0.0 && b.h > 0.0));
        // ratio 1 anchor is base_scale·stride square
        let b = a.boxes[2 * 625];
        assert!((b.w - 64.0).abs() < 1e-9 && (b.h - 64.0).abs() < 1e-9);
    }

    #[test]
    fn labels_cover_the_three_cases() {
        let a = default_anchors();
        let gt = a.boxes[2 * 625 + 300];
        let labels = label_anchors(&a, &gt, 0.6, 0.3).unwrap();
        assert_eq!(labels[2 * 625 + 300], AnchorLabel::Positive);
        assert!(labels.contains(&AnchorLabel::Negative));
        assert!(label_anchors(&a, &BBox::new(0.0, 0.0, 0.0, 5.0), 0.6, 0.3).is_err());
    }

    #[test]
    fn sampling_caps() {
        let a = default_anchors();
        let gt = BBox::new(127.0, 127.0, 64.0, 64.0);
        let labels = label_anchors(&a, &gt, 0.6, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = anchor_targets(&a, &labels, &gt, 64, 16, &mut rng);
        assert!(t.num_pos <= 16 && t.num_pos >= 1);
        assert_eq!(t.num_pos + t.num_neg, 64);
        assert!((t.cls_weight.sum() - 1.0).abs() < 1e-12);
        assert!((t.reg_weight.sum() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn xcorr_of_ones() {
        let s = Tensor::ones(&[2, 5, 5]);
        let k = Tensor::ones(&[2, 3, 3]);
        let o = depthwise_xcorr(&s, &k).unwrap();
        assert_eq!(o.shape(), &[2, 3, 3]);
        assert!(o.data().iter().all(|&v| v == 9.0));
        assert!(depthwise_xcorr(&k, &s).is_err());
    }

    #[test]
    fn fusion_equal_logits_is_mean() {
        let mk = |v: f64| RpnOutput {
            cls: Tensor::full(&[10, 2, 2], v),
            reg: Tensor::full(&[20, 2, 2], -v),
            fusion_weights: None,
        };
        let f = fuse_outputs(&[mk(1.0), mk(2.0), mk(6.0)], [0.0; 3], [0.5; 3]).unwrap();
        assert!(f.cls.data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
        assert!(f.reg.data().iter().all(|&v| (v + 3.0).abs() < 1e-12));
        assert!(fuse_outputs(&[mk(1.0)], [0.0; 3], [0.0; 3]).is_err());
    }

    #[test]
    fn uniform_scores_pick_index_zero() {
        let a = AnchorSet::new(&RpnConfig::default(), 3, 8);
        let out = RpnOutput {
            cls: Tensor::zeros(&[10, 3, 3]),
            reg: Tensor::zeros(&[20, 3, 3]),
            fusion_weights: None,
        };
        let p = select_best_proposal(&out, &a, |s, _| s.to_vec());
        assert_eq!(p.index, 0);
        assert_eq!(p.bbox, a.boxes[0]);
    }
}
