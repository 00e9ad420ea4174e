//! Loss assembly, region sampling, learning-rate schedule, SGD with momentum
//! and the training loop.
//!
//! `total = rpn_cls + λ1·rpn_reg + λ2·refine_box + λ3·refine_mask`, where
//! `rpn_cls` is the two-way NLL averaged over sampled anchors, `rpn_reg` the
//! smooth-L1 over positive anchors (averaged per anchor), `refine_box` the
//! smooth-L1 of refined deltas averaged over regions and `refine_mask` the
//! per-pixel BCE averaged over regions that have a mask.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TrainingConfig};
use crate::data::crop::crop_exemplar_search;
use crate::data::{CropPair, Mask, SequenceRecord};
use crate::error::{Error, Result};
use crate::geometry::{BBox, BoxDelta};
use crate::model::{is_backbone_param, Model};
use crate::params::ParamStore;
use crate::refine::{clip_region, region_mask_target};
use crate::rpn::{anchor_targets, decode_all, label_anchors, AnchorTargets};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossWeights {
    pub fn from_config(t: &TrainingConfig) -> Self {
        Self {
            lambda1: t.lambda1,
            lambda2: t.lambda2,
            lambda3: t.lambda3,
        }
    }

    pub fn total(&self, rpn_cls: f64, rpn_reg: f64, refine_box: f64, refine_mask: f64) -> f64 {
        rpn_cls + self.lambda1 * rpn_reg + self.lambda2 * refine_box + self.lambda3 * refine_mask
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::from_config(&TrainingConfig::default())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub refine_box: f64,
    pub refine_mask: f64,
    pub total: f64,
    /// Set when the image had no positive anchor.
    pub no_positive: bool,
}

impl LossBreakdown {
    fn accumulate(&mut self, o: &LossBreakdown, w: f64) {
        self.rpn_cls += w * o.rpn_cls;
        self.rpn_reg += w * o.rpn_reg;
        self.refine_box += w * o.refine_box;
        self.refine_mask += w * o.refine_mask;
        self.total += w * o.total;
        self.no_positive |= o.no_positive;
    }
}

/// A refinement region with its box-delta target and optional mask target.
#[derive(Clone, Debug)]
pub struct RegionTarget {
    pub region: BBox,
    pub delta: BoxDelta,
    /// `1×m×m` target in the region frame.
    pub mask: Option<Tensor>,
}

/// Predictions for one region: `[1, 4]` deltas and `[1, m, m]` mask logits.
#[derive(Clone, Copy, Debug)]
pub struct RegionPred<'t> {
    pub delta: Var<'t>,
    pub mask_logits: Option<Var<'t>>,
}

/// Assemble the weighted loss on a tape.
pub fn loss_on_tape<'t>(
    tape: &'t Tape,
    cls: Var<'t>,
    reg: Var<'t>,
    targets: &AnchorTargets,
    preds: &[RegionPred<'t>],
    regions: &[RegionTarget],
    w: &LossWeights,
    beta: f64,
) -> (Var<'t>, LossBreakdown) {
    let rpn_cls = cls.two_class_nll(&targets.cls_labels, &targets.cls_weight);
    let no_positive = targets.num_pos == 0;
    let rpn_reg = reg.smooth_l1(&targets.reg_target, &targets.reg_weight, beta);
    let zero = || tape.constant(Tensor::scalar(0.0));
    let (mut box_loss, mut mask_loss) = (zero(), zero());
    if !no_positive && !preds.is_empty() {
        let n = preds.len() as f64;
        let ones = Tensor::full(&[1, 4], 1.0 / n);
        for (p, r) in preds.iter().zip(regions) {
            let t = Tensor::from_parts(vec![1, 4], r.delta.as_array().to_vec());
            box_loss = box_loss.add(p.delta.smooth_l1(&t, &ones, beta));
        }
        let with_mask: Vec<_> = preds
            .iter()
            .zip(regions)
            .filter_map(|(p, r)| Some((p.mask_logits?, r.mask.as_ref()?)))
            .collect();
        if !with_mask.is_empty() {
            for (logits, target) in &with_mask {
                let wgt = Tensor::full(target.shape(), 1.0 / (target.len() * with_mask.len()) as f64);
                mask_loss = mask_loss.add(logits.bce_with_logits(target, &wgt));
            }
        }
    }
    let total = rpn_cls
        .add(rpn_reg.scale(w.lambda1))
        .add(box_loss.scale(w.lambda2))
        .add(mask_loss.scale(w.lambda3));
    let b = LossBreakdown {
        rpn_cls: rpn_cls.value().item(),
        rpn_reg: rpn_reg.value().item(),
        refine_box: box_loss.value().item(),
        refine_mask: mask_loss.value().item(),
        total: total.value().item(),
        no_positive,
    };
    (total, b)
}

/// Tensor-level loss: `cls` is `[2k,R,R]`, `reg` `[4k,R,R]`; `preds` hold
/// `[1,4]` deltas and optional mask logits per region.
pub fn compute_loss(
    cls: &Tensor,
    reg: &Tensor,
    targets: &AnchorTargets,
    preds: &[(Tensor, Option<Tensor>)],
    regions: &[RegionTarget],
    w: &LossWeights,
    beta: f64,
) -> LossBreakdown {
    let tape = Tape::inference();
    let pv: Vec<RegionPred> = preds
        .iter()
        .map(|(d, m)| RegionPred {
            delta: tape.constant(d.clone()),
            mask_logits: m.as_ref().map(|m| tape.constant(m.clone())),
        })
        .collect();
    loss_on_tape(&tape, tape.constant(cls.clone()), tape.constant(reg.clone()), targets, &pv, regions, w, beta).1
}

/// Perturb `gt` so that the result keeps IoU > 0.5 with it: center shifts up
/// to 8% of the size and log-scale changes up to 0.08 keep IoU above 0.7.
pub fn jitter_box(gt: &BBox, rng: &mut impl Rng) -> BBox {
    let s = 0.08;
    BBox::new(
        gt.cx + rng.gen_range(-s..s) * gt.w,
        gt.cy + rng.gen_range(-s..s) * gt.h,
        gt.w * rng.gen_range(-s..s).exp(),
        gt.h * rng.gen_range(-s..s).exp(),
    )
}

/// Up to `n` regions with IoU > `min_iou`: without replacement when enough
/// qualify, with replacement when a few do, jittered ground truth otherwise.
pub fn sample_refine_regions(proposals: &[BBox], gt: &BBox, n: usize, min_iou: f64, rng: &mut impl Rng) -> Vec<BBox> {
    let qual: Vec<BBox> = proposals.iter().copied().filter(|p| p.is_valid() && p.iou(gt) > min_iou).collect();
    if qual.len() >= n {
        rand::seq::index::sample(rng, qual.len(), n).into_iter().map(|i| qual[i]).collect()
    } else if !qual.is_empty() {
        (0..n).map(|_| qual[rng.gen_range(0..qual.len())]).collect()
    } else {
        (0..n).map(|_| jitter_box(gt, rng)).collect()
    }
}

/// Base and backbone learning rates for an epoch.
pub fn lr_at(t: &TrainingConfig, epoch: usize) -> Result<(f64, f64)> {
    if epoch >= t.epochs {
        return Err(Error::OutOfRange(format!("epoch {epoch} outside 0..{}", t.epochs)));
    }
    let base = if epoch < t.warmup_epochs {
        t.warmup_lr
    } else {
        let span = t.epochs - 1 - t.warmup_epochs;
        if span == 0 {
            t.start_lr
        } else {
            let f = (epoch - t.warmup_epochs) as f64 / span as f64;
            t.start_lr * (t.end_lr / t.start_lr).powf(f)
        }
    };
    let bb = if epoch < t.backbone_frozen_epochs {
        0.0
    } else {
        base * t.backbone_lr_factor
    };
    Ok((base, bb))
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Update every parameter with a nonzero rate. Missing gradients count
    /// as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr_for: impl Fn(&str) -> f64) {
        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            let lr = lr_for(&name);
            if lr == 0.0 {
                continue;
            }
            let p = store.get_mut(&name).expect("listed");
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let g = grads.get(&name);
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let vi = self.momentum * v.data()[i] + gi + self.weight_decay * p.data()[i];
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= lr * vi;
            }
        }
    }
}

/// Forward one pair on `tape`, returning the loss node and its breakdown.
pub fn pair_loss<'t>(model: &Model, tape: &'t Tape, store: &ParamStore, pair: &CropPair, rng: &mut impl Rng) -> Result<(Var<'t>, LossBreakdown)> {
    let cfg = &model.cfg;
    let gt = pair.gt_box_in_search;
    let z = model.features(tape, store, tape.constant(pair.exemplar.clone()));
    let x = model.features(tape, store, tape.constant(pair.search.clone()));
    let out = model.pair(tape, store, &z, &x);
    let labels = label_anchors(&model.anchors, &gt, cfg.rpn.pos_iou, cfg.rpn.neg_iou)?;
    let targets = anchor_targets(&model.anchors, &labels, &gt, cfg.rpn.max_samples, cfg.rpn.max_positive, rng);
    let mut preds = Vec::new();
    let mut regions = Vec::new();
    if let Some(fused) = &out.fused {
        let proposals = decode_all(&out.rpn.reg.value(), &model.anchors);
        let r = &cfg.refinement;
        for region in sample_refine_regions(&proposals, &gt, r.regions_per_image, r.region_iou, rng) {
            let Ok(region) = clip_region(&region, cfg.data.search_size) else {
                continue;
            };
            let delta = model.refine.refine_box(tape, store, fused, &region);
            let mask_target = pair.gt_mask_in_search.as_ref().map(|m| region_mask_target(m, &region, r.mask_size));
            let mask_logits = mask_target.is_some().then(|| model.refine.refine_mask(tape, store, fused, &region));
            preds.push(RegionPred { delta, mask_logits });
            regions.push(RegionTarget {
                region,
                delta: BoxDelta::encode(&gt, &region),
                mask: mask_target,
            });
        }
    }
    let w = LossWeights::from_config(&cfg.training);
    Ok(loss_on_tape(tape, out.rpn.cls, out.rpn.reg, &targets, &preds, &regions, &w, cfg.training.smooth_l1_beta))
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// Averaged gradients and loss over a batch.
pub fn batch_gradients(model: &Model, store: &ParamStore, batch: &[CropPair], train_backbone: bool, rng: &mut impl Rng) -> Result<(BTreeMap<String, Tensor>, LossBreakdown)> {
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut loss = LossBreakdown::default();
    let inv = 1.0 / batch.len() as f64;
    for pair in batch {
        let tape = if train_backbone {
            Tape::new()
        } else {
            Tape::with_trainable(|n| !is_backbone_param(n))
        };
        let (root, b) = pair_loss(model, &tape, store, pair, rng)?;
        loss.accumulate(&b, inv);
        for (name, g) in tape.backward(root).into_param_grads() {
            let g = g.scale(inv);
            match acc.get_mut(&name) {
                Some(a) => a.add_assign(&g),
                None => {
                    acc.insert(name, g);
                }
            }
        }
    }
    Ok((acc, loss))
}

/// One SGD step on a batch of pairs.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore,
    opt: &mut Sgd,
    batch: &[CropPair],
    lr: (f64, f64),
    step: usize,
    rng: &mut impl Rng,
) -> Result<StepReport> {
    let (base, bb) = lr;
    let (mut grads, loss) = batch_gradients(model, store, batch, bb > 0.0, rng)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!("{loss:?}"),
        });
    }
    let norm = grads.values().map(|g| g.dot(g)).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: "non-finite gradient".into(),
        });
    }
    let clip = model.cfg.training.grad_clip;
    if clip > 0.0 && norm > clip {
        let s = clip / norm;
        for g in grads.values_mut() {
            *g = g.scale(s);
        }
    }
    opt.step(store, &grads, |n| if is_backbone_param(n) { bb } else { base });
    Ok(StepReport { loss, grad_norm: norm })
}

/// Random exemplar/search pairs from in-memory sequences.
pub struct PairSampler<'a> {
    sequences: &'a [SequenceRecord],
    cfg: RunConfig,
}

impl<'a> PairSampler<'a> {
    pub fn new(sequences: &'a [SequenceRecord], cfg: &RunConfig) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Dataset("no training sequences".into()));
        }
        Ok(Self {
            sequences,
            cfg: cfg.clone(),
        })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<CropPair> {
        let seq = &self.sequences[rng.gen_range(0..self.sequences.len())];
        let n = seq.len();
        let range = self.cfg.training.pair_frame_range;
        // exemplar from a visible frame
        let visible: Vec<usize> = (0..n).filter(|&i| seq.visible[i]).collect();
        let zi = if visible.is_empty() {
            0
        } else {
            visible[rng.gen_range(0..visible.len())]
        };
        let lo = zi.saturating_sub(range);
        let hi = (zi + range).min(n - 1);
        let xi = rng.gen_range(lo..=hi);
        let t = &self.cfg.training;
        let bx = seq.boxes[xi];
        let jitter = (
            rng.gen_range(-1.0..=1.0) * t.shift_jitter * bx.w,
            rng.gen_range(-1.0..=1.0) * t.shift_jitter * bx.h,
            (rng.gen_range(-1.0..=1.0) * t.scale_jitter).exp(),
        );
        let fz = seq.frames[zi].load()?;
        let fx = seq.frames[xi].load()?;
        let mask: Option<Arc<Mask>> = seq.masks[xi].as_ref().map(|m| m.load()).transpose()?;
        crop_exemplar_search(&fz, &seq.boxes[zi], &fx, &bx, mask.as_deref(), &self.cfg.data, jitter)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub backbone_lr: f64,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub refine_box: f64,
    pub refine_mask: f64,
    pub total: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub optimizer: Sgd,
    pub log: Vec<LogRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Full schedule on `sequences`. With `out_dir`, writes `train_log.jsonl`
/// and one checkpoint per epoch.
pub fn train(model: &Model, sequences: &[SequenceRecord], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let cfg = &model.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = model.init_params(cfg.seed);
    let mut opt = Sgd::new(cfg.training.momentum, cfg.training.weight_decay);
    let sampler = PairSampler::new(sequences, cfg)?;
    let hash = cfg.hash();
    let mut log_file = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            Some(std::io::BufWriter::new(std::fs::File::create(d.join("train_log.jsonl"))?))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.training.epochs {
        let lr = lr_at(&cfg.training, epoch)?;
        for _ in 0..cfg.training.steps_per_epoch {
            let batch = (0..cfg.training.batch_size)
                .map(|_| sampler.sample(&mut rng))
                .collect::<Result<Vec<_>>>()?;
            let rep = train_step(model, &mut store, &mut opt, &batch, lr, step, &mut rng)?;
            let rec = LogRecord {
                epoch,
                step,
                lr: lr.0,
                backbone_lr: lr.1,
                rpn_cls: rep.loss.rpn_cls,
                rpn_reg: rep.loss.rpn_reg,
                refine_box: rep.loss.refine_box,
                refine_mask: rep.loss.refine_mask,
                total: rep.loss.total,
                config_hash: hash.clone(),
            };
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
            }
            log.push(rec);
            step += 1;
        }
        if let Some(d) = out_dir {
            let path = d.join(format!("checkpoint_epoch{:03}.bin", epoch + 1));
            Checkpoint {
                config: cfg.clone(),
                epoch: epoch + 1,
                params: store.clone(),
                velocity: opt.velocity.clone(),
            }
            .save(&path)?;
            checkpoints.push(path);
        }
    }
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    Ok(TrainOutcome {
        params: store,
        optimizer: opt,
        log,
        checkpoints,
    })
}


/// Synthetic training sequences, disjoint from the evaluation benchmark
/// whenever the two seeds differ.
pub fn synthetic_training_set(cfg: &RunConfig) -> Result<Vec<SequenceRecord>> {
    crate::data::synthetic::benchmark_specs(&cfg.synthetic, cfg.training.train_sequences, cfg.synthetic.seed)
        .iter()
        .map(crate::data::generate_synthetic_sequence)
        .collect()
}
