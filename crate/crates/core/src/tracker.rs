//! Online tracking: template caching, penalized proposal selection,
//! refinement of the chosen region, and interpolated size updates.
//!
//! Penalties follow the usual Siamese RPN recipe. For a proposal of size
//! `(w, h)` and the current target size `(W, H)`, both in crop pixels,
//! `s_c = max(r, 1/r)` with `r = sz(w, h)/sz(W, H)`,
//! `sz(w, h) = sqrt((w + p)(h + p))`, `p = (w + h)/2`, and
//! `r_c = max(q, 1/q)` with `q = (W/H)/(w/h)`. Then
//! `penalty = exp(−(r_c·s_c − 1)·k)` and
//! `pscore = (1 − wi)·penalty·score + wi·window`, where `window` is the outer
//! product of two Hann windows over the response grid. The size moves by
//! `lr = size_lr·penalty·score` toward the prediction.

use std::cell::Cell;
use std::collections::VecDeque;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::backbone::StageVars;
use crate::config::{OutputMode, TrackerConfig};
use crate::data::crop::ContextWindow;
use crate::error::Result;
use crate::geometry::{BBox, RotatedBox};
use crate::model::Model;
use crate::params::ParamStore;
use crate::refine::{apply_delta, clip_region};
use crate::rpn::{argmax_first, decode_all, target_probabilities, AnchorSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TrackState {
    /// Backbone stages of the exemplar, computed once at init.
    pub template: [Tensor; 5],
    pub center: (f64, f64),
    pub size: (f64, f64),
    pub penalty: TrackerConfig,
    pub frame_size: (usize, usize),
    pub frames_tracked: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackOutput {
    pub bbox: BBox,
    /// Unsmoothed prediction in frame pixels, before the size update.
    pub raw: BBox,
    pub score: f64,
    pub rotated: Option<RotatedBox>,
    /// Mask probabilities over `mask_region` (frame pixels).
    #[serde(skip)]
    pub mask: Option<Tensor>,
    pub mask_region: Option<BBox>,
}

/// Hann window over `n` cells (zero at both ends for `n > 1`).
pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Cosine window tiled over all anchors, anchor-major.
pub fn cosine_window(anchors: &AnchorSet) -> Vec<f64> {
    let h = hann(anchors.size);
    let cell: Vec<f64> = h.iter().flat_map(|a| h.iter().map(move |b| a * b)).collect();
    (0..anchors.k()).flat_map(|_| cell.iter().copied()).collect()
}

fn change(r: f64) -> f64 {
    r.max(1.0 / r)
}

fn sz(w: f64, h: f64) -> f64 {
    let p = (w + h) / 2.0;
    ((w + p) * (h + p)).sqrt()
}

/// Scale/ratio penalty factor of each proposal relative to `target`.
pub fn penalty_factors(boxes: &[BBox], target: (f64, f64), k: f64) -> Vec<f64> {
    let (tw, th) = target;
    boxes
        .iter()
        .map(|b| {
            let s_c = change(sz(b.w, b.h) / sz(tw, th));
            let r_c = change((tw / th) / (b.w / b.h));
            (-(r_c * s_c - 1.0) * k).exp()
        })
        .collect()
}

/// Penalized scores; also returns the penalty factors.
pub fn apply_penalties(scores: &[f64], boxes: &[BBox], target: (f64, f64), window: &[f64], cfg: &TrackerConfig) -> (Vec<f64>, Vec<f64>) {
    let pen = penalty_factors(boxes, target, cfg.penalty_k);
    let wi = cfg.window_influence;
    let out = scores
        .iter()
        .zip(&pen)
        .zip(window)
        .map(|((s, p), w)| if wi == 0.0 { s * p } else { (1.0 - wi) * s * p + wi * w })
        .collect();
    (out, pen)
}

/// Minimum-area rectangle of the largest 8-connected component of a mask
/// laid over `roi` (frame pixels). `None` for an empty mask.
pub fn rotated_box_from_mask(mask: &Tensor, roi: &BBox, threshold: f64) -> Option<RotatedBox> {
    let (mh, mw) = match mask.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        _ => return None,
    };
    let ow = roi.w.round().max(1.0) as usize;
    let oh = roi.h.round().max(1.0) as usize;
    // resample to the RoI's pixel extent, half-pixel centers
    let tape = Tape::inference();
    let m = tape.constant(mask.reshaped(&[1, mh, mw])).resize_bilinear(oh, ow).value();
    let fg: Vec<bool> = m.data().iter().map(|&v| v > threshold).collect();
    let comp = largest_component(&fg, oh, ow)?;
    let (sx, sy) = (roi.w / ow as f64, roi.h / oh as f64);
    let mut pts = Vec::with_capacity(comp.len() * 4);
    for idx in comp {
        let (y, x) = ((idx / ow) as f64, (idx % ow) as f64);
        for (dy, dx) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
            pts.push((roi.x0() + (x + dx) * sx, roi.y0() + (y + dy) * sy));
        }
    }
    Some(min_area_rect(&convex_hull(pts)))
}

fn largest_component(fg: &[bool], h: usize, w: usize) -> Option<Vec<usize>> {
    let mut seen = vec![false; fg.len()];
    let mut best: Vec<usize> = Vec::new();
    for start in 0..fg.len() {
        if !fg[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut q = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = q.pop_front() {
            comp.push(i);
            let (y, x) = ((i / w) as i64, (i % w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if fg[j] && !seen[j] {
                        seen[j] = true;
                        q.push_back(j);
                    }
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    (!best.is_empty()).then_some(best)
}

/// Monotone-chain hull, counter-clockwise, without collinear points.
pub fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite points"));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Rotating calipers over hull edges. Angle is normalized to `[0, 90)`.
pub fn min_area_rect(hull: &[(f64, f64)]) -> RotatedBox {
    if hull.len() < 3 {
        let (xs, ys): (Vec<f64>, Vec<f64>) = hull.iter().copied().unzip();
        let fold = |v: &[f64], f: fn(f64, f64) -> f64, init| v.iter().copied().fold(init, f);
        let b = BBox::from_corners(
            fold(&xs, f64::min, f64::MAX),
            fold(&ys, f64::min, f64::MAX),
            fold(&xs, f64::max, f64::MIN),
            fold(&ys, f64::max, f64::MIN),
        );
        return RotatedBox::from_axis_aligned(&b);
    }
    let mut best: Option<(f64, RotatedBox)> = None;
    for i in 0..hull.len() {
        let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
        let len = (b.0 - a.0).hypot(b.1 - a.1);
        if len == 0.0 {
            continue;
        }
        let (ux, uy) = ((b.0 - a.0) / len, (b.1 - a.1) / len);
        let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(x, y) in hull {
            let u = x * ux + y * uy;
            let v = -x * uy + y * ux;
            u0 = u0.min(u);
            u1 = u1.max(u);
            v0 = v0.min(v);
            v1 = v1.max(v);
        }
        let area = (u1 - u0) * (v1 - v0);
        if best.as_ref().map_or(true, |(a, _)| area < *a - 1e-9) {
            let (cu, cv) = ((u0 + u1) / 2.0, (v0 + v1) / 2.0);
            let mut angle = uy.atan2(ux).to_degrees().rem_euclid(180.0);
            let (mut w, mut h) = (u1 - u0, v1 - v0);
            if angle >= 90.0 {
                angle -= 90.0;
                std::mem::swap(&mut w, &mut h);
            }
            if angle > 90.0 - 1e-9 {
                angle = 0.0;
            }
            let rect = RotatedBox {
                cx: cu * ux - cv * uy,
                cy: cu * uy + cv * ux,
                w,
                h,
                angle_deg: angle,
            };
            best = Some((area, rect));
        }
    }
    best.expect("hull has edges").1
}

/// Tracker bound to a model and its parameters.
pub struct Tracker<'m> {
    pub model: &'m Model,
    pub params: &'m ParamStore,
    pub cfg: TrackerConfig,
    window: Vec<f64>,
    refine_calls: Cell<usize>,
    template_extractions: Cell<usize>,
}

impl<'m> Tracker<'m> {
    pub fn new(model: &'m Model, params: &'m ParamStore) -> Self {
        Self {
            model,
            params,
            cfg: model.cfg.tracker.clone(),
            window: cosine_window(&model.anchors),
            refine_calls: Cell::new(0),
            template_extractions: Cell::new(0),
        }
    }

    /// Number of refinement invocations so far.
    pub fn refine_calls(&self) -> usize {
        self.refine_calls.get()
    }

    pub fn template_extractions(&self) -> usize {
        self.template_extractions.get()
    }

    fn search_window(&self, state: &TrackState) -> ContextWindow {
        let d = &self.model.cfg.data;
        let (w, h) = state.size;
        ContextWindow {
            cx: state.center.0,
            cy: state.center.1,
            side: ContextWindow::context_side(w, h, d.context_amount) * d.search_scale(),
            out: d.search_size,
        }
    }

    pub fn init(&self, frame: &RgbImage, b: &BBox) -> Result<TrackState> {
        b.validate()?;
        let d = &self.model.cfg.data;
        let win = ContextWindow {
            cx: b.cx,
            cy: b.cy,
            side: ContextWindow::context_side(b.w, b.h, d.context_amount),
            out: d.exemplar_size,
        };
        let crop = win.crop_image(frame);
        let tape = Tape::inference();
        let z = self.model.features(&tape, self.params, tape.constant(crop));
        self.template_extractions.set(self.template_extractions.get() + 1);
        Ok(TrackState {
            template: z.stages.map(|v| (*v.value()).clone()),
            center: (b.cx, b.cy),
            size: (b.w, b.h),
            penalty: self.cfg.clone(),
            frame_size: (frame.width() as usize, frame.height() as usize),
            frames_tracked: 0,
        })
    }

    pub fn track(&self, frame: &RgbImage, state: &mut TrackState) -> Result<TrackOutput> {
        let model = self.model;
        let win = self.search_window(state);
        let search = win.crop_image(frame);
        let tape = Tape::inference();
        let z = StageVars {
            stages: std::array::from_fn(|i| tape.constant(state.template[i].clone())),
        };
        let x = model.features(&tape, self.params, tape.constant(search));
        let out = model.pair(&tape, self.params, &z, &x);
        let scores = target_probabilities(&out.rpn.cls.value());
        let boxes = decode_all(&out.rpn.reg.value(), &model.anchors);
        let target_crop = (state.size.0 / win.scale(), state.size.1 / win.scale());
        let (pscore, pen) = apply_penalties(&scores, &boxes, target_crop, &self.window, &state.penalty);
        let best = argmax_first(&pscore);
        let score = scores[best];
        let proposal = boxes[best];

        let mut chosen = proposal;
        let mut mask = None;
        let mut mask_region = None;
        if let Some(fused) = &out.fused {
            if let Ok(region) = clip_region(&proposal, model.cfg.data.search_size) {
                self.refine_calls.set(self.refine_calls.get() + 1);
                let delta = model.refine.refine_box(&tape, self.params, fused, &region);
                let refined = apply_delta(&delta.value(), &region);
                if refined.is_valid() {
                    chosen = refined;
                }
                if state.penalty.mode == OutputMode::Rotated {
                    if let Ok(mr) = clip_region(&chosen, model.cfg.data.search_size) {
                        let logits = model.refine.refine_mask(&tape, self.params, fused, &mr);
                        mask = Some(logits.value().map(crate::autograd::sigmoid));
                        mask_region = Some(win.box_to_frame(&mr));
                    }
                }
            }
        }

        let pred = win.box_to_frame(&chosen);
        let lr = state.penalty.size_lr * pen[best] * score;
        let (fw, fh) = (state.frame_size.0 as f64, state.frame_size.1 as f64);
        let min = state.penalty.min_size;
        let w = ((1.0 - lr) * state.size.0 + lr * pred.w).clamp(min, fw.max(min));
        let h = ((1.0 - lr) * state.size.1 + lr * pred.h).clamp(min, fh.max(min));
        state.center = (pred.cx.clamp(0.0, fw - 1.0), pred.cy.clamp(0.0, fh - 1.0));
        state.size = (w, h);
        state.frames_tracked += 1;
        let bbox = BBox::new(state.center.0, state.center.1, w, h);
        let rotated = match (state.penalty.mode, &mask, &mask_region) {
            (OutputMode::Rotated, Some(m), Some(r)) => {
                Some(rotated_box_from_mask(m, r, model.cfg.refinement.mask_threshold).unwrap_or_else(|| RotatedBox::from_axis_aligned(&bbox)))
            }
            (OutputMode::Rotated, _, _) => Some(RotatedBox::from_axis_aligned(&bbox)),
            _ => None,
        };
        Ok(TrackOutput {
            bbox,
            raw: pred,
            score,
            rotated,
            mask,
            mask_region,
        })
    }
}

/// Minimal interface used by the evaluation protocols.
pub trait SequenceTracker {
    fn start(&mut self, frame: &RgbImage, init: &BBox) -> Result<()>;
    fn update(&mut self, frame: &RgbImage) -> Result<BBox>;
}

/// A [`Tracker`] with its per-sequence state.
pub struct ModelTracker<'m> {
    pub tracker: Tracker<'m>,
    pub state: Option<TrackState>,
}

impl<'m> ModelTracker<'m> {
    pub fn new(model: &'m Model, params: &'m ParamStore) -> Self {
        Self {
            tracker: Tracker::new(model, params),
            state: None,
        }
    }
}

impl SequenceTracker for ModelTracker<'_> {
    fn start(&mut self, frame: &RgbImage, init: &BBox) -> Result<()> {
        self.state = Some(self.tracker.init(frame, init)?);
        Ok(())
    }

    fn update(&mut self, frame: &RgbImage) -> Result<BBox> {
        let state = self.state.as_mut().expect("start before update");
        Ok(self.tracker.track(frame, state)?.bbox)
    }
}
