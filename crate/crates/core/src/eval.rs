//! Tracking metrics, the reset protocol, ablation tables and plots.
//!
//! Success uses 101 thresholds `t = 0.00, 0.01, ..., 1.00` and counts frames
//! with IoU strictly greater than `t`, so a perfect tracker scores 0 at the
//! last bin and its AUC is 100/101. Curves are aggregated frame-wise over all
//! sequences. Frame 0 (the initialization frame) is excluded.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::{EvalConfig, RunConfig};
use crate::data::crop::ContextWindow;
use crate::data::synthetic::benchmark_specs;
use crate::data::{generate_synthetic_sequence, SequenceRecord};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::tracker::{ModelTracker, SequenceTracker};

pub const THRESHOLDS: usize = 101;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveMetrics {
    pub precision: f64,
    pub success_curve: Vec<f64>,
    pub auc: f64,
    pub mean_iou: f64,
    pub frames: usize,
}

pub fn success_thresholds() -> Vec<f64> {
    (0..THRESHOLDS).map(|i| i as f64 / 100.0).collect()
}

fn check_lengths(results: &[BBox], gt: &[BBox]) -> Result<()> {
    if results.len() != gt.len() {
        return Err(Error::Shape(format!("{} results for {} ground-truth boxes", results.len(), gt.len())));
    }
    Ok(())
}

/// Fraction of frames with center error within `threshold` pixels.
pub fn precision_at(results: &[BBox], gt: &[BBox], threshold: f64) -> Result<f64> {
    check_lengths(results, gt)?;
    if gt.is_empty() {
        return Ok(0.0);
    }
    let hits = results.iter().zip(gt).filter(|(r, g)| r.center_distance(g) <= threshold).count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Success curve from per-frame overlaps.
pub fn success_curve(ious: &[f64]) -> Vec<f64> {
    success_thresholds()
        .iter()
        .map(|&t| {
            if ious.is_empty() {
                0.0
            } else {
                ious.iter().filter(|&&v| v > t).count() as f64 / ious.len() as f64
            }
        })
        .collect()
}

/// Precision, success curve, AUC and mean IoU over aligned streams.
pub fn precision_success(results: &[BBox], gt: &[BBox], threshold: f64) -> Result<CurveMetrics> {
    check_lengths(results, gt)?;
    let ious: Vec<f64> = results.iter().zip(gt).map(|(r, g)| r.iou(g)).collect();
    let curve = success_curve(&ious);
    let auc = curve.iter().sum::<f64>() / THRESHOLDS as f64;
    Ok(CurveMetrics {
        precision: precision_at(results, gt, threshold)?,
        success_curve: curve,
        auc,
        mean_iou: if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 },
        frames: ious.len(),
    })
}

/// Load every frame of a sequence.
pub fn load_frames(seq: &SequenceRecord) -> Result<Vec<RgbImage>> {
    seq.frames.iter().map(|f| f.load().map(|a| (*a).clone())).collect()
}

/// One-pass run: initialize on frame 0, track the rest. The returned
/// vector includes the init box at index 0.
pub fn run_one_pass(tracker: &mut dyn SequenceTracker, seq: &SequenceRecord) -> Result<Vec<BBox>> {
    seq.validate()?;
    let mut out = Vec::with_capacity(seq.len());
    for (i, f) in seq.frames.iter().enumerate() {
        let frame = f.load()?;
        if i == 0 {
            tracker.start(&frame, &seq.boxes[0])?;
            out.push(seq.boxes[0]);
        } else {
            out.push(tracker.update(&frame)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetEventKind {
    Init,
    Failure,
    Reinit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResetEvent {
    pub frame: usize,
    pub kind: ResetEventKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResetReport {
    /// Mean IoU over tracked frames outside burn-in windows; failure frames
    /// are not counted.
    pub accuracy: f64,
    pub failures: usize,
    pub events: Vec<ResetEvent>,
    /// Overlap of every frame that entered the accuracy average.
    pub overlaps: Vec<(usize, f64)>,
}

/// Reset-based run: a frame with zero overlap is a failure, the tracker is
/// re-initialized on the ground truth `reinit_gap` frames later, and the
/// `burn_in` frames after each re-initialization are left out of accuracy.
pub fn reset_protocol_run(tracker: &mut dyn SequenceTracker, seq: &SequenceRecord, cfg: &EvalConfig) -> Result<ResetReport> {
    seq.validate()?;
    let mut events = vec![ResetEvent {
        frame: 0,
        kind: ResetEventKind::Init,
    }];
    tracker.start(&*seq.frames[0].load()?, &seq.boxes[0])?;
    let mut overlaps = Vec::new();
    let mut failures = 0;
    let mut t = 1;
    let mut burn_until = 0;
    while t < seq.len() {
        let pred = tracker.update(&*seq.frames[t].load()?)?;
        let iou = pred.iou(&seq.boxes[t]);
        if iou <= 0.0 {
            failures += 1;
            events.push(ResetEvent {
                frame: t,
                kind: ResetEventKind::Failure,
            });
            let r = t + cfg.reinit_gap;
            if r >= seq.len() {
                break;
            }
            tracker.start(&*seq.frames[r].load()?, &seq.boxes[r])?;
            events.push(ResetEvent {
                frame: r,
                kind: ResetEventKind::Reinit,
            });
            burn_until = r + cfg.burn_in;
            t = r + 1;
            continue;
        }
        if t > burn_until {
            overlaps.push((t, iou));
        }
        t += 1;
    }
    let accuracy = if overlaps.is_empty() {
        0.0
    } else {
        overlaps.iter().map(|o| o.1).sum::<f64>() / overlaps.len() as f64
    };
    Ok(ResetReport {
        accuracy,
        failures,
        events,
        overlaps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub id: String,
    pub frames: usize,
    pub precision: f64,
    pub auc: f64,
    pub mean_iou: f64,
    pub accuracy: f64,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_hash: String,
    pub precision_at_20: f64,
    pub success_curve: Vec<f64>,
    pub auc: f64,
    pub mean_iou: f64,
    pub accuracy: f64,
    pub failures: usize,
    pub per_sequence: Vec<SequenceMetrics>,
    /// Center-error precision curve over 0..=50 pixels.
    pub precision_curve: Vec<f64>,
}

/// Results for one sequence, used to build a [`MetricReport`].
#[derive(Clone, Debug)]
pub struct SequenceResult {
    pub id: String,
    pub predicted: Vec<BBox>,
    pub gt: Vec<BBox>,
    pub reset: Option<ResetReport>,
}

/// Frame-wise aggregation over sequences (frame 0 of each is dropped).
pub fn aggregate(results: &[SequenceResult], cfg: &EvalConfig, config_hash: &str) -> Result<MetricReport> {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    let mut per_sequence = Vec::new();
    for r in results {
        check_lengths(&r.predicted, &r.gt)?;
        let (p, g) = (r.predicted.get(1..).unwrap_or(&[]), r.gt.get(1..).unwrap_or(&[]));
        let m = precision_success(p, g, cfg.precision_threshold)?;
        per_sequence.push(SequenceMetrics {
            id: r.id.clone(),
            frames: m.frames,
            precision: m.precision,
            auc: m.auc,
            mean_iou: m.mean_iou,
            accuracy: r.reset.as_ref().map_or(f64::NAN, |x| x.accuracy),
            failures: r.reset.as_ref().map_or(0, |x| x.failures),
        });
        pred.extend_from_slice(p);
        gt.extend_from_slice(g);
    }
    let m = precision_success(&pred, &gt, cfg.precision_threshold)?;
    let tracked: Vec<f64> = results.iter().filter_map(|r| r.reset.as_ref()).flat_map(|x| x.overlaps.iter().map(|o| o.1)).collect();
    let precision_curve = (0..=50).map(|d| precision_at(&pred, &gt, d as f64)).collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        config_hash: config_hash.to_string(),
        precision_at_20: m.precision,
        success_curve: m.success_curve,
        auc: m.auc,
        mean_iou: m.mean_iou,
        accuracy: if tracked.is_empty() { 0.0 } else { tracked.iter().sum::<f64>() / tracked.len() as f64 },
        failures: results.iter().filter_map(|r| r.reset.as_ref()).map(|x| x.failures).sum(),
        per_sequence,
        precision_curve,
    })
}

/// One-pass and reset runs of a trained model over `sequences`.
pub fn evaluate_model(model: &Model, params: &ParamStore, sequences: &[SequenceRecord]) -> Result<MetricReport> {
    let mut results = Vec::new();
    for seq in sequences {
        let mut t = ModelTracker::new(model, params);
        let predicted = run_one_pass(&mut t, seq)?;
        let mut t = ModelTracker::new(model, params);
        let reset = reset_protocol_run(&mut t, seq, &model.cfg.eval)?;
        results.push(SequenceResult {
            id: seq.id.clone(),
            predicted,
            gt: seq.boxes.clone(),
            reset: Some(reset),
        });
    }
    aggregate(&results, &model.cfg.eval, &model.cfg.hash())
}

/// The fixed synthetic benchmark described by `cfg.eval`.
pub fn benchmark_sequences(cfg: &RunConfig) -> Result<Vec<SequenceRecord>> {
    benchmark_specs(&cfg.synthetic, cfg.eval.benchmark_sequences, cfg.eval.benchmark_seed)
        .iter()
        .map(generate_synthetic_sequence)
        .collect()
}

impl MetricReport {
    /// Tab-separated per-sequence table followed by a summary row.
    pub fn to_table(&self) -> String {
        let mut s = format!("# config_hash={}\nsequence\tframes\tprecision\tauc\tmean_iou\taccuracy\tfailures\n", self.config_hash);
        for r in &self.per_sequence {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
                r.id, r.frames, r.precision, r.auc, r.mean_iou, r.accuracy, r.failures
            );
        }
        let frames: usize = self.per_sequence.iter().map(|r| r.frames).sum();
        let _ = writeln!(
            s,
            "ALL\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
            frames, self.precision_at_20, self.auc, self.mean_iou, self.accuracy, self.failures
        );
        s
    }
}

/// Network variants of the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    Baseline,
    PlusRr,
    PlusRrSa,
    PlusRrCa,
    NoSa,
    NoCa,
    NoRr,
    NoDeform,
}

impl Variant {
    /// Rows of the component table, from the plain Siamese RPN upward.
    pub const COMPONENT_ROWS: [Variant; 5] = [Variant::Baseline, Variant::PlusRr, Variant::PlusRrSa, Variant::PlusRrCa, Variant::Full];
    /// Full model, baseline, and each toggle switched off alone.
    pub const TOGGLE_ROWS: [Variant; 6] = [Variant::Full, Variant::Baseline, Variant::NoSa, Variant::NoCa, Variant::NoRr, Variant::NoDeform];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Baseline => "baseline",
            Variant::PlusRr => "baseline+rr",
            Variant::PlusRrSa => "baseline+rr+sa",
            Variant::PlusRrCa => "baseline+rr+ca",
            Variant::NoSa => "full-sa",
            Variant::NoCa => "full-ca",
            Variant::NoRr => "full-rr",
            Variant::NoDeform => "full-deform",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Variant::Full,
            Variant::Baseline,
            Variant::PlusRr,
            Variant::PlusRrSa,
            Variant::PlusRrCa,
            Variant::NoSa,
            Variant::NoCa,
            Variant::NoRr,
            Variant::NoDeform,
        ]
        .into_iter()
        .find(|v| v.label() == s)
    }

    /// `base` with this variant's toggles.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        let a = &mut c.attention;
        let (sa, ca, rr, deform) = match self {
            Variant::Full => (true, true, true, true),
            Variant::Baseline => (false, false, false, false),
            Variant::PlusRr => (false, false, true, false),
            Variant::PlusRrSa => (true, false, true, true),
            Variant::PlusRrCa => (false, true, true, true),
            Variant::NoSa => (false, true, true, true),
            Variant::NoCa => (true, false, true, true),
            Variant::NoRr => (true, true, false, true),
            Variant::NoDeform => (true, true, true, false),
        };
        a.spatial_sa = sa;
        a.channel_sa = sa;
        a.cross_attn = ca;
        a.deform_conv = deform;
        a.deform_pool = deform;
        c.refinement.enabled = rr;
        c
    }
}

/// Weights evaluated under one label.
#[derive(Clone, Debug)]
pub struct AblationEntry {
    pub label: String,
    pub config: RunConfig,
    pub params: ParamStore,
}

impl AblationEntry {
    pub fn from_checkpoint(label: impl Into<String>, path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Checkpoint(format!("missing checkpoint {}", path.display())));
        }
        let ck = Checkpoint::load(path)?;
        Ok(Self {
            label: label.into(),
            config: ck.config,
            params: ck.params,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub config_hash: String,
    pub mean_iou: f64,
    pub auc: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub failures: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,config_hash,mean_iou,auc,precision,accuracy,failures\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6},{}",
                r.label, r.config_hash, r.mean_iou, r.auc, r.precision, r.accuracy, r.failures
            );
        }
        s
    }

    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Evaluate every entry on the same sequences, one row each.
pub fn run_ablation(entries: &[AblationEntry], sequences: &[SequenceRecord]) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(entries.len());
    for e in entries {
        let model = Model::new(&e.config)?;
        let m = evaluate_model(&model, &e.params, sequences)?;
        rows.push(AblationRow {
            label: e.label.clone(),
            config_hash: m.config_hash,
            mean_iou: m.mean_iou,
            auc: m.auc,
            precision: m.precision_at_20,
            accuracy: m.accuracy,
            failures: m.failures,
        });
    }
    Ok(AblationTable { rows })
}

const PALETTE: [[u8; 3]; 6] = [[200, 30, 30], [30, 90, 200], [20, 150, 60], [220, 140, 0], [130, 50, 170], [0, 0, 0]];

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Line chart of curves sharing an x axis over `[x_min, x_max]` and y over
/// `[0, 1]`. Series are colored in order; there is no text.
pub fn plot_curves(path: &Path, x_range: (f64, f64), series: &[Vec<(f64, f64)>]) -> Result<()> {
    let (w, h, m) = (480i64, 360i64, 30i64);
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb([255, 255, 255]));
    let to_px = |x: f64, y: f64| {
        let u = (x - x_range.0) / (x_range.1 - x_range.0);
        (m + (u * (w - 2 * m) as f64).round() as i64, h - m - (y.clamp(0.0, 1.0) * (h - 2 * m) as f64).round() as i64)
    };
    let grid = Rgb([225, 225, 225]);
    for i in 0..=10 {
        let f = i as f64 / 10.0;
        draw_line(&mut img, to_px(x_range.0, f), to_px(x_range.1, f), grid);
        let x = x_range.0 + f * (x_range.1 - x_range.0);
        draw_line(&mut img, to_px(x, 0.0), to_px(x, 1.0), grid);
    }
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, to_px(x_range.0, 0.0), to_px(x_range.1, 0.0), axis);
    draw_line(&mut img, to_px(x_range.0, 0.0), to_px(x_range.0, 1.0), axis);
    for (i, s) in series.iter().enumerate() {
        let c = Rgb(PALETTE[i % PALETTE.len()]);
        for p in s.windows(2) {
            let (a, b) = (to_px(p[0].0, p[0].1), to_px(p[1].0, p[1].1));
            draw_line(&mut img, a, b, c);
            draw_line(&mut img, (a.0, a.1 + 1), (b.0, b.1 + 1), c);
        }
    }
    img.save(path)?;
    Ok(())
}

/// `success.png` and `precision.png` for one or more reports.
pub fn write_plots(dir: &Path, reports: &[&MetricReport]) -> Result<[PathBuf; 2]> {
    std::fs::create_dir_all(dir)?;
    let th = success_thresholds();
    let success: Vec<Vec<(f64, f64)>> = reports.iter().map(|r| th.iter().copied().zip(r.success_curve.iter().copied()).collect()).collect();
    let precision: Vec<Vec<(f64, f64)>> = reports
        .iter()
        .map(|r| r.precision_curve.iter().enumerate().map(|(d, &p)| (d as f64, p)).collect())
        .collect();
    let s = dir.join("success.png");
    let p = dir.join("precision.png");
    plot_curves(&s, (0.0, 1.0), &success)?;
    plot_curves(&p, (0.0, 50.0), &precision)?;
    Ok([s, p])
}

/// Min-max normalized grayscale image of a 2-D map.
pub fn heatmap(t: &Tensor) -> Result<GrayImage> {
    let (h, w) = match t.shape() {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        s => return Err(Error::Shape(format!("heatmap expects a 2-D map, got {s:?}"))),
    };
    let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(((t.data()[y as usize * w + x as usize] - lo) / span) * 255.0).round() as u8])
    }))
}

/// Attention maps for one exemplar/search pair, written as
/// `stage{k}_{z|x}_{spatial|channel|cross}.png`. Disabled terms are skipped.
pub fn dump_attention_maps(model: &Model, params: &ParamStore, frame_z: &RgbImage, box_z: &BBox, frame_x: &RgbImage, box_x: &BBox, dir: &Path) -> Result<Vec<PathBuf>> {
    box_z.validate()?;
    box_x.validate()?;
    std::fs::create_dir_all(dir)?;
    let d = &model.cfg.data;
    let zw = ContextWindow {
        cx: box_z.cx,
        cy: box_z.cy,
        side: ContextWindow::context_side(box_z.w, box_z.h, d.context_amount),
        out: d.exemplar_size,
    };
    let xw = ContextWindow {
        cx: box_x.cx,
        cy: box_x.cy,
        side: ContextWindow::context_side(box_z.w, box_z.h, d.context_amount) * d.search_scale(),
        out: d.search_size,
    };
    let tape = Tape::inference();
    let z = model.features(&tape, params, tape.constant(zw.crop_image(frame_z)));
    let x = model.features(&tape, params, tape.constant(xw.crop_image(frame_x)));
    let pair = model.pair(&tape, params, &z, &x);
    let mut written = Vec::new();
    for (s, a) in pair.attn.iter().enumerate() {
        for (kind, maps) in [("spatial", &a.spatial), ("channel", &a.channel), ("cross", &a.cross)] {
            let Some(maps) = maps else { continue };
            for (branch, m) in ["z", "x"].iter().zip(maps.iter()) {
                let p = dir.join(format!("stage{}_{branch}_{kind}.png", s + 3));
                heatmap(&m.map.value())?.save(&p)?;
                written.push(p);
            }
        }
    }
    Ok(written)
}
