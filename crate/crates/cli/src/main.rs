use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use siamattn::checkpoint::{architecture_mismatch, Checkpoint};
use siamattn::config::{OutputMode, RunConfig};
use siamattn::data::dataset::{load_all, write_sequence};
use siamattn::data::{generate_synthetic_sequence, SequenceRecord, SyntheticSpec};
use siamattn::eval::{
    aggregate, benchmark_sequences, dump_attention_maps, evaluate_model, run_ablation, write_plots, AblationEntry, AblationRow, AblationTable,
    MetricReport, SequenceResult, Variant,
};
use siamattn::geometry::{BBox, RotatedBox};
use siamattn::model::Model;
use siamattn::params::ParamStore;
use siamattn::tracker::Tracker;
use siamattn::train::{synthetic_training_set, train};
use siamattn::{Error, Result};

/// Deformable Siamese attention tracker.
#[derive(Parser)]
#[command(name = "siamattn", version)]
struct Cli {
    /// Run configuration (TOML). Defaults to the built-in tiny preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Axis,
    Rotated,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes per-epoch checkpoints and train_log.jsonl.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Dataset root; falls back to `data.root`, then to synthetic data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Track one sequence directory (frames in img/NNNNNN.png).
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        /// First-frame box as cx,cy,w,h in pixels.
        #[arg(long, value_parser = parse_box, allow_hyphen_values = true)]
        init: BBox,
        /// Result records (JSON lines).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "axis")]
        mode: Mode,
        /// Write annotated frames (and masks in rotated mode) here.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Metrics from result files or from a checkpoint run.
    Eval {
        /// Ground-truth dataset root; defaults to the synthetic benchmark.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Result files named <sequence id>.jsonl.
        #[arg(long, num_args = 1.., conflicts_with = "checkpoint")]
        results: Vec<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every variant of the ablation matrix.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        /// Variant labels; defaults to the component rows.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Training seeds; metrics are averaged over them.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Evaluate existing checkpoints instead, as label=path pairs.
        #[arg(long, value_delimiter = ',')]
        checkpoints: Vec<String>,
    },
    /// Dump attention maps and a search overlay for one frame pair.
    DemoAttention {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Sequence directory with groundtruth.txt; defaults to a synthetic one.
        #[arg(long)]
        sequence: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        exemplar_frame: usize,
        #[arg(long, default_value_t = 1)]
        search_frame: usize,
    },
    /// Write synthetic sequences to disk in the dataset layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_box(s: &str) -> std::result::Result<BBox, String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))).collect::<std::result::Result<_, _>>()?;
    if v.len() != 4 {
        return Err(format!("expected cx,cy,w,h, got {} values", v.len()));
    }
    let b = BBox::new(v[0], v[1], v[2], v[3]);
    b.validate().map_err(|e| e.to_string())?;
    Ok(b)
}

#[derive(Serialize, Deserialize)]
struct TrackRecord {
    frame: usize,
    /// cx, cy, w, h
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
    /// cx, cy, w, h, angle in degrees
    #[serde(skip_serializing_if = "Option::is_none", default)]
    rotated: Option<[f64; 5]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    mask_path: Option<String>,
    config_hash: String,
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Dataset(format!("json: {e}"))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) if !p.exists() => Err(Error::Config(format!("config file {} not found", p.display()))),
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::tiny()),
    }
}

/// Checkpoint weights checked against the requested configuration.
fn load_weights(cfg_path: Option<&Path>, checkpoint: &Path) -> Result<(RunConfig, ParamStore)> {
    if !checkpoint.exists() {
        return Err(Error::Checkpoint(format!("missing checkpoint {}", checkpoint.display())));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = match cfg_path {
        Some(p) => {
            let cfg = load_config(Some(p))?;
            let diff = architecture_mismatch(&cfg, &ck.config);
            if !diff.is_empty() {
                return Err(Error::Checkpoint(format!("checkpoint/config mismatch in keys: {}", diff.join(", "))));
            }
            cfg
        }
        None => ck.config,
    };
    Ok((cfg, ck.params))
}

fn training_data(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<SequenceRecord>> {
    let root = data.map(Path::to_path_buf).or_else(|| cfg.data.root.as_ref().map(PathBuf::from));
    match root {
        Some(r) => {
            let (seqs, warnings) = load_all(&r)?;
            if warnings > 0 {
                log_line(&format!("skipped {warnings} malformed sequence(s) under {}", r.display()));
            }
            Ok(seqs)
        }
        None => synthetic_training_set(cfg),
    }
}

fn log_line(msg: &str) {
    eprintln!("{msg}");
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v).map_err(json_err)?)?;
    Ok(())
}

fn cmd_train(cfg: RunConfig, out: &Path, data: Option<&Path>) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml_string())?;
    let seqs = training_data(&cfg, data)?;
    let model = Model::new(&cfg)?;
    let outcome = train(&model, &seqs, Some(out))?;
    let last = outcome.log.last();
    println!(
        "config_hash={} checkpoints={} final_loss={}",
        cfg.hash(),
        outcome.checkpoints.len(),
        last.map_or(f64::NAN, |r| r.total)
    );
    Ok(())
}

fn sequence_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let img = dir.join("img");
    if !img.is_dir() {
        return Err(Error::Dataset(format!("{} has no img/ directory", dir.display())));
    }
    let mut frames: Vec<PathBuf> = fs::read_dir(&img)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    frames.sort();
    if frames.is_empty() {
        return Err(Error::Dataset(format!("no frames in {}", img.display())));
    }
    Ok(frames)
}

fn draw_segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

fn draw_polygon(img: &mut RgbImage, pts: &[(f64, f64)], c: Rgb<u8>) {
    for i in 0..pts.len() {
        draw_segment(img, pts[i], pts[(i + 1) % pts.len()], c);
    }
}

fn axis_corners(b: &BBox) -> [(f64, f64); 4] {
    [(b.x0(), b.y0()), (b.x1(), b.y0()), (b.x1(), b.y1()), (b.x0(), b.y1())]
}

fn cmd_track(cfg_path: Option<&Path>, checkpoint: &Path, sequence: &Path, init: BBox, out: &Path, mode: Mode, overlay: Option<&Path>) -> Result<()> {
    let (mut cfg, params) = load_weights(cfg_path, checkpoint)?;
    cfg.tracker.mode = match mode {
        Mode::Axis => OutputMode::Axis,
        Mode::Rotated => OutputMode::Rotated,
    };
    let frames = sequence_frames(sequence)?;
    let model = Model::new(&cfg)?;
    let tracker = Tracker::new(&model, &params);
    let hash = cfg.hash();
    if let Some(dir) = overlay {
        fs::create_dir_all(dir)?;
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(fs::File::create(out)?);
    let mut state = None;
    for (i, path) in frames.iter().enumerate() {
        let frame = image::open(path)?.to_rgb8();
        let (bbox, score, rotated, mask) = match state.as_mut() {
            None => {
                state = Some(tracker.init(&frame, &init)?);
                let r = matches!(mode, Mode::Rotated).then(|| RotatedBox::from_axis_aligned(&init));
                (init, 1.0, r, None)
            }
            Some(s) => {
                let o = tracker.track(&frame, s)?;
                (o.bbox, o.score, o.rotated, o.mask.zip(o.mask_region))
            }
        };
        let mut mask_path = None;
        if let Some(dir) = overlay {
            let mut img = frame.clone();
            draw_polygon(&mut img, &axis_corners(&bbox), Rgb([255, 40, 40]));
            if let Some(r) = &rotated {
                draw_polygon(&mut img, &r.corners(), Rgb([40, 255, 40]));
            }
            img.save(dir.join(format!("{i:06}.png")))?;
            if let Some((m, _)) = &mask {
                let p = dir.join(format!("mask_{i:06}.png"));
                siamattn::eval::heatmap(m)?.save(&p)?;
                mask_path = Some(format!("{}", p.display()));
            }
        }
        let rec = TrackRecord {
            frame: i,
            bbox: [bbox.cx, bbox.cy, bbox.w, bbox.h],
            score,
            rotated: rotated.map(|r| [r.cx, r.cy, r.w, r.h, r.angle_deg]),
            mask_path,
            config_hash: hash.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).map_err(json_err)?)?;
    }
    w.flush()?;
    println!("config_hash={hash} records={}", frames.len());
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<BBox>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let r: TrackRecord = serde_json::from_str(l).map_err(json_err)?;
            Ok(BBox::new(r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3]))
        })
        .collect()
}

fn missing(paths: &[&Path]) -> Result<()> {
    let gone: Vec<String> = paths.iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if gone.is_empty() {
        Ok(())
    } else {
        Err(Error::Dataset(format!("missing input(s): {}", gone.join(", "))))
    }
}

fn emit_report(out: &Path, report: &MetricReport) -> Result<()> {
    fs::create_dir_all(out)?;
    write_json(&out.join("report.json"), report)?;
    fs::write(out.join("report.tsv"), report.to_table())?;
    write_plots(out, &[report])?;
    println!(
        "config_hash={} precision={:.4} auc={:.4} mean_iou={:.4} accuracy={:.4} failures={}",
        report.config_hash, report.precision_at_20, report.auc, report.mean_iou, report.accuracy, report.failures
    );
    Ok(())
}

fn cmd_eval(cfg_path: Option<&Path>, gt: Option<&Path>, results: &[PathBuf], checkpoint: Option<&Path>, out: &Path) -> Result<()> {
    let mut inputs: Vec<&Path> = results.iter().map(PathBuf::as_path).collect();
    inputs.extend(gt);
    inputs.extend(checkpoint);
    missing(&inputs)?;
    let cfg = load_config(cfg_path)?;
    let sequences = match gt {
        Some(root) => load_all(root)?.0,
        None => benchmark_sequences(&cfg)?,
    };
    if let Some(ck) = checkpoint {
        let (cfg, params) = load_weights(cfg_path, ck)?;
        let model = Model::new(&cfg)?;
        return emit_report(out, &evaluate_model(&model, &params, &sequences)?);
    }
    if results.is_empty() {
        return Err(Error::Config("eval needs --results or --checkpoint".into()));
    }
    let mut runs = Vec::new();
    for path in results {
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let seq = sequences
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Dataset(format!("no ground truth for sequence {id:?}")))?;
        runs.push(SequenceResult {
            id: id.to_string(),
            predicted: read_records(path)?,
            gt: seq.boxes.clone(),
            reset: None,
        });
    }
    emit_report(out, &aggregate(&runs, &cfg.eval, &cfg.hash())?)
}

fn mean_row(label: &str, rows: &[AblationRow]) -> AblationRow {
    let n = rows.len() as f64;
    let avg = |f: fn(&AblationRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    AblationRow {
        label: label.to_string(),
        config_hash: rows[0].config_hash.clone(),
        mean_iou: avg(|r| r.mean_iou),
        auc: avg(|r| r.auc),
        precision: avg(|r| r.precision),
        accuracy: avg(|r| r.accuracy),
        failures: rows.iter().map(|r| r.failures).sum(),
    }
}

fn cmd_ablate(base: RunConfig, out: &Path, variants: &[String], seeds: &[u64], checkpoints: &[String]) -> Result<()> {
    fs::create_dir_all(out)?;
    let bench = benchmark_sequences(&base)?;
    let table = if !checkpoints.is_empty() {
        let pairs: Vec<(String, PathBuf)> = checkpoints
            .iter()
            .map(|s| {
                s.split_once('=')
                    .map(|(l, p)| (l.to_string(), PathBuf::from(p)))
                    .ok_or_else(|| Error::Config(format!("expected label=path, got {s:?}")))
            })
            .collect::<Result<_>>()?;
        missing(&pairs.iter().map(|p| p.1.as_path()).collect::<Vec<_>>())?;
        let entries = pairs.iter().map(|(l, p)| AblationEntry::from_checkpoint(l.clone(), p)).collect::<Result<Vec<_>>>()?;
        run_ablation(&entries, &bench)?
    } else {
        let chosen: Vec<Variant> = if variants.is_empty() {
            Variant::COMPONENT_ROWS.to_vec()
        } else {
            variants
                .iter()
                .map(|v| Variant::parse(v).ok_or_else(|| Error::Config(format!("unknown variant {v:?}"))))
                .collect::<Result<_>>()?
        };
        let seqs = training_data(&base, None)?;
        let mut rows = Vec::new();
        for v in chosen {
            let mut per_seed = Vec::new();
            for &seed in seeds {
                let mut cfg = v.apply(&base);
                cfg.seed = seed;
                let model = Model::new(&cfg)?;
                let trained = train(&model, &seqs, None)?;
                let entry = AblationEntry {
                    label: v.label().to_string(),
                    config: cfg,
                    params: trained.params,
                };
                per_seed.extend(run_ablation(&[entry], &bench)?.rows);
                log_line(&format!("{} seed {seed}: mean_iou {:.4}", v.label(), per_seed.last().map_or(0.0, |r| r.mean_iou)));
            }
            rows.push(mean_row(v.label(), &per_seed));
        }
        AblationTable { rows }
    };
    fs::write(out.join("ablation.csv"), format!("# base_config_hash={}\n{}", base.hash(), table.to_csv()))?;
    write_json(&out.join("ablation.json"), &table)?;
    print!("{}", table.to_csv());
    Ok(())
}

fn cmd_demo(cfg_path: Option<&Path>, checkpoint: Option<&Path>, out: &Path, sequence: Option<&Path>, zf: usize, xf: usize) -> Result<()> {
    let (cfg, params) = match checkpoint {
        Some(ck) => load_weights(cfg_path, ck)?,
        None => {
            let cfg = load_config(cfg_path)?;
            let p = Model::new(&cfg)?.init_params(cfg.seed);
            (cfg, p)
        }
    };
    let seq = match sequence {
        Some(dir) => {
            let parent = dir.parent().unwrap_or(Path::new("."));
            let id = dir.file_name().and_then(|s| s.to_str()).unwrap_or_default();
            load_all(parent)?
                .0
                .into_iter()
                .find(|s| s.id == id)
                .ok_or_else(|| Error::Dataset(format!("could not load sequence {}", dir.display())))?
        }
        None => generate_synthetic_sequence(&cfg.synthetic)?,
    };
    if zf >= seq.len() || xf >= seq.len() {
        return Err(Error::OutOfRange(format!("frames {zf}/{xf} outside a {}-frame sequence", seq.len())));
    }
    let model = Model::new(&cfg)?;
    let (fz, fx) = (seq.frames[zf].load()?, seq.frames[xf].load()?);
    let written = dump_attention_maps(&model, &params, &fz, &seq.boxes[zf], &fx, &seq.boxes[xf], out)?;
    let mut img = (*fx).clone();
    draw_polygon(&mut img, &axis_corners(&seq.boxes[xf]), Rgb([255, 40, 40]));
    img.save(out.join("search_overlay.png"))?;
    fs::write(out.join("config_hash.txt"), format!("{}\n", cfg.hash()))?;
    println!("config_hash={} maps={}", cfg.hash(), written.len());
    Ok(())
}

fn cmd_synth(cfg_path: Option<&Path>, out: &Path, count: usize, length: Option<usize>, seed: u64) -> Result<()> {
    let cfg = load_config(cfg_path)?;
    let mut base: SyntheticSpec = cfg.synthetic.clone();
    if let Some(n) = length {
        base.length = n;
    }
    fs::create_dir_all(out)?;
    for spec in siamattn::data::synthetic::benchmark_specs(&base, count, seed) {
        let rec = generate_synthetic_sequence(&spec)?;
        write_sequence(out, &rec)?;
    }
    println!("config_hash={} sequences={count}", cfg.hash());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg_path = cli.config.as_deref();
    match cli.command {
        Command::Train { out, data } => cmd_train(load_config(cfg_path)?, &out, data.as_deref()),
        Command::Track {
            checkpoint,
            sequence,
            init,
            out,
            mode,
            overlay,
        } => cmd_track(cfg_path, &checkpoint, &sequence, init, &out, mode, overlay.as_deref()),
        Command::Eval { gt, results, checkpoint, out } => cmd_eval(cfg_path, gt.as_deref(), &results, checkpoint.as_deref(), &out),
        Command::Ablate {
            out,
            variants,
            seeds,
            checkpoints,
        } => cmd_ablate(load_config(cfg_path)?, &out, &variants, &seeds, &checkpoints),
        Command::DemoAttention {
            checkpoint,
            out,
            sequence,
            exemplar_frame,
            search_frame,
        } => cmd_demo(cfg_path, checkpoint.as_deref(), &out, sequence.as_deref(), exemplar_frame, search_frame),
        Command::Synth { out, count, length, seed } => cmd_synth(cfg_path, &out, count, length, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let mut lines = text.lines();
            let first = lines.next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {first}");
            for l in lines {
                eprintln!("{l}");
            }
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
