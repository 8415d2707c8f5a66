use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use stlpd::check::run_selfcheck;
use stlpd::data::ccpd::parse_ccpd_bytes;
use stlpd::data::{
    load_samples, read_ppm, sample_seed, save_samples, synth_sample, write_index, write_ppm, Image, IndexRow, Preset,
    INDEX_FILE,
};
use stlpd::engine::train::CHECKPOINT_FILE;
use stlpd::engine::{
    detect, evaluate, evaluate_detections, format_log, format_report, load_weights, save_weights, train, DetectConfig,
    Detection, EvalConfig,
};
use stlpd::geom::{BoxXYXY, Quad};

mod config;
mod draw;

use config::{parse_config, render_config, RunConfig};

/// Exit status 2: the invocation itself is wrong.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "stlpd", version, about = "Single-target license plate detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn preset_arg(s: &str) -> Result<String, String> {
    match Preset::by_name(s) {
        Ok(_) => Ok(s.to_string()),
        Err(_) => Err(format!(
            "unknown preset `{s}`; available: {}",
            Preset::names().collect::<Vec<_>>().join(", ")
        )),
    }
}

#[derive(clap::Args, Clone, Copy)]
struct DetectArgs {
    /// Minimum sigmoid score kept before suppression.
    #[arg(long, default_value_t = 0.02)]
    score_threshold: f32,
    /// IoU above which a lower-scored box is suppressed.
    #[arg(long, default_value_t = 0.4)]
    nms_iou: f32,
}

impl From<DetectArgs> for DetectConfig {
    fn from(a: DetectArgs) -> Self {
        DetectConfig {
            score_threshold: a.score_threshold,
            nms_iou: a.nms_iou,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: PPM images plus index.tsv.
    Synth {
        #[arg(long, value_parser = preset_arg)]
        preset: String,
        #[arg(long)]
        count: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes model.stlpdw, train.log and config.txt.
    Train {
        /// key = value file; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-1 accuracy report on an indexed dataset.
    Eval {
        #[arg(long, required_unless_present = "detections", conflicts_with = "detections")]
        model: Option<PathBuf>,
        /// Score these detections (`path score x1 y1 x2 y2 qx1 qy1 .. qy4`)
        /// instead of running a model.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 0.7)]
        iou_threshold: f32,
        #[command(flatten)]
        detect: DetectArgs,
    },
    /// Detect plates in one PPM image.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Annotated copy of the image.
        #[arg(long)]
        out: Option<PathBuf>,
        /// One `score x1 y1 x2 y2 qx1 qy1 .. qy4` line per detection.
        #[arg(long)]
        dump: Option<PathBuf>,
        #[command(flatten)]
        detect: DetectArgs,
    },
    /// Build an index from a directory of CCPD-named images.
    CcpdIndex {
        #[arg(long)]
        dir: PathBuf,
        /// Defaults to index.tsv inside --dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle and gradient suites; nonzero exit on any failure.
    Selfcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.downcast_ref::<UsageError>().is_some() { 2 } else { 1 })
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Synth {
            preset,
            count,
            size,
            seed,
            out,
        } => cmd_synth(&preset, count, size, seed, &out)?,
        Command::Train { config, data, out } => cmd_train(config.as_deref(), &data, &out)?,
        Command::Eval {
            model,
            detections,
            data,
            report,
            iou_threshold,
            detect,
        } => cmd_eval(model.as_deref(), detections.as_deref(), &data, report.as_deref(), iou_threshold, detect)?,
        Command::Detect {
            model,
            image,
            out,
            dump,
            detect,
        } => cmd_detect(&model, &image, out.as_deref(), dump.as_deref(), detect)?,
        Command::CcpdIndex { dir, out } => cmd_ccpd_index(&dir, out.as_deref())?,
        Command::Selfcheck { seed } => return Ok(cmd_selfcheck(seed)),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(preset: &str, count: u64, size: usize, seed: u64, out: &Path) -> Result<()> {
    let p = Preset::by_name(preset)?;
    if size == 0 || !size.is_multiple_of(32) {
        return Err(usage(format!("--size {size} must be a positive multiple of 32")));
    }
    let samples = (0..count)
        .map(|i| synth_sample(&p, sample_seed(seed, i), size))
        .collect::<Result<Vec<_>, _>>()?;
    save_samples(out, &samples)?;
    println!("wrote {count} {preset} samples to {}", out.display());
    Ok(())
}

fn cmd_train(config: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            parse_config(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    let echo = render_config(&cfg);
    print!("{echo}");
    let samples = load_samples(data).with_context(|| format!("loading dataset {}", data.display()))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.txt"), &echo)?;
    if cfg.checkpoint {
        cfg.train.checkpoint_dir = Some(out.to_path_buf());
    }
    let steps_per_epoch = samples.len().div_ceil(cfg.train.batch_size.max(1));
    let result = train(&cfg.train, &samples, &mut |s| {
        if s.step % steps_per_epoch == 0 {
            eprintln!("epoch {} step {} lr {} loss {}", s.epoch + 1, s.step, s.lr, s.loss.total);
        }
    })?;
    fs::write(out.join("train.log"), format_log(&result.log))?;
    save_weights(&result.model, &out.join("model.stlpdw"))?;
    if let Some(last) = result.log.last() {
        let l = &last.loss;
        println!("final\tcls {}\tbox {}\tcorner {}\ttotal {}", l.cls, l.bbox, l.corner, l.total);
    }
    if cfg.checkpoint {
        eprintln!("checkpoint: {}", out.join(CHECKPOINT_FILE).display());
    }
    Ok(())
}

/// `score x1 y1 x2 y2 qx1 qy1 qx2 qy2 qx3 qy3 qx4 qy4`
fn format_detection(d: &Detection) -> String {
    let mut fields = vec![d.score];
    fields.extend(d.bbox.as_array());
    fields.extend(d.quad.flat());
    fields.iter().map(f32::to_string).collect::<Vec<_>>().join(" ")
}

fn parse_detection(fields: &[&str]) -> Result<Detection> {
    if fields.len() != 13 {
        bail!("expected 13 numbers, found {}", fields.len());
    }
    let v: Vec<f32> = fields
        .iter()
        .map(|f| f.parse::<f32>().with_context(|| format!("`{f}` is not a number")))
        .collect::<Result<_>>()?;
    Ok(Detection {
        score: v[0],
        bbox: BoxXYXY::new(v[1], v[2], v[3], v[4])?,
        quad: Quad::from_flat(v[5..13].try_into().expect("8 values"))?,
    })
}

/// Highest-scoring detection per image path.
fn read_detections(path: &Path) -> Result<BTreeMap<String, Detection>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut best: BTreeMap<String, Detection> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() || fields[0].starts_with('#') {
            continue;
        }
        let d = parse_detection(&fields[1..]).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        let slot = best.entry(fields[0].to_string()).or_insert(d);
        if d.score > slot.score {
            *slot = d;
        }
    }
    Ok(best)
}

fn cmd_eval(
    model: Option<&Path>,
    detections: Option<&Path>,
    data: &Path,
    report: Option<&Path>,
    iou_threshold: f32,
    detect: DetectArgs,
) -> Result<()> {
    let samples = load_samples(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let metrics = match (model, detections) {
        (Some(m), _) => {
            let size = samples.first().map_or(64, |s| s.image.width);
            let model = load_weights(m, size)?;
            let cfg = EvalConfig {
                iou_threshold,
                detect: detect.into(),
            };
            evaluate(&model, &samples, &cfg)?
        }
        (None, Some(d)) => {
            let best = read_detections(d)?;
            let top: Vec<_> = samples.iter().map(|s| best.get(&s.source).copied()).collect();
            evaluate_detections(&samples, &top, iou_threshold)?
        }
        (None, None) => return Err(usage("one of --model or --detections is required")),
    };
    let text = format_report(&metrics);
    print!("{text}");
    if let Some(path) = report {
        fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_detect(model: &Path, image: &Path, out: Option<&Path>, dump: Option<&Path>, detect_args: DetectArgs) -> Result<()> {
    let img = read_ppm(image)?;
    if img.width != img.height {
        bail!("{} is {}x{}; the detector takes square images", image.display(), img.width, img.height);
    }
    let model = load_weights(model, img.width)?;
    let dets = detect(&model, &img, &detect_args.into())?;
    let lines: String = dets.iter().map(|d| format_detection(d) + "\n").collect();
    print!("{lines}");
    if let Some(path) = dump {
        fs::write(path, &lines).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = out {
        let mut canvas: Image = img.clone();
        for d in &dets {
            draw::annotate(&mut canvas, d);
        }
        write_ppm(path, &canvas)?;
    }
    Ok(())
}

fn cmd_ccpd_index(dir: &Path, out: Option<&Path>) -> Result<()> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_ok_and(|t| t.is_file()))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".jpg"))
        .collect();
    names.sort();
    let tag = dir
        .file_name()
        .map(|n| n.to_string_lossy().trim_start_matches("ccpd_").to_string())
        .filter(|t| !t.is_empty())
        .unwrap_or_else(|| "ccpd".to_string());
    let mut rows = Vec::with_capacity(names.len());
    for name in &names {
        let ann = parse_ccpd_bytes(name.as_bytes()).with_context(|| format!("{}/{name}", dir.display()))?;
        rows.push(IndexRow {
            path: name.clone(),
            gt_box: ann.gt_box()?,
            gt_quad: ann.gt_quad()?,
            tag: tag.clone(),
        });
    }
    match out {
        Some(path) => fs::write(path, stlpd::data::index::format_index(&rows))
            .with_context(|| format!("writing {}", path.display()))?,
        None => write_index(dir, &rows)?,
    }
    println!(
        "indexed {} images into {}",
        rows.len(),
        out.map_or(dir.join(INDEX_FILE), Path::to_path_buf).display()
    );
    Ok(())
}

fn cmd_selfcheck(seed: u64) -> ExitCode {
    let outcomes = run_selfcheck(seed);
    for o in &outcomes {
        println!("{}\t{}\t{}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} checks, {failed} failed", outcomes.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
