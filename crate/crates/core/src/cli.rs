//! Command line front end: `degrade`, `train`, `eval` and `infer`.

use std::fs::OpenOptions;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use crate::checkpoint;
use crate::codec::{CompressionConfig, Ffmpeg};
use crate::config::{parse_config, RunManifest};
use crate::degradation::{degrade_clip, DegradationConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, load_dataset, EvalOptions};
use crate::frame::{load_clip, save_clip, BitDepth};
use crate::imageops::EnhanceConfig;
use crate::recurrence::{super_resolve, InferenceMode};
use crate::training::{TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "vsr", version, about = "Compression-robust recurrent video super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Blur, downsample and optionally compress an HR frame directory.
    Degrade(DegradeArgs),
    /// Train a model from a JSON config on HR clips.
    Train(TrainArgs),
    /// Score a checkpoint over a set of CRFs.
    Eval(EvalArgs),
    /// Super-resolve an LR frame directory.
    Infer(InferArgs),
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 1.5)]
    pub sigma: f64,
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    /// Compress the LR clip with H.264 at this CRF.
    #[arg(long)]
    pub crf: Option<u8>,
    /// Scratch directory for the encoder.
    #[arg(long)]
    pub workdir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON config; omitted keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// HR clip directory (one subdirectory per clip).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from `<out>/checkpoint`.
    #[arg(long)]
    pub resume: bool,
    /// Overrides `total_steps`.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Bidirectional {
    /// Average forward and backward predictions.
    Avg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// CRF values; 0 means uncompressed.
    #[arg(long, value_delimiter = ',', default_value = "0,15,25,35")]
    pub crf: Vec<u8>,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value_t = crate::evaluation::DEFAULT_BORDER)]
    pub border: usize,
    /// Leading frames excluded from scoring.
    #[arg(long, default_value_t = 0)]
    pub skip_frames: usize,
    #[arg(long, value_enum)]
    pub bidirectional: Option<Bidirectional>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum)]
    pub bidirectional: Option<Bidirectional>,
    /// Write 16-bit PNGs.
    #[arg(long)]
    pub sixteen_bit: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn mode(b: Option<Bidirectional>) -> InferenceMode {
    match b {
        Some(Bidirectional::Avg) => InferenceMode::BidirectionalAverage,
        None => InferenceMode::ForwardOnly,
    }
}

/// Enhancement settings stored with the checkpoint, or the defaults.
fn enhance_of(ck: &checkpoint::Checkpoint) -> EnhanceConfig {
    ck.train.as_ref().map(|t| t.enhance).unwrap_or_default()
}

pub fn degrade(a: &DegradeArgs) -> Result<RunManifest> {
    let t0 = Instant::now();
    let cfg = DegradationConfig {
        blur_sigma: a.sigma,
        scale: a.scale,
        ..DegradationConfig::default()
    };
    cfg.validate()?;
    let hr = load_clip(&a.input)?;
    let mut lr = degrade_clip(&hr, &cfg)?;
    let mut manifest = RunManifest::new("degrade", a.seed);
    if let Some(crf) = a.crf {
        let ccfg = CompressionConfig::with_crf(crf);
        ccfg.validate()?;
        let codec = Ffmpeg::from_env();
        manifest.codec_version = Some(codec.version()?);
        let scratch;
        let workdir = match &a.workdir {
            Some(d) => d.as_path(),
            None => {
                scratch = tempfile::tempdir()?;
                scratch.path()
            }
        };
        lr = codec.compress_clip(&lr, &ccfg, workdir)?;
    }
    save_clip(&lr, &a.output, BitDepth::Eight)?;
    info!("wrote {} LR frames to {}", lr.len(), a.output.display());
    manifest = manifest.with_config(&serde_json::json!({ "degradation": cfg, "crf": a.crf }))?;
    manifest.artifact("input", &a.input);
    manifest.artifact("output", &a.output);
    manifest.wall_clock_secs = t0.elapsed().as_secs_f64();
    manifest.write(&a.output)?;
    Ok(manifest)
}

pub fn train(a: &TrainArgs) -> Result<RunManifest> {
    let t0 = Instant::now();
    let mut cfg = match &a.config {
        Some(p) => parse_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.steps {
        cfg.total_steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    if let Some(n) = a.threads {
        // a global pool can only be installed once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let data = load_dataset(&a.data)?;
    let codec = Ffmpeg::from_env();
    let needs_codec = cfg.aug_prob > 0.0 && cfg.aug_start_step() < cfg.total_steps;
    let codec_version = if needs_codec { Some(codec.version()?) } else { None };
    let ckpt_dir = a.out.join("checkpoint");
    let mut trainer = if a.resume {
        let ck = checkpoint::load(&ckpt_dir)?;
        let opt = ck.optimizer.ok_or_else(|| Error::Checkpoint {
            path: ckpt_dir.clone(),
            reason: "no optimizer state to resume from".into(),
        })?;
        info!("resuming at step {}", ck.step);
        Trainer::from_state(cfg.clone(), ck.params, opt, ck.step, data)?
    } else {
        Trainer::new(cfg.clone(), data)?
    };
    trainer = trainer.with_codec(codec).with_workdir(a.out.join("scratch"));
    std::fs::create_dir_all(&a.out)?;
    let log_path = a.out.join("train_log.jsonl");
    let log = OpenOptions::new()
        .create(true)
        .append(a.resume)
        .write(true)
        .truncate(!a.resume)
        .open(&log_path)?;
    let mut hash = String::new();
    let history = trainer.run(BufWriter::new(log), |t| {
        hash = checkpoint::save(&ckpt_dir, &t.params, Some(&t.opt), t.step, Some(&t.cfg))?;
        info!("step {}: checkpoint {}", t.step, &hash[..12]);
        Ok(())
    })?;
    if let Some(last) = history.last() {
        info!("finished at step {} with loss {:.6}", last.step + 1, last.total);
    }
    let _ = std::fs::remove_dir_all(a.out.join("scratch"));
    let mut manifest = RunManifest::new("train", cfg.seed).with_config(&cfg)?;
    manifest.codec_version = codec_version;
    manifest.checkpoint_sha256 = Some(hash);
    manifest.artifact("data", &a.data);
    manifest.artifact("checkpoint", &ckpt_dir);
    manifest.artifact("log", &log_path);
    manifest.wall_clock_secs = t0.elapsed().as_secs_f64();
    manifest.write(&a.out)?;
    Ok(manifest)
}

pub fn eval(a: &EvalArgs) -> Result<RunManifest> {
    let t0 = Instant::now();
    let ck = checkpoint::load(&a.model)?;
    let data = load_dataset(&a.data)?;
    let mut opts = EvalOptions {
        border_crop: a.border,
        frames_skipped: a.skip_frames,
        enhance: enhance_of(&ck),
        mode: mode(a.bidirectional),
        ..EvalOptions::default()
    };
    if let Some(t) = &ck.train {
        opts.degradation = t.degradation;
        opts.compression = t.compression.clone();
    }
    let mut manifest = RunManifest::new("eval", a.seed);
    if a.crf.iter().any(|&c| c > 0) {
        manifest.codec_version = Some(opts.codec.version()?);
    }
    let report = evaluate(&ck.params, &data, &a.crf, &opts)?;
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&a.report, report.to_json()?)?;
    manifest.artifact("report", &a.report);
    if let Some(csv) = &a.csv {
        std::fs::write(csv, report.to_csv())?;
        manifest.artifact("csv", csv);
    }
    for (crf, r) in &report.aggregate {
        info!("crf {crf:>2}: Y {:.2} dB / {:.4}, RGB {:.2} dB / {:.4}", r.psnr_y, r.ssim_y, r.psnr_rgb, r.ssim_rgb);
    }
    manifest = manifest.with_config(&serde_json::json!({
        "crf": a.crf,
        "border": a.border,
        "skip_frames": a.skip_frames,
        "mode": opts.mode,
    }))?;
    manifest.checkpoint_sha256 = Some(ck.sha256);
    manifest.artifact("model", &a.model);
    manifest.artifact("data", &a.data);
    manifest.wall_clock_secs = t0.elapsed().as_secs_f64();
    manifest.write(report_dir(&a.report))?;
    Ok(manifest)
}

fn report_dir(p: &Path) -> &Path {
    p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

pub fn infer(a: &InferArgs) -> Result<RunManifest> {
    let t0 = Instant::now();
    let ck = checkpoint::load(&a.model)?;
    let lr = load_clip(&a.input)?;
    let m = mode(a.bidirectional);
    let hr = super_resolve(&ck.params, &lr, &enhance_of(&ck), m)?;
    let depth = if a.sixteen_bit { BitDepth::Sixteen } else { BitDepth::Eight };
    save_clip(&hr, &a.output, depth)?;
    info!("wrote {} frames of {}x{} to {}", hr.len(), hr.width(), hr.height(), a.output.display());
    let mut manifest = RunManifest::new("infer", a.seed).with_config(&serde_json::json!({ "mode": m }))?;
    manifest.checkpoint_sha256 = Some(ck.sha256);
    manifest.artifact("model", &a.model);
    manifest.artifact("input", &a.input);
    manifest.artifact("output", &a.output);
    manifest.wall_clock_secs = t0.elapsed().as_secs_f64();
    manifest.write(&a.output)?;
    Ok(manifest)
}

pub fn run(cli: &Cli) -> Result<RunManifest> {
    match &cli.command {
        Command::Degrade(a) => degrade(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
    }
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
