//! The `a2k` command: dataset preparation, statistics, training, inference,
//! evaluation and rendering.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use a2k_core::audio::{load_audio, SpectrogramConfig};
use a2k_core::dataset::{ingest, window_all, Dataset, DatasetManifest, Split};
use a2k_core::keypoints::{
    compute_norm_stats, normalize_base_point, read_keypoints, render_sequence, standardize, write_keypoints, Canvas,
    NormStats, Palette, Space, DEFAULT_FPS, DEFAULT_STATS_LIMIT,
};
use a2k_core::metrics::{average_l1, pck, DEFAULT_PCK_ALPHA};
use a2k_core::train::{fit, generate_sequence, load_model, Ablation, TrainConfig, TrainState, LAST_CHECKPOINT};
use clap::{Parser, Subcommand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] a2k_core::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if !e.is_validation() => EXIT_RUNTIME,
            _ => EXIT_VALIDATION,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "a2k", version, about = "Audio-driven facial keypoint sequence generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest raw keypoint/audio pairs into shards, stats and a manifest.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute per-coordinate normalization statistics of a prepared dataset.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_STATS_LIMIT)]
        limit: usize,
    },
    /// Train G, E and D; writes best.ckpt, last.ckpt and history.jsonl.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the ablation in the config file.
        #[arg(long)]
        ablation: Option<Ablation>,
        /// Continue from `<out>/last.ckpt`.
        #[arg(long)]
        resume: bool,
    },
    /// Generate a keypoint sequence from audio and a reference frame.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        /// Keypoint file whose first frame is the reference (raw pixels).
        #[arg(long)]
        keypoints: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average L1 and PCK of a predicted sequence against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PCK_ALPHA)]
        alpha: f64,
        /// Report average L1 in standardized units using these statistics
        /// (pixels otherwise).
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Draw every frame of a sequence to numbered PNGs.
    Render {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_FPS)]
        fps: f64,
    },
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", path.display())))
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Prepare { manifest, out } => {
            require_file(&manifest, "manifest")?;
            let m = ingest(&manifest, &out, &SpectrogramConfig::default())?;
            let val = m.records.iter().filter(|r| r.split == Some(Split::Val)).count();
            println!(
                "records={} train={} val={}",
                m.records.len(),
                m.records.len() - val,
                val
            );
            println!("manifest={}", out.join("manifest.json").display());
        }
        Command::Stats { data, limit } => stats(&data, limit)?,
        Command::Train {
            config,
            data,
            out,
            ablation,
            resume,
        } => train(&config, &data, &out, ablation, resume)?,
        Command::Infer {
            checkpoint,
            audio,
            keypoints,
            out,
        } => {
            require_file(&checkpoint, "checkpoint")?;
            require_file(&audio, "audio")?;
            require_file(&keypoints, "keypoints")?;
            let model = load_model(&checkpoint)?;
            let clip = load_audio(&audio, model.spectrogram.sample_rate)?;
            let reference = read_keypoints(&keypoints, Space::RawPixel)?;
            let seq = generate_sequence(&model, &clip, &reference.frames()[0])?;
            write_keypoints(&out, &seq)?;
            println!("n_frames={}", seq.len());
        }
        Command::Eval { pred, gt, alpha, stats } => {
            require_file(&pred, "prediction")?;
            require_file(&gt, "ground truth")?;
            let y_hat = read_keypoints(&pred, Space::RawPixel)?;
            let y = read_keypoints(&gt, Space::RawPixel)?;
            let score = pck(&y, &y_hat, alpha)?;
            let l1 = match stats {
                Some(path) => {
                    require_file(&path, "stats")?;
                    let s = NormStats::load(&path)?;
                    let prep = |seq| -> a2k_core::Result<_> { standardize(&normalize_base_point(seq)?, &s) };
                    average_l1(&prep(&y)?, &prep(&y_hat)?)?
                }
                None => average_l1(&y, &y_hat)?,
            };
            println!("pck={score:.4}");
            println!("avg_l1={l1:.6}");
            println!("n_frames={}", y.len());
        }
        Command::Render { seq, out, fps } => {
            require_file(&seq, "sequence")?;
            let s = read_keypoints(&seq, Space::RawPixel)?;
            let written = render_sequence(&s, Canvas::VOX, &Palette::default(), fps, &out)?;
            println!("frames={}", written.len());
        }
    }
    Ok(())
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.json")
    } else {
        data.to_path_buf()
    }
}

fn stats(data: &Path, limit: usize) -> Result<(), CliError> {
    let path = manifest_path(data);
    require_file(&path, "dataset manifest")?;
    let mut manifest = DatasetManifest::load(&path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let sequences = manifest
        .records
        .iter()
        .take(limit)
        .map(|r| read_keypoints(&base.join(&r.keypoint_path), Space::BaseNormalized))
        .collect::<a2k_core::Result<Vec<_>>>()?;
    let stats = compute_norm_stats(&sequences, limit)?;
    let rel = manifest
        .stats_path
        .clone()
        .unwrap_or_else(|| PathBuf::from("stats.json"));
    stats.save(&base.join(&rel))?;
    if manifest.stats_path.is_none() {
        manifest.stats_path = Some(rel.clone());
        manifest.save(&path)?;
    }
    let mean_std = stats.std.iter().sum::<f64>() / stats.std.len() as f64;
    println!("sequences={}", stats.n_sequences_used);
    println!("mean_std={mean_std:.6}");
    println!("stats={}", base.join(rel).display());
    Ok(())
}

fn train(config: &Path, data: &Path, out: &Path, ablation: Option<Ablation>, resume: bool) -> Result<(), CliError> {
    require_file(config, "config")?;
    let mut cfg = TrainConfig::load(config)?;
    if let Some(a) = ablation {
        cfg.ablation = a;
    }
    cfg.validate()?;
    let dataset = Dataset::load(data)?;
    let spec = dataset.manifest.spectrogram.clone().unwrap_or_default();
    let mut state = if resume {
        let last = out.join(LAST_CHECKPOINT);
        require_file(&last, "checkpoint to resume")?;
        let mut s = TrainState::load(&last)?;
        if s.config.ablation != cfg.ablation || s.config.model != cfg.model {
            return Err(CliError::Usage(format!(
                "{} was trained with a different ablation or model",
                last.display()
            )));
        }
        s.config.epochs = cfg.epochs;
        s
    } else {
        TrainState::new(cfg, dataset.stats.clone(), spec)?
    };
    let (window, stride) = (state.config.window, state.config.stride);
    let train = window_all(dataset.split(Split::Train), &dataset.stats, window, stride)?;
    let val = window_all(dataset.split(Split::Val), &dataset.stats, window, stride)?;
    log::info!("{} training windows, {} validation windows", train.len(), val.len());
    let summary = fit(&mut state, &train, &val, out)?;
    println!("steps={}", summary.steps);
    println!("best_epoch={}", summary.best_epoch);
    println!("best_val_l1={:.6}", summary.best_val_l1);
    println!("best_checkpoint={}", summary.best_checkpoint.display());
    Ok(())
}
