//! `msm`: masked spectrogram modeling pipeline in one executable.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O or file-format
//! error, 4 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msm_core::error::{Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "msm",
    version,
    about = "Masked spectrogram modeling: frontend, pre-training, features, probes, figures",
    after_help = "Config files hold `key = value` lines (# comments). Any key can also be \
set with --set KEY=VALUE; dedicated flags override both, and MSM_SEED overrides the seed."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines; # starts a comment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. --set epochs=5.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Input directory (prep: WAV files; pretrain: a prep output dir).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Checkpoint to load.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Normalization stats file (tensor container with a `norm` entry).
    #[arg(long)]
    norm: Option<PathBuf>,
    /// Output directory; receives the echoed effective config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Run seed (MSM_SEED env var wins over this).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker cap for per-item stages; training is always sequential.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Cache log-mel spectrograms and dataset NormStats for a WAV directory.
    Prep(Box<Common>),
    /// Pre-train on a prepped corpus, checkpointing every epoch.
    Pretrain(Box<Common>),
    /// Embed WAV files with a trained checkpoint.
    Extract {
        #[command(flatten)]
        common: Box<Common>,
        /// WAV files to embed (also settable via the `wav` config key).
        #[arg(value_name = "WAV")]
        wavs: Vec<PathBuf>,
    },
    /// Run a synthetic task end to end and report probe accuracy.
    Probe {
        #[command(flatten)]
        common: Box<Common>,
        /// Task name: pitch or polyphony.
        #[arg(long)]
        task: Option<String>,
        /// Clips generated per class.
        #[arg(long)]
        n_per_class: Option<usize>,
        /// Probe the mel mean-pool baseline instead of a checkpoint.
        #[arg(long)]
        baseline: bool,
        /// Probe hidden width (0 = linear probe).
        #[arg(long)]
        probe_hidden: Option<usize>,
        #[arg(long)]
        probe_epochs: Option<usize>,
        #[arg(long)]
        probe_lr: Option<f32>,
        #[arg(long)]
        probe_batch: Option<usize>,
        #[arg(long)]
        probe_seed: Option<u64>,
    },
    /// Render a masked-reconstruction triptych for one WAV.
    VizRecon {
        #[command(flatten)]
        common: Box<Common>,
        /// Input clip.
        #[arg(long)]
        wav: Option<PathBuf>,
        /// Mask ratio for the random pattern.
        #[arg(long)]
        ratio: Option<f64>,
        /// Mask pattern: random, vertical, horizontal, or chessboard.
        #[arg(long)]
        pattern: Option<String>,
        /// Seed for the random mask.
        #[arg(long)]
        mask_seed: Option<u64>,
        /// Show raw decoder output at visible positions too.
        #[arg(long)]
        raw: bool,
    },
    /// Sweep mask ratios 0.40..0.99 on one WAV; images plus mse CSV.
    VizSweep {
        #[command(flatten)]
        common: Box<Common>,
        #[arg(long)]
        wav: Option<PathBuf>,
        #[arg(long)]
        mask_seed: Option<u64>,
    },
    /// Render last-layer attention heatmaps for reference patches.
    VizAttn {
        #[command(flatten)]
        common: Box<Common>,
        #[arg(long)]
        wav: Option<PathBuf>,
        /// Reference patch as `f,t` (repeatable).
        #[arg(long = "r", value_name = "F,T")]
        refs: Vec<String>,
    },
    /// Verify patch-grid conformance and the analytic gradients.
    Selftest,
}

fn build_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.load_file(path)?;
    }
    for kv in &common.set {
        let (key, value) = kv.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set '{kv}' is not KEY=VALUE"))
        })?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(p) = &common.data_dir {
        cfg.set("data_dir", &p.display().to_string())?;
    }
    if let Some(p) = &common.checkpoint {
        cfg.set("checkpoint", &p.display().to_string())?;
    }
    if let Some(p) = &common.norm {
        cfg.set("norm", &p.display().to_string())?;
    }
    if let Some(p) = &common.out_dir {
        cfg.set("out_dir", &p.display().to_string())?;
    }
    if let Some(s) = common.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(t) = common.threads {
        cfg.set("threads", &t.to_string())?;
    }
    cfg.apply_env()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Prep(common) => {
            let cfg = build_config(&common)?;
            cfg.validate()?;
            commands::prep(&cfg)
        }
        Cmd::Pretrain(common) => {
            let cfg = build_config(&common)?;
            cfg.validate()?;
            commands::pretrain(&cfg)
        }
        Cmd::Extract { common, wavs } => {
            let mut cfg = build_config(&common)?;
            if !wavs.is_empty() {
                let joined: Vec<String> = wavs.iter().map(|p| p.display().to_string()).collect();
                cfg.set("wav", &joined.join(","))?;
            }
            cfg.validate()?;
            commands::extract(&cfg)
        }
        Cmd::Probe {
            common,
            task,
            n_per_class,
            baseline,
            probe_hidden,
            probe_epochs,
            probe_lr,
            probe_batch,
            probe_seed,
        } => {
            let mut cfg = build_config(&common)?;
            if let Some(t) = task {
                cfg.set("task", &t)?;
            }
            if let Some(n) = n_per_class {
                cfg.set("n_per_class", &n.to_string())?;
            }
            if baseline {
                cfg.set("baseline", "true")?;
            }
            if let Some(h) = probe_hidden {
                cfg.set("probe_hidden", &h.to_string())?;
            }
            if let Some(e) = probe_epochs {
                cfg.set("probe_epochs", &e.to_string())?;
            }
            if let Some(lr) = probe_lr {
                cfg.set("probe_lr", &lr.to_string())?;
            }
            if let Some(b) = probe_batch {
                cfg.set("probe_batch", &b.to_string())?;
            }
            if let Some(s) = probe_seed {
                cfg.set("probe_seed", &s.to_string())?;
            }
            cfg.validate()?;
            commands::probe(&cfg)
        }
        Cmd::VizRecon { common, wav, ratio, pattern, mask_seed, raw } => {
            let mut cfg = build_config(&common)?;
            if let Some(w) = wav {
                cfg.set("wav", &w.display().to_string())?;
            }
            if let Some(r) = ratio {
                cfg.set("viz_ratio", &r.to_string())?;
            }
            if let Some(p) = pattern {
                cfg.set("viz_pattern", &p)?;
            }
            if let Some(s) = mask_seed {
                cfg.set("viz_seed", &s.to_string())?;
            }
            if raw {
                cfg.set("viz_raw", "true")?;
            }
            cfg.validate()?;
            commands::viz_recon(&cfg)
        }
        Cmd::VizSweep { common, wav, mask_seed } => {
            let mut cfg = build_config(&common)?;
            if let Some(w) = wav {
                cfg.set("wav", &w.display().to_string())?;
            }
            if let Some(s) = mask_seed {
                cfg.set("viz_seed", &s.to_string())?;
            }
            cfg.validate()?;
            commands::viz_sweep(&cfg)
        }
        Cmd::VizAttn { common, wav, refs } => {
            let mut cfg = build_config(&common)?;
            if let Some(w) = wav {
                cfg.set("wav", &w.display().to_string())?;
            }
            if !refs.is_empty() {
                cfg.set("refs", &refs.join(";"))?;
            }
            cfg.validate()?;
            commands::viz_attn(&cfg)
        }
        Cmd::Selftest => commands::selftest(),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::ShapeMismatch { .. } => 2,
        Error::Io(_) | Error::Wav(_) | Error::SampleRate { .. } | Error::Format(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
