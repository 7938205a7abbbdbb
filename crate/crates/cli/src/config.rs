//! Run configuration: one flat `key = value` namespace covering the
//! frontend, model, training, probe, and visualization settings plus paths.
//!
//! Precedence, lowest to highest: built-in desk defaults, config file,
//! `--set key=value` flags, dedicated flags, then the `MSM_SEED` env var.
//! Unknown keys are hard errors. The full effective configuration is echoed
//! into the output directory so any run can be replayed from that file.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use msm_core::downstream::ProbeConfig;
use msm_core::error::{Error, Result};
use msm_core::frontend::FrontendConfig;
use msm_core::model::ModelConfig;
use msm_core::pretrain::TrainConfig;

pub const ECHO_FILE: &str = "effective-config.txt";

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub frontend: FrontendConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub task: String,
    pub n_per_class: usize,
    pub baseline: bool,
    pub viz_ratio: f64,
    pub viz_seed: u64,
    pub viz_pattern: String,
    pub viz_show_visible: bool,
    pub viz_raw: bool,
    pub refs: Vec<(usize, usize)>,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub norm: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub wav: Vec<PathBuf>,
    pub threads: usize,
    /// Keys that were set explicitly (file, flag, or env), for detecting
    /// conflicts with values baked into a checkpoint.
    pub explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            frontend: FrontendConfig::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            probe: ProbeConfig::default(),
            task: "pitch".into(),
            n_per_class: 10,
            baseline: false,
            viz_ratio: 0.75,
            viz_seed: 0,
            viz_pattern: "random".into(),
            viz_show_visible: true,
            viz_raw: false,
            refs: vec![(0, 1), (1, 3)],
            data_dir: None,
            checkpoint: None,
            norm: None,
            out_dir: PathBuf::from("out"),
            wav: Vec::new(),
            threads: 1,
            explicit: BTreeSet::new(),
        }
    }
}

fn parse_as<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("key '{key}': cannot parse '{value}': {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "key '{key}': expected true or false, got '{value}'"
        ))),
    }
}

fn parse_refs(value: &str) -> Result<Vec<(usize, usize)>> {
    let mut refs = Vec::new();
    for part in value.split(';').filter(|p| !p.trim().is_empty()) {
        let (f, t) = part
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("refs entry '{part}' is not 'f,t'")))?;
        refs.push((parse_as("refs", f.trim())?, parse_as("refs", t.trim())?));
    }
    if refs.is_empty() {
        return Err(Error::Config("refs must hold at least one f,t pair".into()));
    }
    Ok(refs)
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "sample_rate" => self.frontend.sample_rate = parse_as(key, value)?,
            "win_length" => self.frontend.win_length = parse_as(key, value)?,
            "hop" => self.frontend.hop = parse_as(key, value)?,
            "n_fft" => self.frontend.n_fft = parse_as(key, value)?,
            "n_mels" => {
                self.frontend.n_mels = parse_as(key, value)?;
                self.model.n_mels = self.frontend.n_mels;
            }
            "f_min" => self.frontend.f_min = parse_as(key, value)?,
            "f_max" => self.frontend.f_max = parse_as(key, value)?,
            "log_floor" => self.frontend.log_floor = parse_as(key, value)?,
            "p_f" => self.model.patch.p_f = parse_as(key, value)?,
            "p_t" => self.model.patch.p_t = parse_as(key, value)?,
            "n_frames" => self.model.n_frames = parse_as(key, value)?,
            "enc_dim" => self.model.enc.dim = parse_as(key, value)?,
            "enc_depth" => self.model.enc.depth = parse_as(key, value)?,
            "enc_heads" => self.model.enc.heads = parse_as(key, value)?,
            "enc_mlp_ratio" => self.model.enc.mlp_ratio = parse_as(key, value)?,
            "dec_dim" => self.model.dec.dim = parse_as(key, value)?,
            "dec_depth" => self.model.dec.depth = parse_as(key, value)?,
            "dec_heads" => self.model.dec.heads = parse_as(key, value)?,
            "dec_mlp_ratio" => self.model.dec.mlp_ratio = parse_as(key, value)?,
            "epochs" => self.train.epochs = parse_as(key, value)?,
            "warmup_epochs" => self.train.warmup_epochs = parse_as(key, value)?,
            "batch_size" => self.train.batch_size = parse_as(key, value)?,
            "base_lr" => self.train.base_lr = parse_as(key, value)?,
            "weight_decay" => self.train.weight_decay = parse_as(key, value)?,
            "mask_ratio" => self.train.mask_ratio = parse_as(key, value)?,
            "normalize_target" => self.train.normalize_target = parse_bool(key, value)?,
            "seed" => self.train.seed = parse_as(key, value)?,
            "task" => self.task = value.into(),
            "n_per_class" => self.n_per_class = parse_as(key, value)?,
            "baseline" => self.baseline = parse_bool(key, value)?,
            "probe_hidden" => self.probe.hidden_units = parse_as(key, value)?,
            "probe_epochs" => self.probe.epochs = parse_as(key, value)?,
            "probe_lr" => self.probe.lr = parse_as(key, value)?,
            "probe_batch" => self.probe.batch_size = parse_as(key, value)?,
            "probe_seed" => self.probe.seed = parse_as(key, value)?,
            "viz_ratio" => self.viz_ratio = parse_as(key, value)?,
            "viz_seed" => self.viz_seed = parse_as(key, value)?,
            "viz_pattern" => self.viz_pattern = value.into(),
            "viz_show_visible" => self.viz_show_visible = parse_bool(key, value)?,
            "viz_raw" => self.viz_raw = parse_bool(key, value)?,
            "refs" => self.refs = parse_refs(value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "norm" => self.norm = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "wav" => {
                self.wav = value
                    .split(',')
                    .filter(|p| !p.trim().is_empty())
                    .map(|p| PathBuf::from(p.trim()))
                    .collect()
            }
            "threads" => self.threads = parse_as(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Parse a `key = value` file. `#` starts a comment; blank lines are
    /// skipped.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected 'key = value', got '{raw}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        }
        Ok(())
    }

    /// Apply `MSM_SEED` if present; it wins over file and flags.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(value) = std::env::var("MSM_SEED") {
            self.set("seed", &value)?;
        }
        Ok(())
    }

    /// Cross-field validation beyond what each component checks itself.
    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.probe.validate()?;
        if self.frontend.n_mels != self.model.n_mels {
            return Err(Error::Config(format!(
                "frontend n_mels {} != model n_mels {}",
                self.frontend.n_mels, self.model.n_mels
            )));
        }
        if !(self.viz_ratio > 0.0 && self.viz_ratio < 1.0) {
            return Err(Error::Config(format!("viz_ratio {} outside (0, 1)", self.viz_ratio)));
        }
        if self.viz_pattern != "random" {
            msm_core::patch::MaskPattern::parse(&self.viz_pattern)?;
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        match self.task.as_str() {
            "pitch" | "polyphony" => {}
            other => {
                return Err(Error::Config(format!(
                    "unknown task '{other}' (expected pitch or polyphony)"
                )))
            }
        }
        Ok(())
    }

    /// Every key with its current value, parseable by [`Self::load_file`].
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# effective configuration");
        let _ = writeln!(s, "sample_rate = {}", self.frontend.sample_rate);
        let _ = writeln!(s, "win_length = {}", self.frontend.win_length);
        let _ = writeln!(s, "hop = {}", self.frontend.hop);
        let _ = writeln!(s, "n_fft = {}", self.frontend.n_fft);
        let _ = writeln!(s, "n_mels = {}", self.frontend.n_mels);
        let _ = writeln!(s, "f_min = {}", self.frontend.f_min);
        let _ = writeln!(s, "f_max = {}", self.frontend.f_max);
        let _ = writeln!(s, "log_floor = {}", self.frontend.log_floor);
        let _ = writeln!(s, "p_f = {}", self.model.patch.p_f);
        let _ = writeln!(s, "p_t = {}", self.model.patch.p_t);
        let _ = writeln!(s, "n_frames = {}", self.model.n_frames);
        let _ = writeln!(s, "enc_dim = {}", self.model.enc.dim);
        let _ = writeln!(s, "enc_depth = {}", self.model.enc.depth);
        let _ = writeln!(s, "enc_heads = {}", self.model.enc.heads);
        let _ = writeln!(s, "enc_mlp_ratio = {}", self.model.enc.mlp_ratio);
        let _ = writeln!(s, "dec_dim = {}", self.model.dec.dim);
        let _ = writeln!(s, "dec_depth = {}", self.model.dec.depth);
        let _ = writeln!(s, "dec_heads = {}", self.model.dec.heads);
        let _ = writeln!(s, "dec_mlp_ratio = {}", self.model.dec.mlp_ratio);
        let _ = writeln!(s, "epochs = {}", self.train.epochs);
        let _ = writeln!(s, "warmup_epochs = {}", self.train.warmup_epochs);
        let _ = writeln!(s, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(s, "base_lr = {}", self.train.base_lr);
        let _ = writeln!(s, "weight_decay = {}", self.train.weight_decay);
        let _ = writeln!(s, "mask_ratio = {}", self.train.mask_ratio);
        let _ = writeln!(s, "normalize_target = {}", self.train.normalize_target);
        let _ = writeln!(s, "seed = {}", self.train.seed);
        let _ = writeln!(s, "task = {}", self.task);
        let _ = writeln!(s, "n_per_class = {}", self.n_per_class);
        let _ = writeln!(s, "baseline = {}", self.baseline);
        let _ = writeln!(s, "probe_hidden = {}", self.probe.hidden_units);
        let _ = writeln!(s, "probe_epochs = {}", self.probe.epochs);
        let _ = writeln!(s, "probe_lr = {}", self.probe.lr);
        let _ = writeln!(s, "probe_batch = {}", self.probe.batch_size);
        let _ = writeln!(s, "probe_seed = {}", self.probe.seed);
        let _ = writeln!(s, "viz_ratio = {}", self.viz_ratio);
        let _ = writeln!(s, "viz_seed = {}", self.viz_seed);
        let _ = writeln!(s, "viz_pattern = {}", self.viz_pattern);
        let _ = writeln!(s, "viz_show_visible = {}", self.viz_show_visible);
        let _ = writeln!(s, "viz_raw = {}", self.viz_raw);
        let refs: Vec<String> = self.refs.iter().map(|(f, t)| format!("{f},{t}")).collect();
        let _ = writeln!(s, "refs = {}", refs.join(";"));
        if let Some(p) = &self.data_dir {
            let _ = writeln!(s, "data_dir = {}", p.display());
        }
        if let Some(p) = &self.checkpoint {
            let _ = writeln!(s, "checkpoint = {}", p.display());
        }
        if let Some(p) = &self.norm {
            let _ = writeln!(s, "norm = {}", p.display());
        }
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        if !self.wav.is_empty() {
            let wavs: Vec<String> = self.wav.iter().map(|p| p.display().to_string()).collect();
            let _ = writeln!(s, "wav = {}", wavs.join(","));
        }
        let _ = writeln!(s, "threads = {}", self.threads);
        s
    }

    /// Create the output directory and drop the effective config into it.
    pub fn prepare_out_dir(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir)?;
        std::fs::write(self.out_dir.join(ECHO_FILE), self.echo())?;
        Ok(self.out_dir.clone())
    }

    /// Model-geometry keys that must agree with a loaded checkpoint.
    pub fn model_keys_conflicting_with(&self, ckpt: &ModelConfig) -> Vec<String> {
        let mine = &self.model;
        let pairs: [(&str, usize, usize); 11] = [
            ("enc_dim", mine.enc.dim, ckpt.enc.dim),
            ("enc_depth", mine.enc.depth, ckpt.enc.depth),
            ("enc_heads", mine.enc.heads, ckpt.enc.heads),
            ("enc_mlp_ratio", mine.enc.mlp_ratio, ckpt.enc.mlp_ratio),
            ("dec_dim", mine.dec.dim, ckpt.dec.dim),
            ("dec_depth", mine.dec.depth, ckpt.dec.depth),
            ("dec_heads", mine.dec.heads, ckpt.dec.heads),
            ("dec_mlp_ratio", mine.dec.mlp_ratio, ckpt.dec.mlp_ratio),
            ("p_f", mine.patch.p_f, ckpt.patch.p_f),
            ("p_t", mine.patch.p_t, ckpt.patch.p_t),
            ("n_frames", mine.n_frames, ckpt.n_frames),
        ];
        let mut conflicts: Vec<String> = pairs
            .iter()
            .filter(|(key, a, b)| self.explicit.contains(*key) && a != b)
            .map(|(key, a, b)| format!("{key}: config {a} vs checkpoint {b}"))
            .collect();
        if self.explicit.contains("n_mels") && mine.n_mels != ckpt.n_mels {
            conflicts.push(format!(
                "n_mels: config {} vs checkpoint {}",
                mine.n_mels, ckpt.n_mels
            ));
        }
        conflicts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("learning_rate", "0.1").unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
    }

    #[test]
    fn file_parsing_handles_comments_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# a comment\nepochs = 5\nbase_lr = 0.001  # trailing comment\n\nseed = 9\n",
        )
        .unwrap();
        let mut cfg = RunConfig::default();
        cfg.load_file(&path).unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.base_lr, 0.001);
        assert_eq!(cfg.train.seed, 9);
        assert!(cfg.explicit.contains("epochs"));

        cfg.set("seed", "11").unwrap();
        assert_eq!(cfg.train.seed, 11);
    }

    #[test]
    fn malformed_lines_report_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cfg");
        std::fs::write(&path, "epochs 5\n").unwrap();
        let mut cfg = RunConfig::default();
        let err = cfg.load_file(&path).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("epochs", "7").unwrap();
        cfg.set("wav", "a.wav,b.wav").unwrap();
        cfg.set("refs", "2,3;0,0").unwrap();
        cfg.set("checkpoint", "ckpt.msmm").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("echo.cfg");
        std::fs::write(&path, cfg.echo()).unwrap();

        let mut back = RunConfig::default();
        back.load_file(&path).unwrap();
        assert_eq!(back.train.epochs, 7);
        assert_eq!(back.wav, vec![PathBuf::from("a.wav"), PathBuf::from("b.wav")]);
        assert_eq!(back.refs, vec![(2, 3), (0, 0)]);
        assert_eq!(back.checkpoint, Some(PathBuf::from("ckpt.msmm")));
        assert_eq!(back.echo(), cfg.echo());
    }

    #[test]
    fn n_mels_updates_frontend_and_model_together() {
        let mut cfg = RunConfig::default();
        cfg.set("n_mels", "64").unwrap();
        assert_eq!(cfg.frontend.n_mels, 64);
        assert_eq!(cfg.model.n_mels, 64);
        cfg.validate().unwrap();
    }

    #[test]
    fn conflicting_model_keys_are_detected_only_when_explicit() {
        let mut cfg = RunConfig::default();
        let mut ckpt = cfg.model;
        ckpt.enc.dim = 128;
        // Not explicitly set: the checkpoint value wins silently.
        assert!(cfg.model_keys_conflicting_with(&ckpt).is_empty());
        cfg.set("enc_dim", "64").unwrap();
        let conflicts = cfg.model_keys_conflicting_with(&ckpt);
        assert_eq!(conflicts.len(), 1);
        assert!(conflicts[0].contains("enc_dim"));
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("epochs", "soon").unwrap_err().to_string();
        assert!(err.contains("epochs"), "{err}");
        let err = cfg.set("normalize_target", "yes").unwrap_err().to_string();
        assert!(err.contains("true or false"), "{err}");
        let err = cfg.set("refs", "1;2").unwrap_err().to_string();
        assert!(err.contains("f,t"), "{err}");
    }
}
