//! Masked-reconstruction pre-training: loss, LR schedule, AdamW, the
//! training loop, gradient checking, and checkpoint serialization.

use crate::error::{Error, Result};
use crate::frontend::Spectrogram;
use crate::model::{
    backward_masked, forward_masked, init_params, is_decayed, is_trainable, ModelConfig,
    ModelParams,
};
use crate::nn::{Scalar, Tensor};
use crate::patch::{patchify, random_mask_plan, MaskPlan, PatchSequence};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::tensorfile::TensorFile;
use rand::Rng;
use std::path::Path;

/// Training hyperparameters. Defaults are the full-size recipe; desk runs
/// shrink epochs and batch size.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub mask_ratio: f64,
    pub normalize_target: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            warmup_epochs: 10,
            batch_size: 512,
            base_lr: 6e-4,
            weight_decay: 0.05,
            mask_ratio: 0.75,
            normalize_target: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self { epochs: 20, warmup_epochs: 2, batch_size: 8, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than the run ({} epochs)",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask_ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-step training record; one CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub epoch: usize,
    pub masked_mse: f32,
    pub lr: f64,
}

impl LossReport {
    pub fn csv_header() -> &'static str {
        "step,epoch,loss,lr"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.epoch, self.masked_mse, self.lr)
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

const TARGET_NORM_EPS: f64 = 1e-6;

/// Standardize one target token to mean 0 / unit variance (population),
/// used only when normalize_target is on.
fn standardized_token<T: Scalar>(token: &[T]) -> Vec<T> {
    let len = T::from_f64(token.len() as f64);
    let mut mean = T::zero();
    for &v in token {
        mean += v;
    }
    mean = mean / len;
    let mut var = T::zero();
    for &v in token {
        let c = v - mean;
        var += c * c;
    }
    var = var / len;
    let rstd = (var + T::from_f64(TARGET_NORM_EPS)).sqrt().recip();
    token.iter().map(|&v| (v - mean) * rstd).collect()
}

/// Mean squared error over masked tokens only; visible tokens never enter.
pub fn masked_mse_flat<T: Scalar>(
    pred: &[T],
    target: &[T],
    token_len: usize,
    plan: &MaskPlan,
    normalize_target: bool,
) -> Result<T> {
    if pred.len() != target.len() || pred.len() != plan.n() * token_len {
        return Err(Error::Shape(format!(
            "loss buffers of {} / {} values do not match {} tokens of {token_len}",
            pred.len(),
            target.len(),
            plan.n()
        )));
    }
    let masked = plan.masked_indices();
    if masked.is_empty() {
        return Err(Error::Config("no masked tokens: loss is undefined".into()));
    }
    let mut acc = T::zero();
    for &p in masked {
        let pr = &pred[p * token_len..(p + 1) * token_len];
        let tg = &target[p * token_len..(p + 1) * token_len];
        if normalize_target {
            let tg = standardized_token(tg);
            for k in 0..token_len {
                let d = pr[k] - tg[k];
                acc += d * d;
            }
        } else {
            for k in 0..token_len {
                let d = pr[k] - tg[k];
                acc += d * d;
            }
        }
    }
    Ok(acc / T::from_f64((masked.len() * token_len) as f64))
}

pub fn masked_mse(
    pred: &PatchSequence,
    target: &PatchSequence,
    plan: &MaskPlan,
    normalize_target: bool,
) -> Result<f32> {
    if pred.token_len != target.token_len || pred.n != target.n {
        return Err(Error::Shape("prediction/target shape mismatch".into()));
    }
    masked_mse_flat(&pred.tokens, &target.tokens, pred.token_len, plan, normalize_target)
}

/// d(loss)/d(pred), scaled by `scale` (1/batch for batch means). Visible
/// positions receive exactly zero.
pub fn masked_mse_backward<T: Scalar>(
    pred: &[T],
    target: &[T],
    token_len: usize,
    plan: &MaskPlan,
    normalize_target: bool,
    scale: T,
    d_pred: &mut [T],
) {
    let masked = plan.masked_indices();
    let norm = T::from_f64(2.0 / (masked.len() * token_len) as f64) * scale;
    for &p in masked {
        let pr = &pred[p * token_len..(p + 1) * token_len];
        let tg = &target[p * token_len..(p + 1) * token_len];
        let dp = &mut d_pred[p * token_len..(p + 1) * token_len];
        if normalize_target {
            let tg = standardized_token(tg);
            for k in 0..token_len {
                dp[k] = (pr[k] - tg[k]) * norm;
            }
        } else {
            for k in 0..token_len {
                dp[k] = (pr[k] - tg[k]) * norm;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

/// Linear warmup to base_lr, then half-cosine decay to 0 at the last step.
pub fn lr_at(step: u64, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let total = (cfg.epochs * steps_per_epoch) as f64;
    let warm = (cfg.warmup_epochs * steps_per_epoch) as f64;
    let s = step as f64;
    if warm > 0.0 && s < warm {
        return cfg.base_lr * s / warm;
    }
    if s >= total {
        return 0.0;
    }
    let progress = (s - warm) / (total - warm);
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.95;
const ADAM_EPS: f64 = 1e-8;

/// First/second moment accumulators plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: ModelParams<f32>,
    pub v: ModelParams<f32>,
}

impl OptimizerState {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(Self { step: 0, m: ModelParams::zeros(cfg)?, v: ModelParams::zeros(cfg)? })
    }
}

/// One decoupled-weight-decay Adam update. Decay applies only to matrix
/// weights (`*.w`); positional tables are never touched.
pub fn adamw_update(
    params: &mut ModelParams<f32>,
    grads: &ModelParams<f32>,
    opt: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) {
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut ps = params.named_tensors_mut();
    let gs = grads.named_tensors();
    let mut ms = opt.m.named_tensors_mut();
    let mut vs = opt.v.named_tensors_mut();
    for i in 0..names.len() {
        let name = &names[i];
        if !is_trainable(name) {
            continue;
        }
        let decay = if is_decayed(name) { weight_decay } else { 0.0 };
        let p = &mut ps[i].1.data;
        let g = &gs[i].1.data;
        let m = &mut ms[i].1.data;
        let v = &mut vs[i].1.data;
        for k in 0..p.len() {
            let gk = g[k] as f64;
            let mk = BETA1 * m[k] as f64 + (1.0 - BETA1) * gk;
            let vk = BETA2 * v[k] as f64 + (1.0 - BETA2) * gk * gk;
            m[k] = mk as f32;
            v[k] = vk as f32;
            let mhat = mk / bc1;
            let vhat = vk / bc2;
            let mut pk = p[k] as f64;
            pk -= lr * decay * pk;
            pk -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            p[k] = pk as f32;
        }
    }
}

// ---------------------------------------------------------------------------
// Training step and loop
// ---------------------------------------------------------------------------

/// One optimizer step over a batch of dataset-normalized spectrograms.
///
/// Each sample gets a fresh mask plan keyed by its global sample counter,
/// so runs are reproducible regardless of batch assembly order.
pub fn train_step(
    batch: &[&Spectrogram],
    params: &mut ModelParams<f32>,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    step: u64,
    epoch: usize,
    steps_per_epoch: usize,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let lr = lr_at(step, steps_per_epoch, cfg);
    let mut grads = ModelParams::<f32>::zeros(&params.cfg)?;
    let n = params.cfg.grid()?.n();
    let l = params.cfg.token_len();
    let inv_batch = 1.0 / batch.len() as f32;
    let mut loss_sum = 0f64;

    for (s, spec) in batch.iter().enumerate() {
        let (seq, _) = patchify(spec, &params.cfg.patch)?;
        let sample_counter = step * batch.len() as u64 + s as u64;
        let plan_seed = derive_seed(cfg.seed, stream::MASK, sample_counter);
        let plan = random_mask_plan(n, cfg.mask_ratio, plan_seed)?;

        let cache = forward_masked(params, &seq.tokens, &plan);
        let loss = masked_mse_flat(&cache.pred, &seq.tokens, l, &plan, cfg.normalize_target)?;
        loss_sum += loss as f64;

        let mut d_pred = vec![0f32; n * l];
        masked_mse_backward(&cache.pred, &seq.tokens, l, &plan, cfg.normalize_target,
            inv_batch, &mut d_pred);
        backward_masked(params, &cache, &plan, &d_pred, &mut grads);
    }

    let masked_mse = (loss_sum / batch.len() as f64) as f32;
    if !masked_mse.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {masked_mse} at step {step} (epoch {epoch}, lr {lr:.3e})"
        )));
    }
    adamw_update(params, &grads, opt, lr, cfg.weight_decay);
    Ok(LossReport { step, epoch, masked_mse, lr })
}

/// Outcome of a full pre-training run.
pub struct TrainRun {
    pub params: ModelParams<f32>,
    pub opt: OptimizerState,
    pub reports: Vec<LossReport>,
}

/// Pre-train from scratch on a normalized corpus.
///
/// Epoch order shuffles sample indices deterministically; trailing partial
/// batches are dropped, so the corpus must hold at least one full batch.
/// When `checkpoint_dir` is given, a checkpoint lands there after every
/// epoch plus a final `ckpt-final.msmm`.
pub fn train(
    corpus: &[Spectrogram],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_report: impl FnMut(&LossReport),
) -> Result<TrainRun> {
    cfg.validate()?;
    let steps_per_epoch = corpus.len() / cfg.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "corpus of {} samples is smaller than one batch of {}",
            corpus.len(),
            cfg.batch_size
        )));
    }
    let mut params = init_params(model_cfg, cfg.seed)?;
    let mut opt = OptimizerState::new(model_cfg)?;
    let mut reports = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let order = epoch_order(corpus.len(), cfg.seed, epoch);
        for b in 0..steps_per_epoch {
            let batch: Vec<&Spectrogram> = order[b * cfg.batch_size..(b + 1) * cfg.batch_size]
                .iter()
                .map(|&i| &corpus[i])
                .collect();
            let report = train_step(&batch, &mut params, &mut opt, cfg, step, epoch,
                steps_per_epoch)?;
            on_report(&report);
            reports.push(report);
            step += 1;
        }
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("ckpt-epoch{epoch:03}.msmm"));
            save_checkpoint(&path, &params, Some(&opt))?;
        }
    }
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(&dir.join("ckpt-final.msmm"), &params, Some(&opt))?;
    }
    Ok(TrainRun { params, opt, reports })
}

/// Deterministic shuffle of 0..len for one epoch (Fisher-Yates).
fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = rng_from_seed(derive_seed(seed, stream::DATA_ORDER, epoch as u64));
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Scalar loss of a full forward pass in whichever precision `params` uses.
pub fn loss_of<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[T],
    plan: &MaskPlan,
    normalize_target: bool,
) -> T {
    let cache = forward_masked(params, tokens, plan);
    masked_mse_flat(&cache.pred, tokens, params.cfg.token_len(), plan, normalize_target)
        .expect("plan has masked tokens")
}

/// Gradient magnitude below which coordinates are compared in absolute
/// terms. Central differences at eps=1e-5 on an O(1) loss carry roundoff
/// and truncation noise around 1e-10 in the derivative itself, so a
/// relative comparison of gradients much smaller than that noise measures
/// the probe, not the backward pass. A wrong backward disagrees at the
/// scale of the true gradient, which this floor leaves fully visible.
pub const GRAD_CHECK_ABS_FLOOR: f64 = 1e-3;

/// Compare analytic gradients against central finite differences on up to
/// `max_samples` randomly chosen coordinates of tensors accepted by
/// `filter`. Returns the maximum relative error observed, where each
/// coordinate contributes |a - n| / max(|a|, |n|, [`GRAD_CHECK_ABS_FLOOR`]).
pub fn grad_check(
    params: &ModelParams<f64>,
    tokens: &[f64],
    plan: &MaskPlan,
    normalize_target: bool,
    max_samples: usize,
    seed: u64,
    filter: impl Fn(&str) -> bool,
) -> f64 {
    let cache = forward_masked(params, tokens, plan);
    let l = params.cfg.token_len();
    let mut grads = ModelParams::<f64>::zeros(&params.cfg).expect("config already validated");
    let mut d_pred = vec![0.0; plan.n() * l];
    masked_mse_backward(&cache.pred, tokens, l, plan, normalize_target, 1.0, &mut d_pred);
    backward_masked(params, &cache, plan, &d_pred, &mut grads);

    // Enumerate candidate coordinates (tensor index, offset).
    let names: Vec<(String, usize)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.numel()))
        .collect();
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for (ti, (name, numel)) in names.iter().enumerate() {
        if is_trainable(name) && filter(name) {
            for k in 0..*numel {
                candidates.push((ti, k));
            }
        }
    }
    let mut rng = rng_from_seed(derive_seed(seed, stream::GRAD_CHECK, 0));
    let picks: Vec<(usize, usize)> = if candidates.len() <= max_samples {
        candidates
    } else {
        (0..max_samples)
            .map(|_| candidates[rng.random_range(0..candidates.len())])
            .collect()
    };

    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (ti, k) in picks {
        let analytic = grads.named_tensors()[ti].1.data[k];
        let orig = probe.named_tensors()[ti].1.data[k];
        probe.named_tensors_mut()[ti].1.data[k] = orig + eps;
        let lp = loss_of(&probe, tokens, plan, normalize_target);
        probe.named_tensors_mut()[ti].1.data[k] = orig - eps;
        let lm = loss_of(&probe, tokens, plan, normalize_target);
        probe.named_tensors_mut()[ti].1.data[k] = orig;
        let numeric = (lp - lm) / (2.0 * eps);
        let rel = (analytic - numeric).abs()
            / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_ABS_FLOOR);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Architecture fingerprint stored alongside weights.
fn config_meta(cfg: &ModelConfig) -> Tensor<f32> {
    let v = vec![
        cfg.enc.dim as f32,
        cfg.enc.depth as f32,
        cfg.enc.heads as f32,
        cfg.enc.mlp_ratio as f32,
        cfg.dec.dim as f32,
        cfg.dec.depth as f32,
        cfg.dec.heads as f32,
        cfg.dec.mlp_ratio as f32,
        cfg.patch.p_f as f32,
        cfg.patch.p_t as f32,
        cfg.n_mels as f32,
        cfg.n_frames as f32,
    ];
    Tensor::from_vec(v, &[12]).expect("fixed-size meta")
}

fn config_from_meta(t: &Tensor<f32>) -> Result<ModelConfig> {
    if t.numel() != 12 {
        return Err(Error::Format("meta.config must hold 12 values".into()));
    }
    let v: Vec<usize> = t.data.iter().map(|&x| x as usize).collect();
    let cfg = ModelConfig {
        enc: crate::model::EncoderConfig { dim: v[0], depth: v[1], heads: v[2], mlp_ratio: v[3] },
        dec: crate::model::DecoderConfig { dim: v[4], depth: v[5], heads: v[6], mlp_ratio: v[7] },
        patch: crate::patch::PatchConfig { p_f: v[8], p_t: v[9] },
        n_mels: v[10],
        n_frames: v[11],
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Serialize params (and optionally optimizer state) to the container.
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams<f32>,
    opt: Option<&OptimizerState>,
) -> Result<()> {
    let mut tf = TensorFile::new();
    tf.push("meta.config", config_meta(&params.cfg))?;
    for (name, tensor) in params.named_tensors() {
        tf.push(&name, tensor.clone())?;
    }
    if let Some(opt) = opt {
        tf.push("opt.step", Tensor::from_vec(vec![opt.step as f32], &[1])?)?;
        for (name, tensor) in opt.m.named_tensors() {
            if is_trainable(&name) {
                tf.push(&format!("opt.m.{name}"), tensor.clone())?;
            }
        }
        for (name, tensor) in opt.v.named_tensors() {
            if is_trainable(&name) {
                tf.push(&format!("opt.v.{name}"), tensor.clone())?;
            }
        }
    }
    tf.write_to(path)
}

/// Load a checkpoint, reconstructing the architecture from its metadata.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, Option<OptimizerState>)> {
    let tf = TensorFile::read_from(path)?;
    let meta = tf
        .get("meta.config")
        .ok_or_else(|| Error::Format("checkpoint is missing meta.config".into()))?;
    let cfg = config_from_meta(meta)?;
    load_into_config(&tf, &cfg)
}

/// Load a checkpoint and require it to match `cfg` exactly; shape errors
/// name the offending tensor.
pub fn load_checkpoint_into(
    path: &Path,
    cfg: &ModelConfig,
) -> Result<(ModelParams<f32>, Option<OptimizerState>)> {
    let tf = TensorFile::read_from(path)?;
    if let Some(meta) = tf.get("meta.config") {
        let stored = config_from_meta(meta)?;
        if stored != *cfg {
            // Shape mismatches produce the more precise per-tensor error
            // below; equal-shape config drift (e.g. head count) lands here.
            load_into_config(&tf, cfg)?;
            return Err(Error::Config(format!(
                "checkpoint was written for a different architecture: {stored:?}"
            )));
        }
    }
    load_into_config(&tf, cfg)
}

fn load_into_config(
    tf: &TensorFile,
    cfg: &ModelConfig,
) -> Result<(ModelParams<f32>, Option<OptimizerState>)> {
    let mut params = ModelParams::<f32>::zeros(cfg)?;
    for (name, tensor) in params.named_tensors_mut() {
        let stored = tf.get_expected(&name, &tensor.shape)?;
        tensor.data.copy_from_slice(&stored.data);
    }
    let opt = if let Some(step) = tf.get("opt.step") {
        let mut state = OptimizerState::new(cfg)?;
        state.step = step.data[0] as u64;
        for (name, tensor) in state.m.named_tensors_mut() {
            if is_trainable(&name) {
                let stored = tf.get_expected(&format!("opt.m.{name}"), &tensor.shape)?;
                tensor.data.copy_from_slice(&stored.data);
            }
        }
        for (name, tensor) in state.v.named_tensors_mut() {
            if is_trainable(&name) {
                let stored = tf.get_expected(&format!("opt.v.{name}"), &tensor.shape)?;
                tensor.data.copy_from_slice(&stored.data);
            }
        }
        Some(state)
    } else {
        None
    };
    Ok((params, opt))
}
