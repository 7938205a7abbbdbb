//! Shallow-probe evaluation over frozen embeddings.
//!
//! Desk-scale stand-ins for large benchmark suites: seeded generators build
//! small labeled audio tasks (pitch classification, polyphony counting), the
//! model under evaluation only ever produces embeddings, and a small probe
//! trained with cross-entropy on those frozen vectors reports test accuracy.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{scene_embedding, segment_and_encode};
use crate::frontend::{log_mel_spectrogram, FrontendConfig, NormStats, PcmSignal, SAMPLE_RATE};
use crate::model::ModelParams;
use crate::nn::{Scalar, Tensor};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::tensorfile::TensorFile;

/// Which partition an item belongs to. Every item has exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split '{other}'"))),
        }
    }
}

/// One labeled clip.
#[derive(Debug, Clone)]
pub struct TaskItem {
    pub id: String,
    pub signal: PcmSignal,
    /// Index into the dataset's label space.
    pub label: usize,
    pub split: Split,
}

/// A scene-level classification task.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub name: String,
    pub items: Vec<TaskItem>,
    pub label_space: Vec<String>,
}

impl TaskDataset {
    /// Every label indexes the label space and every split is populated.
    pub fn validate(&self) -> Result<()> {
        if self.label_space.is_empty() {
            return Err(Error::Config("task has an empty label space".into()));
        }
        for item in &self.items {
            if item.label >= self.label_space.len() {
                return Err(Error::Config(format!(
                    "item {} has label {} outside the {}-class space",
                    item.id,
                    item.label,
                    self.label_space.len()
                )));
            }
        }
        for split in [Split::Train, Split::Valid, Split::Test] {
            if !self.items.iter().any(|it| it.split == split) {
                return Err(Error::Config(format!("split '{}' is empty", split.name())));
            }
        }
        Ok(())
    }

    pub fn split_items(&self, split: Split) -> impl Iterator<Item = &TaskItem> {
        self.items.iter().filter(move |it| it.split == split)
    }
}

/// Per-class 60/20/20 partition with every split non-empty.
fn split_for(index_in_class: usize, n_per_class: usize) -> Split {
    let test = (n_per_class / 5).max(1);
    let valid = (n_per_class / 5).max(1);
    let train = n_per_class - valid - test;
    if index_in_class < train {
        Split::Train
    } else if index_in_class < train + valid {
        Split::Valid
    } else {
        Split::Test
    }
}

const CLIP_SECONDS: f32 = 1.0;
const PITCH_CLASS_NAMES: [&str; 8] = ["A3", "A#3", "B3", "C4", "C#4", "D4", "D#4", "E4"];

/// One second of a harmonic tone: fundamental plus three partials with
/// per-partial random phase and amplitude jitter, plus light noise.
fn harmonic_tone(fundamental: f32, gain: f32, rng: &mut impl Rng) -> Vec<f32> {
    let n = (CLIP_SECONDS * SAMPLE_RATE as f32) as usize;
    let mut phases = [0f32; 4];
    let mut amps = [0f32; 4];
    for k in 0..4 {
        phases[k] = rng.random::<f32>() * std::f32::consts::TAU;
        amps[k] = (1.0 / (k + 1) as f32) * (0.8 + 0.4 * rng.random::<f32>());
    }
    let mut out = vec![0f32; n];
    for (i, v) in out.iter_mut().enumerate() {
        let t = i as f32 / SAMPLE_RATE as f32;
        let mut s = 0.0;
        for k in 0..4 {
            s += amps[k] * (std::f32::consts::TAU * fundamental * (k + 1) as f32 * t
                + phases[k]).sin();
        }
        *v = gain * s + 0.01 * (rng.random::<f32>() - 0.5);
    }
    out
}

/// Pitch classification proxy: eight semitone classes from A3 (220 Hz) up.
///
/// Labels ascend with fundamental frequency. Each clip is an independent
/// draw, so two items of one class share the label but not the waveform.
pub fn make_sine_pitch_task(n_per_class: usize, seed: u64) -> Result<TaskDataset> {
    if n_per_class < 3 {
        return Err(Error::Config(format!(
            "need at least 3 items per class for a 60/20/20 split, got {n_per_class}"
        )));
    }
    let mut items = Vec::with_capacity(8 * n_per_class);
    for class in 0..8usize {
        let fundamental = 220.0 * (class as f32 / 12.0).exp2();
        let mut rng = rng_from_seed(derive_seed(seed, stream::SYNTH, class as u64));
        for i in 0..n_per_class {
            let gain = 0.15 + 0.1 * rng.random::<f32>();
            let samples = harmonic_tone(fundamental, gain, &mut rng);
            items.push(TaskItem {
                id: format!("pitch-{}-{i:03}", PITCH_CLASS_NAMES[class]),
                signal: PcmSignal::new(samples, SAMPLE_RATE)?,
                label: class,
                split: split_for(i, n_per_class),
            });
        }
    }
    let task = TaskDataset {
        name: "sine-pitch".into(),
        items,
        label_space: PITCH_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    task.validate()?;
    Ok(task)
}

/// Polyphony counting proxy: one, two, or three simultaneous tones.
///
/// Tone fundamentals are log-uniform in [220, 880] Hz with at least a
/// semitone between them, and every mixture is normalized to one RMS so
/// loudness carries no label information.
pub fn make_polyphony_task(n_per_class: usize, seed: u64) -> Result<TaskDataset> {
    if n_per_class < 3 {
        return Err(Error::Config(format!(
            "need at least 3 items per class for a 60/20/20 split, got {n_per_class}"
        )));
    }
    const TARGET_RMS: f32 = 0.1;
    let n = (CLIP_SECONDS * SAMPLE_RATE as f32) as usize;
    let mut items = Vec::with_capacity(3 * n_per_class);
    for class in 0..3usize {
        let voices = class + 1;
        let mut rng = rng_from_seed(derive_seed(seed, stream::SYNTH, 100 + class as u64));
        for i in 0..n_per_class {
            let mut fundamentals: Vec<f32> = Vec::with_capacity(voices);
            while fundamentals.len() < voices {
                let f = 220.0 * (2.0f32 * rng.random::<f32>()).exp2();
                let separated = fundamentals
                    .iter()
                    .all(|&g| (f / g).log2().abs() >= 1.0 / 12.0);
                if separated {
                    fundamentals.push(f);
                }
            }
            let mut mix = vec![0f32; n];
            for &f in &fundamentals {
                let phase = rng.random::<f32>() * std::f32::consts::TAU;
                for (s, v) in mix.iter_mut().enumerate() {
                    let t = s as f32 / SAMPLE_RATE as f32;
                    *v += (std::f32::consts::TAU * f * t + phase).sin();
                }
            }
            for v in &mut mix {
                *v += 0.01 * (rng.random::<f32>() - 0.5);
            }
            let rms = (mix.iter().map(|v| (v * v) as f64).sum::<f64>() / n as f64).sqrt();
            let scale = TARGET_RMS / rms.max(1e-12) as f32;
            for v in &mut mix {
                *v *= scale;
            }
            items.push(TaskItem {
                id: format!("poly-{voices}-{i:03}"),
                signal: PcmSignal::new(mix, SAMPLE_RATE)?,
                label: class,
                split: split_for(i, n_per_class),
            });
        }
    }
    let task = TaskDataset {
        name: "polyphony".into(),
        items,
        label_space: vec!["1".into(), "2".into(), "3".into()],
    };
    task.validate()?;
    Ok(task)
}

// ---------------------------------------------------------------------------
// Embedding extraction
// ---------------------------------------------------------------------------

/// Fixed-width embedding rows with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub data: Vec<f32>,
    pub width: usize,
    pub labels: Vec<usize>,
}

impl EmbeddingSet {
    pub fn new(width: usize) -> Self {
        Self { data: Vec::new(), width, labels: Vec::new() }
    }

    pub fn push(&mut self, row: &[f32], label: usize) -> Result<()> {
        if row.len() != self.width {
            return Err(Error::Shape(format!(
                "embedding of width {} in a set of width {}",
                row.len(),
                self.width
            )));
        }
        self.data.extend_from_slice(row);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.width..(i + 1) * self.width]
    }
}

/// Scene embeddings for every split of a task.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedTask {
    pub train: EmbeddingSet,
    pub valid: EmbeddingSet,
    pub test: EmbeddingSet,
}

impl EmbeddedTask {
    pub fn set(&self, split: Split) -> &EmbeddingSet {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

fn embed_with(
    task: &TaskDataset,
    width: usize,
    mut f: impl FnMut(&PcmSignal) -> Result<Vec<f32>>,
) -> Result<EmbeddedTask> {
    task.validate()?;
    let mut out = EmbeddedTask {
        train: EmbeddingSet::new(width),
        valid: EmbeddingSet::new(width),
        test: EmbeddingSet::new(width),
    };
    for item in &task.items {
        let row = f(&item.signal)?;
        let set = match item.split {
            Split::Train => &mut out.train,
            Split::Valid => &mut out.valid,
            Split::Test => &mut out.test,
        };
        set.push(&row, item.label)?;
    }
    Ok(out)
}

/// Frozen-model scene embeddings for every item of a task.
pub fn embed_dataset(
    task: &TaskDataset,
    params: &ModelParams<f32>,
    norm: &NormStats,
) -> Result<EmbeddedTask> {
    let grid = params.cfg.grid()?;
    let width = grid.n_f * params.cfg.enc.dim;
    embed_with(task, width, |signal| {
        let z = segment_and_encode(signal, params, params.cfg.n_frames, norm)?;
        scene_embedding(&z)
    })
}

/// Model-free baseline: the log-mel spectrogram mean-pooled over time.
pub fn embed_dataset_mel_baseline(task: &TaskDataset) -> Result<EmbeddedTask> {
    let cfg = FrontendConfig::default();
    embed_with(task, cfg.n_mels, |signal| {
        let spec = log_mel_spectrogram(signal, &cfg)?;
        let mut mean = vec![0f32; spec.n_mels];
        for (m, out) in mean.iter_mut().enumerate() {
            let row = &spec.data[m * spec.n_frames..(m + 1) * spec.n_frames];
            *out = row.iter().sum::<f32>() / spec.n_frames as f32;
        }
        Ok(mean)
    })
}

/// Order-sensitive digest of every parameter tensor, for asserting that an
/// evaluation pass left the model untouched.
pub fn params_checksum<T: Scalar>(params: &ModelParams<T>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for (name, tensor) in params.named_tensors() {
        eat(name.as_bytes());
        for v in &tensor.data {
            eat(&v.as_f64().to_bits().to_le_bytes());
        }
    }
    h
}

// ---------------------------------------------------------------------------
// Probe
// ---------------------------------------------------------------------------

/// Shallow classifier hyperparameters. `hidden_units == 0` is a linear probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub hidden_units: usize,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { hidden_units: 1024, epochs: 50, lr: 1e-3, batch_size: 32, seed: 0 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("probe epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("probe lr {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Test accuracy of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub label: String,
    pub correct: usize,
    pub total: usize,
}

/// Probe evaluation result on the held-out test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f32,
    pub per_class: Vec<ClassAccuracy>,
}

impl Metrics {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("metrics serialization: {e}")))
    }
}

struct Dense {
    w: Vec<f32>,
    b: Vec<f32>,
    d_in: usize,
    d_out: usize,
}

impl Dense {
    fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (d_in + d_out) as f32).sqrt();
        let w = (0..d_in * d_out)
            .map(|_| (rng.random::<f32>() * 2.0 - 1.0) * bound)
            .collect();
        Self { w, b: vec![0.0; d_out], d_in, d_out }
    }

    fn forward(&self, x: &[f32], y: &mut Vec<f32>) {
        let rows = x.len() / self.d_in;
        y.resize(rows * self.d_out, 0.0);
        for r in 0..rows {
            let xi = &x[r * self.d_in..(r + 1) * self.d_in];
            let yo = &mut y[r * self.d_out..(r + 1) * self.d_out];
            for (o, (out, &bias)) in yo.iter_mut().zip(&self.b).enumerate() {
                let wrow = &self.w[o * self.d_in..(o + 1) * self.d_in];
                let mut acc = bias;
                for (wv, xv) in wrow.iter().zip(xi) {
                    acc += wv * xv;
                }
                *out = acc;
            }
        }
    }

    fn backward(&self, x: &[f32], dy: &[f32], dx: Option<&mut [f32]>, dw: &mut [f32],
        db: &mut [f32]) {
        let rows = x.len() / self.d_in;
        for r in 0..rows {
            let xi = &x[r * self.d_in..(r + 1) * self.d_in];
            let gi = &dy[r * self.d_out..(r + 1) * self.d_out];
            for (o, &g) in gi.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                db[o] += g;
                let wrow = &mut dw[o * self.d_in..(o + 1) * self.d_in];
                for (w, &xv) in wrow.iter_mut().zip(xi) {
                    *w += g * xv;
                }
            }
        }
        if let Some(dx) = dx {
            for r in 0..rows {
                let gi = &dy[r * self.d_out..(r + 1) * self.d_out];
                let di = &mut dx[r * self.d_in..(r + 1) * self.d_in];
                for (o, &g) in gi.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let wrow = &self.w[o * self.d_in..(o + 1) * self.d_in];
                    for (d, &wv) in di.iter_mut().zip(wrow) {
                        *d += g * wv;
                    }
                }
            }
        }
    }
}

/// Adam without weight decay, one buffer pair per parameter vector.
struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl Adam {
    fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]], lr: f32) {
        self.step += 1;
        let b1 = 0.9f64;
        let b2 = 0.999f64;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            for (k, v) in p.iter_mut().enumerate() {
                let g = grads[i][k] as f64;
                let m = &mut self.m[i][k];
                let vv = &mut self.v[i][k];
                let mm = b1 * *m as f64 + (1.0 - b1) * g;
                let vn = b2 * *vv as f64 + (1.0 - b2) * g * g;
                *m = mm as f32;
                *vv = vn as f32;
                let update = (mm / c1) / ((vn / c2).sqrt() + 1e-8);
                *v -= lr * update as f32;
            }
        }
    }
}

/// Per-dimension standardization fit on the training split.
struct Standardizer {
    mean: Vec<f32>,
    inv_std: Vec<f32>,
}

impl Standardizer {
    fn fit(set: &EmbeddingSet) -> Self {
        let d = set.width;
        let n = set.len() as f64;
        let mut mean = vec![0f64; d];
        for i in 0..set.len() {
            for (acc, &v) in mean.iter_mut().zip(set.row(i)) {
                *acc += v as f64;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0f64; d];
        for i in 0..set.len() {
            for ((acc, &v), &m) in var.iter_mut().zip(set.row(i)).zip(&mean) {
                let c = v as f64 - m;
                *acc += c * c;
            }
        }
        let inv_std = var
            .iter()
            .map(|&s| (1.0 / (s / n).sqrt().max(1e-6)) as f32)
            .collect();
        Self { mean: mean.iter().map(|&m| m as f32).collect(), inv_std }
    }

    fn apply(&self, set: &EmbeddingSet) -> Vec<f32> {
        let mut out = Vec::with_capacity(set.data.len());
        for i in 0..set.len() {
            for ((&v, &m), &s) in set.row(i).iter().zip(&self.mean).zip(&self.inv_std) {
                out.push((v - m) * s);
            }
        }
        out
    }
}

/// Row-wise softmax cross-entropy; returns mean loss and writes dlogits.
fn cross_entropy(logits: &[f32], labels: &[usize], classes: usize, dlogits: &mut [f32]) -> f32 {
    let rows = labels.len();
    let mut loss = 0f64;
    let inv = 1.0 / rows as f32;
    for r in 0..rows {
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0f32;
        for &v in row {
            denom += (v - max).exp();
        }
        let drow = &mut dlogits[r * classes..(r + 1) * classes];
        for (c, &v) in row.iter().enumerate() {
            let p = (v - max).exp() / denom;
            drow[c] = (p - if c == labels[r] { 1.0 } else { 0.0 }) * inv;
        }
        let p_true = (row[labels[r]] - max).exp() / denom;
        loss -= (p_true.max(1e-12) as f64).ln();
    }
    (loss / rows as f64) as f32
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Train the probe on frozen train embeddings and report test accuracy.
///
/// The evaluated model never appears here: only its embedding rows do, so
/// probe training cannot update it. Features are standardized by train-split
/// statistics. Everything is sequential and seeded, so fixed inputs and
/// seeds reproduce metrics exactly.
pub fn run_probe(
    train: &EmbeddingSet,
    test: &EmbeddingSet,
    label_space: &[String],
    cfg: &ProbeConfig,
) -> Result<Metrics> {
    cfg.validate()?;
    let classes = label_space.len();
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("probe needs non-empty train and test splits".into()));
    }
    if train.width != test.width {
        return Err(Error::Shape(format!(
            "train width {} != test width {}",
            train.width, test.width
        )));
    }
    for set in [train, test] {
        if let Some(&bad) = set.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Config(format!(
                "label {bad} outside the {classes}-class space"
            )));
        }
    }
    let first = train.labels[0];
    if train.labels.iter().all(|&l| l == first) {
        return Err(Error::Config(
            "training split holds a single class; nothing to separate".into(),
        ));
    }

    let norm = Standardizer::fit(train);
    let x_train = norm.apply(train);
    let x_test = norm.apply(test);
    let d = train.width;

    let mut rng = rng_from_seed(derive_seed(cfg.seed, stream::PROBE, 0));
    let hidden = cfg.hidden_units;
    let mut l1 = Dense::new(d, if hidden == 0 { classes } else { hidden }, &mut rng);
    let mut l2 = (hidden > 0).then(|| Dense::new(hidden, classes, &mut rng));

    let sizes: Vec<usize> = match &l2 {
        Some(l2) => vec![l1.w.len(), l1.b.len(), l2.w.len(), l2.b.len()],
        None => vec![l1.w.len(), l1.b.len()],
    };
    let mut adam = Adam::new(&sizes);

    let n_train = train.len();
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut batch_x = Vec::new();
    let mut batch_y = Vec::new();
    let mut h = Vec::new();
    let mut logits = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut shuffle = rng_from_seed(derive_seed(cfg.seed, stream::PROBE, 1 + epoch as u64));
        for i in (1..n_train).rev() {
            let j = shuffle.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            batch_x.clear();
            batch_y.clear();
            for &i in chunk {
                batch_x.extend_from_slice(&x_train[i * d..(i + 1) * d]);
                batch_y.push(train.labels[i]);
            }
            let rows = chunk.len();

            let mut dw1 = vec![0f32; l1.w.len()];
            let mut db1 = vec![0f32; l1.b.len()];
            match &mut l2 {
                Some(l2) => {
                    l1.forward(&batch_x, &mut h);
                    let pre = h.clone();
                    for v in &mut h {
                        *v = v.max(0.0);
                    }
                    l2.forward(&h, &mut logits);
                    let mut dlogits = vec![0f32; rows * classes];
                    cross_entropy(&logits, &batch_y, classes, &mut dlogits);
                    let mut dw2 = vec![0f32; l2.w.len()];
                    let mut db2 = vec![0f32; l2.b.len()];
                    let mut dh = vec![0f32; rows * hidden];
                    l2.backward(&h, &dlogits, Some(&mut dh), &mut dw2, &mut db2);
                    for (g, &p) in dh.iter_mut().zip(&pre) {
                        if p <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    l1.backward(&batch_x, &dh, None, &mut dw1, &mut db1);
                    adam.update(
                        &mut [&mut l1.w, &mut l1.b, &mut l2.w, &mut l2.b],
                        &[&dw1, &db1, &dw2, &db2],
                        cfg.lr,
                    );
                }
                None => {
                    l1.forward(&batch_x, &mut logits);
                    let mut dlogits = vec![0f32; rows * classes];
                    cross_entropy(&logits, &batch_y, classes, &mut dlogits);
                    l1.backward(&batch_x, &dlogits, None, &mut dw1, &mut db1);
                    adam.update(&mut [&mut l1.w, &mut l1.b], &[&dw1, &db1], cfg.lr);
                }
            }
        }
    }

    let mut per_class: Vec<ClassAccuracy> = label_space
        .iter()
        .map(|l| ClassAccuracy { label: l.clone(), correct: 0, total: 0 })
        .collect();
    let mut correct = 0usize;
    match &l2 {
        Some(l2) => {
            l1.forward(&x_test, &mut h);
            for v in &mut h {
                *v = v.max(0.0);
            }
            l2.forward(&h, &mut logits);
        }
        None => l1.forward(&x_test, &mut logits),
    }
    for (i, &label) in test.labels.iter().enumerate() {
        let pred = argmax(&logits[i * classes..(i + 1) * classes]);
        per_class[label].total += 1;
        if pred == label {
            per_class[label].correct += 1;
            correct += 1;
        }
    }
    let accuracy = correct as f32 / test.len() as f32;
    if !(0.0..=1.0).contains(&accuracy) {
        return Err(Error::Numeric(format!("accuracy {accuracy} out of range")));
    }
    Ok(Metrics { accuracy, per_class })
}

// ---------------------------------------------------------------------------
// Disk formats
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    label: String,
    split: String,
}

/// JSON-lines label manifest: one `{"id","label","split"}` object per item.
pub fn write_task_manifest(mut w: impl Write, task: &TaskDataset) -> Result<()> {
    for item in &task.items {
        let row = ManifestRow {
            id: item.id.clone(),
            label: task.label_space[item.label].clone(),
            split: item.split.name().into(),
        };
        let line = serde_json::to_string(&row)
            .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Cache the embeddings of every split plus the label manifest.
///
/// Tensor entries per split: `<split>.z` (rows x width) and `<split>.labels`.
pub fn save_embedded_task(
    dir: &Path,
    task_name: &str,
    embedded: &EmbeddedTask,
    label_space: &[String],
) -> Result<()> {
    let mut file = TensorFile::new();
    for split in [Split::Train, Split::Valid, Split::Test] {
        let set = embedded.set(split);
        file.push(
            &format!("{}.z", split.name()),
            Tensor::from_vec(set.data.clone(), &[set.len(), set.width])?,
        )?;
        let labels: Vec<f32> = set.labels.iter().map(|&l| l as f32).collect();
        file.push(
            &format!("{}.labels", split.name()),
            Tensor::from_vec(labels, &[set.len()])?,
        )?;
    }
    file.write_to(&dir.join(format!("{task_name}-embeddings.msmm")))?;
    let mut manifest = std::fs::File::create(dir.join(format!("{task_name}-labels.json")))?;
    let names = serde_json::to_string_pretty(label_space)
        .map_err(|e| Error::Format(format!("label space serialization: {e}")))?;
    manifest.write_all(names.as_bytes())?;
    Ok(())
}

pub fn load_embedded_task(dir: &Path, task_name: &str) -> Result<(EmbeddedTask, Vec<String>)> {
    let file = TensorFile::read_from(&dir.join(format!("{task_name}-embeddings.msmm")))?;
    let mut sets = Vec::with_capacity(3);
    for split in [Split::Train, Split::Valid, Split::Test] {
        let z = file
            .get(&format!("{}.z", split.name()))
            .ok_or_else(|| Error::Format(format!("missing tensor {}.z", split.name())))?;
        if z.shape.len() != 2 {
            return Err(Error::Format(format!("{}.z has rank {}", split.name(), z.shape.len())));
        }
        let labels = file
            .get(&format!("{}.labels", split.name()))
            .ok_or_else(|| Error::Format(format!("missing tensor {}.labels", split.name())))?;
        if labels.data.len() != z.shape[0] {
            return Err(Error::Format(format!(
                "{} split has {} labels for {} rows",
                split.name(),
                labels.data.len(),
                z.shape[0]
            )));
        }
        sets.push(EmbeddingSet {
            data: z.data.clone(),
            width: z.shape[1],
            labels: labels.data.iter().map(|&l| l as usize).collect(),
        });
    }
    let text = std::fs::read_to_string(dir.join(format!("{task_name}-labels.json")))?;
    let label_space: Vec<String> = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("label space parse: {e}")))?;
    let mut it = sets.into_iter();
    Ok((
        EmbeddedTask {
            train: it.next().unwrap(),
            valid: it.next().unwrap(),
            test: it.next().unwrap(),
        },
        label_space,
    ))
}

/// Parse a JSON-lines manifest back into (id, label name, split) rows.
pub fn read_task_manifest(r: impl std::io::Read) -> Result<Vec<(String, String, Split)>> {
    let reader = BufReader::new(r);
    let mut rows = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("manifest parse: {e}")))?;
        let split = Split::parse(&row.split)?;
        rows.push((row.id, row.label, split));
    }
    Ok(rows)
}
