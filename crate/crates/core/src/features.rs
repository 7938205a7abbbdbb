//! Downstream feature calculation: timestamp embeddings, scene embeddings,
//! and variable-length segmentation.
//!
//! The encoder emits one latent per patch in canonical (frequency-major)
//! order. Downstream consumers want one feature row per time step, so the
//! grid is re-folded: row t concatenates the latents of every frequency
//! patch at that time column. A clip longer than the model's input window
//! is split into consecutive windows, each encoded independently, and the
//! rows are concatenated along time.

use std::path::Path;

use crate::error::{Error, Result};
use crate::frontend::{log_mel_spectrogram, FrontendConfig, NormStats, PcmSignal, Spectrogram};
use crate::model::{full_encode, ModelParams};
use crate::patch::Grid;
use crate::tensorfile::TensorFile;
use crate::nn::Tensor;

/// Time-ordered embedding rows: `rows x width` with `width = n_f * dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Vec<f32>,
    rows: usize,
    width: usize,
    /// Time spacing between rows in milliseconds (`p_t` frames of 10 ms).
    pub frame_hop_ms: u32,
}

impl EmbeddingMatrix {
    pub fn new(data: Vec<f32>, rows: usize, width: usize, frame_hop_ms: u32) -> Result<Self> {
        if data.len() != rows * width {
            return Err(Error::Shape(format!(
                "embedding buffer of {} values is not {rows} rows of {width}",
                data.len()
            )));
        }
        Ok(Self { data, rows, width, frame_hop_ms })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.width..(t + 1) * self.width]
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    /// Append another matrix's rows; widths and hops must agree.
    pub fn extend(&mut self, other: &EmbeddingMatrix) -> Result<()> {
        if other.width != self.width || other.frame_hop_ms != self.frame_hop_ms {
            return Err(Error::Shape(format!(
                "cannot concatenate embeddings of width {} onto width {}",
                other.width, self.width
            )));
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }
}

/// Re-fold canonical patch latents `z` (`grid.n()` rows of `dim`) into one
/// row per time column: `out[t][f*dim + d] = z[f*n_t + t][d]`.
pub fn timestamp_embeddings(z: &[f32], grid: &Grid, frame_hop_ms: u32) -> Result<EmbeddingMatrix> {
    let n = grid.n();
    if n == 0 || z.len() % n != 0 {
        return Err(Error::Shape(format!(
            "latent buffer of {} values does not cover a {}x{} grid",
            z.len(),
            grid.n_f,
            grid.n_t
        )));
    }
    let dim = z.len() / n;
    let width = grid.n_f * dim;
    let mut data = vec![0.0f32; grid.n_t * width];
    for t in 0..grid.n_t {
        let row = &mut data[t * width..(t + 1) * width];
        for f in 0..grid.n_f {
            let src = &z[(f * grid.n_t + t) * dim..(f * grid.n_t + t + 1) * dim];
            row[f * dim..(f + 1) * dim].copy_from_slice(src);
        }
    }
    EmbeddingMatrix::new(data, grid.n_t, width, frame_hop_ms)
}

/// Temporal mean of the embedding rows; the clip-level feature vector.
pub fn scene_embedding(z: &EmbeddingMatrix) -> Result<Vec<f32>> {
    if z.rows == 0 {
        return Err(Error::Shape("cannot average an empty embedding matrix".into()));
    }
    let mut mean = vec![0.0f64; z.width];
    for t in 0..z.rows {
        for (acc, &v) in mean.iter_mut().zip(z.row(t)) {
            *acc += v as f64;
        }
    }
    let inv = 1.0 / z.rows as f64;
    let out: Vec<f32> = mean.iter().map(|&v| (v * inv) as f32).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("scene embedding is not finite".into()));
    }
    Ok(out)
}

/// Frontend, normalization, and windowed encoding for a whole clip.
///
/// The signal becomes one normalized log-mel spectrogram, split into
/// consecutive windows of `window_frames` (the model's input width). The
/// final partial window is zero-padded in normalized space, i.e. padded
/// with the dataset mean, and its embedding rows are truncated to the
/// windows actually covered by real frames (rounded up to whole patches).
pub fn segment_and_encode(
    signal: &PcmSignal,
    params: &ModelParams<f32>,
    window_frames: usize,
    norm: &NormStats,
) -> Result<EmbeddingMatrix> {
    let cfg = &params.cfg;
    if window_frames != cfg.n_frames {
        return Err(Error::Config(format!(
            "window of {window_frames} frames does not match the model input of {} frames",
            cfg.n_frames
        )));
    }
    let frontend = FrontendConfig { n_mels: cfg.n_mels, ..FrontendConfig::default() };
    let spec = log_mel_spectrogram(signal, &frontend)?;
    let spec = norm.apply(&spec);
    segment_and_encode_spec(&spec, params)
}

/// Windowed encoding of an already-normalized spectrogram.
pub fn segment_and_encode_spec(
    spec: &Spectrogram,
    params: &ModelParams<f32>,
) -> Result<EmbeddingMatrix> {
    let cfg = &params.cfg;
    let window = cfg.n_frames;
    let grid = cfg.grid()?;
    let hop_ms = cfg.patch.p_t as u32 * 10;
    if spec.n_mels != cfg.n_mels {
        return Err(Error::Shape(format!(
            "spectrogram has {} mel bands, model expects {}",
            spec.n_mels, cfg.n_mels
        )));
    }
    if spec.n_frames == 0 {
        return Err(Error::Shape("signal yields no frames".into()));
    }

    let mut out = EmbeddingMatrix::new(Vec::new(), 0, grid.n_f * cfg.enc.dim, hop_ms)?;
    let chunks = spec.n_frames.div_ceil(window);
    for c in 0..chunks {
        let start = c * window;
        let valid = (spec.n_frames - start).min(window);
        let mut data = vec![0.0f32; cfg.n_mels * window];
        for m in 0..cfg.n_mels {
            let src = &spec.data[m * spec.n_frames + start..m * spec.n_frames + start + valid];
            data[m * window..m * window + valid].copy_from_slice(src);
        }
        let chunk = Spectrogram::new(data, cfg.n_mels, window)?;
        let z = full_encode(&chunk, params)?;
        let mut emb = timestamp_embeddings(&z, &grid, hop_ms)?;
        let keep_rows = valid.div_ceil(cfg.patch.p_t).min(emb.rows);
        if keep_rows < emb.rows {
            emb.data.truncate(keep_rows * emb.width);
            emb.rows = keep_rows;
        }
        out.extend(&emb)?;
    }
    Ok(out)
}

/// Write the matrix in the tensor container format: the rows under `z` and
/// the row spacing in milliseconds under `frame_hop_ms`.
pub fn save_embeddings(path: &Path, z: &EmbeddingMatrix) -> Result<()> {
    let mut file = TensorFile::new();
    file.push("z", Tensor::from_vec(z.data.clone(), &[z.rows, z.width])?)?;
    file.push("frame_hop_ms", Tensor::from_vec(vec![z.frame_hop_ms as f32], &[1])?)?;
    file.write_to(path)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let file = TensorFile::read_from(path)?;
    let z = file
        .get("z")
        .ok_or_else(|| Error::Format("embedding file is missing tensor 'z'".into()))?;
    if z.shape.len() != 2 {
        return Err(Error::Format(format!("embedding tensor has rank {}", z.shape.len())));
    }
    let hop = file
        .get("frame_hop_ms")
        .and_then(|t| t.data.first().copied())
        .ok_or_else(|| Error::Format("embedding file is missing 'frame_hop_ms'".into()))?;
    EmbeddingMatrix::new(z.data.clone(), z.shape[0], z.shape[1], hop as u32)
}

/// CSV export: `time_ms` then the embedding values, one row per timestamp.
pub fn write_embeddings_csv(mut w: impl std::io::Write, z: &EmbeddingMatrix) -> Result<()> {
    for t in 0..z.rows {
        write!(w, "{}", t as u64 * z.frame_hop_ms as u64)?;
        for v in z.row(t) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
