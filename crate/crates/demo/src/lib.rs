//! Browser playground around the core library.
//!
//! One `Session` holds a small model plus a corpus of synthetic harmonic
//! tones run through the real log-mel frontend. The page drives three
//! operations: run training steps (returns the loss curve), render the
//! `[input | reconstruction | error]` triptych for a held-out clip at any
//! mask ratio, and render the encoder's last-block attention from a
//! clicked reference patch. Everything is seeded; no entropy source or
//! filesystem is touched, so the same clicks replay the same pixels.

use wasm_bindgen::prelude::*;

use msm_core::downstream::make_sine_pitch_task;
use msm_core::frontend::{compute_norm_stats, log_mel_spectrogram, FrontendConfig, Spectrogram};
use msm_core::model::{init_params, ModelConfig, ModelParams};
use msm_core::patch::random_mask_plan;
use msm_core::pretrain::{train_step, OptimizerState, TrainConfig};
use msm_core::rng::{derive_seed, rng_from_seed, stream};
use msm_core::viz::{render_attention, render_reconstruction, Composite};
use rand::Rng as _;

/// Clips in the training corpus; one extra clip is held out for rendering.
const CORPUS_CLIPS: usize = 32;

/// A composed grayscale figure delivered to the page as RGBA pixels.
#[wasm_bindgen]
pub struct Figure {
    width: u32,
    height: u32,
    rgba: Vec<u8>,
    meta: String,
}

#[wasm_bindgen]
impl Figure {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> u32 {
        self.height
    }

    /// Pixels for `ImageData`: 4 bytes per pixel, row-major from the top.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// Per-panel value ranges, same text the CLI writes to `.meta` files.
    #[wasm_bindgen(getter)]
    pub fn meta(&self) -> String {
        self.meta.clone()
    }
}

impl From<Composite> for Figure {
    fn from(c: Composite) -> Self {
        let mut rgba = Vec::with_capacity(c.pixels.len() * 4);
        for g in &c.pixels {
            rgba.extend_from_slice(&[*g, *g, *g, 255]);
        }
        Self { width: c.width as u32, height: c.height as u32, rgba, meta: c.meta }
    }
}

/// An in-memory model, optimizer, corpus, and display clip.
#[wasm_bindgen]
pub struct Session {
    params: ModelParams<f32>,
    opt: OptimizerState,
    train_cfg: TrainConfig,
    corpus: Vec<Spectrogram>,
    display: Spectrogram,
    step: u64,
}

#[wasm_bindgen]
impl Session {
    /// Build the model and synthesize the tone corpus for one seed.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Session, String> {
        let seed = seed as u64;
        let model_cfg = ModelConfig::desk();
        let train_cfg = TrainConfig {
            epochs: 500,
            warmup_epochs: 2,
            batch_size: 8,
            base_lr: 3e-3,
            seed,
            ..TrainConfig::default()
        };
        let frontend = FrontendConfig::default();
        // 5 clips per pitch class: 32 train the model, the rest are spare,
        // and the last one is the held-out clip every figure renders.
        let task = make_sine_pitch_task(5, seed).map_err(|e| e.to_string())?;
        let mels: Vec<Spectrogram> = task
            .items
            .iter()
            .map(|item| log_mel_spectrogram(&item.signal, &frontend))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let norm = compute_norm_stats(&mels[..CORPUS_CLIPS]).map_err(|e| e.to_string())?;
        let mut normalized: Vec<Spectrogram> = mels
            .iter()
            .map(|m| norm.apply(m).crop_frames(model_cfg.n_frames))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let display = normalized.pop().expect("task is non-empty");
        normalized.truncate(CORPUS_CLIPS);

        Ok(Session {
            params: init_params(&model_cfg, seed).map_err(|e| e.to_string())?,
            opt: OptimizerState::new(&model_cfg).map_err(|e| e.to_string())?,
            train_cfg,
            corpus: normalized,
            display,
            step: 0,
        })
    }

    /// Run training steps; returns the masked MSE of each step.
    pub fn train(&mut self, steps: u32) -> Result<Vec<f32>, String> {
        let steps_per_epoch = self.corpus.len() / self.train_cfg.batch_size;
        let mut losses = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let mut rng = rng_from_seed(derive_seed(
                self.train_cfg.seed,
                stream::DATA_ORDER,
                self.step,
            ));
            let batch: Vec<&Spectrogram> = (0..self.train_cfg.batch_size)
                .map(|_| &self.corpus[rng.random_range(0..self.corpus.len())])
                .collect();
            let epoch = (self.step / steps_per_epoch as u64) as usize;
            let report = train_step(
                &batch,
                &mut self.params,
                &mut self.opt,
                &self.train_cfg,
                self.step,
                epoch.min(self.train_cfg.epochs - 1),
                steps_per_epoch,
            )
            .map_err(|e| e.to_string())?;
            losses.push(report.masked_mse);
            self.step += 1;
        }
        Ok(losses)
    }

    /// Triptych for the held-out clip under a fresh random mask.
    pub fn reconstruction(&self, ratio: f64, mask_seed: u32) -> Result<Figure, String> {
        let grid = self.params.cfg.grid().map_err(|e| e.to_string())?;
        let plan =
            random_mask_plan(grid.n(), ratio, mask_seed as u64).map_err(|e| e.to_string())?;
        let trip = render_reconstruction(&self.display, &self.params, &plan, true)
            .map_err(|e| e.to_string())?;
        Ok(trip.compose().map_err(|e| e.to_string())?.into())
    }

    /// `[input | attention]` heatmap for reference patch (f, t).
    pub fn attention(&self, f: u32, t: u32) -> Result<Figure, String> {
        let imgs = render_attention(&self.display, &self.params, &[(f as usize, t as usize)])
            .map_err(|e| e.to_string())?;
        Ok(imgs[0].compose().map_err(|e| e.to_string())?.into())
    }

    #[wasm_bindgen(getter)]
    pub fn step(&self) -> u32 {
        self.step as u32
    }

    #[wasm_bindgen(getter)]
    pub fn n_mels(&self) -> u32 {
        self.params.cfg.n_mels as u32
    }

    #[wasm_bindgen(getter)]
    pub fn n_frames(&self) -> u32 {
        self.params.cfg.n_frames as u32
    }

    #[wasm_bindgen(getter)]
    pub fn patch_f(&self) -> u32 {
        self.params.cfg.patch.p_f as u32
    }

    #[wasm_bindgen(getter)]
    pub fn patch_t(&self) -> u32 {
        self.params.cfg.patch.p_t as u32
    }

    #[wasm_bindgen(getter)]
    pub fn grid_f(&self) -> u32 {
        self.params.cfg.grid().map(|g| g.n_f).unwrap_or(0) as u32
    }

    #[wasm_bindgen(getter)]
    pub fn grid_t(&self) -> u32 {
        self.params.cfg.grid().map(|g| g.n_t).unwrap_or(0) as u32
    }
}
