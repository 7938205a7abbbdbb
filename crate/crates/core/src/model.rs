//! Asymmetric encoder/decoder transformer over spectrogram patches.
//!
//! The encoder runs only on visible patches; the decoder fills the masked
//! positions with a learned mask token (plus positional rows) and predicts
//! every patch. Forward passes record the activations needed for the
//! hand-written backward passes in `pretrain`.

use crate::error::{Error, Result};
use crate::frontend::Spectrogram;
use crate::nn::{
    add_inplace, attention_backward, attention_forward, gelu_backward, gelu_forward,
    layernorm_backward, layernorm_forward, linear_backward, linear_forward, Scalar, Tensor,
};
use crate::patch::{grid_dims, patchify, sincos_pos_embed, Grid, MaskPlan, PatchConfig,
    PatchSequence};
use crate::rng::{derive_seed, rng_from_seed, stream};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderConfig {
    pub dim: usize,
    /// May be 0: ablation where the head reads the embedded tokens directly.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

/// Complete architecture description, including the fixed input geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub enc: EncoderConfig,
    pub dec: DecoderConfig,
    pub patch: PatchConfig,
    pub n_mels: usize,
    pub n_frames: usize,
}

impl ModelConfig {
    /// Full-size configuration: ViT-Base encoder, 384-d/4-block decoder.
    pub fn full_size() -> Self {
        Self {
            enc: EncoderConfig { dim: 768, depth: 12, heads: 12, mlp_ratio: 4 },
            dec: DecoderConfig { dim: 384, depth: 4, heads: 6, mlp_ratio: 4 },
            patch: PatchConfig { p_f: 16, p_t: 16 },
            n_mels: 80,
            n_frames: 208,
        }
    }

    /// Small configuration that trains in seconds on a CPU.
    pub fn desk() -> Self {
        Self {
            enc: EncoderConfig { dim: 64, depth: 2, heads: 4, mlp_ratio: 4 },
            dec: DecoderConfig { dim: 32, depth: 1, heads: 4, mlp_ratio: 4 },
            patch: PatchConfig { p_f: 16, p_t: 16 },
            n_mels: 80,
            n_frames: 96,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc.depth == 0 {
            return Err(Error::Config("encoder depth must be at least 1".into()));
        }
        if self.enc.heads == 0 || self.enc.dim % self.enc.heads != 0 {
            return Err(Error::Config(format!(
                "encoder dim {} not divisible by {} heads",
                self.enc.dim, self.enc.heads
            )));
        }
        if self.dec.heads == 0 || self.dec.dim % self.dec.heads != 0 {
            return Err(Error::Config(format!(
                "decoder dim {} not divisible by {} heads",
                self.dec.dim, self.dec.heads
            )));
        }
        if self.enc.dim % 4 != 0 || self.dec.dim % 4 != 0 {
            return Err(Error::Config("model dims must be divisible by 4".into()));
        }
        if self.enc.mlp_ratio == 0 || self.dec.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        self.grid().map(|_| ())
    }

    pub fn grid(&self) -> Result<Grid> {
        grid_dims(self.n_mels, self.n_frames, &self.patch)
    }

    pub fn token_len(&self) -> usize {
        self.patch.token_len()
    }
}

/// Weights of one pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub qkv_w: Tensor<T>,
    pub qkv_b: Tensor<T>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

impl<T: Scalar> BlockParams<T> {
    fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            ln1_g: Tensor::zeros(&[dim]),
            ln1_b: Tensor::zeros(&[dim]),
            qkv_w: Tensor::zeros(&[3 * dim, dim]),
            qkv_b: Tensor::zeros(&[3 * dim]),
            proj_w: Tensor::zeros(&[dim, dim]),
            proj_b: Tensor::zeros(&[dim]),
            ln2_g: Tensor::zeros(&[dim]),
            ln2_b: Tensor::zeros(&[dim]),
            fc1_w: Tensor::zeros(&[hidden, dim]),
            fc1_b: Tensor::zeros(&[hidden]),
            fc2_w: Tensor::zeros(&[dim, hidden]),
            fc2_b: Tensor::zeros(&[dim]),
        }
    }
}

/// All model weights plus the fixed positional tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub cfg: ModelConfig,
    pub patch_embed_w: Tensor<T>,
    pub patch_embed_b: Tensor<T>,
    pub enc_pos: Tensor<T>,
    pub enc_blocks: Vec<BlockParams<T>>,
    pub enc_norm_g: Tensor<T>,
    pub enc_norm_b: Tensor<T>,
    pub dec_embed_w: Tensor<T>,
    pub dec_embed_b: Tensor<T>,
    pub mask_token: Tensor<T>,
    pub dec_pos: Tensor<T>,
    pub dec_blocks: Vec<BlockParams<T>>,
    pub dec_norm_g: Tensor<T>,
    pub dec_norm_b: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Allocate every tensor at zero with config-consistent shapes.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let n = grid.n();
        let l = cfg.token_len();
        let d = cfg.enc.dim;
        let dd = cfg.dec.dim;
        Ok(Self {
            cfg: *cfg,
            patch_embed_w: Tensor::zeros(&[d, l]),
            patch_embed_b: Tensor::zeros(&[d]),
            enc_pos: Tensor::zeros(&[n, d]),
            enc_blocks: (0..cfg.enc.depth)
                .map(|_| BlockParams::zeros(d, d * cfg.enc.mlp_ratio))
                .collect(),
            enc_norm_g: Tensor::zeros(&[d]),
            enc_norm_b: Tensor::zeros(&[d]),
            dec_embed_w: Tensor::zeros(&[dd, d]),
            dec_embed_b: Tensor::zeros(&[dd]),
            mask_token: Tensor::zeros(&[dd]),
            dec_pos: Tensor::zeros(&[n, dd]),
            dec_blocks: (0..cfg.dec.depth)
                .map(|_| BlockParams::zeros(dd, dd * cfg.dec.mlp_ratio))
                .collect(),
            dec_norm_g: Tensor::zeros(&[dd]),
            dec_norm_b: Tensor::zeros(&[dd]),
            head_w: Tensor::zeros(&[l, dd]),
            head_b: Tensor::zeros(&[l]),
        })
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            cfg: self.cfg,
            patch_embed_w: self.patch_embed_w.cast(),
            patch_embed_b: self.patch_embed_b.cast(),
            enc_pos: self.enc_pos.cast(),
            enc_blocks: self.enc_blocks.iter().map(cast_block).collect(),
            enc_norm_g: self.enc_norm_g.cast(),
            enc_norm_b: self.enc_norm_b.cast(),
            dec_embed_w: self.dec_embed_w.cast(),
            dec_embed_b: self.dec_embed_b.cast(),
            mask_token: self.mask_token.cast(),
            dec_pos: self.dec_pos.cast(),
            dec_blocks: self.dec_blocks.iter().map(cast_block).collect(),
            dec_norm_g: self.dec_norm_g.cast(),
            dec_norm_b: self.dec_norm_b.cast(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }

    /// Named tensors in canonical (checkpoint) order. The decoder norm is
    /// omitted for zero-depth decoders, which never apply it.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        out.push(("patch_embed.w".into(), &self.patch_embed_w));
        out.push(("patch_embed.b".into(), &self.patch_embed_b));
        out.push(("enc.pos".into(), &self.enc_pos));
        for (i, b) in self.enc_blocks.iter().enumerate() {
            push_block_refs(&mut out, &format!("enc.block{i}"), b);
        }
        out.push(("enc.norm.g".into(), &self.enc_norm_g));
        out.push(("enc.norm.b".into(), &self.enc_norm_b));
        out.push(("dec.embed.w".into(), &self.dec_embed_w));
        out.push(("dec.embed.b".into(), &self.dec_embed_b));
        out.push(("dec.mask_token".into(), &self.mask_token));
        out.push(("dec.pos".into(), &self.dec_pos));
        for (i, b) in self.dec_blocks.iter().enumerate() {
            push_block_refs(&mut out, &format!("dec.block{i}"), b);
        }
        if self.cfg.dec.depth > 0 {
            out.push(("dec.norm.g".into(), &self.dec_norm_g));
            out.push(("dec.norm.b".into(), &self.dec_norm_b));
        }
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let dec_depth = self.cfg.dec.depth;
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        out.push(("patch_embed.w".into(), &mut self.patch_embed_w));
        out.push(("patch_embed.b".into(), &mut self.patch_embed_b));
        out.push(("enc.pos".into(), &mut self.enc_pos));
        for (i, b) in self.enc_blocks.iter_mut().enumerate() {
            push_block_muts(&mut out, &format!("enc.block{i}"), b);
        }
        out.push(("enc.norm.g".into(), &mut self.enc_norm_g));
        out.push(("enc.norm.b".into(), &mut self.enc_norm_b));
        out.push(("dec.embed.w".into(), &mut self.dec_embed_w));
        out.push(("dec.embed.b".into(), &mut self.dec_embed_b));
        out.push(("dec.mask_token".into(), &mut self.mask_token));
        out.push(("dec.pos".into(), &mut self.dec_pos));
        for (i, b) in self.dec_blocks.iter_mut().enumerate() {
            push_block_muts(&mut out, &format!("dec.block{i}"), b);
        }
        if dec_depth > 0 {
            out.push(("dec.norm.g".into(), &mut self.dec_norm_g));
            out.push(("dec.norm.b".into(), &mut self.dec_norm_b));
        }
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }

    /// Count of learned scalars (positional tables excluded).
    pub fn trainable_param_count(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(name, _)| is_trainable(name))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }
}

fn cast_block<T: Scalar, U: Scalar>(b: &BlockParams<T>) -> BlockParams<U> {
    BlockParams {
        ln1_g: b.ln1_g.cast(),
        ln1_b: b.ln1_b.cast(),
        qkv_w: b.qkv_w.cast(),
        qkv_b: b.qkv_b.cast(),
        proj_w: b.proj_w.cast(),
        proj_b: b.proj_b.cast(),
        ln2_g: b.ln2_g.cast(),
        ln2_b: b.ln2_b.cast(),
        fc1_w: b.fc1_w.cast(),
        fc1_b: b.fc1_b.cast(),
        fc2_w: b.fc2_w.cast(),
        fc2_b: b.fc2_b.cast(),
    }
}

fn push_block_refs<'a, T>(
    out: &mut Vec<(String, &'a Tensor<T>)>,
    prefix: &str,
    b: &'a BlockParams<T>,
) {
    out.push((format!("{prefix}.ln1.g"), &b.ln1_g));
    out.push((format!("{prefix}.ln1.b"), &b.ln1_b));
    out.push((format!("{prefix}.qkv.w"), &b.qkv_w));
    out.push((format!("{prefix}.qkv.b"), &b.qkv_b));
    out.push((format!("{prefix}.proj.w"), &b.proj_w));
    out.push((format!("{prefix}.proj.b"), &b.proj_b));
    out.push((format!("{prefix}.ln2.g"), &b.ln2_g));
    out.push((format!("{prefix}.ln2.b"), &b.ln2_b));
    out.push((format!("{prefix}.fc1.w"), &b.fc1_w));
    out.push((format!("{prefix}.fc1.b"), &b.fc1_b));
    out.push((format!("{prefix}.fc2.w"), &b.fc2_w));
    out.push((format!("{prefix}.fc2.b"), &b.fc2_b));
}

fn push_block_muts<'a, T>(
    out: &mut Vec<(String, &'a mut Tensor<T>)>,
    prefix: &str,
    b: &'a mut BlockParams<T>,
) {
    out.push((format!("{prefix}.ln1.g"), &mut b.ln1_g));
    out.push((format!("{prefix}.ln1.b"), &mut b.ln1_b));
    out.push((format!("{prefix}.qkv.w"), &mut b.qkv_w));
    out.push((format!("{prefix}.qkv.b"), &mut b.qkv_b));
    out.push((format!("{prefix}.proj.w"), &mut b.proj_w));
    out.push((format!("{prefix}.proj.b"), &mut b.proj_b));
    out.push((format!("{prefix}.ln2.g"), &mut b.ln2_g));
    out.push((format!("{prefix}.ln2.b"), &mut b.ln2_b));
    out.push((format!("{prefix}.fc1.w"), &mut b.fc1_w));
    out.push((format!("{prefix}.fc1.b"), &mut b.fc1_b));
    out.push((format!("{prefix}.fc2.w"), &mut b.fc2_w));
    out.push((format!("{prefix}.fc2.b"), &mut b.fc2_b));
}

/// Positional tables are fixed; everything else learns.
pub fn is_trainable(name: &str) -> bool {
    !name.ends_with(".pos")
}

/// Decoupled weight decay applies to matrix weights only, never to biases,
/// layer-norm parameters, or the mask token.
pub fn is_decayed(name: &str) -> bool {
    name.ends_with(".w")
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Standard-normal draw truncated to (-2, 2) sigma via rejection sampling.
fn trunc_normal_fill<R: Rng>(rng: &mut R, data: &mut [f32], std: f64) {
    for v in data.iter_mut() {
        loop {
            let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
            let u2: f64 = rng.random();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            if z.abs() <= 2.0 {
                *v = (z * std) as f32;
                break;
            }
        }
    }
}

/// Deterministic parameter init: matrix weights and the mask token are
/// truncated-normal (sigma 0.02), layer norms start at identity, biases at
/// zero, and both positional tables are the fixed sinusoids.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<f32>> {
    let mut params = ModelParams::<f32>::zeros(cfg)?;
    let grid = cfg.grid()?;
    let enc_pe = sincos_pos_embed(&grid, cfg.enc.dim)?;
    let dec_pe = sincos_pos_embed(&grid, cfg.dec.dim)?;
    params.enc_pos.data.copy_from_slice(&enc_pe.table);
    params.dec_pos.data.copy_from_slice(&dec_pe.table);

    let mut rng = rng_from_seed(derive_seed(seed, stream::INIT, 0));
    for (name, tensor) in params.named_tensors_mut() {
        if name.ends_with(".w") || name == "dec.mask_token" {
            trunc_normal_fill(&mut rng, &mut tensor.data, 0.02);
        } else if name.ends_with(".g") {
            tensor.fill(1.0);
        }
        // Biases stay zero; positional tables were filled above.
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// Block forward/backward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    pub x: Vec<T>,
    pub ln1_mean: Vec<T>,
    pub ln1_rstd: Vec<T>,
    pub ln1_out: Vec<T>,
    pub qkv: Vec<T>,
    pub att: Vec<T>,
    pub att_out: Vec<T>,
    pub res1: Vec<T>,
    pub ln2_mean: Vec<T>,
    pub ln2_rstd: Vec<T>,
    pub ln2_out: Vec<T>,
    pub fc1_out: Vec<T>,
    pub gelu_out: Vec<T>,
}

fn block_forward<T: Scalar>(
    p: &BlockParams<T>,
    x: Vec<T>,
    n: usize,
    dim: usize,
    hidden: usize,
    heads: usize,
) -> (Vec<T>, BlockCache<T>) {
    let mut ln1_out = vec![T::zero(); n * dim];
    let mut ln1_mean = vec![T::zero(); n];
    let mut ln1_rstd = vec![T::zero(); n];
    layernorm_forward(&x, &p.ln1_g.data, &p.ln1_b.data, &mut ln1_out, &mut ln1_mean,
        &mut ln1_rstd, n, dim);

    let mut qkv = vec![T::zero(); n * 3 * dim];
    linear_forward(&ln1_out, &p.qkv_w.data, &p.qkv_b.data, &mut qkv, n, dim, 3 * dim);

    let mut att = vec![T::zero(); heads * n * n];
    let mut att_out = vec![T::zero(); n * dim];
    attention_forward(&qkv, &mut att, &mut att_out, n, dim, heads);

    let mut res1 = vec![T::zero(); n * dim];
    linear_forward(&att_out, &p.proj_w.data, &p.proj_b.data, &mut res1, n, dim, dim);
    add_inplace(&mut res1, &x);

    let mut ln2_out = vec![T::zero(); n * dim];
    let mut ln2_mean = vec![T::zero(); n];
    let mut ln2_rstd = vec![T::zero(); n];
    layernorm_forward(&res1, &p.ln2_g.data, &p.ln2_b.data, &mut ln2_out, &mut ln2_mean,
        &mut ln2_rstd, n, dim);

    let mut fc1_out = vec![T::zero(); n * hidden];
    linear_forward(&ln2_out, &p.fc1_w.data, &p.fc1_b.data, &mut fc1_out, n, dim, hidden);
    let mut gelu_out = vec![T::zero(); n * hidden];
    gelu_forward(&fc1_out, &mut gelu_out);

    let mut out = vec![T::zero(); n * dim];
    linear_forward(&gelu_out, &p.fc2_w.data, &p.fc2_b.data, &mut out, n, hidden, dim);
    add_inplace(&mut out, &res1);

    let cache = BlockCache {
        x, ln1_mean, ln1_rstd, ln1_out, qkv, att, att_out, res1,
        ln2_mean, ln2_rstd, ln2_out, fc1_out, gelu_out,
    };
    (out, cache)
}

fn block_backward<T: Scalar>(
    p: &BlockParams<T>,
    cache: &BlockCache<T>,
    d_out: &[T],
    g: &mut BlockParams<T>,
    n: usize,
    dim: usize,
    hidden: usize,
    heads: usize,
) -> Vec<T> {
    // MLP branch: out = res1 + fc2(gelu(fc1(ln2(res1))))
    let mut d_gelu = vec![T::zero(); n * hidden];
    linear_backward(&cache.gelu_out, &p.fc2_w.data, d_out, &mut d_gelu, &mut g.fc2_w.data,
        &mut g.fc2_b.data, n, hidden, dim);
    let mut d_fc1 = vec![T::zero(); n * hidden];
    gelu_backward(&cache.fc1_out, &d_gelu, &mut d_fc1);
    let mut d_ln2 = vec![T::zero(); n * dim];
    linear_backward(&cache.ln2_out, &p.fc1_w.data, &d_fc1, &mut d_ln2, &mut g.fc1_w.data,
        &mut g.fc1_b.data, n, dim, hidden);
    let mut d_res1 = d_out.to_vec();
    layernorm_backward(&cache.res1, &p.ln2_g.data, &cache.ln2_mean, &cache.ln2_rstd, &d_ln2,
        &mut d_res1, &mut g.ln2_g.data, &mut g.ln2_b.data, n, dim);

    // Attention branch: res1 = x + proj(attention(qkv(ln1(x))))
    let mut d_att_out = vec![T::zero(); n * dim];
    linear_backward(&cache.att_out, &p.proj_w.data, &d_res1, &mut d_att_out, &mut g.proj_w.data,
        &mut g.proj_b.data, n, dim, dim);
    let mut d_qkv = vec![T::zero(); n * 3 * dim];
    attention_backward(&cache.qkv, &cache.att, &d_att_out, &mut d_qkv, n, dim, heads);
    let mut d_ln1 = vec![T::zero(); n * dim];
    linear_backward(&cache.ln1_out, &p.qkv_w.data, &d_qkv, &mut d_ln1, &mut g.qkv_w.data,
        &mut g.qkv_b.data, n, dim, 3 * dim);
    let mut d_x = d_res1.clone();
    layernorm_backward(&cache.x, &p.ln1_g.data, &cache.ln1_mean, &cache.ln1_rstd, &d_ln1,
        &mut d_x, &mut g.ln1_g.data, &mut g.ln1_b.data, n, dim);
    d_x
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EncodeCache<T> {
    /// Visible tokens in plan order, (keep, token_len).
    pub tokens: Vec<T>,
    /// Original grid index of each visible row.
    pub visible: Vec<usize>,
    pub blocks: Vec<BlockCache<T>>,
    /// Last block output, input to the final layer norm.
    pub block_out: Vec<T>,
    pub norm_mean: Vec<T>,
    pub norm_rstd: Vec<T>,
}

/// Encode already-gathered visible tokens (plan order). Returns post-norm
/// latents of shape (keep, dim).
pub fn encode_tokens<T: Scalar>(
    params: &ModelParams<T>,
    tokens: Vec<T>,
    visible: Vec<usize>,
) -> (Vec<T>, EncodeCache<T>) {
    let cfg = &params.cfg;
    let (d, l) = (cfg.enc.dim, cfg.token_len());
    let heads = cfg.enc.heads;
    let hidden = d * cfg.enc.mlp_ratio;
    let keep = visible.len();
    debug_assert_eq!(tokens.len(), keep * l);

    let mut x = vec![T::zero(); keep * d];
    linear_forward(&tokens, &params.patch_embed_w.data, &params.patch_embed_b.data, &mut x,
        keep, l, d);
    for (j, &p) in visible.iter().enumerate() {
        add_inplace(&mut x[j * d..(j + 1) * d], &params.enc_pos.data[p * d..(p + 1) * d]);
    }

    let mut blocks = Vec::with_capacity(cfg.enc.depth);
    for b in &params.enc_blocks {
        let (out, cache) = block_forward(b, x, keep, d, hidden, heads);
        blocks.push(cache);
        x = out;
    }

    let block_out = x;
    let mut latents = vec![T::zero(); keep * d];
    let mut norm_mean = vec![T::zero(); keep];
    let mut norm_rstd = vec![T::zero(); keep];
    layernorm_forward(&block_out, &params.enc_norm_g.data, &params.enc_norm_b.data,
        &mut latents, &mut norm_mean, &mut norm_rstd, keep, d);

    (latents, EncodeCache { tokens, visible, blocks, block_out, norm_mean, norm_rstd })
}

/// Backward through the encoder; returns the gradient w.r.t. the visible
/// input tokens (keep, token_len).
pub fn encode_backward<T: Scalar>(
    params: &ModelParams<T>,
    cache: &EncodeCache<T>,
    d_latents: &[T],
    grads: &mut ModelParams<T>,
) -> Vec<T> {
    let cfg = &params.cfg;
    let (d, l) = (cfg.enc.dim, cfg.token_len());
    let heads = cfg.enc.heads;
    let hidden = d * cfg.enc.mlp_ratio;
    let keep = cache.visible.len();

    let mut d_x = vec![T::zero(); keep * d];
    layernorm_backward(&cache.block_out, &params.enc_norm_g.data, &cache.norm_mean,
        &cache.norm_rstd, d_latents, &mut d_x, &mut grads.enc_norm_g.data,
        &mut grads.enc_norm_b.data, keep, d);

    for (b, c, g) in iter_blocks_rev(&params.enc_blocks, &cache.blocks, &mut grads.enc_blocks) {
        d_x = block_backward(b, c, &d_x, g, keep, d, hidden, heads);
    }

    // Positional rows are fixed, so d_x passes straight to the patch embed.
    let mut d_tokens = vec![T::zero(); keep * l];
    linear_backward(&cache.tokens, &params.patch_embed_w.data, &d_x, &mut d_tokens,
        &mut grads.patch_embed_w.data, &mut grads.patch_embed_b.data, keep, l, d);
    d_tokens
}

fn iter_blocks_rev<'a, T>(
    params: &'a [BlockParams<T>],
    caches: &'a [BlockCache<T>],
    grads: &'a mut [BlockParams<T>],
) -> impl Iterator<Item = (&'a BlockParams<T>, &'a BlockCache<T>, &'a mut BlockParams<T>)> {
    params.iter().rev().zip(caches.iter().rev()).zip(grads.iter_mut().rev())
        .map(|((p, c), g)| (p, c, g))
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DecodeCache<T> {
    /// Encoder latents fed to the decoder embed, (keep, enc_dim).
    pub latents: Vec<T>,
    /// Token sequence after scatter + positions, (n, dec_dim).
    pub dec_in: Vec<T>,
    pub blocks: Vec<BlockCache<T>>,
    pub block_out: Vec<T>,
    pub norm_mean: Vec<T>,
    pub norm_rstd: Vec<T>,
    /// Input to the output head, (n, dec_dim).
    pub head_in: Vec<T>,
}

/// Decode latents + mask tokens into per-patch predictions (n, token_len)
/// in canonical grid order.
pub fn decode_tokens<T: Scalar>(
    params: &ModelParams<T>,
    latents: Vec<T>,
    plan: &MaskPlan,
) -> (Vec<T>, DecodeCache<T>) {
    let cfg = &params.cfg;
    let (d, dd, l) = (cfg.enc.dim, cfg.dec.dim, cfg.token_len());
    let heads = cfg.dec.heads;
    let hidden = dd * cfg.dec.mlp_ratio;
    let n = plan.n();
    let keep = plan.keep();
    debug_assert_eq!(latents.len(), keep * d);

    let mut proj = vec![T::zero(); keep * dd];
    linear_forward(&latents, &params.dec_embed_w.data, &params.dec_embed_b.data, &mut proj,
        keep, d, dd);

    let mut dec_in = vec![T::zero(); n * dd];
    for (j, &p) in plan.visible_indices().iter().enumerate() {
        dec_in[p * dd..(p + 1) * dd].copy_from_slice(&proj[j * dd..(j + 1) * dd]);
    }
    for &p in plan.masked_indices() {
        dec_in[p * dd..(p + 1) * dd].copy_from_slice(&params.mask_token.data);
    }
    for p in 0..n {
        add_inplace(&mut dec_in[p * dd..(p + 1) * dd], &params.dec_pos.data[p * dd..(p + 1) * dd]);
    }

    let mut blocks = Vec::with_capacity(cfg.dec.depth);
    let mut x = dec_in.clone();
    for b in &params.dec_blocks {
        let (out, cache) = block_forward(b, x, n, dd, hidden, heads);
        blocks.push(cache);
        x = out;
    }

    // Zero-depth decoders skip the final norm too: head reads dec_in as-is.
    let (block_out, norm_mean, norm_rstd, head_in) = if cfg.dec.depth > 0 {
        let block_out = x;
        let mut head_in = vec![T::zero(); n * dd];
        let mut norm_mean = vec![T::zero(); n];
        let mut norm_rstd = vec![T::zero(); n];
        layernorm_forward(&block_out, &params.dec_norm_g.data, &params.dec_norm_b.data,
            &mut head_in, &mut norm_mean, &mut norm_rstd, n, dd);
        (block_out, norm_mean, norm_rstd, head_in)
    } else {
        (Vec::new(), Vec::new(), Vec::new(), x)
    };

    let mut pred = vec![T::zero(); n * l];
    linear_forward(&head_in, &params.head_w.data, &params.head_b.data, &mut pred, n, dd, l);

    let cache = DecodeCache { latents, dec_in, blocks, block_out, norm_mean, norm_rstd, head_in };
    (pred, cache)
}

/// Backward through the decoder; returns d_latents (keep, enc_dim).
pub fn decode_backward<T: Scalar>(
    params: &ModelParams<T>,
    cache: &DecodeCache<T>,
    plan: &MaskPlan,
    d_pred: &[T],
    grads: &mut ModelParams<T>,
) -> Vec<T> {
    let cfg = &params.cfg;
    let (d, dd, l) = (cfg.enc.dim, cfg.dec.dim, cfg.token_len());
    let heads = cfg.dec.heads;
    let hidden = dd * cfg.dec.mlp_ratio;
    let n = plan.n();
    let keep = plan.keep();

    let mut d_head_in = vec![T::zero(); n * dd];
    linear_backward(&cache.head_in, &params.head_w.data, d_pred, &mut d_head_in,
        &mut grads.head_w.data, &mut grads.head_b.data, n, dd, l);

    let mut d_seq = if cfg.dec.depth > 0 {
        let mut d_block_out = vec![T::zero(); n * dd];
        layernorm_backward(&cache.block_out, &params.dec_norm_g.data, &cache.norm_mean,
            &cache.norm_rstd, &d_head_in, &mut d_block_out, &mut grads.dec_norm_g.data,
            &mut grads.dec_norm_b.data, n, dd);
        let mut d_x = d_block_out;
        for (b, c, g) in iter_blocks_rev(&params.dec_blocks, &cache.blocks, &mut grads.dec_blocks)
        {
            d_x = block_backward(b, c, &d_x, g, n, dd, hidden, heads);
        }
        d_x
    } else {
        d_head_in
    };

    for &p in plan.masked_indices() {
        add_inplace(&mut grads.mask_token.data, &d_seq[p * dd..(p + 1) * dd]);
    }
    let mut d_proj = vec![T::zero(); keep * dd];
    for (j, &p) in plan.visible_indices().iter().enumerate() {
        d_proj[j * dd..(j + 1) * dd].copy_from_slice(&d_seq[p * dd..(p + 1) * dd]);
    }
    d_seq.clear();

    let mut d_latents = vec![T::zero(); keep * d];
    linear_backward(&cache.latents, &params.dec_embed_w.data, &d_proj, &mut d_latents,
        &mut grads.dec_embed_w.data, &mut grads.dec_embed_b.data, keep, d, dd);
    d_latents
}

// ---------------------------------------------------------------------------
// Whole-model forward/backward over one masked sample
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SampleCache<T> {
    pub enc: EncodeCache<T>,
    pub dec: DecodeCache<T>,
    /// Predictions, (n, token_len) in canonical order.
    pub pred: Vec<T>,
}

/// Forward over one sample: gather visible tokens from the canonical token
/// buffer, encode, decode.
pub fn forward_masked<T: Scalar>(
    params: &ModelParams<T>,
    all_tokens: &[T],
    plan: &MaskPlan,
) -> SampleCache<T> {
    let l = params.cfg.token_len();
    let visible = plan.visible_indices().to_vec();
    let mut tokens = Vec::with_capacity(visible.len() * l);
    for &p in &visible {
        tokens.extend_from_slice(&all_tokens[p * l..(p + 1) * l]);
    }
    let (latents, enc) = encode_tokens(params, tokens, visible);
    let (pred, dec) = decode_tokens(params, latents, plan);
    SampleCache { enc, dec, pred }
}

/// Backward over one sample; returns the gradient w.r.t. the visible input
/// tokens in plan order, (keep, token_len).
pub fn backward_masked<T: Scalar>(
    params: &ModelParams<T>,
    cache: &SampleCache<T>,
    plan: &MaskPlan,
    d_pred: &[T],
    grads: &mut ModelParams<T>,
) -> Vec<T> {
    let d_latents = decode_backward(params, &cache.dec, plan, d_pred, grads);
    encode_backward(params, &cache.enc, &d_latents, grads)
}

// ---------------------------------------------------------------------------
// Public inference API (f32)
// ---------------------------------------------------------------------------

fn check_spec_dims(params: &ModelParams<f32>, spec: &Spectrogram) -> Result<()> {
    let cfg = &params.cfg;
    if spec.n_mels != cfg.n_mels || spec.n_frames != cfg.n_frames {
        return Err(Error::Shape(format!(
            "spectrogram {}x{} does not match model input {}x{}",
            spec.n_mels, spec.n_frames, cfg.n_mels, cfg.n_frames
        )));
    }
    Ok(())
}

fn check_plan(params: &ModelParams<f32>, plan: &MaskPlan) -> Result<()> {
    let n = params.cfg.grid()?.n();
    if plan.n() != n {
        return Err(Error::Shape(format!(
            "mask plan covers {} patches but the grid has {n}",
            plan.n()
        )));
    }
    Ok(())
}

fn identity_plan(n: usize) -> MaskPlan {
    MaskPlan::new(0, n, (0..n).collect()).expect("identity permutation is valid")
}

/// Encode only the visible patches; latents are (keep, dim) in plan order.
pub fn encode_visible(
    spec: &Spectrogram,
    plan: &MaskPlan,
    params: &ModelParams<f32>,
) -> Result<Vec<f32>> {
    check_spec_dims(params, spec)?;
    check_plan(params, plan)?;
    let (seq, _) = patchify(spec, &params.cfg.patch)?;
    let cache = forward_masked_tokens_only(params, &seq, plan);
    Ok(cache)
}

fn forward_masked_tokens_only(
    params: &ModelParams<f32>,
    seq: &PatchSequence,
    plan: &MaskPlan,
) -> Vec<f32> {
    let l = params.cfg.token_len();
    let visible = plan.visible_indices().to_vec();
    let mut tokens = Vec::with_capacity(visible.len() * l);
    for &p in &visible {
        tokens.extend_from_slice(&seq.tokens[p * l..(p + 1) * l]);
    }
    let (latents, _) = encode_tokens(params, tokens, visible);
    latents
}

/// Encode the whole spectrogram; z is (n, dim) in canonical grid order.
pub fn full_encode(spec: &Spectrogram, params: &ModelParams<f32>) -> Result<Vec<f32>> {
    let plan = identity_plan(params.cfg.grid()?.n());
    encode_visible(spec, &plan, params)
}

/// Decode latents (keep, dim) into a full predicted patch sequence.
pub fn decode(
    latents: &[f32],
    plan: &MaskPlan,
    params: &ModelParams<f32>,
) -> Result<PatchSequence> {
    check_plan(params, plan)?;
    let d = params.cfg.enc.dim;
    if latents.len() != plan.keep() * d {
        return Err(Error::Shape(format!(
            "latent buffer of {} values does not match keep {} x dim {d}",
            latents.len(),
            plan.keep()
        )));
    }
    let (pred, _) = decode_tokens(params, latents.to_vec(), plan);
    PatchSequence::new(pred, plan.n(), params.cfg.token_len())
}

/// Encode visible patches and decode the full sequence in one call.
pub fn reconstruct(
    spec: &Spectrogram,
    plan: &MaskPlan,
    params: &ModelParams<f32>,
) -> Result<PatchSequence> {
    let latents = encode_visible(spec, plan, params)?;
    decode(&latents, plan, params)
}

/// Attention from one reference patch, averaged over the heads of the last
/// encoder block; grid-shaped, rows sum to 1.
#[derive(Debug, Clone)]
pub struct AttnMap {
    pub weights: Vec<f32>,
    pub n_f: usize,
    pub n_t: usize,
}

impl AttnMap {
    pub fn get(&self, f: usize, t: usize) -> f32 {
        self.weights[f * self.n_t + t]
    }
}

/// Full-input attention map for reference patch (f, t) from the last
/// encoder block, averaged over heads.
pub fn attention_last_layer(
    spec: &Spectrogram,
    params: &ModelParams<f32>,
    ref_f: usize,
    ref_t: usize,
) -> Result<AttnMap> {
    check_spec_dims(params, spec)?;
    let grid = params.cfg.grid()?;
    if ref_f >= grid.n_f || ref_t >= grid.n_t {
        return Err(Error::Shape(format!(
            "reference patch ({ref_f}, {ref_t}) outside {}x{} grid",
            grid.n_f, grid.n_t
        )));
    }
    let (seq, _) = patchify(spec, &params.cfg.patch)?;
    let plan = identity_plan(grid.n());
    let cache = forward_masked(params, &seq.tokens, &plan);
    let last = cache.enc.blocks.last().expect("encoder depth >= 1");
    let n = grid.n();
    let heads = params.cfg.enc.heads;
    let q = ref_f * grid.n_t + ref_t;
    let mut weights = vec![0f32; n];
    for h in 0..heads {
        let row = &last.att[h * n * n + q * n..h * n * n + (q + 1) * n];
        for (w, &a) in weights.iter_mut().zip(row.iter()) {
            *w += a;
        }
    }
    let inv = 1.0 / heads as f32;
    weights.iter_mut().for_each(|w| *w *= inv);
    Ok(AttnMap { weights, n_f: grid.n_f, n_t: grid.n_t })
}
