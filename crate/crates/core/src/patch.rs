//! Patch geometry: spectrogram patchification, mask plans, and fixed
//! positional embeddings.
//!
//! Patches are indexed frequency-major, `i = f * n_t + t`, and each token
//! stores its sub-rectangle row-major over (freq, time). That ordering is
//! what lets downstream feature extraction reshape encoder output into a
//! (time, freq * dim) matrix without reindexing.

use crate::error::{Error, Result};
use crate::frontend::Spectrogram;
use crate::rng::rng_from_seed;
use rand::Rng;

/// Patch height (mel bins) and width (frames).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchConfig {
    pub p_f: usize,
    pub p_t: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { p_f: 16, p_t: 16 }
    }
}

impl PatchConfig {
    pub fn token_len(&self) -> usize {
        self.p_f * self.p_t
    }
}

/// Patch counts along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub n_f: usize,
    pub n_t: usize,
}

impl Grid {
    pub fn n(&self) -> usize {
        self.n_f * self.n_t
    }
}

/// Divide an F x T spectrogram into whole patches.
pub fn grid_dims(f_bins: usize, t_frames: usize, cfg: &PatchConfig) -> Result<Grid> {
    if cfg.p_f == 0 || cfg.p_t == 0 {
        return Err(Error::Config("zero-sized patch".into()));
    }
    if f_bins % cfg.p_f != 0 || t_frames % cfg.p_t != 0 {
        return Err(Error::Shape(format!(
            "{}x{} spectrogram is not divisible by {}x{} patches",
            f_bins, t_frames, cfg.p_f, cfg.p_t
        )));
    }
    Ok(Grid { n_f: f_bins / cfg.p_f, n_t: t_frames / cfg.p_t })
}

/// N tokens of `p_f * p_t` values each, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub tokens: Vec<f32>,
    pub n: usize,
    pub token_len: usize,
}

impl PatchSequence {
    pub fn new(tokens: Vec<f32>, n: usize, token_len: usize) -> Result<Self> {
        if tokens.len() != n * token_len {
            return Err(Error::Shape(format!(
                "token buffer has {} values, expected {n} x {token_len}",
                tokens.len()
            )));
        }
        Ok(Self { tokens, n, token_len })
    }

    pub fn zeros(n: usize, token_len: usize) -> Self {
        Self { tokens: vec![0.0; n * token_len], n, token_len }
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.tokens[i * self.token_len..(i + 1) * self.token_len]
    }

    pub fn token_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.tokens[i * self.token_len..(i + 1) * self.token_len]
    }
}

/// Lossless split: token `i = f * n_t + t` holds spectrogram rows
/// `[f*p_f, (f+1)*p_f)` and columns `[t*p_t, (t+1)*p_t)`.
pub fn patchify(spec: &Spectrogram, cfg: &PatchConfig) -> Result<(PatchSequence, Grid)> {
    let grid = grid_dims(spec.n_mels, spec.n_frames, cfg)?;
    let token_len = cfg.token_len();
    let mut tokens = Vec::with_capacity(grid.n() * token_len);
    for f in 0..grid.n_f {
        for t in 0..grid.n_t {
            for r in 0..cfg.p_f {
                let mel = f * cfg.p_f + r;
                let base = mel * spec.n_frames + t * cfg.p_t;
                tokens.extend_from_slice(&spec.data[base..base + cfg.p_t]);
            }
        }
    }
    Ok((PatchSequence::new(tokens, grid.n(), token_len)?, grid))
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(seq: &PatchSequence, grid: &Grid, cfg: &PatchConfig) -> Result<Spectrogram> {
    if seq.n != grid.n() {
        return Err(Error::Shape(format!(
            "sequence has {} tokens but grid expects {}",
            seq.n,
            grid.n()
        )));
    }
    if seq.token_len != cfg.token_len() {
        return Err(Error::Shape(format!(
            "token length {} does not match patch size {}x{}",
            seq.token_len, cfg.p_f, cfg.p_t
        )));
    }
    let (n_mels, n_frames) = (grid.n_f * cfg.p_f, grid.n_t * cfg.p_t);
    let mut data = vec![0f32; n_mels * n_frames];
    for f in 0..grid.n_f {
        for t in 0..grid.n_t {
            let tok = seq.token(f * grid.n_t + t);
            for r in 0..cfg.p_f {
                let mel = f * cfg.p_f + r;
                let base = mel * n_frames + t * cfg.p_t;
                data[base..base + cfg.p_t].copy_from_slice(&tok[r * cfg.p_t..(r + 1) * cfg.p_t]);
            }
        }
    }
    Spectrogram::new(data, n_mels, n_frames)
}

// ---------------------------------------------------------------------------
// Mask plans
// ---------------------------------------------------------------------------

/// Visible/masked split of patch indices.
///
/// `permutation` is a bijection on `0..n`; the first `keep` entries are the
/// visible set (in that order), the rest are masked. Training plans always
/// have `1 <= keep`, but the constructor also admits the degenerate
/// all-masked (`keep == 0`) and all-visible (`keep == n`) plans that the
/// loss and visualizer exercise at the boundaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    seed: u64,
    keep: usize,
    permutation: Vec<usize>,
    visible_flags: Vec<bool>,
}

impl MaskPlan {
    pub fn new(seed: u64, keep: usize, permutation: Vec<usize>) -> Result<Self> {
        let n = permutation.len();
        if n == 0 {
            return Err(Error::Config("empty permutation".into()));
        }
        if keep > n {
            return Err(Error::Config(format!("keep {keep} exceeds {n} patches")));
        }
        let mut seen = vec![false; n];
        for &p in &permutation {
            if p >= n || seen[p] {
                return Err(Error::Config("permutation is not a bijection".into()));
            }
            seen[p] = true;
        }
        let mut visible_flags = vec![false; n];
        for &p in &permutation[..keep] {
            visible_flags[p] = true;
        }
        Ok(Self { seed, keep, permutation, visible_flags })
    }

    pub fn n(&self) -> usize {
        self.permutation.len()
    }

    pub fn keep(&self) -> usize {
        self.keep
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Visible patch indices in plan order.
    pub fn visible_indices(&self) -> &[usize] {
        &self.permutation[..self.keep]
    }

    /// Masked patch indices in plan order.
    pub fn masked_indices(&self) -> &[usize] {
        &self.permutation[self.keep..]
    }

    pub fn is_visible(&self, index: usize) -> bool {
        self.visible_flags[index]
    }

    /// One-line text form: `seed keep perm...`.
    pub fn to_line(&self) -> String {
        let mut s = format!("{} {}", self.seed, self.keep);
        for p in &self.permutation {
            s.push(' ');
            s.push_str(&p.to_string());
        }
        s
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let mut it = line.split_whitespace();
        let seed: u64 = it
            .next()
            .ok_or_else(|| Error::Format("empty mask-plan line".into()))?
            .parse()
            .map_err(|_| Error::Format("mask-plan seed is not an integer".into()))?;
        let keep: usize = it
            .next()
            .ok_or_else(|| Error::Format("mask-plan line missing keep count".into()))?
            .parse()
            .map_err(|_| Error::Format("mask-plan keep is not an integer".into()))?;
        let permutation: Vec<usize> = it
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad mask-plan index '{tok}'")))
            })
            .collect::<Result<_>>()?;
        Self::new(seed, keep, permutation).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Number of visible patches for a mask ratio: round-half-up of
/// `n * (1 - ratio)`, floored at 1 so the encoder always sees something.
pub fn keep_count(n: usize, ratio: f64) -> usize {
    // Decimal ratios often put n*(1-ratio) exactly on the rounding boundary
    // (95 patches at ratio 0.90 -> 9.5) where f64 representation error of
    // (1 - ratio) would tip the floor the wrong way; the epsilon absorbs it.
    ((n as f64 * (1.0 - ratio) + 0.5 + 1e-9).floor() as usize).max(1)
}

/// Uniformly random plan: permutation is the argsort of i.i.d. uniform
/// noise keyed by `seed`.
pub fn random_mask_plan(n: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if n == 0 {
        return Err(Error::Config("cannot mask an empty sequence".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let mut rng = rng_from_seed(seed);
    let noise: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let mut permutation: Vec<usize> = (0..n).collect();
    permutation.sort_by(|&a, &b| noise[a].partial_cmp(&noise[b]).unwrap());
    MaskPlan::new(seed, keep_count(n, ratio), permutation)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPattern {
    /// Mask every odd time column.
    Vertical,
    /// Mask every odd frequency row.
    Horizontal,
    /// Mask cells where f + t is odd.
    Chessboard,
}

impl MaskPattern {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vertical" => Ok(Self::Vertical),
            "horizontal" => Ok(Self::Horizontal),
            "chessboard" => Ok(Self::Chessboard),
            _ => Err(Error::Config(format!(
                "unknown mask pattern '{s}' (expected vertical, horizontal, or chessboard)"
            ))),
        }
    }

    fn masks(&self, f: usize, t: usize) -> bool {
        match self {
            Self::Vertical => t % 2 == 1,
            Self::Horizontal => f % 2 == 1,
            Self::Chessboard => (f + t) % 2 == 1,
        }
    }
}

/// Deterministic alternating plan; visible indices come first in ascending
/// order, then masked indices ascending. Stored seed is 0 (unused).
pub fn patterned_mask_plan(grid: &Grid, pattern: MaskPattern) -> Result<MaskPlan> {
    let mut visible = Vec::new();
    let mut masked = Vec::new();
    for f in 0..grid.n_f {
        for t in 0..grid.n_t {
            let i = f * grid.n_t + t;
            if pattern.masks(f, t) {
                masked.push(i);
            } else {
                visible.push(i);
            }
        }
    }
    let keep = visible.len();
    visible.extend_from_slice(&masked);
    MaskPlan::new(0, keep, visible)
}

// ---------------------------------------------------------------------------
// Positional embeddings
// ---------------------------------------------------------------------------

/// Fixed N x D table of separable 2-D sinusoids.
#[derive(Debug, Clone, PartialEq)]
pub struct PosEmbed {
    pub table: Vec<f32>,
    pub n: usize,
    pub dim: usize,
}

impl PosEmbed {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.table[i * self.dim..(i + 1) * self.dim]
    }
}

/// Standard interleaved sinusoidal encoding: entry 2k is
/// `sin(pos / 10000^(2k/d))`, entry 2k+1 the matching cosine.
fn enc_1d(pos: usize, d: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), d);
    for k in 0..d / 2 {
        let rate = 10000f64.powf(-(2.0 * k as f64) / d as f64);
        let angle = pos as f64 * rate;
        out[2 * k] = angle.sin() as f32;
        out[2 * k + 1] = angle.cos() as f32;
    }
}

/// Row for cell (f, t) is `concat(enc_1d(f, D/2), enc_1d(t, D/2))`.
pub fn sincos_pos_embed(grid: &Grid, dim: usize) -> Result<PosEmbed> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::Config(format!("embedding dim {dim} must be divisible by 4")));
    }
    let n = grid.n();
    let half = dim / 2;
    let mut table = vec![0f32; n * dim];
    for f in 0..grid.n_f {
        for t in 0..grid.n_t {
            let row = &mut table[(f * grid.n_t + t) * dim..(f * grid.n_t + t + 1) * dim];
            enc_1d(f, half, &mut row[..half]);
            enc_1d(t, half, &mut row[half..]);
        }
    }
    Ok(PosEmbed { table, n, dim })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_from_fn(n_mels: usize, n_frames: usize, f: impl Fn(usize, usize) -> f32) -> Spectrogram {
        let mut data = vec![0f32; n_mels * n_frames];
        for r in 0..n_mels {
            for c in 0..n_frames {
                data[r * n_frames + c] = f(r, c);
            }
        }
        Spectrogram::new(data, n_mels, n_frames).unwrap()
    }

    #[test]
    fn grid_dims_covers_all_supported_shapes() {
        // (T, p_f, p_t) -> (n_f, n_t, n) for F=80 throughout.
        let cases = [
            (96, 16, 16, 5, 6, 30),
            (208, 16, 16, 5, 13, 65),
            (304, 16, 16, 5, 19, 95),
            (400, 16, 16, 5, 25, 125),
            (512, 16, 16, 5, 32, 160),
            (200, 16, 8, 5, 25, 125),
            (200, 16, 4, 5, 50, 250),
            (208, 8, 16, 10, 13, 130),
            (304, 80, 4, 1, 76, 76),
        ];
        for (t, p_f, p_t, n_f, n_t, n) in cases {
            let g = grid_dims(80, t, &PatchConfig { p_f, p_t }).unwrap();
            assert_eq!((g.n_f, g.n_t, g.n()), (n_f, n_t, n), "T={t} patch {p_f}x{p_t}");
        }
    }

    #[test]
    fn grid_dims_rejects_non_divisible_shapes() {
        assert!(grid_dims(80, 100, &PatchConfig::default()).is_err());
        assert!(grid_dims(81, 96, &PatchConfig::default()).is_err());
    }

    #[test]
    fn patchify_enumerates_frequency_major() {
        // 4x4 values v[r][c] = 10r + c with 2x2 patches.
        let spec = spec_from_fn(4, 4, |r, c| (10 * r + c) as f32);
        let (seq, grid) = patchify(&spec, &PatchConfig { p_f: 2, p_t: 2 }).unwrap();
        assert_eq!((grid.n_f, grid.n_t), (2, 2));
        assert_eq!(seq.token(0), &[0.0, 1.0, 10.0, 11.0]);
        assert_eq!(seq.token(1), &[2.0, 3.0, 12.0, 13.0]);
        assert_eq!(seq.token(2), &[20.0, 21.0, 30.0, 31.0]);
        assert_eq!(seq.token(3), &[22.0, 23.0, 32.0, 33.0]);
    }

    #[test]
    fn patchify_default_config_yields_30_tokens() {
        let spec = spec_from_fn(80, 96, |r, c| (r * 96 + c) as f32);
        let (seq, grid) = patchify(&spec, &PatchConfig::default()).unwrap();
        assert_eq!(grid.n(), 30);
        assert_eq!(seq.token_len, 256);
    }

    #[test]
    fn patchify_constant_input_gives_identical_tokens() {
        let spec = spec_from_fn(32, 32, |_, _| 0.7);
        let (seq, _) = patchify(&spec, &PatchConfig { p_f: 16, p_t: 16 }).unwrap();
        for i in 1..seq.n {
            assert_eq!(seq.token(i), seq.token(0));
        }
    }

    #[test]
    fn unpatchify_inverts_patchify() {
        let spec = spec_from_fn(4, 4, |r, c| (10 * r + c) as f32);
        let cfg = PatchConfig { p_f: 2, p_t: 2 };
        let (seq, grid) = patchify(&spec, &cfg).unwrap();
        assert_eq!(unpatchify(&seq, &grid, &cfg).unwrap(), spec);
    }

    #[test]
    fn unpatchify_rejects_token_count_mismatch() {
        let seq = PatchSequence::zeros(4, 4);
        let grid = Grid { n_f: 3, n_t: 2 };
        assert!(unpatchify(&seq, &grid, &PatchConfig { p_f: 2, p_t: 2 }).is_err());
    }

    #[test]
    fn keep_count_reproduces_sparse_visible_counts() {
        assert_eq!(keep_count(160, 0.75), 40);
        assert_eq!(keep_count(95, 0.99), 1);
        assert_eq!(keep_count(95, 0.98), 2);
        assert_eq!(keep_count(95, 0.95), 5);
        assert_eq!(keep_count(95, 0.90), 10);
    }

    #[test]
    fn random_plan_is_deterministic_per_seed() {
        let a = random_mask_plan(64, 0.75, 7).unwrap();
        let b = random_mask_plan(64, 0.75, 7).unwrap();
        let c = random_mask_plan(64, 0.75, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.visible_indices(), c.visible_indices());
    }

    #[test]
    fn random_plan_rejects_degenerate_ratio() {
        assert!(random_mask_plan(10, 0.0, 1).is_err());
        assert!(random_mask_plan(10, 1.0, 1).is_err());
        assert!(random_mask_plan(0, 0.5, 1).is_err());
    }

    #[test]
    fn random_plan_index_marginals_are_uniform() {
        // Each index should be visible with frequency keep/n up to a 3-sigma
        // binomial bound over the seed draw.
        let (n, ratio, trials) = (20usize, 0.75f64, 2000u64);
        let keep = keep_count(n, ratio);
        let p = keep as f64 / n as f64;
        let mut counts = vec![0u32; n];
        for seed in 0..trials {
            let plan = random_mask_plan(n, ratio, seed).unwrap();
            for &i in plan.visible_indices() {
                counts[i] += 1;
            }
        }
        let bound = 3.0 * (p * (1.0 - p) / trials as f64).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / trials as f64;
            assert!(
                (freq - p).abs() < bound,
                "index {i}: frequency {freq:.4} vs expected {p:.4} +- {bound:.4}"
            );
        }
    }

    #[test]
    fn patterned_vertical_masks_odd_time_columns() {
        let grid = Grid { n_f: 5, n_t: 13 };
        let plan = patterned_mask_plan(&grid, MaskPattern::Vertical).unwrap();
        assert_eq!(plan.keep(), 35);
        for f in 0..5 {
            for t in 0..13 {
                assert_eq!(plan.is_visible(f * 13 + t), t % 2 == 0);
            }
        }
    }

    #[test]
    fn patterned_chessboard_on_2x2() {
        let grid = Grid { n_f: 2, n_t: 2 };
        let plan = patterned_mask_plan(&grid, MaskPattern::Chessboard).unwrap();
        // Masked cells: (0,1) -> index 1, (1,0) -> index 2.
        assert_eq!(plan.keep(), 2);
        let mut masked: Vec<usize> = plan.masked_indices().to_vec();
        masked.sort_unstable();
        assert_eq!(masked, vec![1, 2]);
    }

    #[test]
    fn patterned_plans_mask_half_on_even_grids() {
        let grid = Grid { n_f: 4, n_t: 6 };
        for pattern in [MaskPattern::Vertical, MaskPattern::Horizontal, MaskPattern::Chessboard] {
            let plan = patterned_mask_plan(&grid, pattern).unwrap();
            assert_eq!(plan.keep(), grid.n() / 2, "{pattern:?}");
        }
    }

    #[test]
    fn mask_plan_line_roundtrip() {
        let plan = random_mask_plan(30, 0.75, 42).unwrap();
        let line = plan.to_line();
        assert_eq!(MaskPlan::from_line(&line).unwrap(), plan);
    }

    #[test]
    fn mask_plan_line_rejects_garbage() {
        assert!(MaskPlan::from_line("").is_err());
        assert!(MaskPlan::from_line("7").is_err());
        assert!(MaskPlan::from_line("7 2 0 0 1").is_err()); // repeated index
        assert!(MaskPlan::from_line("7 5 0 1 2").is_err()); // keep > n
        assert!(MaskPlan::from_line("7 1 0 x 2").is_err());
    }

    #[test]
    fn pos_embed_origin_row_alternates_zero_one() {
        let grid = Grid { n_f: 2, n_t: 3 };
        let pe = sincos_pos_embed(&grid, 8).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn pos_embed_rows_are_distinct_and_bounded() {
        let grid = Grid { n_f: 5, n_t: 6 };
        let dim = 16;
        let pe = sincos_pos_embed(&grid, dim).unwrap();
        for i in 0..pe.n {
            let norm: f32 = pe.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!(norm > 0.0 && norm <= (dim as f32).sqrt());
            for j in i + 1..pe.n {
                let same = pe.row(i).iter().zip(pe.row(j)).all(|(a, b)| (a - b).abs() < 1e-9);
                assert!(!same, "rows {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn pos_embed_is_deterministic() {
        let grid = Grid { n_f: 5, n_t: 13 };
        let a = sincos_pos_embed(&grid, 64).unwrap();
        let b = sincos_pos_embed(&grid, 64).unwrap();
        assert_eq!(a.table, b.table);
    }

    #[test]
    fn pos_embed_rejects_indivisible_dim() {
        let grid = Grid { n_f: 2, n_t: 2 };
        assert!(sincos_pos_embed(&grid, 6).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn patchify_roundtrip_is_identity(
                n_f in 1usize..5,
                n_t in 1usize..5,
                p_f in 1usize..6,
                p_t in 1usize..6,
                seed in 0u64..1000,
            ) {
                let (rows, cols) = (n_f * p_f, n_t * p_t);
                let mut rng = rng_from_seed(seed);
                let data: Vec<f32> = (0..rows * cols).map(|_| rng.random::<f32>() * 4.0 - 2.0).collect();
                let spec = Spectrogram::new(data, rows, cols).unwrap();
                let cfg = PatchConfig { p_f, p_t };
                let (seq, grid) = patchify(&spec, &cfg).unwrap();
                let back = unpatchify(&seq, &grid, &cfg).unwrap();
                prop_assert_eq!(back.data, spec.data);
            }

            #[test]
            fn mask_plans_partition_indices(
                n in 1usize..200,
                ratio in 0.01f64..0.99,
                seed in 0u64..500,
            ) {
                let plan = random_mask_plan(n, ratio, seed).unwrap();
                let mut seen = vec![false; n];
                for &i in plan.visible_indices().iter().chain(plan.masked_indices()) {
                    prop_assert!(!seen[i]);
                    seen[i] = true;
                }
                prop_assert!(seen.into_iter().all(|s| s));
                prop_assert!(plan.keep() >= 1 && plan.keep() <= n);
            }

            #[test]
            fn patterned_plans_partition_indices(
                n_f in 1usize..8,
                n_t in 1usize..8,
                which in 0usize..3,
            ) {
                let grid = Grid { n_f, n_t };
                let pattern = [MaskPattern::Vertical, MaskPattern::Horizontal, MaskPattern::Chessboard][which];
                let plan = patterned_mask_plan(&grid, pattern).unwrap();
                let mut seen = vec![false; grid.n()];
                for &i in plan.visible_indices().iter().chain(plan.masked_indices()) {
                    prop_assert!(!seen[i]);
                    seen[i] = true;
                }
                prop_assert!(seen.into_iter().all(|s| s));
            }
        }
    }
}
