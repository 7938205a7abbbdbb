//! Acceptance gate for the desk-scale system. Each numbered criterion prints
//! one PASS/FAIL/WARN line (visible with `--nocapture`); warn-only criteria
//! report but never fail the suite. All tolerances are pinned in this file.

use std::time::Instant;

use msm_core::downstream::{
    embed_dataset, make_polyphony_task, make_sine_pitch_task, run_probe, ProbeConfig,
};
use msm_core::features::timestamp_embeddings;
use msm_core::frontend::{
    compute_norm_stats, log_mel_spectrogram, FrontendConfig, NormStats, Spectrogram,
};
use msm_core::model::{init_params, reconstruct, ModelConfig, ModelParams};
use msm_core::patch::{
    grid_dims, keep_count, patchify, patterned_mask_plan, random_mask_plan, unpatchify,
    MaskPattern, PatchConfig,
};
use msm_core::pretrain::{grad_check, train, train_step, OptimizerState, TrainConfig, TrainRun};
use msm_core::viz::{composite_reconstruction, full_spectrogram_mse};
use rand::Rng;

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

struct Gate {
    failures: Vec<String>,
}

impl Gate {
    fn new() -> Self {
        Self { failures: Vec::new() }
    }

    /// Hard criterion: a failure fails the suite.
    fn check(&mut self, id: u32, label: &str, body: impl FnOnce() -> Result<String, String>) {
        let t0 = Instant::now();
        let outcome = body();
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("acceptance {id:02} PASS {label}: {detail} ({secs:.2}s)"),
            Err(detail) => {
                println!("acceptance {id:02} FAIL {label}: {detail} ({secs:.2}s)");
                self.failures.push(format!("{id:02} {label}: {detail}"));
            }
        }
    }

    /// Soft criterion: a failure is reported as WARN and does not gate.
    fn warn_only(&mut self, id: u32, label: &str, body: impl FnOnce() -> Result<String, String>) {
        let t0 = Instant::now();
        let outcome = body();
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("acceptance {id:02} PASS {label}: {detail} ({secs:.2}s)"),
            Err(detail) => println!("acceptance {id:02} WARN {label}: {detail} ({secs:.2}s)"),
        }
    }

    fn note(&mut self, id: u32, label: &str, detail: &str) {
        println!("acceptance {id:02} NOTE {label}: {detail}");
    }
}

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

fn random_spec(cfg: &ModelConfig, seed: u64) -> Spectrogram {
    let mut rng = msm_core::rng::rng_from_seed(seed);
    let data: Vec<f32> =
        (0..cfg.n_mels * cfg.n_frames).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
    Spectrogram::new(data, cfg.n_mels, cfg.n_frames).unwrap()
}

/// Clips sharing one tonal pattern (bright rows over a flat floor) with
/// independent light noise; masked patches are predictable from the shared
/// structure, so a working optimizer can drive the loss to the noise floor.
fn tonal_specs(cfg: &ModelConfig, count: usize, seed: u64) -> Vec<Spectrogram> {
    let mut rng = msm_core::rng::rng_from_seed(seed);
    let rows = [20usize, 29, 34, 38];
    (0..count)
        .map(|_| {
            let mut data = vec![0.0f32; cfg.n_mels * cfg.n_frames];
            for f in 0..cfg.n_mels {
                for t in 0..cfg.n_frames {
                    let mut v = -0.5;
                    for (i, &r) in rows.iter().enumerate() {
                        if f == r {
                            v = 1.5 - 0.2 * i as f32;
                        }
                    }
                    v += (rng.random::<f32>() - 0.5) * 0.1;
                    data[f * cfg.n_frames + t] = v;
                }
            }
            let mean = data.iter().sum::<f32>() / data.len() as f32;
            for v in &mut data {
                *v -= mean;
            }
            Spectrogram::new(data, cfg.n_mels, cfg.n_frames).unwrap()
        })
        .collect()
}

/// Corpus of synthetic tone clips as normalized model-width spectrograms,
/// plus the dataset stats used to normalize them.
fn synthetic_corpus(cfg: &ModelConfig) -> (Vec<Spectrogram>, NormStats) {
    let frontend = FrontendConfig::default();
    let pitch = make_sine_pitch_task(36, 21).unwrap();
    let poly = make_polyphony_task(64, 22).unwrap();
    let mels: Vec<Spectrogram> = pitch
        .items
        .iter()
        .chain(poly.items.iter())
        .map(|item| log_mel_spectrogram(&item.signal, &frontend).unwrap())
        .collect();
    let norm = compute_norm_stats(&mels).unwrap();
    let corpus: Vec<Spectrogram> =
        mels.iter().map(|m| norm.apply(m).crop_frames(cfg.n_frames).unwrap()).collect();
    (corpus, norm)
}

/// 16 tone clips from a generator seed never used for training, normalized
/// with the training stats and cropped to the model input width.
fn heldout_clips(cfg: &ModelConfig, norm: &NormStats) -> Vec<Spectrogram> {
    let frontend = FrontendConfig::default();
    let task = make_sine_pitch_task(3, 999).unwrap();
    task.items
        .iter()
        .take(16)
        .map(|item| {
            let mel = log_mel_spectrogram(&item.signal, &frontend).unwrap();
            norm.apply(&mel).crop_frames(cfg.n_frames).unwrap()
        })
        .collect()
}

/// Mean absolute reconstruction error over the masked tokens of one plan.
fn masked_mean_abs_error(
    spec: &Spectrogram,
    params: &ModelParams<f32>,
    plan: &msm_core::patch::MaskPlan,
) -> f64 {
    let pred = reconstruct(spec, plan, params).unwrap();
    let (target, _) = patchify(spec, &params.cfg.patch).unwrap();
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for &i in plan.masked_indices() {
        for (p, t) in pred.token(i).iter().zip(target.token(i)) {
            sum += (*p as f64 - *t as f64).abs();
            count += 1;
        }
    }
    sum / count as f64
}

/// Spearman rank correlation; ties broken by position (inputs here are
/// distinct floats in practice).
fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap().then(a.cmp(&b)));
        let mut r = vec![0usize; v.len()];
        for (rank, &i) in idx.iter().enumerate() {
            r[i] = rank;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let d2: f64 = rx
        .iter()
        .zip(&ry)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

fn csv_of(run: &TrainRun) -> String {
    let mut s = String::from("step,epoch,loss,lr\n");
    for r in &run.reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------------------
// The gate
// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    let mut gate = Gate::new();

    // 1. Grid geometry reproduces all nine frame-count / patch-size layouts.
    gate.check(1, "patch grid layouts", || {
        let rows: [(usize, usize, usize, usize, usize, usize); 9] = [
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
        for (frames, p_f, p_t, n_f, n_t, n) in rows {
            let grid = grid_dims(80, frames, &PatchConfig { p_f, p_t })
                .map_err(|e| format!("{frames} frames {p_f}x{p_t}: {e}"))?;
            if (grid.n_f, grid.n_t, grid.n()) != (n_f, n_t, n) {
                return Err(format!(
                    "{frames} frames {p_f}x{p_t}: got ({}, {}, {}), want ({n_f}, {n_t}, {n})",
                    grid.n_f,
                    grid.n_t,
                    grid.n()
                ));
            }
        }
        Ok("all nine (freq, time, total) patch counts exact".into())
    });

    // 2. Timestamp-embedding width at reference scale, and the reshape is a
    //    pure permutation of the encoder output values.
    gate.check(2, "timestamp embedding width and permutation", || {
        let grid = grid_dims(80, 208, &PatchConfig { p_f: 16, p_t: 16 }).unwrap();
        let dim = 768usize;
        let z: Vec<f32> = (0..grid.n() * dim).map(|i| i as f32 * 0.25 - 7.0).collect();
        let emb = timestamp_embeddings(&z, &grid, 160).map_err(|e| e.to_string())?;
        if emb.width() != 3840 || emb.rows() != grid.n_t {
            return Err(format!("width {} rows {}, want 3840 x {}", emb.width(), emb.rows(),
                grid.n_t));
        }
        let mut rng = msm_core::rng::rng_from_seed(2002);
        for case in 0..100 {
            let n_f = rng.random_range(1..=8usize);
            let n_t = rng.random_range(1..=16usize);
            let d = rng.random_range(1..=24usize);
            let grid = grid_dims(n_f * 4, n_t * 4, &PatchConfig { p_f: 4, p_t: 4 }).unwrap();
            let z: Vec<f32> = (0..n_f * n_t * d).map(|_| rng.random::<f32>() * 4.0 - 2.0)
                .collect();
            let emb = timestamp_embeddings(&z, &grid, 40).map_err(|e| e.to_string())?;
            let mut a: Vec<u32> = z.iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u32> = emb.values().iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            if a != b {
                return Err(format!("case {case} ({n_f}x{n_t}, d={d}): value multiset changed"));
            }
        }
        Ok("width 3840 at dim 768 with 5 frequency patches; 100 random shapes permute exactly"
            .into())
    });

    // 3. Patchify round-trips bit-exactly.
    gate.check(3, "patchify round-trip", || {
        let mut rng = msm_core::rng::rng_from_seed(3003);
        let p_fs = [1usize, 2, 4, 5, 8, 16];
        let p_ts = [1usize, 2, 3, 4, 8, 16];
        for case in 0..1000 {
            let p_f = p_fs[rng.random_range(0..p_fs.len())];
            let p_t = p_ts[rng.random_range(0..p_ts.len())];
            let n_mels = p_f * rng.random_range(1..=6usize);
            let n_frames = p_t * rng.random_range(1..=8usize);
            let data: Vec<f32> =
                (0..n_mels * n_frames).map(|_| rng.random::<f32>() * 8.0 - 4.0).collect();
            let spec = Spectrogram::new(data, n_mels, n_frames).unwrap();
            let cfg = PatchConfig { p_f, p_t };
            let (seq, grid) = patchify(&spec, &cfg).map_err(|e| e.to_string())?;
            let back = unpatchify(&seq, &grid, &cfg).map_err(|e| e.to_string())?;
            let same = spec
                .data
                .iter()
                .zip(&back.data)
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same || back.n_mels != n_mels || back.n_frames != n_frames {
                return Err(format!("case {case} ({n_mels}x{n_frames}, {p_f}x{p_t}) not exact"));
            }
        }
        Ok("1000 random shapes bit-exact".into())
    });

    // 4. Mask arithmetic: visible counts at extreme ratios, and plans
    //    partition the index set at every ratio.
    gate.check(4, "mask arithmetic", || {
        for (ratio, want) in [(0.99, 1usize), (0.98, 2), (0.95, 5), (0.90, 10)] {
            let got = keep_count(95, ratio);
            if got != want {
                return Err(format!("keep_count(95, {ratio}) = {got}, want {want}"));
            }
        }
        for n in [30usize, 65, 95] {
            for pct in 1..=99u64 {
                let ratio = pct as f64 / 100.0;
                let plan = random_mask_plan(n, ratio, 40_000 + pct).map_err(|e| e.to_string())?;
                if plan.keep() != keep_count(n, ratio) {
                    return Err(format!("n={n} ratio {ratio}: keep {} vs {}", plan.keep(),
                        keep_count(n, ratio)));
                }
                let mut all: Vec<usize> =
                    plan.visible_indices().iter().chain(plan.masked_indices()).copied().collect();
                all.sort_unstable();
                if all != (0..n).collect::<Vec<_>>() {
                    return Err(format!("n={n} ratio {ratio}: plan does not partition 0..{n}"));
                }
            }
        }
        Ok("visible counts {1,2,5,10} on 95 patches; 297 plans partition their index sets".into())
    });

    // 5. Analytic gradients agree with central finite differences in f64.
    gate.check(5, "gradient correctness", || {
        let t0 = Instant::now();
        let cfg = ModelConfig::desk();
        let params = init_params(&cfg, 3).unwrap().cast::<f64>();
        let spec = random_spec(&cfg, 5);
        let (seq, grid) = patchify(&spec, &cfg.patch).unwrap();
        let tokens: Vec<f64> = seq.tokens.iter().map(|&v| v as f64).collect();
        let plan = random_mask_plan(grid.n(), 0.75, 7).unwrap();
        let err = grad_check(&params, &tokens, &plan, false, 200, 11, |_| true);
        let secs = t0.elapsed().as_secs_f64();
        if err >= 1e-5 {
            return Err(format!("max rel err {err:.3e} over 200 sampled parameters"));
        }
        if secs >= 60.0 {
            return Err(format!("took {secs:.1}s, budget 60s"));
        }
        Ok(format!("max rel err {err:.3e} over 200 sampled parameters"))
    });

    // 6. Overfitting one batch of 4 clips collapses the masked MSE.
    gate.check(6, "overfit one batch", || {
        let t0 = Instant::now();
        let model_cfg = ModelConfig::desk();
        let cfg = TrainConfig {
            epochs: 10,
            warmup_epochs: 1,
            batch_size: 4,
            base_lr: 6e-3,
            seed: 41,
            ..TrainConfig::default()
        };
        let specs = tonal_specs(&model_cfg, 4, 43);
        let batch: Vec<&Spectrogram> = specs.iter().collect();
        let mut params = init_params(&model_cfg, cfg.seed).unwrap();
        let mut opt = OptimizerState::new(&model_cfg).unwrap();
        let mut first = 0f32;
        let mut last = 0f32;
        for step in 0..200u64 {
            let r = train_step(&batch, &mut params, &mut opt, &cfg, step, 0, 20)
                .map_err(|e| e.to_string())?;
            if step == 0 {
                first = r.masked_mse;
            }
            last = r.masked_mse;
        }
        let secs = t0.elapsed().as_secs_f64();
        if last >= 0.1 * first {
            return Err(format!("loss {first:.4} -> {last:.4} after 200 steps, want < 10%"));
        }
        if secs >= 300.0 {
            return Err(format!("took {secs:.1}s, budget 300s"));
        }
        Ok(format!("masked MSE {first:.4} -> {last:.4} ({:.1}% of start) in 200 steps",
            100.0 * last / first))
    });

    // Shared fixture for 7-10: a desk model pre-trained 20 epochs on the
    // synthetic tone corpus, trained twice for the determinism check.
    let model_cfg = ModelConfig::desk();
    let train_cfg = TrainConfig::desk();
    let (corpus, norm) = synthetic_corpus(&model_cfg);
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let fit_start = Instant::now();
    let run_a = train(&corpus, &model_cfg, &train_cfg, Some(dir_a.path()), |_| {}).unwrap();
    let fit_secs = fit_start.elapsed().as_secs_f64();
    let run_b = train(&corpus, &model_cfg, &train_cfg, Some(dir_b.path()), |_| {}).unwrap();
    let trained = &run_a.params;
    let grid = model_cfg.grid().unwrap();
    let heldout = heldout_clips(&model_cfg, &norm);
    println!(
        "fixture: desk model, {} clips, {} epochs, final loss {:.4} ({fit_secs:.1}s per run)",
        corpus.len(),
        train_cfg.epochs,
        run_a.reports.last().unwrap().masked_mse
    );

    // 7. Reconstruction error grows with the mask ratio on held-out clips.
    gate.check(7, "mask-ratio degradation", || {
        let t0 = Instant::now();
        let ratios = [0.40f64, 0.75, 0.90, 0.99];
        let plans_per_pair = 4u64;
        let mut means = [0.0f64; 4];
        for (ci, spec) in heldout.iter().enumerate() {
            for (ri, &ratio) in ratios.iter().enumerate() {
                for k in 0..plans_per_pair {
                    let seed = 70_000 + (ci as u64 * 8 + ri as u64) * 100 + k;
                    let plan = random_mask_plan(grid.n(), ratio, seed)
                        .map_err(|e| e.to_string())?;
                    let comp = composite_reconstruction(spec, trained, &plan, false)
                        .map_err(|e| e.to_string())?;
                    means[ri] +=
                        full_spectrogram_mse(&comp, spec).map_err(|e| e.to_string())? as f64;
                }
            }
        }
        for m in &mut means {
            *m /= (heldout.len() as u64 * plans_per_pair) as f64;
        }
        let rho = spearman(&ratios, &means);
        let secs = fit_secs + t0.elapsed().as_secs_f64();
        let detail = format!(
            "mean MSE {:.5}/{:.5}/{:.5}/{:.5} at ratios 0.40/0.75/0.90/0.99, Spearman {rho:.2}",
            means[0], means[1], means[2], means[3]
        );
        if rho < 0.8 {
            return Err(detail);
        }
        if secs >= 900.0 {
            return Err(format!("took {secs:.1}s including training, budget 900s"));
        }
        Ok(detail)
    });

    // 8. Chessboard masking reconstructs at least as well as single-axis
    //    stripes on most clips (reported only; never gates).
    gate.warn_only(8, "patterned-mask ordering", || {
        let mut wins = 0usize;
        for spec in &heldout {
            let chess = masked_mean_abs_error(
                spec,
                trained,
                &patterned_mask_plan(&grid, MaskPattern::Chessboard).unwrap(),
            );
            let vert = masked_mean_abs_error(
                spec,
                trained,
                &patterned_mask_plan(&grid, MaskPattern::Vertical).unwrap(),
            );
            let horiz = masked_mean_abs_error(
                spec,
                trained,
                &patterned_mask_plan(&grid, MaskPattern::Horizontal).unwrap(),
            );
            if chess <= vert && chess <= horiz {
                wins += 1;
            }
        }
        let detail = format!(
            "chessboard error lowest on {wins}/{} clips (need >= 12 of 16)",
            heldout.len()
        );
        if wins * 10 >= heldout.len() * 7 {
            Ok(detail)
        } else {
            Err(detail)
        }
    });

    // 9. A linear probe on frozen scene embeddings beats 2x chance on the
    //    8-class pitch task and beats the random-init encoder, averaged
    //    over 5 task/probe seeds.
    gate.check(9, "probe sanity on pitch task", || {
        let t0 = Instant::now();
        let random_init = init_params(&model_cfg, 4242).unwrap();
        // 3 training clips per class and a 5-epoch probe keep both models off
        // the task ceiling, so representation quality shows up as a
        // generalization and convergence-speed gap.
        let probe = |params: &ModelParams<f32>, seed: u64| -> Result<f32, String> {
            let task = make_sine_pitch_task(5, 300 + seed).map_err(|e| e.to_string())?;
            let emb = embed_dataset(&task, params, &norm).map_err(|e| e.to_string())?;
            let cfg = ProbeConfig {
                hidden_units: 0,
                epochs: 5,
                lr: 0.01,
                batch_size: 8,
                seed,
            };
            let metrics = run_probe(&emb.train, &emb.test, &task.label_space, &cfg)
                .map_err(|e| e.to_string())?;
            Ok(metrics.accuracy)
        };
        let mut acc_trained = 0.0f32;
        let mut acc_random = 0.0f32;
        for seed in 0..5u64 {
            acc_trained += probe(trained, seed)?;
            acc_random += probe(&random_init, seed)?;
        }
        acc_trained /= 5.0;
        acc_random /= 5.0;
        let secs = t0.elapsed().as_secs_f64();
        let detail = format!(
            "trained {acc_trained:.3} vs random-init {acc_random:.3} over 5 seeds (chance 0.125)"
        );
        if acc_trained < 0.25 {
            return Err(format!("{detail}; need >= 0.25"));
        }
        if acc_trained <= acc_random {
            return Err(format!("{detail}; trained must exceed random-init"));
        }
        if secs >= 600.0 {
            return Err(format!("took {secs:.1}s, budget 600s"));
        }
        Ok(detail)
    });

    // 10. Two identically seeded runs are bit-identical: metrics rows and
    //     every checkpoint file.
    gate.check(10, "pre-training determinism", || {
        if csv_of(&run_a) != csv_of(&run_b) {
            return Err("metrics CSVs differ between identically seeded runs".into());
        }
        let mut names: Vec<String> = (0..train_cfg.epochs)
            .map(|e| format!("ckpt-epoch{e:03}.msmm"))
            .collect();
        names.push("ckpt-final.msmm".into());
        for name in &names {
            let a = std::fs::read(dir_a.path().join(name)).map_err(|e| format!("{name}: {e}"))?;
            let b = std::fs::read(dir_b.path().join(name)).map_err(|e| format!("{name}: {e}"))?;
            if a != b {
                return Err(format!("{name} differs between identically seeded runs"));
            }
        }
        Ok(format!(
            "{} metrics rows and {} checkpoint files bit-identical across two runs",
            run_a.reports.len(),
            names.len()
        ))
    });

    // 11. Scores that need web-scale pre-training corpora and external
    //     benchmark datasets are intentionally out of scope.
    gate.note(
        11,
        "large-scale benchmarks out of scope",
        "multi-domain benchmark accuracies from web-scale pre-training are not reproduced \
         here; this suite verifies the desk-scale system's properties instead",
    );

    assert!(
        gate.failures.is_empty(),
        "acceptance criteria failed:\n{}",
        gate.failures.join("\n")
    );
}
