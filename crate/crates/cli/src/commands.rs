//! Subcommand implementations. Each one reads everything it needs from the
//! merged [`RunConfig`], so a run is replayable from the echoed config file.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use msm_core::downstream::{
    embed_dataset, embed_dataset_mel_baseline, make_polyphony_task, make_sine_pitch_task,
    run_probe, save_embedded_task, write_task_manifest, EmbeddedTask, TaskDataset,
};
use msm_core::error::{Error, Result};
use msm_core::features::{
    save_embeddings, segment_and_encode_spec, write_embeddings_csv, EmbeddingMatrix,
};
use msm_core::frontend::{
    compute_norm_stats, log_mel_spectrogram, read_wav, NormStats, Spectrogram,
};
use msm_core::model::{init_params, DecoderConfig, EncoderConfig, ModelConfig, ModelParams};
use msm_core::nn::Tensor;
use msm_core::patch::{
    grid_dims, patchify, random_mask_plan, patterned_mask_plan, MaskPattern, MaskPlan,
    PatchConfig,
};
use msm_core::pretrain::{grad_check, load_checkpoint, train};
use msm_core::rng::rng_from_seed;
use msm_core::tensorfile::TensorFile;
use msm_core::viz::{
    mask_ratio_sweep, render_attention, render_reconstruction, render_reconstruction_raw,
    SWEEP_RATIOS,
};
use rand::Rng;

use crate::config::RunConfig;

const NORM_TENSOR: &str = "norm";
const SPEC_PREFIX: &str = "spec.";

fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("'{key}' is required for this command")))
}

fn load_norm_file(path: &Path) -> Result<NormStats> {
    let file = TensorFile::read_from(path)?;
    let t = file.get_expected(NORM_TENSOR, &[2])?;
    Ok(NormStats { mean: t.data[0], std: t.data[1] })
}

fn load_model(cfg: &RunConfig) -> Result<ModelParams<f32>> {
    let path = require(&cfg.checkpoint, "checkpoint")?;
    let (params, _) = load_checkpoint(path)?;
    let conflicts = cfg.model_keys_conflicting_with(&params.cfg);
    if !conflicts.is_empty() {
        return Err(Error::Config(format!(
            "config disagrees with checkpoint {}: {}",
            path.display(),
            conflicts.join("; ")
        )));
    }
    Ok(params)
}

fn read_signal(path: &Path) -> Result<msm_core::frontend::PcmSignal> {
    read_wav(&std::fs::read(path)?)
}

/// Frontend + dataset normalization for one clip.
fn normalized_spectrogram(cfg: &RunConfig, norm: &NormStats, wav: &Path) -> Result<Spectrogram> {
    let signal = read_signal(wav)?;
    let spec = log_mel_spectrogram(&signal, &cfg.frontend)?;
    Ok(norm.apply(&spec))
}

fn one_wav<'a>(cfg: &'a RunConfig) -> Result<&'a Path> {
    match cfg.wav.as_slice() {
        [path] => Ok(path),
        [] => Err(Error::Config("'wav' is required for this command".into())),
        more => Err(Error::Config(format!(
            "expected exactly one wav, got {}",
            more.len()
        ))),
    }
}

// ---------------------------------------------------------------------------
// prep
// ---------------------------------------------------------------------------

/// Cache log-mel spectrograms plus pooled NormStats for a directory of WAVs.
pub fn prep(cfg: &RunConfig) -> Result<()> {
    let data_dir = require(&cfg.data_dir, "data_dir")?;
    let mut wavs: Vec<PathBuf> = std::fs::read_dir(data_dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("wav"))
                .unwrap_or(false)
        })
        .collect();
    wavs.sort();
    if wavs.is_empty() {
        return Err(Error::Config(format!(
            "no .wav files in {}",
            data_dir.display()
        )));
    }

    let mut specs = Vec::with_capacity(wavs.len());
    for path in &wavs {
        let signal = read_signal(path)?;
        specs.push(log_mel_spectrogram(&signal, &cfg.frontend)?);
    }
    let stats = compute_norm_stats(&specs)?;

    let out = cfg.prepare_out_dir()?;
    let mut file = TensorFile::new();
    file.push(NORM_TENSOR, Tensor::from_vec(vec![stats.mean, stats.std], &[2])?)?;
    let mut manifest = String::new();
    for (i, (path, spec)) in wavs.iter().zip(&specs).enumerate() {
        let name = format!("{SPEC_PREFIX}{i:05}");
        manifest.push_str(&format!(
            "{name}\t{}\t{}x{}\n",
            path.display(),
            spec.n_mels,
            spec.n_frames
        ));
        file.push(&name, Tensor::from_vec(spec.data.clone(), &[spec.n_mels, spec.n_frames])?)?;
    }
    file.write_to(&out.join("corpus.msmm"))?;
    std::fs::write(out.join("manifest.txt"), manifest)?;
    println!(
        "prep: cached {} spectrograms to {} (mean {:.4}, std {:.4})",
        specs.len(),
        out.join("corpus.msmm").display(),
        stats.mean,
        stats.std
    );
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<(NormStats, Vec<Spectrogram>)> {
    let path = dir.join("corpus.msmm");
    let file = TensorFile::read_from(&path)?;
    let t = file.get_expected(NORM_TENSOR, &[2])?;
    let stats = NormStats { mean: t.data[0], std: t.data[1] };
    let mut specs = Vec::new();
    for (name, tensor) in file.entries() {
        if !name.starts_with(SPEC_PREFIX) {
            continue;
        }
        if tensor.shape.len() != 2 {
            return Err(Error::Format(format!(
                "cached spectrogram '{name}' has rank {}",
                tensor.shape.len()
            )));
        }
        specs.push(Spectrogram::new(
            tensor.data.clone(),
            tensor.shape[0],
            tensor.shape[1],
        )?);
    }
    if specs.is_empty() {
        return Err(Error::Format(format!(
            "{} holds no cached spectrograms",
            path.display()
        )));
    }
    Ok((stats, specs))
}

/// Consecutive full windows of `n_frames` columns; the remainder is dropped.
fn fixed_windows(spec: &Spectrogram, n_frames: usize) -> Vec<Spectrogram> {
    let count = spec.n_frames / n_frames;
    (0..count)
        .map(|c| {
            let mut data = vec![0f32; spec.n_mels * n_frames];
            for m in 0..spec.n_mels {
                let src = m * spec.n_frames + c * n_frames;
                data[m * n_frames..(m + 1) * n_frames]
                    .copy_from_slice(&spec.data[src..src + n_frames]);
            }
            Spectrogram::new(data, spec.n_mels, n_frames).expect("window of a finite spec")
        })
        .collect()
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

/// Run the pre-training loop over a prepped corpus, checkpointing per epoch.
pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    let data_dir = require(&cfg.data_dir, "data_dir")?;
    let (stats, raw) = load_corpus(data_dir)?;
    let mut corpus = Vec::new();
    for spec in &raw {
        corpus.extend(fixed_windows(&stats.apply(spec), cfg.model.n_frames));
    }
    if corpus.is_empty() {
        return Err(Error::Config(format!(
            "no clip provides a full {}-frame window",
            cfg.model.n_frames
        )));
    }

    let out = cfg.prepare_out_dir()?;
    let mut norm_file = TensorFile::new();
    norm_file.push(NORM_TENSOR, Tensor::from_vec(vec![stats.mean, stats.std], &[2])?)?;
    norm_file.write_to(&out.join("norm.msmm"))?;

    let steps_per_epoch = corpus.len() / cfg.train.batch_size;
    println!(
        "pretrain: {} windows, {} steps/epoch, {} epochs",
        corpus.len(),
        steps_per_epoch,
        cfg.train.epochs
    );
    let mut csv = String::from("step,epoch,loss,lr\n");
    let run = train(&corpus, &cfg.model, &cfg.train, Some(&out), |r| {
        csv.push_str(&format!("{},{},{},{}\n", r.step, r.epoch, r.masked_mse, r.lr));
        if steps_per_epoch > 0 && (r.step + 1) % steps_per_epoch as u64 == 0 {
            println!(
                "epoch {:>3}  step {:>6}  masked mse {:.5}  lr {:.3e}",
                r.epoch, r.step, r.masked_mse, r.lr
            );
        }
    })?;
    std::fs::write(out.join("metrics.csv"), csv)?;
    let last = run.reports.last().expect("at least one training step");
    println!(
        "pretrain: done, final masked mse {:.5}; checkpoints in {}",
        last.masked_mse,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// extract
// ---------------------------------------------------------------------------

/// Embed a list of WAVs with a trained checkpoint; one tensor file and one
/// CSV per input.
pub fn extract(cfg: &RunConfig) -> Result<()> {
    let params = load_model(cfg)?;
    let stats = load_norm_file(require(&cfg.norm, "norm")?)?;
    if cfg.wav.is_empty() {
        return Err(Error::Config("'wav' must list at least one file".into()));
    }
    let out = cfg.prepare_out_dir()?;

    let n = cfg.wav.len();
    let workers = cfg.threads.min(n).max(1);
    let mut results: Vec<Option<Result<EmbeddingMatrix>>> = (0..n).map(|_| None).collect();
    let embed_one = |path: &Path| -> Result<EmbeddingMatrix> {
        let spec = normalized_spectrogram(cfg, &stats, path)?;
        segment_and_encode_spec(&spec, &params)
    };
    if workers == 1 {
        for (i, path) in cfg.wav.iter().enumerate() {
            results[i] = Some(embed_one(path));
        }
    } else {
        // Contiguous index ranges per worker; each slot is written once, so
        // the outcome is identical to the sequential pass.
        let chunk = n.div_ceil(workers);
        std::thread::scope(|s| {
            let mut handles = Vec::new();
            for w in 0..workers {
                let lo = w * chunk;
                let hi = ((w + 1) * chunk).min(n);
                let wavs = &cfg.wav;
                let embed_one = &embed_one;
                handles.push(s.spawn(move || {
                    (lo..hi)
                        .map(|i| (i, embed_one(&wavs[i])))
                        .collect::<Vec<_>>()
                }));
            }
            for h in handles {
                for (i, r) in h.join().expect("extract worker panicked") {
                    results[i] = Some(r);
                }
            }
        });
    }

    for (path, result) in cfg.wav.iter().zip(results) {
        let emb = result.expect("every slot filled")?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Config(format!("unusable wav name {}", path.display())))?;
        save_embeddings(&out.join(format!("{stem}.msmm")), &emb)?;
        let csv = File::create(out.join(format!("{stem}.csv")))?;
        write_embeddings_csv(BufWriter::new(csv), &emb)?;
        println!(
            "extract: {} -> {} rows x {} ({} ms hop)",
            path.display(),
            emb.rows(),
            emb.width(),
            emb.frame_hop_ms
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

fn build_task(cfg: &RunConfig) -> Result<TaskDataset> {
    match cfg.task.as_str() {
        "pitch" => make_sine_pitch_task(cfg.n_per_class, cfg.train.seed),
        "polyphony" => make_polyphony_task(cfg.n_per_class, cfg.train.seed),
        other => Err(Error::Config(format!("unknown task '{other}'"))),
    }
}

/// Generate a synthetic task, embed it, train the shallow probe, and write
/// metrics plus cached embeddings.
pub fn probe(cfg: &RunConfig) -> Result<()> {
    let task = build_task(cfg)?;
    let embedded: EmbeddedTask = if cfg.baseline {
        embed_dataset_mel_baseline(&task)?
    } else {
        let params = load_model(cfg)?;
        let stats = load_norm_file(require(&cfg.norm, "norm")?)?;
        embed_dataset(&task, &params, &stats)?
    };
    let metrics = run_probe(&embedded.train, &embedded.test, &task.label_space, &cfg.probe)?;

    let out = cfg.prepare_out_dir()?;
    let manifest = File::create(out.join(format!("{}-manifest.jsonl", task.name)))?;
    write_task_manifest(BufWriter::new(manifest), &task)?;
    save_embedded_task(&out, &task.name, &embedded, &task.label_space)?;
    std::fs::write(out.join(format!("{}-metrics.json", task.name)), metrics.to_json()?)?;

    let chance = 1.0 / task.label_space.len() as f32;
    println!(
        "probe: task {} ({}) accuracy {:.4} on {} test items ({} classes, chance {:.4})",
        task.name,
        if cfg.baseline { "mel baseline" } else { "checkpoint embeddings" },
        metrics.accuracy,
        embedded.test.len(),
        task.label_space.len(),
        chance
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// viz
// ---------------------------------------------------------------------------

fn viz_inputs(cfg: &RunConfig) -> Result<(ModelParams<f32>, Spectrogram)> {
    let params = load_model(cfg)?;
    let stats = load_norm_file(require(&cfg.norm, "norm")?)?;
    let spec = normalized_spectrogram(cfg, &stats, one_wav(cfg)?)?;
    let spec = spec.crop_frames(params.cfg.n_frames)?;
    Ok((params, spec))
}

fn viz_plan(cfg: &RunConfig, params: &ModelParams<f32>) -> Result<MaskPlan> {
    let grid = params.cfg.grid()?;
    if cfg.viz_pattern == "random" {
        random_mask_plan(grid.n(), cfg.viz_ratio, cfg.viz_seed)
    } else {
        patterned_mask_plan(&grid, MaskPattern::parse(&cfg.viz_pattern)?)
    }
}

/// Render one masked reconstruction triptych.
pub fn viz_recon(cfg: &RunConfig) -> Result<()> {
    let (params, spec) = viz_inputs(cfg)?;
    let plan = viz_plan(cfg, &params)?;
    let triptych = if cfg.viz_raw {
        render_reconstruction_raw(&spec, &params, &plan, cfg.viz_show_visible)?
    } else {
        render_reconstruction(&spec, &params, &plan, cfg.viz_show_visible)?
    };
    let out = cfg.prepare_out_dir()?;
    let base = out.join("recon");
    triptych.write(&base)?;
    println!(
        "viz-recon: {} visible of {} patches -> {}",
        plan.keep(),
        plan.n(),
        base.with_extension("ppm").display()
    );
    Ok(())
}

/// Sweep the default mask ratios and write per-ratio triptychs plus a CSV.
pub fn viz_sweep(cfg: &RunConfig) -> Result<()> {
    let (params, spec) = viz_inputs(cfg)?;
    let report = mask_ratio_sweep(&spec, &params, &SWEEP_RATIOS, cfg.viz_seed)?;
    let out = cfg.prepare_out_dir()?;
    report.write_images(&out)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    std::fs::write(out.join("sweep.csv"), csv)?;
    for e in &report.entries {
        println!("viz-sweep: ratio {:.2}  mse {:.6}", e.ratio, e.mse);
    }
    println!("viz-sweep: images and sweep.csv in {}", out.display());
    Ok(())
}

/// Render last-layer attention heatmaps for the configured reference points.
pub fn viz_attn(cfg: &RunConfig) -> Result<()> {
    let (params, spec) = viz_inputs(cfg)?;
    let images = render_attention(&spec, &params, &cfg.refs)?;
    let out = cfg.prepare_out_dir()?;
    for img in &images {
        let base = out.join(format!("attn-{}-{}", img.ref_f, img.ref_t));
        img.write(&base)?;
        println!(
            "viz-attn: reference ({}, {}) -> {}",
            img.ref_f,
            img.ref_t,
            base.with_extension("ppm").display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// selftest
// ---------------------------------------------------------------------------

/// Patch-grid conformance over the documented layouts plus a finite
/// difference check of the full backward pass.
pub fn selftest() -> Result<()> {
    // (frames, p_f, p_t, n_f, n_t, n) for 80-mel inputs.
    let layouts: [(usize, usize, usize, usize, usize, usize); 9] = [
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
    for (frames, p_f, p_t, n_f, n_t, n) in layouts {
        let grid = grid_dims(80, frames, &PatchConfig { p_f, p_t })?;
        if grid.n_f != n_f || grid.n_t != n_t || grid.n() != n {
            return Err(Error::Shape(format!(
                "80x{frames} at {p_f}x{p_t}: got {}x{} ({} patches), expected {n_f}x{n_t} ({n})",
                grid.n_f,
                grid.n_t,
                grid.n()
            )));
        }
    }
    println!("selftest: patch-grid conformance ok over {} layouts", layouts.len());

    let cfg = ModelConfig {
        enc: EncoderConfig { dim: 16, depth: 1, heads: 2, mlp_ratio: 2 },
        dec: DecoderConfig { dim: 8, depth: 1, heads: 2, mlp_ratio: 2 },
        patch: PatchConfig { p_f: 8, p_t: 8 },
        n_mels: 16,
        n_frames: 32,
    };
    let params = init_params(&cfg, 1)?.cast::<f64>();
    let mut rng = rng_from_seed(2);
    let spec = Spectrogram::new(
        (0..cfg.n_mels * cfg.n_frames)
            .map(|_| rng.random::<f32>() * 2.0 - 1.0)
            .collect(),
        cfg.n_mels,
        cfg.n_frames,
    )?;
    let (seq, grid) = patchify(&spec, &cfg.patch)?;
    let tokens: Vec<f64> = seq.tokens.iter().map(|&v| v as f64).collect();
    let plan = random_mask_plan(grid.n(), 0.5, 3)?;
    let err = grad_check(&params, &tokens, &plan, false, 200, 4, |_| true);
    println!("selftest: max grad-check rel err {err:.3e} over 200 sampled parameters");
    if !(err < 1e-5) {
        return Err(Error::Numeric(format!(
            "gradient check failed: rel err {err:.3e} >= 1e-5"
        )));
    }
    println!("selftest: passed");
    Ok(())
}
