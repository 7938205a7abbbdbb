//! End-to-end exercise of the `msm` binary: prep -> pretrain -> extract ->
//! probe -> figures, plus determinism, replayability, and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use msm_core::features::load_embeddings;
use msm_core::frontend::{write_wav, PcmSignal, SAMPLE_RATE};

fn msm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_msm"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn msm");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_tone(path: &Path, freq: f32, seconds: f32) {
    let n = (seconds * SAMPLE_RATE as f32) as usize;
    let samples: Vec<f32> = (0..n)
        .map(|i| {
            let t = i as f32 / SAMPLE_RATE as f32;
            0.4 * (std::f32::consts::TAU * freq * t).sin()
                + 0.1 * (std::f32::consts::TAU * 2.0 * freq * t).sin()
        })
        .collect();
    write_wav(path, &PcmSignal::new(samples, SAMPLE_RATE).unwrap()).unwrap();
}

struct Workspace {
    root: tempfile::TempDir,
    data: PathBuf,
}

fn make_workspace() -> Workspace {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    std::fs::create_dir(&data).unwrap();
    for i in 0..10 {
        write_tone(&data.join(format!("tone{i:02}.wav")), 220.0 + 60.0 * i as f32, 1.0);
    }
    Workspace { root, data }
}

fn prep_and_pretrain(ws: &Workspace, run: &str, extra: &[&str]) -> (PathBuf, PathBuf) {
    let prep = ws.root.path().join("prep");
    run_ok(msm()
        .arg("prep")
        .args(["--data-dir", ws.data.to_str().unwrap()])
        .args(["--out-dir", prep.to_str().unwrap()]));
    let out = ws.root.path().join(run);
    let mut cmd = msm();
    cmd.arg("pretrain")
        .args(["--data-dir", prep.to_str().unwrap()])
        .args(["--out-dir", out.to_str().unwrap()])
        .args(["--set", "epochs=2", "--set", "warmup_epochs=1", "--set", "batch_size=4"]);
    cmd.args(extra);
    run_ok(&mut cmd);
    (prep, out)
}

#[test]
fn pipeline_runs_end_to_end_and_is_deterministic() {
    let ws = make_workspace();
    let (prep, run1) = prep_and_pretrain(&ws, "run1", &[]);

    assert!(prep.join("corpus.msmm").is_file());
    assert!(prep.join("manifest.txt").is_file());
    assert!(prep.join("effective-config.txt").is_file());

    // 10 one-second clips hold one 96-frame window each: 2 steps/epoch at
    // batch 4, 2 epochs, so 4 CSV rows plus the header.
    let csv1 = std::fs::read_to_string(run1.join("metrics.csv")).unwrap();
    assert_eq!(csv1.lines().count(), 5);
    assert_eq!(csv1.lines().next().unwrap(), "step,epoch,loss,lr");
    assert!(run1.join("ckpt-epoch000.msmm").is_file());
    assert!(run1.join("ckpt-epoch001.msmm").is_file());
    assert!(run1.join("ckpt-final.msmm").is_file());
    assert!(run1.join("norm.msmm").is_file());

    // A second run from the same seed is bit-identical.
    let (_, run2) = prep_and_pretrain(&ws, "run2", &[]);
    let csv2 = std::fs::read_to_string(run2.join("metrics.csv")).unwrap();
    assert_eq!(csv1, csv2);
    let ckpt1 = std::fs::read(run1.join("ckpt-final.msmm")).unwrap();
    let ckpt2 = std::fs::read(run2.join("ckpt-final.msmm")).unwrap();
    assert_eq!(ckpt1, ckpt2);

    let ckpt = run1.join("ckpt-final.msmm");
    let norm = run1.join("norm.msmm");

    // extract: 1.0 s = 100 frames = ceil(100/16) = 7 rows of 5*64 values.
    let ex1 = ws.root.path().join("extract1");
    run_ok(msm()
        .arg("extract")
        .args(["--checkpoint", ckpt.to_str().unwrap()])
        .args(["--norm", norm.to_str().unwrap()])
        .args(["--out-dir", ex1.to_str().unwrap()])
        .arg(ws.data.join("tone00.wav")));
    let emb = load_embeddings(&ex1.join("tone00.msmm")).unwrap();
    assert_eq!(emb.rows(), 7);
    assert_eq!(emb.width(), 5 * 64);
    assert_eq!(emb.frame_hop_ms, 160);
    assert!(ex1.join("tone00.csv").is_file());

    // Worker count must not change the embeddings.
    let ex2 = ws.root.path().join("extract2");
    run_ok(msm()
        .arg("extract")
        .args(["--checkpoint", ckpt.to_str().unwrap()])
        .args(["--norm", norm.to_str().unwrap()])
        .args(["--out-dir", ex2.to_str().unwrap()])
        .args(["--threads", "3"])
        .args([
            ws.data.join("tone00.wav"),
            ws.data.join("tone01.wav"),
            ws.data.join("tone02.wav"),
        ]));
    assert_eq!(
        std::fs::read(ex1.join("tone00.msmm")).unwrap(),
        std::fs::read(ex2.join("tone00.msmm")).unwrap()
    );

    // viz-recon emits a triptych; replaying its echoed config reproduces it.
    let viz1 = ws.root.path().join("viz1");
    run_ok(msm()
        .arg("viz-recon")
        .args(["--checkpoint", ckpt.to_str().unwrap()])
        .args(["--norm", norm.to_str().unwrap()])
        .args(["--out-dir", viz1.to_str().unwrap()])
        .args(["--wav", ws.data.join("tone03.wav").to_str().unwrap()])
        .args(["--ratio", "0.8"]));
    let ppm = std::fs::read(viz1.join("recon.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n"));
    assert!(viz1.join("recon.meta").is_file());

    let viz_replay = ws.root.path().join("viz-replay");
    run_ok(msm()
        .arg("viz-recon")
        .args(["--config", viz1.join("effective-config.txt").to_str().unwrap()])
        .args(["--out-dir", viz_replay.to_str().unwrap()]));
    assert_eq!(ppm, std::fs::read(viz_replay.join("recon.ppm")).unwrap());

    // Patterned mask.
    let viz2 = ws.root.path().join("viz2");
    run_ok(msm()
        .arg("viz-recon")
        .args(["--checkpoint", ckpt.to_str().unwrap()])
        .args(["--norm", norm.to_str().unwrap()])
        .args(["--out-dir", viz2.to_str().unwrap()])
        .args(["--wav", ws.data.join("tone03.wav").to_str().unwrap()])
        .args(["--pattern", "chessboard"]));
    assert!(viz2.join("recon.ppm").is_file());

    // viz-sweep: 8 images and a CSV with 8 data rows.
    let sweep = ws.root.path().join("sweep");
    run_ok(msm()
        .arg("viz-sweep")
        .args(["--checkpoint", ckpt.to_str().unwrap()])
        .args(["--norm", norm.to_str().unwrap()])
        .args(["--out-dir", sweep.to_str().unwrap()])
        .args(["--wav", ws.data.join("tone04.wav").to_str().unwrap()]));
    let sweep_csv = std::fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    assert_eq!(sweep_csv.lines().count(), 9);
    for pct in ["040", "050", "060", "075", "090", "095", "098", "099"] {
        assert!(sweep.join(format!("mask-{pct}.ppm")).is_file(), "mask-{pct}.ppm");
    }

    // viz-attn with explicit reference patches on the 5x6 desk grid.
    let attn = ws.root.path().join("attn");
    run_ok(msm()
        .arg("viz-attn")
        .args(["--checkpoint", ckpt.to_str().unwrap()])
        .args(["--norm", norm.to_str().unwrap()])
        .args(["--out-dir", attn.to_str().unwrap()])
        .args(["--wav", ws.data.join("tone05.wav").to_str().unwrap()])
        .args(["--r", "0,1", "--r", "4,5"]));
    assert!(attn.join("attn-0-1.ppm").is_file());
    assert!(attn.join("attn-4-5.ppm").is_file());
    assert!(attn.join("attn-4-5.meta").is_file());
}

#[test]
fn probe_subcommand_reports_metrics_json() {
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().join("probe");
    let res = run_ok(msm()
        .arg("probe")
        .arg("--baseline")
        .args(["--task", "pitch"])
        .args(["--n-per-class", "6"])
        .args(["--probe-hidden", "0"])
        .args(["--probe-epochs", "40"])
        .args(["--probe-lr", "0.01"])
        .args(["--out-dir", dir.to_str().unwrap()]));
    let stdout = String::from_utf8_lossy(&res.stdout).to_string();
    assert!(stdout.contains("accuracy"), "{stdout}");
    let metrics = std::fs::read_to_string(dir.join("sine-pitch-metrics.json")).unwrap();
    assert!(metrics.contains("\"accuracy\""));
    assert!(dir.join("sine-pitch-manifest.jsonl").is_file());
    assert!(dir.join("sine-pitch-embeddings.msmm").is_file());
    assert!(dir.join("sine-pitch-labels.json").is_file());
}

#[test]
fn selftest_prints_grad_check_error() {
    let res = run_ok(msm().arg("selftest"));
    let stdout = String::from_utf8_lossy(&res.stdout).to_string();
    assert!(stdout.contains("max grad-check rel err"), "{stdout}");
    assert!(stdout.contains("passed"), "{stdout}");
}

#[test]
fn msm_seed_env_overrides_config_seed() {
    let ws = make_workspace();
    let prep = ws.root.path().join("prep");
    run_ok(msm()
        .arg("prep")
        .args(["--data-dir", ws.data.to_str().unwrap()])
        .args(["--out-dir", prep.to_str().unwrap()]));
    let out = ws.root.path().join("seeded");
    run_ok(msm()
        .arg("pretrain")
        .env("MSM_SEED", "12345")
        .args(["--data-dir", prep.to_str().unwrap()])
        .args(["--out-dir", out.to_str().unwrap()])
        .args(["--seed", "7"])
        .args(["--set", "epochs=2", "--set", "warmup_epochs=1", "--set", "batch_size=4"]));
    let echo = std::fs::read_to_string(out.join("effective-config.txt")).unwrap();
    assert!(echo.contains("seed = 12345"), "{echo}");
}

#[test]
fn exit_codes_classify_failures() {
    // Unknown config key: 2.
    let out = msm()
        .arg("pretrain")
        .args(["--set", "bogus_key=1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    // Missing input file: 3.
    let tmp = tempfile::tempdir().unwrap();
    let out = msm()
        .arg("prep")
        .args(["--data-dir", tmp.path().join("nope").to_str().unwrap()])
        .args(["--out-dir", tmp.path().join("o").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    // Invalid hyperparameter: 2.
    let out = msm()
        .arg("pretrain")
        .args(["--set", "mask_ratio=1.5"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_checkpoint_mismatch_is_a_config_error() {
    let ws = make_workspace();
    let (_, run) = prep_and_pretrain(&ws, "run-mismatch", &[]);
    let out = msm()
        .arg("extract")
        .args(["--checkpoint", run.join("ckpt-final.msmm").to_str().unwrap()])
        .args(["--norm", run.join("norm.msmm").to_str().unwrap()])
        .args(["--out-dir", ws.root.path().join("x").to_str().unwrap()])
        .args(["--set", "enc_dim=128"])
        .arg(ws.data.join("tone00.wav"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("enc_dim"), "{stderr}");
}
