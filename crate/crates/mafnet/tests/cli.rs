//! End-to-end tests of the `mafnet` binary: exit codes, pinned stdout
//! formats, determinism of file outputs, and the full pipeline
//! synth-data -> synth -> train -> denoise -> eval -> plot.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mafnet::cube::HSICube;
use mafnet::graph::ParamStore;
use mafnet::model::{save_checkpoint, Network, NetworkConfig};
use mafnet::plot::Chart;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mafnet"));
    cmd.env_remove("MAFNET_THREADS");
    cmd
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn mafnet");
    assert!(
        out.status.success(),
        "command failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().expect("spawn mafnet").status.code().expect("exit code")
}

fn make_clean(dir: &Path, seed: u64, bands: usize, side: usize) -> PathBuf {
    let path = dir.join(format!("clean_{seed}_{bands}_{side}.hsd"));
    run_ok(bin().args([
        "--seed",
        &seed.to_string(),
        "synth-data",
        "--out",
        path.to_str().unwrap(),
        "--bands",
        &bands.to_string(),
        "--height",
        &side.to_string(),
        "--width",
        &side.to_string(),
    ]));
    path
}

#[test]
fn synth_data_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = make_clean(dir.path(), 11, 4, 16);
    let b = dir.path().join("b.hsd");
    run_ok(bin().args([
        "--seed", "11", "synth-data", "--out", b.to_str().unwrap(), "--bands", "4",
        "--height", "16", "--width", "16",
    ]));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let c = dir.path().join("c.hsd");
    run_ok(bin().args([
        "--seed", "12", "synth-data", "--out", c.to_str().unwrap(), "--bands", "4",
        "--height", "16", "--width", "16",
    ]));
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn synth_requires_case_flag() {
    let dir = tempfile::tempdir().unwrap();
    let clean = make_clean(dir.path(), 1, 4, 16);
    let out = dir.path().join("noisy.hsd");
    let code = exit_code(bin().args([
        "synth", "--input", clean.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]));
    assert_eq!(code, 2);
}

#[test]
fn synth_is_deterministic_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let clean = make_clean(dir.path(), 2, 4, 24);
    let mut noisy = Vec::new();
    for name in ["n1.hsd", "n2.hsd"] {
        let out = dir.path().join(name);
        run_ok(bin().args([
            "--seed", "33", "synth", "--input", clean.to_str().unwrap(), "--case", "g30",
            "--out", out.to_str().unwrap(),
        ]));
        noisy.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(noisy[0], noisy[1], "same seed must give identical noisy bytes");
    assert_ne!(noisy[0], std::fs::read(&clean).unwrap());

    let report = std::fs::read_to_string(dir.path().join("n1.noise.txt")).unwrap();
    assert!(report.starts_with("# noise report v1"), "report: {report}");
    assert!(report.contains("sigma=30"));
}

#[test]
fn unknown_case_token_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let clean = make_clean(dir.path(), 3, 4, 16);
    let out = dir.path().join("noisy.hsd");
    let code = exit_code(bin().args([
        "synth", "--input", clean.to_str().unwrap(), "--case", "g40",
        "--out", out.to_str().unwrap(),
    ]));
    assert_eq!(code, 2);
}

#[test]
fn eval_identical_cubes_prints_pinned_summary() {
    let dir = tempfile::tempdir().unwrap();
    let clean = make_clean(dir.path(), 4, 5, 16);
    let table = dir.path().join("metrics.txt");
    let out = run_ok(bin().args([
        "eval", "--estimate", clean.to_str().unwrap(), "--reference", clean.to_str().unwrap(),
        "--out", table.to_str().unwrap(),
    ]));
    assert_eq!(
        String::from_utf8_lossy(&out.stdout),
        "PSNR=inf SSIM=1.0000 SAM=0.0000\n"
    );
    // B per-band rows plus one summary row.
    let text = std::fs::read_to_string(&table).unwrap();
    let rows = text.lines().filter(|l| !l.trim_start().starts_with('#')).count();
    assert_eq!(rows, 5 + 1);
}

#[test]
fn denoise_with_zero_residual_checkpoint_preserves_input() {
    let dir = tempfile::tempdir().unwrap();
    // A checkpoint whose reconstruction head is all zeros predicts a zero
    // residual, so denoising must return the input bit for bit even for
    // dimensions that require internal padding.
    let cfg = NetworkConfig {
        bands: 4,
        base_channels: 8,
        coarse_blocks: 1,
        fine_layers: 1,
        reduction: 4,
        seed: 5,
    };
    let (_net, mut store): (Network, ParamStore<f32>) = Network::build(cfg.clone()).unwrap();
    for leaf in ["final.recon.w", "final.recon.b"] {
        let idx = store.idx(leaf).unwrap();
        store.value_mut(idx).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let ckpt = dir.path().join("zero.mafw");
    save_checkpoint(&ckpt, &cfg, &store, &[]).unwrap();

    let noisy = make_clean(dir.path(), 6, 4, 18); // 18 is not a multiple of 4
    let out = dir.path().join("denoised.hsd");
    run_ok(bin().args([
        "denoise", "--checkpoint", ckpt.to_str().unwrap(), "--input", noisy.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
    ]));
    let a = HSICube::load_hsd(&noisy).unwrap();
    let b = HSICube::load_hsd(&out).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn denoise_rejects_single_band_cube() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = NetworkConfig {
        bands: 4,
        base_channels: 8,
        coarse_blocks: 1,
        fine_layers: 1,
        reduction: 4,
        seed: 5,
    };
    let (_net, store): (Network, ParamStore<f32>) = Network::build(cfg.clone()).unwrap();
    let ckpt = dir.path().join("net.mafw");
    save_checkpoint(&ckpt, &cfg, &store, &[]).unwrap();

    let cube = HSICube::new(1, 16, 16, vec![0.5; 16 * 16]).unwrap();
    let input = dir.path().join("one_band.hsd");
    cube.save_hsd(&input).unwrap();
    let out = dir.path().join("x.hsd");
    let code = exit_code(bin().args([
        "denoise", "--checkpoint", ckpt.to_str().unwrap(), "--input", input.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
    ]));
    assert_eq!(code, 4);
}

#[test]
fn missing_input_exits_3_and_corrupt_input_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.txt");
    let code = exit_code(bin().args([
        "eval", "--estimate", "/definitely/not/here.hsd",
        "--reference", "/definitely/not/here.hsd", "--out", out.to_str().unwrap(),
    ]));
    assert_eq!(code, 3);

    let garbage = dir.path().join("garbage.hsd");
    std::fs::write(&garbage, b"this is not a cube").unwrap();
    let code = exit_code(bin().args([
        "eval", "--estimate", garbage.to_str().unwrap(),
        "--reference", garbage.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]));
    assert_eq!(code, 4);
}

#[test]
fn threads_env_is_validated() {
    assert_eq!(exit_code(bin().env("MAFNET_THREADS", "abc").arg("--print-config")), 2);
    assert_eq!(exit_code(bin().env("MAFNET_THREADS", "-1").arg("--print-config")), 2);
    // Zero selects explicit single-threaded deterministic mode.
    assert_eq!(exit_code(bin().env("MAFNET_THREADS", "0").arg("--print-config")), 0);
    assert_eq!(exit_code(bin().env("MAFNET_THREADS", "3").arg("--print-config")), 0);
}

#[test]
fn print_config_echoes_file_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "variant=B\nlr_init=0.0005\nseed=99\n").unwrap();
    let out = run_ok(bin().args([
        "--config", cfg.to_str().unwrap(), "--seed", "123", "--print-config",
    ]));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.contains("variant=B\n"), "{text}");
    assert!(text.contains("lr_init=0.0005\n"), "{text}");
    assert!(text.contains("seed=123\n"), "flag must override file: {text}");

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "no_such_key=1\n").unwrap();
    assert_eq!(
        exit_code(bin().args(["--config", bad.to_str().unwrap(), "--print-config"])),
        2
    );
}

#[test]
fn train_rejects_unknown_stage() {
    let dir = tempfile::tempdir().unwrap();
    let clean = make_clean(dir.path(), 7, 4, 16);
    let code = exit_code(bin().args([
        "train", "--data", clean.to_str().unwrap(),
        "--out-dir", dir.path().join("run").to_str().unwrap(),
        "--stages", "sigma42",
    ]));
    assert_eq!(code, 2);
}

#[test]
fn pipeline_trains_denoises_evaluates_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let clean = make_clean(dir.path(), 8, 6, 24);
    let noisy = dir.path().join("noisy.hsd");
    run_ok(bin().args([
        "--seed", "8", "synth", "--input", clean.to_str().unwrap(), "--case", "g30",
        "--out", noisy.to_str().unwrap(),
    ]));

    let run_dir = dir.path().join("run");
    run_ok(bin().args([
        "--seed", "8", "train", "--data", clean.to_str().unwrap(),
        "--out-dir", run_dir.to_str().unwrap(),
        "--stages", "sigma30,blind",
        "--epochs", "1", "--batch-size", "4",
        "--patch-bands", "3", "--patch-height", "8", "--patch-width", "8",
        "--patches-per-epoch", "8",
        "--base-channels", "8", "--coarse-blocks", "1", "--fine-layers", "1",
    ]));
    for name in ["stage_sigma30.mafw", "stage_blind.mafw", "final.mafw", "train.log"] {
        assert!(run_dir.join(name).exists(), "missing {name}");
    }
    let log = std::fs::read_to_string(run_dir.join("train.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2, "one line per stage epoch: {log}");
    assert!(lines[0].starts_with("sigma30 0 "));
    assert!(lines[1].starts_with("blind 0 "));
    for line in &lines {
        assert_eq!(line.split_whitespace().count(), 6, "bad log line: {line}");
    }

    let denoised = dir.path().join("denoised.hsd");
    run_ok(bin().args([
        "denoise", "--checkpoint", run_dir.join("final.mafw").to_str().unwrap(),
        "--input", noisy.to_str().unwrap(), "--out", denoised.to_str().unwrap(),
    ]));

    let table = dir.path().join("metrics.txt");
    let out = run_ok(bin().args([
        "eval", "--estimate", denoised.to_str().unwrap(),
        "--reference", clean.to_str().unwrap(), "--out", table.to_str().unwrap(),
    ]));
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(stdout.starts_with("PSNR="), "{stdout}");
    assert!(stdout.contains(" SSIM=") && stdout.contains(" SAM="), "{stdout}");

    let charts = dir.path().join("charts");
    run_ok(bin().args([
        "plot", "--metrics", table.to_str().unwrap(), "--out-dir", charts.to_str().unwrap(),
    ]));
    let loss_svg = charts.join("loss.svg");
    run_ok(bin().args([
        "plot", "--log", run_dir.join("train.log").to_str().unwrap(),
        "--out", loss_svg.to_str().unwrap(),
    ]));
    for name in ["metrics_psnr_per_band.svg", "metrics_ssim_per_band.svg", "loss.svg"] {
        let svg = std::fs::read_to_string(charts.join(name)).unwrap();
        let chart = Chart::from_svg(&svg).unwrap();
        assert!(!chart.series.is_empty(), "{name} has no series");
    }
}

#[test]
fn train_run_is_reproducible_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let clean = make_clean(dir.path(), 9, 4, 20);
    let mut checkpoints = Vec::new();
    for sub in ["a", "b"] {
        let run_dir = dir.path().join(sub);
        run_ok(bin().args([
            "--seed", "77", "train", "--data", clean.to_str().unwrap(),
            "--out-dir", run_dir.to_str().unwrap(),
            "--stages", "sigma30", "--epochs", "1", "--batch-size", "2",
            "--patch-bands", "3", "--patch-height", "8", "--patch-width", "8",
            "--patches-per-epoch", "4",
            "--base-channels", "8", "--coarse-blocks", "1", "--fine-layers", "1",
        ]));
        checkpoints.push(std::fs::read(run_dir.join("final.mafw")).unwrap());
    }
    assert_eq!(checkpoints[0], checkpoints[1], "same seed must give identical checkpoints");
}

#[test]
fn plot_without_inputs_exits_2() {
    assert_eq!(exit_code(bin().arg("plot")), 2);
}
