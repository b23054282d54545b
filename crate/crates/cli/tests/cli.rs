use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use emd_core::{MixtureTeacher, TimePoint};

fn emd(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_emd"));
    c.args(args).env_remove("EMD_OUTPUT_DIR");
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.conf");
    let text = format!(
        "seed = 3\noutput_dir = {}\ndistill.warmup_steps = 20\ndistill.batch_size = 8\n\
         model.generator_hidden = 8\nmodel.score_hidden = 8\neval.samples = 50\n{extra}",
        dir.join("out").display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn distill(dir: &Path, extra: &str) -> Output {
    let cfg = write_config(dir, extra);
    emd(&["distill", "--config", cfg.to_str().unwrap()], &[])
}

#[test]
fn zero_iterations_writes_header_only_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = distill(dir.path(), "distill.iterations = 0\neval.every = 0\n");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(dir.path().join("out/trace.csv")).unwrap();
    assert_eq!(trace, "iteration,loss_g,loss_s,grad_norm_g,recall,mmd\n");
    assert!(dir.path().join("out/generator.ckpt").is_file());
    assert!(dir.path().join("out/config.resolved").is_file());
}

#[test]
fn short_run_then_sample_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let o = distill(dir.path(), "distill.iterations = 40\neval.every = 20\ncheckpoint.every = 20\n");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    assert_eq!(std::fs::read_to_string(out.join("trace.csv")).unwrap().lines().count(), 41);
    assert!(out.join("checkpoints/iter_00000020.ckpt").is_file());
    assert!(out.join("checkpoints/iter_00000040.ckpt").is_file());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval_report.json")).unwrap()).unwrap();
    assert!(report["recall"].as_f64().unwrap() >= 0.0);

    let ckpt = out.join("generator.ckpt");
    let samples = dir.path().join("samples.csv");
    let o = emd(&["sample", "--ckpt", ckpt.to_str().unwrap(), "--n", "25", "--out", samples.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(&samples).unwrap();
    assert_eq!(text.lines().count(), 26);
    assert_eq!(text.lines().next(), Some("x0,x1"));

    let teacher = configs_dir().join("ring8.teacher");
    let eval_dir = dir.path().join("eval");
    let o = emd(
        &["eval", "--ckpt", ckpt.to_str().unwrap(), "--teacher", teacher.to_str().unwrap(), "--n", "100"],
        &[("EMD_OUTPUT_DIR", &eval_dir)],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let written: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(printed, written);
    assert_eq!(printed["n"].as_u64(), Some(100));
}

#[test]
fn zero_samples_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&distill(dir.path(), "distill.iterations = 0\neval.every = 0\n")), 0);
    let out = dir.path().join("s.csv");
    let ckpt = dir.path().join("out/generator.ckpt");
    let o = emd(&["sample", "--ckpt", ckpt.to_str().unwrap(), "--n", "0", "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_to_string(out).unwrap(), "x0,x1\n");
}

#[test]
fn output_dir_environment_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "distill.iterations = 0\neval.every = 0\n");
    let elsewhere = dir.path().join("elsewhere");
    let o = emd(&["distill", "--config", cfg.to_str().unwrap()], &[("EMD_OUTPUT_DIR", &elsewhere)]);
    assert_eq!(code(&o), 0);
    assert!(elsewhere.join("trace.csv").is_file());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.ckpt");
    std::fs::write(&ckpt, b"EMDCKPT1 not really").unwrap();
    let out = dir.path().join("s.csv");
    let o = emd(&["sample", "--ckpt", ckpt.to_str().unwrap(), "--n", "3", "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 1);
    assert!(!out.exists());
}

#[test]
fn config_errors_exit_one_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    for (extra, key) in [
        ("distill.learning_rate = 0.1\n", "distill.learning_rate"),
        ("corrector.step_eps = 2\n", "corrector.step_eps"),
        ("teacher.path = missing.teacher\n", "teacher.path"),
    ] {
        let o = distill(dir.path(), extra);
        assert_eq!(code(&o), 1, "{extra}");
        assert!(String::from_utf8_lossy(&o.stderr).contains(key), "{extra}");
    }
}

#[test]
fn divergence_exits_two_and_keeps_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = distill(dir.path(), "distill.iterations = 50\neval.every = 0\ndistill.grad_norm_limit = 1e-12\n");
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(dir.path().join("out/trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&emd(&["sample", "--n", "3"], &[])), 1);
    assert_eq!(code(&emd(&["frobnicate"], &[])), 1);
    assert_eq!(code(&emd(&["--help"], &[])), 0);
}

#[test]
fn verify_passes_and_detects_injected_fault() {
    let o = emd(&["verify"], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = emd(&["verify", "--fault", "flip-cancellation-sign"], &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stdout).contains("corrector.cancellation"));
    assert_eq!(code(&emd(&["verify", "--fault", "nonsense"], &[])), 1);
}

#[test]
fn shipped_teacher_file_matches_builtin_ring() {
    let text = std::fs::read_to_string(configs_dir().join("ring8.teacher")).unwrap();
    let file = MixtureTeacher::from_text(&text).unwrap();
    let builtin = MixtureTeacher::ring8();
    let tp = TimePoint::from_lambda(0.5, 0.7);
    for x in [[0.3, -1.2], [2.0, 0.0], [-1.4, 1.4]] {
        let a = file.score(&x, &tp).unwrap();
        let b = builtin.score(&x, &tp).unwrap();
        assert!(a.iter().zip(&b).all(|(u, v)| (u - v).abs() < 1e-12));
    }
}

#[test]
fn shipped_configs_parse() {
    for name in ["ring8.conf", "smoke.conf"] {
        emd_cli::RunConfig::load(&configs_dir().join(name)).unwrap();
    }
}
