use std::fs;
use std::path::{Path, PathBuf};

use emd_core::rng::normal_vec;
use emd_core::schedule::sample_time;
use emd_core::student::dsm_step;
use emd_core::tensornet::AdamConfig;
use emd_core::{
    train, Checkpoint, EvalReport, Evaluator, MixtureTeacher, NeuralScore, Purpose, ScoreModel,
    StreamSeed,
};

use crate::config::{load_teacher_file, RunConfig, OUTPUT_DIR_ENV};
use crate::error::{CliError, CliResult};

pub const TRACE_FILE: &str = "trace.csv";
pub const CORRECTOR_FILE: &str = "corrector.csv";
pub const REPORT_FILE: &str = "eval_report.json";
pub const CHECKPOINT_FILE: &str = "generator.ckpt";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";

#[derive(Debug, Clone, PartialEq)]
pub struct DistillSummary {
    pub output_dir: PathBuf,
    pub iterations: u64,
    pub report: Option<EvalReport>,
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))
}

/// Score-matching fit of a neural score to teacher samples.
fn neural_teacher(rc: &RunConfig, teacher: &MixtureTeacher) -> CliResult<NeuralScore> {
    let d = &rc.distill;
    let seed = StreamSeed(d.seed);
    let data = teacher.sample(&mut seed.stream(Purpose::TeacherSamples, 1, 0), 20_000);
    let mut model = NeuralScore::init(
        teacher.dim(),
        &d.model.score_hidden,
        d.model.activation,
        d.model.features,
        &mut seed.stream(Purpose::Init, 1, 0),
    )?;
    let mut opt = emd_core::AdamState::new(AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }, model.net.n_params());
    let b = d.batch_size;
    for step in 0..rc.teacher_neural_steps {
        let mut r = seed.stream(Purpose::TeacherSamples, 2, step as u64);
        let x0: Vec<Vec<f64>> = (0..b).map(|_| data[rand::Rng::gen_range(&mut r, 0..data.len())].clone()).collect();
        let tps: Vec<_> = (0..b).map(|_| sample_time(&d.schedule, &mut r)).collect();
        let eps: Vec<_> = (0..b).map(|_| normal_vec(&mut r, teacher.dim())).collect();
        dsm_step(&mut model, &x0, &tps, &eps, &mut opt)?;
    }
    Ok(model)
}

/// Trains from a config file and writes the run artifacts. On divergence the
/// partial trace is still written before the error is returned.
pub fn cmd_distill(config_path: &Path) -> CliResult<DistillSummary> {
    let rc = RunConfig::load(config_path)?;
    let teacher = rc.load_teacher()?;
    let out = rc.resolved_output_dir();
    fs::create_dir_all(&out)
        .map_err(|e| CliError::Validation(format!("cannot create {}: {e}", out.display())))?;
    write(&out.join(RESOLVED_CONFIG_FILE), &rc.to_text())?;

    let d = &rc.distill;
    let (mut g, mut s) = d.init_models(teacher.dim())?;
    let neural = if rc.teacher_neural_steps > 0 { Some(neural_teacher(&rc, &teacher)?) } else { None };
    let score_source: &dyn ScoreModel = match &neural {
        Some(n) => n,
        None => &teacher,
    };
    let evaluator = (d.eval_every > 0).then(|| Evaluator::new(&teacher, d.model.latent_dim, d.eval_samples, d.seed));

    let ckpt_dir = out.join("checkpoints");
    let every = rc.checkpoint_every;
    let mut hook = |it: u64, g: &emd_core::Generator, s: &NeuralScore| -> emd_core::Result<()> {
        if every > 0 && it % every == 0 {
            fs::create_dir_all(&ckpt_dir)?;
            Checkpoint { iteration: it, generator: g.clone(), student: Some(s.clone()) }
                .save(&ckpt_dir.join(format!("iter_{it:08}.ckpt")))?;
        }
        Ok(())
    };
    let outcome = train(d, score_source, evaluator.as_ref(), &mut g, &mut s, Some(&mut hook))?;

    write(&out.join(TRACE_FILE), &outcome.trace.to_csv())?;
    write(&out.join(CORRECTOR_FILE), &outcome.corrector.to_csv())?;
    let iterations = outcome.trace.records.len() as u64;
    Checkpoint { iteration: iterations, generator: g, student: Some(s) }.save(&out.join(CHECKPOINT_FILE))?;
    if let Some(r) = &outcome.final_report {
        write(&out.join(REPORT_FILE), &r.to_json())?;
    }
    if let Some(f) = outcome.trace.failure {
        return Err(CliError::Numerical(format!("training stopped: {f}")));
    }
    Ok(DistillSummary { output_dir: out, iterations, report: outcome.final_report })
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Generator samples for latents drawn from the `Sample` streams.
pub fn generate_samples(ckpt: &Checkpoint, n: usize, seed: u64) -> CliResult<Vec<Vec<f64>>> {
    let g = &ckpt.generator;
    let seed = StreamSeed(seed);
    (0..n)
        .map(|j| {
            let z = normal_vec(&mut seed.stream(Purpose::Sample, 0, j as u64), g.latent_dim());
            g.generate(&z).map_err(CliError::from)
        })
        .collect()
}

pub fn samples_csv(samples: &[Vec<f64>], dim: usize) -> String {
    let header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    let mut out = header.join(",") + "\n";
    for s in samples {
        let row: Vec<String> = s.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn cmd_sample(ckpt_path: &Path, n: usize, out: &Path, seed: u64) -> CliResult<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let samples = generate_samples(&ckpt, n, seed)?;
    write(out, &samples_csv(&samples, ckpt.generator.data_dim()))
}

/// Samples the checkpoint and scores it against the teacher. The report is
/// written into the output directory when `EMD_OUTPUT_DIR` is set.
pub fn cmd_eval(ckpt_path: &Path, teacher_path: &Path, n: usize, seed: u64) -> CliResult<EvalReport> {
    if n < 2 {
        return Err(CliError::Validation(format!("--n must be at least 2, got {n}")));
    }
    let ckpt = load_checkpoint(ckpt_path)?;
    let teacher = load_teacher_file(teacher_path)?;
    if teacher.dim() != ckpt.generator.data_dim() {
        return Err(CliError::Validation(format!(
            "teacher dimension {} does not match generator output {}",
            teacher.dim(),
            ckpt.generator.data_dim()
        )));
    }
    let samples = generate_samples(&ckpt, n, seed)?;
    let reference = teacher.sample(&mut StreamSeed(seed).stream(Purpose::TeacherSamples, 0, 0), n);
    let bandwidth = emd_core::Bandwidth::Fixed(emd_core::metrics::median_heuristic(&reference, &[]));
    let radius = emd_core::metrics::default_recall_radius(&teacher);
    let report = emd_core::metrics::evaluate(&samples, &reference, &teacher, radius, bandwidth)?;
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
        let dir = PathBuf::from(dir);
        fs::create_dir_all(&dir)?;
        write(&dir.join(REPORT_FILE), &report.to_json())?;
    }
    Ok(report)
}
