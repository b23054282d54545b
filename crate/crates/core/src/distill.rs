//! The alternating training loop: score matching for the student on fresh
//! generator samples, then a regression step of the generator onto
//! corrector targets.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corrector::{
    run_corrector, CorrectedBatch, CorrectorConfig, ScoreContext, StepDiagnostics,
};
use crate::error::{EmdError, Result};
use crate::metrics::{self, Bandwidth, EvalReport};
use crate::rng::{normal_vec, Purpose, StreamSeed};
use crate::schedule::{gen_weight, sample_time, GenWeighting, NoiseFeatures, ScheduleSpec, ScoreWeighting, TimePoint};
use crate::student::{dsm_update, Generator, GeneratorMode, NeuralScore};
use crate::teacher::{MixtureTeacher, ScoreModel};
use crate::tensornet::linalg::norm;
use crate::tensornet::{Activation, AdamConfig, AdamState};

/// Which squared distance the generator regresses on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    /// `w(t) |x_hat - g(z_hat)|^2` on clean data.
    DataSpace,
    /// `w(t) |alpha x_hat - alpha g(z_hat)|^2 / (2 sigma^2)`: the same
    /// clean-data residual with the noisy-space Jacobian folded into the weight.
    #[default]
    NoisySpace,
}

impl GeneratorLoss {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "data" => Some(GeneratorLoss::DataSpace),
            "noisy" => Some(GeneratorLoss::NoisySpace),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GeneratorLoss::DataSpace => "data",
            GeneratorLoss::NoisySpace => "noisy",
        }
    }

    /// Per-element factor in front of `|x_hat - g|^2`.
    pub fn coefficient(self, weighting: GenWeighting, tp: &TimePoint) -> f64 {
        let w = gen_weight(weighting, tp);
        match self {
            GeneratorLoss::DataSpace => w,
            GeneratorLoss::NoisySpace => w * tp.alpha * tp.alpha / (2.0 * tp.sigma * tp.sigma),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub generator_hidden: Vec<usize>,
    pub score_hidden: Vec<usize>,
    pub activation: Activation,
    pub generator_mode: GeneratorMode,
    pub features: NoiseFeatures,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 2,
            generator_hidden: vec![64, 64],
            score_hidden: vec![64, 64],
            activation: Activation::Silu,
            generator_mode: GeneratorMode::XPred,
            features: NoiseFeatures::ScaledSinusoidal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub batch_size: usize,
    pub iterations: u64,
    /// Score-matching steps per generator step.
    pub score_ratio: usize,
    pub lr_g: f64,
    pub lr_s: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gen_weighting: GenWeighting,
    pub score_weighting: ScoreWeighting,
    pub generator_loss: GeneratorLoss,
    pub corrector: CorrectorConfig,
    pub schedule: ScheduleSpec,
    pub model: ModelConfig,
    pub seed: u64,
    /// Score-matching steps on initial generator samples before the loop.
    pub warmup_steps: u64,
    /// Evaluate every this many iterations (and after the last); 0 disables.
    pub eval_every: u64,
    pub eval_samples: usize,
    pub grad_norm_limit: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            batch_size: 64,
            iterations: 20_000,
            score_ratio: 1,
            lr_g: 1e-3,
            lr_s: 2e-3,
            beta1: 0.0,
            beta2: 0.99,
            gen_weighting: GenWeighting::SigmaSqOverAlpha,
            score_weighting: ScoreWeighting::SigmaSq,
            generator_loss: GeneratorLoss::NoisySpace,
            corrector: CorrectorConfig::default(),
            schedule: ScheduleSpec::default(),
            model: ModelConfig::default(),
            seed: 0,
            warmup_steps: 500,
            eval_every: 1000,
            eval_samples: 1000,
            grad_norm_limit: 1e6,
        }
    }
}

fn cfg_err(key: &str, msg: impl std::fmt::Display) -> EmdError {
    EmdError::Config(format!("{key}: {msg}"))
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(cfg_err("distill.batch_size", "must be positive"));
        }
        if self.score_ratio == 0 {
            return Err(cfg_err("distill.score_ratio", "must be at least 1"));
        }
        for (key, v) in [("distill.lr_g", self.lr_g), ("distill.lr_s", self.lr_s)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(cfg_err(key, format!("must be a non-negative number, got {v}")));
            }
        }
        for (key, v) in [("distill.beta1", self.beta1), ("distill.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(cfg_err(key, format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(self.grad_norm_limit > 0.0) {
            return Err(cfg_err("distill.grad_norm_limit", "must be positive"));
        }
        if self.eval_every > 0 && self.eval_samples < 2 {
            return Err(cfg_err("eval.samples", "must be at least 2 when evaluation is on"));
        }
        let m = &self.model;
        if m.latent_dim == 0 {
            return Err(cfg_err("model.latent_dim", "must be positive"));
        }
        if m.generator_hidden.contains(&0) || m.score_hidden.contains(&0) {
            return Err(cfg_err("model.hidden", "layer widths must be positive"));
        }
        self.corrector.validate()?;
        self.schedule.validate()?;
        Ok(())
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }

    /// Fresh generator and student for `data_dim`, from the `Init` streams.
    pub fn init_models(&self, data_dim: usize) -> Result<(Generator, NeuralScore)> {
        let seed = StreamSeed(self.seed);
        let m = &self.model;
        let g = Generator::init(
            m.latent_dim,
            data_dim,
            &m.generator_hidden,
            m.activation,
            m.generator_mode,
            self.schedule.lambda_star,
            m.features,
            &mut seed.stream(Purpose::Init, 0, 0),
        )?;
        let s = NeuralScore::init(
            data_dim,
            &m.score_hidden,
            m.activation,
            m.features,
            &mut seed.stream(Purpose::Init, 0, 1),
        )?;
        Ok((g, s))
    }
}

/// Loss and batch-mean parameter gradient of the generator regression,
/// without an update. Targets are constants.
pub fn generator_loss_and_grad(
    g: &Generator,
    batch: &CorrectedBatch,
    weighting: GenWeighting,
    loss_form: GeneratorLoss,
) -> Result<(f64, Vec<f64>)> {
    let b = batch.len();
    if b == 0 || batch.tps.len() != b || batch.z_hat.len() != b {
        return Err(EmdError::Config("generator batch is empty or ragged".into()));
    }
    let mut grad = vec![0.0; g.net.n_params()];
    let mut loss = 0.0;
    for ((x_hat, z_hat), tp) in batch.x_hat.iter().zip(&batch.z_hat).zip(&batch.tps) {
        let c = loss_form.coefficient(weighting, tp);
        let tape = g.trace(z_hat)?;
        let resid: Vec<f64> = tape.output().iter().zip(x_hat).map(|(gi, xi)| gi - xi).collect();
        loss += c * resid.iter().map(|r| r * r).sum::<f64>();
        g.net.pullback(&tape, &resid, Some((&mut grad, 2.0 * c / b as f64)))?;
    }
    Ok((loss / b as f64, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorStep {
    pub loss: f64,
    pub grad_norm: f64,
}

/// One optimizer step of the generator regression. Returns the loss before
/// the step.
pub fn generator_update(
    g: &mut Generator,
    batch: &CorrectedBatch,
    weighting: GenWeighting,
    loss_form: GeneratorLoss,
    opt: &mut AdamState,
) -> Result<GeneratorStep> {
    let (loss, grad) = generator_loss_and_grad(g, batch, weighting, loss_form)?;
    if !loss.is_finite() {
        return Err(EmdError::Numerical(format!("generator loss is {loss}")));
    }
    opt.step(g.net.params_mut(), &grad)?;
    Ok(GeneratorStep {
        loss,
        grad_norm: norm(&grad),
    })
}

/// Reverse-KL gradient evaluated directly: each element backpropagates the
/// cotangent `-w(t) alpha delta(x_t)` through the generator. The result is
/// a descent direction.
pub fn emd1_generator_gradient(
    g: &Generator,
    student: &dyn ScoreModel,
    teacher: &dyn ScoreModel,
    z: &[Vec<f64>],
    eps: &[Vec<f64>],
    tps: &[TimePoint],
    weighting: GenWeighting,
) -> Result<Vec<f64>> {
    let b = z.len();
    if b == 0 || eps.len() != b || tps.len() != b {
        return Err(EmdError::Config("gradient batch is empty or ragged".into()));
    }
    let ctx = ScoreContext::new(teacher, student, g);
    let mut grad = vec![0.0; g.net.n_params()];
    for ((zi, ei), tp) in z.iter().zip(eps).zip(tps) {
        let tape = g.trace(zi)?;
        let x = crate::schedule::diffuse(tape.output(), tp, ei)?;
        let delta = ctx.score_gap(&x, tp)?;
        let w = gen_weight(weighting, tp);
        let cot: Vec<f64> = delta.iter().map(|d| -w * tp.alpha * d).collect();
        g.net.pullback(&tape, &cot, Some((&mut grad, 1.0 / b as f64)))?;
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: u64,
    pub loss_g: f64,
    pub loss_s: f64,
    pub grad_norm_g: f64,
    /// Seconds since training started.
    pub wall_time: f64,
    pub recall: Option<f64>,
    pub mmd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TrainRecord>,
    pub failure: Option<String>,
}

pub const TRACE_HEADER: &str = "iteration,loss_g,loss_s,grad_norm_g,recall,mmd";

fn fmt_num(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.16e}");
}

impl TrainTrace {
    /// CSV with the header row and one line per record. Wall time is left
    /// out so identical runs give identical files.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = write!(out, "{},", r.iteration);
            fmt_num(&mut out, r.loss_g);
            out.push(',');
            fmt_num(&mut out, r.loss_s);
            out.push(',');
            fmt_num(&mut out, r.grad_norm_g);
            out.push(',');
            if let Some(v) = r.recall {
                fmt_num(&mut out, v);
            }
            out.push(',');
            if let Some(v) = r.mmd {
                fmt_num(&mut out, v);
            }
            out.push('\n');
        }
        out
    }

    pub fn last_eval(&self) -> Option<&TrainRecord> {
        self.records.iter().rev().find(|r| r.recall.is_some())
    }
}

/// Mean corrector statistics per step, over every chain in a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrectorSummary {
    sums: Vec<StepDiagnostics>,
    chains: u64,
}

impl CorrectorSummary {
    fn add(&mut self, diags: &[StepDiagnostics]) {
        if self.sums.len() < diags.len() {
            self.sums.resize(diags.len(), StepDiagnostics::default());
        }
        for (s, d) in self.sums.iter_mut().zip(diags) {
            s.drift_norm += d.drift_norm;
            s.score_z_norm += d.score_z_norm;
        }
        self.chains += 1;
    }

    pub fn means(&self) -> Vec<StepDiagnostics> {
        let n = self.chains.max(1) as f64;
        self.sums
            .iter()
            .map(|s| StepDiagnostics {
                drift_norm: s.drift_norm / n,
                score_z_norm: s.score_z_norm / n,
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,mean_drift_norm,mean_score_z_norm\n");
        for (k, d) in self.means().iter().enumerate() {
            let _ = writeln!(out, "{},{:.16e},{:.16e}", k + 1, d.drift_norm, d.score_z_norm);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub trace: TrainTrace,
    pub corrector: CorrectorSummary,
    pub final_report: Option<EvalReport>,
}

/// Evaluation setup shared by every eval point of a run: fixed latents and a
/// fixed reference set, so successive reports are comparable.
pub struct Evaluator<'a> {
    teacher: &'a MixtureTeacher,
    latents: Vec<Vec<f64>>,
    reference: Vec<Vec<f64>>,
    radius: f64,
    bandwidth: Bandwidth,
}

impl<'a> Evaluator<'a> {
    pub fn new(teacher: &'a MixtureTeacher, latent_dim: usize, n: usize, seed: u64) -> Self {
        let seed = StreamSeed(seed);
        let latents = (0..n)
            .map(|j| normal_vec(&mut seed.stream(Purpose::Eval, 0, j as u64), latent_dim))
            .collect();
        let reference = teacher.sample(&mut seed.stream(Purpose::TeacherSamples, 0, 0), n);
        let bandwidth = Bandwidth::Fixed(metrics::median_heuristic(&reference, &[]));
        Evaluator {
            teacher,
            latents,
            reference,
            radius: metrics::default_recall_radius(teacher),
            bandwidth,
        }
    }

    pub fn evaluate(&self, g: &Generator) -> Result<EvalReport> {
        let samples = self
            .latents
            .iter()
            .map(|z| g.generate(z))
            .collect::<Result<Vec<_>>>()?;
        metrics::evaluate(&samples, &self.reference, self.teacher, self.radius, self.bandwidth)
    }
}

/// Callback after every iteration with the iteration count done so far.
pub type IterationHook<'h> = dyn FnMut(u64, &Generator, &NeuralScore) -> Result<()> + 'h;

/// Runs warm-up and then exactly `cfg.iterations` iterations. Numerical
/// failures stop the loop and are reported through `trace.failure`;
/// configuration errors are returned as `Err`.
pub fn train(
    cfg: &DistillConfig,
    teacher: &dyn ScoreModel,
    evaluator: Option<&Evaluator<'_>>,
    g: &mut Generator,
    s: &mut NeuralScore,
    mut hook: Option<&mut IterationHook<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    crate::error::dim_check("teacher dimension", g.data_dim(), teacher.dim())?;
    crate::error::dim_check("student dimension", g.data_dim(), s.dim())?;

    let seed = StreamSeed(cfg.seed);
    let mut opt_g = AdamState::new(cfg.adam(cfg.lr_g), g.net.n_params());
    let mut opt_s = AdamState::new(cfg.adam(cfg.lr_s), s.net.n_params());
    let mut outcome = TrainOutcome {
        trace: TrainTrace::default(),
        corrector: CorrectorSummary::default(),
        final_report: None,
    };
    let start = Instant::now();
    let (latent, data) = (g.latent_dim(), g.data_dim());
    let b = cfg.batch_size;

    let draw = |purpose: Purpose, iteration: u64| {
        let mut z = Vec::with_capacity(b);
        let mut eps = Vec::with_capacity(b);
        let mut tps = Vec::with_capacity(b);
        for e in 0..b {
            let mut rng = seed.stream(purpose, iteration, e as u64);
            tps.push(sample_time(&cfg.schedule, &mut rng));
            z.push(normal_vec(&mut rng, latent));
            eps.push(normal_vec(&mut rng, data));
        }
        (z, eps, tps)
    };

    for j in 0..cfg.warmup_steps {
        let (z, eps, tps) = draw(Purpose::Warmup, j);
        if let Err(e) = dsm_update(s, g, &z, &tps, &eps, &mut opt_s, cfg.score_weighting) {
            outcome.trace.failure = Some(format!("warm-up step {j}: {e}"));
            return Ok(outcome);
        }
    }

    for it in 0..cfg.iterations {
        match iteration(cfg, teacher, g, s, &mut opt_g, &mut opt_s, it, &draw, &mut outcome.corrector) {
            Ok((loss_g, loss_s, grad_norm_g)) => {
                let mut rec = TrainRecord {
                    iteration: it + 1,
                    loss_g,
                    loss_s,
                    grad_norm_g,
                    wall_time: start.elapsed().as_secs_f64(),
                    recall: None,
                    mmd: None,
                };
                let due = cfg.eval_every > 0 && ((it + 1) % cfg.eval_every == 0 || it + 1 == cfg.iterations);
                if let (Some(ev), true) = (evaluator, due) {
                    match ev.evaluate(g) {
                        Ok(r) => {
                            rec.recall = Some(r.recall);
                            rec.mmd = Some(r.mmd);
                            outcome.final_report = Some(r);
                        }
                        Err(e) => {
                            outcome.trace.failure = Some(format!("iteration {}: {e}", it + 1));
                            return Ok(outcome);
                        }
                    }
                }
                outcome.trace.records.push(rec);
            }
            Err(e @ (EmdError::Numerical(_) | EmdError::Domain(_))) => {
                outcome.trace.failure = Some(format!("iteration {}: {e}", it + 1));
                return Ok(outcome);
            }
            Err(e) => return Err(e),
        }
        if let Some(h) = hook.as_deref_mut() {
            h(it + 1, g, s)?;
        }
    }
    Ok(outcome)
}

type Draw<'a> = dyn Fn(Purpose, u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<TimePoint>) + 'a;

#[allow(clippy::too_many_arguments)]
fn iteration(
    cfg: &DistillConfig,
    teacher: &dyn ScoreModel,
    g: &mut Generator,
    s: &mut NeuralScore,
    opt_g: &mut AdamState,
    opt_s: &mut AdamState,
    it: u64,
    draw: &Draw<'_>,
    summary: &mut CorrectorSummary,
) -> Result<(f64, f64, f64)> {
    let seed = StreamSeed(cfg.seed);
    let (z, eps, tps) = draw(Purpose::Batch, it);

    let mut loss_s = dsm_update(s, g, &z, &tps, &eps, opt_s, cfg.score_weighting)?;
    for extra in 1..cfg.score_ratio {
        let (z2, eps2, tps2) = draw(Purpose::ExtraScoreBatch, it * cfg.score_ratio as u64 + extra as u64);
        loss_s = dsm_update(s, g, &z2, &tps2, &eps2, opt_s, cfg.score_weighting)?;
    }

    let ctx = ScoreContext::new(teacher, &*s, &*g);
    let mut batch = CorrectedBatch::default();
    for (e, ((zi, ei), tp)) in z.iter().zip(&eps).zip(&tps).enumerate() {
        let mut rng = seed.stream(Purpose::Corrector, it, e as u64);
        let out = run_corrector(&cfg.corrector, zi, ei, tp, &ctx, &mut rng)?;
        summary.add(&out.diagnostics);
        batch.push(out, *tp);
    }

    let (loss_g, grad) = generator_loss_and_grad(g, &batch, cfg.gen_weighting, cfg.generator_loss)?;
    let grad_norm = norm(&grad);
    if !loss_g.is_finite() || !grad_norm.is_finite() {
        return Err(EmdError::Numerical(format!("generator loss {loss_g}, gradient norm {grad_norm}")));
    }
    if grad_norm > cfg.grad_norm_limit {
        return Err(EmdError::Numerical(format!(
            "generator gradient norm {grad_norm:.3e} exceeds {:.3e}",
            cfg.grad_norm_limit
        )));
    }
    opt_g.step(g.net.params_mut(), &grad)?;
    Ok((loss_g, loss_s, grad_norm))
}
