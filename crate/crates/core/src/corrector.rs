//! Short-run Langevin correctors for the joint target
//! `rho(x, z) = q(x) p_theta(z | x)` at one noise level.
//!
//! Two parameterizations are supported. In `(eps, z)` space the chain moves
//! the diffusion noise and the latent, with `x = alpha g(z) + sigma eps`
//! recovered by push-forward. In `(x, z)` space the chain moves the noisy
//! point directly with step size `sigma^2 gamma_eps`.
//!
//! Because the `eps` score is `sigma * delta - eps`, every `eps` update is a
//! contraction by `(1 - gamma)` plus drift plus noise, so the injected noises
//! (and the decayed initial `eps`) accumulate linearly and can be subtracted
//! after the loop. The ledger records exactly what was injected.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, EmdError, Result};
use crate::rng::normal_vec;
use crate::schedule::TimePoint;
use crate::student::Generator;
use crate::teacher::ScoreModel;
use crate::tensornet::linalg::norm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorrectorSpace {
    #[default]
    EpsZ,
    XZ,
}

impl CorrectorSpace {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "eps_z" => Some(CorrectorSpace::EpsZ),
            "x_z" => Some(CorrectorSpace::XZ),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CorrectorSpace::EpsZ => "eps_z",
            CorrectorSpace::XZ => "x_z",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Cancellation {
    /// Remove the decayed initial noise and every recorded Langevin noise.
    #[default]
    Full,
    /// Remove only the noise injected by the final step.
    LastStep,
    None,
}

impl Cancellation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Cancellation::Full),
            "last_step" => Some(Cancellation::LastStep),
            "none" => Some(Cancellation::None),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Cancellation::Full => "full",
            Cancellation::LastStep => "last_step",
            Cancellation::None => "none",
        }
    }
}

/// Deliberate defects used as negative controls by the verification suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectorFault {
    /// Add the accumulated noise instead of subtracting it.
    FlipCancellationSign,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectorConfig {
    pub steps: usize,
    /// Squared step size of the `eps` (or `x`) chain.
    pub gamma_eps: f64,
    /// Squared step size of the `z` chain.
    pub gamma_z: f64,
    pub space: CorrectorSpace,
    pub sample_z: bool,
    pub cancellation: Cancellation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<CorrectorFault>,
}

impl Default for CorrectorConfig {
    /// Step sizes `(0.4, 0.004)`, 16 steps, joint `(eps, z)` sampling.
    fn default() -> Self {
        CorrectorConfig::from_step_sizes(16, 0.4, 0.004)
    }
}

impl CorrectorConfig {
    /// Takes unsquared step sizes, as written in configs (`step_eps = 0.4`
    /// means `gamma_eps = 0.16`).
    pub fn from_step_sizes(steps: usize, step_eps: f64, step_z: f64) -> Self {
        CorrectorConfig {
            steps,
            gamma_eps: step_eps * step_eps,
            gamma_z: step_z * step_z,
            space: CorrectorSpace::EpsZ,
            sample_z: true,
            cancellation: Cancellation::Full,
            fault: None,
        }
    }

    /// One step of size one in `x` with a frozen latent and full
    /// cancellation: the configuration whose generator gradient is the
    /// reverse-KL (score distillation) gradient.
    pub fn single_unit_step() -> Self {
        CorrectorConfig {
            steps: 1,
            gamma_eps: 1.0,
            gamma_z: 0.0,
            space: CorrectorSpace::EpsZ,
            sample_z: false,
            cancellation: Cancellation::Full,
            fault: None,
        }
    }

    /// `gamma_eps = 1` is allowed: it zeroes the decay and is the only
    /// way to express the single unit step.
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_eps >= 0.0 && self.gamma_eps <= 1.0) {
            return Err(EmdError::Config(format!(
                "corrector.step_eps squared must lie in [0, 1], got {}",
                self.gamma_eps
            )));
        }
        if !(self.gamma_z >= 0.0) || !self.gamma_z.is_finite() {
            return Err(EmdError::Config(format!(
                "corrector.step_z squared must be non-negative, got {}",
                self.gamma_z
            )));
        }
        Ok(())
    }

    pub fn decay(&self) -> f64 {
        1.0 - self.gamma_eps
    }
}

/// Noises of one corrector run. The `eps`/`x` noises are drawn before the
/// loop starts; `z` noises are drawn afterwards from the same stream and are
/// never cancelled.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseLedger {
    pub eps0: Vec<f64>,
    pub noises: Vec<Vec<f64>>,
    pub z_noises: Vec<Vec<f64>>,
    pub decay: f64,
}

impl NoiseLedger {
    pub fn sample<R: Rng + ?Sized>(
        cfg: &CorrectorConfig,
        eps0: &[f64],
        latent_dim: usize,
        rng: &mut R,
    ) -> Self {
        let noises = (0..cfg.steps).map(|_| normal_vec(rng, eps0.len())).collect();
        let z_noises = if cfg.sample_z {
            (0..cfg.steps).map(|_| normal_vec(rng, latent_dim)).collect()
        } else {
            Vec::new()
        };
        NoiseLedger {
            eps0: eps0.to_vec(),
            noises,
            z_noises,
            decay: cfg.decay(),
        }
    }

    pub fn steps(&self) -> usize {
        self.noises.len()
    }

    /// `sum_k decay^(K-k) n^k` over the recorded noises.
    pub fn weighted_noise_sum(&self) -> Vec<f64> {
        let k = self.noises.len();
        let mut out = vec![0.0; self.eps0.len()];
        for (i, n) in self.noises.iter().enumerate() {
            let w = self.decay.powi((k - 1 - i) as i32);
            for (o, v) in out.iter_mut().zip(n) {
                *o += w * v;
            }
        }
        out
    }

    /// The part of the final `eps` that is pure noise under the given mode,
    /// in `eps` units.
    pub fn accumulated_noise(&self, gamma: f64, mode: Cancellation) -> Vec<f64> {
        let k = self.noises.len();
        let root = (2.0 * gamma).sqrt();
        match mode {
            Cancellation::None => vec![0.0; self.eps0.len()],
            Cancellation::LastStep => match self.noises.last() {
                Some(n) => n.iter().map(|v| root * v).collect(),
                None => vec![0.0; self.eps0.len()],
            },
            Cancellation::Full => {
                let d = self.decay.powi(k as i32);
                self.weighted_noise_sum()
                    .iter()
                    .zip(&self.eps0)
                    .map(|(s, e0)| d * e0 + root * s)
                    .collect()
            }
        }
    }
}

/// Per-step chain statistics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// `|gamma_eps * sigma * delta|`, the drift added to `eps` in this step.
    pub drift_norm: f64,
    pub score_z_norm: f64,
}

/// Regression target for the generator. Both fields are constants with
/// respect to the generator and score parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedSample {
    /// Target in clean-data space.
    pub x_hat: Vec<f64>,
    pub z_hat: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Corrected targets for a batch, with the noise level of every element.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrectedBatch {
    pub x_hat: Vec<Vec<f64>>,
    pub z_hat: Vec<Vec<f64>>,
    pub tps: Vec<TimePoint>,
    pub diagnostics: Vec<Vec<StepDiagnostics>>,
}

impl CorrectedBatch {
    pub fn push(&mut self, sample: CorrectedSample, tp: TimePoint) {
        self.x_hat.push(sample.x_hat);
        self.z_hat.push(sample.z_hat);
        self.diagnostics.push(sample.diagnostics);
        self.tps.push(tp);
    }

    pub fn len(&self) -> usize {
        self.x_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_hat.is_empty()
    }
}

/// Everything the joint scores need.
#[derive(Clone, Copy)]
pub struct ScoreContext<'a> {
    pub teacher: &'a dyn ScoreModel,
    pub student: &'a dyn ScoreModel,
    pub generator: &'a Generator,
}

impl<'a> ScoreContext<'a> {
    pub fn new(
        teacher: &'a dyn ScoreModel,
        student: &'a dyn ScoreModel,
        generator: &'a Generator,
    ) -> Self {
        ScoreContext {
            teacher,
            student,
            generator,
        }
    }

    /// `delta(x) = grad log q_t(x) - s_phi(x, t)`, a constant for every
    /// gradient computation downstream.
    pub fn score_gap(&self, x: &[f64], tp: &TimePoint) -> Result<Vec<f64>> {
        let q = self.teacher.score(x, tp)?;
        let s = self.student.score(x, tp)?;
        Ok(q.iter().zip(&s).map(|(a, b)| a - b).collect())
    }
}

fn require_sigma(tp: &TimePoint) -> Result<()> {
    if tp.sigma == 0.0 {
        Err(EmdError::Domain("joint scores are undefined at sigma = 0".into()))
    } else {
        Ok(())
    }
}

fn check_finite(v: &[f64], what: &str, step: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(EmdError::Numerical(format!(
            "corrector {what} became non-finite at step {step}"
        )))
    }
}

/// Scores of the target pulled back to `(eps, z)`:
/// `sigma * delta - eps` and `alpha * delta^T dg/dz - z`.
pub fn joint_scores_eps_z(
    eps: &[f64],
    z: &[f64],
    tp: &TimePoint,
    ctx: &ScoreContext<'_>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    require_sigma(tp)?;
    let g = ctx.generator;
    dim_check("corrector eps", g.data_dim(), eps.len())?;
    let tape = g.trace(z)?;
    let x = crate::schedule::diffuse(tape.output(), tp, eps)?;
    let delta = ctx.score_gap(&x, tp)?;
    let score_eps = delta.iter().zip(eps).map(|(d, e)| tp.sigma * d - e).collect();
    let cot: Vec<f64> = delta.iter().map(|d| tp.alpha * d).collect();
    let pulled = g.net.pullback(&tape, &cot, None)?;
    let score_z = pulled.iter().zip(z).map(|(p, zi)| p - zi).collect();
    Ok((score_eps, score_z))
}

/// Scores of the target in `(x, z)`:
/// `delta - r` and `alpha * r^T dg/dz - z` with `r = (x - alpha g(z)) / sigma^2`.
pub fn joint_scores_x_z(
    x: &[f64],
    z: &[f64],
    tp: &TimePoint,
    ctx: &ScoreContext<'_>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    require_sigma(tp)?;
    let g = ctx.generator;
    dim_check("corrector x", g.data_dim(), x.len())?;
    let tape = g.trace(z)?;
    let s2 = tp.sigma * tp.sigma;
    let r: Vec<f64> = x
        .iter()
        .zip(tape.output())
        .map(|(xi, gi)| (xi - tp.alpha * gi) / s2)
        .collect();
    let delta = ctx.score_gap(x, tp)?;
    let score_x = delta.iter().zip(&r).map(|(d, ri)| d - ri).collect();
    let cot: Vec<f64> = r.iter().map(|ri| tp.alpha * ri).collect();
    let pulled = g.net.pullback(&tape, &cot, None)?;
    let score_z = pulled.iter().zip(z).map(|(p, zi)| p - zi).collect();
    Ok((score_x, score_z))
}

/// Runs the corrector with freshly sampled noises.
pub fn run_corrector<R: Rng + ?Sized>(
    cfg: &CorrectorConfig,
    z0: &[f64],
    eps0: &[f64],
    tp: &TimePoint,
    ctx: &ScoreContext<'_>,
    rng: &mut R,
) -> Result<CorrectedSample> {
    let ledger = NoiseLedger::sample(cfg, eps0, z0.len(), rng);
    run_corrector_with_ledger(cfg, z0, tp, ctx, &ledger, None)
}

/// Runs the corrector on a given ledger. `observer`, when present, sees the
/// pushed-forward noisy point `x_t` after every step (`1..=K`).
pub fn run_corrector_with_ledger(
    cfg: &CorrectorConfig,
    z0: &[f64],
    tp: &TimePoint,
    ctx: &ScoreContext<'_>,
    ledger: &NoiseLedger,
    observer: Option<&mut dyn FnMut(usize, &[f64])>,
) -> Result<CorrectedSample> {
    cfg.validate()?;
    require_sigma(tp)?;
    if tp.alpha == 0.0 {
        return Err(EmdError::Domain("corrector target undefined at alpha = 0".into()));
    }
    let g = ctx.generator;
    dim_check("corrector latent", g.latent_dim(), z0.len())?;
    dim_check("corrector eps", g.data_dim(), ledger.eps0.len())?;
    if ledger.steps() != cfg.steps || (cfg.sample_z && ledger.z_noises.len() != cfg.steps) {
        return Err(EmdError::Config(format!(
            "noise ledger holds {} steps, corrector wants {}",
            ledger.steps(),
            cfg.steps
        )));
    }
    match cfg.space {
        CorrectorSpace::EpsZ => eps_z_chain(cfg, z0, tp, ctx, ledger, observer),
        CorrectorSpace::XZ => x_z_chain(cfg, z0, tp, ctx, ledger, observer),
    }
}

fn cancellation_sign(cfg: &CorrectorConfig) -> f64 {
    match cfg.fault {
        Some(CorrectorFault::FlipCancellationSign) => -1.0,
        None => 1.0,
    }
}

fn eps_z_chain(
    cfg: &CorrectorConfig,
    z0: &[f64],
    tp: &TimePoint,
    ctx: &ScoreContext<'_>,
    ledger: &NoiseLedger,
    mut observer: Option<&mut dyn FnMut(usize, &[f64])>,
) -> Result<CorrectedSample> {
    let g = ctx.generator;
    let (alpha, sigma) = (tp.alpha, tp.sigma);
    let gamma = cfg.gamma_eps;
    let root_eps = (2.0 * gamma).sqrt();
    let root_z = (2.0 * cfg.gamma_z).sqrt();
    let mut eps = ledger.eps0.clone();
    let mut z = z0.to_vec();
    let mut diagnostics = Vec::with_capacity(cfg.steps);
    // With a frozen latent the generator output never changes.
    let mut gz = g.generate(&z)?;

    for step in 0..cfg.steps {
        let tape = if cfg.sample_z { Some(g.trace(&z)?) } else { None };
        if let Some(t) = &tape {
            gz.copy_from_slice(t.output());
        }
        let x: Vec<f64> = gz.iter().zip(&eps).map(|(gi, e)| alpha * gi + sigma * e).collect();
        let delta = ctx.score_gap(&x, tp)?;
        check_finite(&delta, "score gap", step + 1)?;

        let mut diag = StepDiagnostics {
            drift_norm: gamma * sigma * norm(&delta),
            score_z_norm: 0.0,
        };
        if let Some(t) = &tape {
            let cot: Vec<f64> = delta.iter().map(|d| alpha * d).collect();
            let pulled = g.net.pullback(t, &cot, None)?;
            let score_z: Vec<f64> = pulled.iter().zip(&z).map(|(p, zi)| p - zi).collect();
            diag.score_z_norm = norm(&score_z);
            for ((zi, s), m) in z.iter_mut().zip(&score_z).zip(&ledger.z_noises[step]) {
                *zi += cfg.gamma_z * s + root_z * m;
            }
            check_finite(&z, "latent", step + 1)?;
        }
        for ((e, d), n) in eps.iter_mut().zip(&delta).zip(&ledger.noises[step]) {
            *e += gamma * (sigma * d - *e) + root_eps * n;
        }
        check_finite(&eps, "eps", step + 1)?;
        diagnostics.push(diag);

        if let Some(obs) = observer.as_deref_mut() {
            let gk = if cfg.sample_z { g.generate(&z)? } else { gz.clone() };
            let xk: Vec<f64> = gk.iter().zip(&eps).map(|(gi, e)| alpha * gi + sigma * e).collect();
            obs(step + 1, &xk);
        }
    }

    let noise = ledger.accumulated_noise(gamma, cfg.cancellation);
    let sign = cancellation_sign(cfg);
    let g_hat = if cfg.sample_z { g.generate(&z)? } else { gz };
    let x_hat = g_hat
        .iter()
        .zip(eps.iter().zip(&noise))
        .map(|(gi, (e, n))| gi + sigma / alpha * (e - sign * n))
        .collect();
    Ok(CorrectedSample {
        x_hat,
        z_hat: z,
        diagnostics,
    })
}

fn x_z_chain(
    cfg: &CorrectorConfig,
    z0: &[f64],
    tp: &TimePoint,
    ctx: &ScoreContext<'_>,
    ledger: &NoiseLedger,
    mut observer: Option<&mut dyn FnMut(usize, &[f64])>,
) -> Result<CorrectedSample> {
    let g = ctx.generator;
    let (alpha, sigma) = (tp.alpha, tp.sigma);
    let s2 = sigma * sigma;
    let gamma = cfg.gamma_eps;
    let step_x = s2 * gamma;
    let root_x = (2.0 * step_x).sqrt();
    let root_z = (2.0 * cfg.gamma_z).sqrt();
    let mut z = z0.to_vec();
    let mut gz = g.generate(&z)?;
    let mut x: Vec<f64> = gz
        .iter()
        .zip(&ledger.eps0)
        .map(|(gi, e)| alpha * gi + sigma * e)
        .collect();
    let mut diagnostics = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let tape = if cfg.sample_z { Some(g.trace(&z)?) } else { None };
        if let Some(t) = &tape {
            gz.copy_from_slice(t.output());
        }
        let delta = ctx.score_gap(&x, tp)?;
        check_finite(&delta, "score gap", step + 1)?;
        let r: Vec<f64> = x.iter().zip(&gz).map(|(xi, gi)| (xi - alpha * gi) / s2).collect();
        let mut diag = StepDiagnostics {
            drift_norm: gamma * sigma * norm(&delta),
            score_z_norm: 0.0,
        };
        if let Some(t) = &tape {
            let cot: Vec<f64> = r.iter().map(|ri| alpha * ri).collect();
            let pulled = g.net.pullback(t, &cot, None)?;
            let score_z: Vec<f64> = pulled.iter().zip(&z).map(|(p, zi)| p - zi).collect();
            diag.score_z_norm = norm(&score_z);
            for ((zi, s), m) in z.iter_mut().zip(&score_z).zip(&ledger.z_noises[step]) {
                *zi += cfg.gamma_z * s + root_z * m;
            }
            check_finite(&z, "latent", step + 1)?;
        }
        for (((xi, d), ri), n) in x.iter_mut().zip(&delta).zip(&r).zip(&ledger.noises[step]) {
            *xi += step_x * (d - ri) + root_x * n;
        }
        check_finite(&x, "x", step + 1)?;
        diagnostics.push(diag);
        if let Some(obs) = observer.as_deref_mut() {
            obs(step + 1, &x);
        }
    }

    let noise = ledger.accumulated_noise(gamma, cfg.cancellation);
    let sign = cancellation_sign(cfg);
    let x_hat = x
        .iter()
        .zip(&noise)
        .map(|(xi, n)| (xi - sign * sigma * n) / alpha)
        .collect();
    Ok(CorrectedSample {
        x_hat,
        z_hat: z,
        diagnostics,
    })
}

/// Closed-form target of the single unit step with the noise removed:
/// `g(z0) + (sigma^2 / alpha) * delta(alpha g(z0) + sigma eps0)`.
pub fn vsd_target(
    z0: &[f64],
    eps0: &[f64],
    tp: &TimePoint,
    ctx: &ScoreContext<'_>,
) -> Result<CorrectedSample> {
    require_sigma(tp)?;
    if tp.alpha == 0.0 {
        return Err(EmdError::Domain("target undefined at alpha = 0".into()));
    }
    let gz = ctx.generator.generate(z0)?;
    let x = crate::schedule::diffuse(&gz, tp, eps0)?;
    let delta = ctx.score_gap(&x, tp)?;
    let c = tp.sigma * tp.sigma / tp.alpha;
    Ok(CorrectedSample {
        x_hat: gz.iter().zip(&delta).map(|(gi, d)| gi + c * d).collect(),
        z_hat: z0.to_vec(),
        diagnostics: vec![StepDiagnostics {
            drift_norm: tp.sigma * norm(&delta),
            score_z_norm: 0.0,
        }],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::NoiseFeatures;
    use crate::student::{GeneratorMode, NeuralScore};
    use crate::teacher::MixtureTeacher;
    use crate::tensornet::{Activation, FeedNet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (MixtureTeacher, NeuralScore, Generator) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Generator::init(2, 2, &[16], Activation::Silu, GeneratorMode::XPred, -3.0, NoiseFeatures::Scaled, &mut rng).unwrap();
        let s = NeuralScore::init(2, &[16], Activation::Silu, NoiseFeatures::Scaled, &mut rng).unwrap();
        (MixtureTeacher::ring8(), s, g)
    }

    #[test]
    fn equal_scores_give_standard_normal_scores() {
        let (t, _, g) = setup(1);
        let ctx = ScoreContext::new(&t, &t, &g);
        let tp = TimePoint::from_lambda(0.5, 0.7);
        let (se, sz) = joint_scores_eps_z(&[0.3, -0.1], &[1.0, 2.0], &tp, &ctx).unwrap();
        assert_eq!(se, vec![-0.3, 0.1]);
        assert_eq!(sz, vec![-1.0, -2.0]);
        let (se, sz) = joint_scores_eps_z(&[0.0, 0.0], &[0.0, 0.0], &tp, &ctx).unwrap();
        assert!(se.iter().chain(&sz).all(|v| *v == 0.0));
    }

    #[test]
    fn x_z_conditional_term_only() {
        let (t, _, g) = setup(2);
        let ctx = ScoreContext::new(&t, &t, &g);
        let tp = TimePoint::from_lambda(0.5, -0.5);
        let z = [0.4, -0.6];
        let x = [1.0, 0.5];
        let gz = g.generate(&z).unwrap();
        let (sx, _) = joint_scores_x_z(&x, &z, &tp, &ctx).unwrap();
        for i in 0..2 {
            let want = -(x[i] - tp.alpha * gz[i]) / tp.sigma.powi(2);
            assert!((sx[i] - want).abs() < 1e-13);
        }
        // Zero generator, standard normal teacher and student, x = 0.
        let zero = Generator::new(FeedNet::zeros(&[2, 2], 0, Activation::Silu).unwrap(), GeneratorMode::Direct, 0.0, NoiseFeatures::Scaled).unwrap();
        let n = MixtureTeacher::standard_normal(2);
        let ctx = ScoreContext::new(&n, &n, &zero);
        let (sx, sz) = joint_scores_x_z(&[0.0, 0.0], &z, &tp, &ctx).unwrap();
        assert_eq!(sx, vec![0.0, 0.0]);
        assert_eq!(sz, vec![-z[0], -z[1]]);
    }

    #[test]
    fn sigma_zero_is_domain_error() {
        let (t, s, g) = setup(3);
        let ctx = ScoreContext::new(&t, &s, &g);
        let tp = TimePoint::from_lambda(0.0, f64::INFINITY);
        assert!(matches!(joint_scores_eps_z(&[0.0; 2], &[0.0; 2], &tp, &ctx), Err(EmdError::Domain(_))));
        assert!(matches!(joint_scores_x_z(&[0.0; 2], &[0.0; 2], &tp, &ctx), Err(EmdError::Domain(_))));
        assert!(vsd_target(&[0.0; 2], &[0.0; 2], &tp, &ctx).is_err());
    }

    #[test]
    fn empty_chain_returns_generator_output() {
        let (t, s, g) = setup(4);
        let ctx = ScoreContext::new(&t, &s, &g);
        let tp = TimePoint::from_lambda(0.5, 1.0);
        let cfg = CorrectorConfig { steps: 0, ..Default::default() };
        let z0 = [0.2, 0.9];
        let out = run_corrector(&cfg, &z0, &[1.3, -0.7], &tp, &ctx, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.z_hat, z0.to_vec());
        let gz = g.generate(&z0).unwrap();
        for (a, b) in out.x_hat.iter().zip(&gz) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ledger_is_presampled_and_shaped() {
        let cfg = CorrectorConfig { steps: 5, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = NoiseLedger::sample(&cfg, &[0.0, 0.0], 3, &mut rng);
        assert_eq!(l.noises.len(), 5);
        assert_eq!(l.z_noises.len(), 5);
        assert!(l.z_noises.iter().all(|n| n.len() == 3));
        // The eps noises are the first draws of the stream.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(l.noises[0], normal_vec(&mut rng, 2));
        assert_eq!((l.decay - 0.84).abs() < 1e-15, true);
    }

    #[test]
    fn last_step_and_none_modes() {
        let l = NoiseLedger {
            eps0: vec![1.0],
            noises: vec![vec![2.0], vec![3.0]],
            z_noises: vec![],
            decay: 0.5,
        };
        assert_eq!(l.accumulated_noise(0.5, Cancellation::None), vec![0.0]);
        assert_eq!(l.accumulated_noise(0.5, Cancellation::LastStep), vec![3.0]);
        // 0.25 * 1 + 1 * (0.5 * 2 + 3)
        assert_eq!(l.accumulated_noise(0.5, Cancellation::Full), vec![4.25]);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = CorrectorConfig::default();
        cfg.gamma_eps = 1.5;
        assert!(cfg.validate().is_err());
        cfg.gamma_eps = 0.1;
        cfg.gamma_z = -1.0;
        assert!(cfg.validate().is_err());
        assert!(CorrectorConfig::single_unit_step().validate().is_ok());
    }

    #[test]
    fn non_finite_state_reports_step() {
        struct Exploding;
        impl ScoreModel for Exploding {
            fn dim(&self) -> usize { 2 }
            fn score(&self, _x: &[f64], _tp: &TimePoint) -> Result<Vec<f64>> {
                Ok(vec![f64::INFINITY, 0.0])
            }
        }
        let (t, _, g) = setup(5);
        let ctx = ScoreContext::new(&Exploding, &t, &g);
        let tp = TimePoint::from_lambda(0.5, 0.0);
        let err = run_corrector(&CorrectorConfig::default(), &[0.0; 2], &[0.0; 2], &tp, &ctx, &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        assert!(matches!(err, EmdError::Numerical(ref m) if m.contains("step 1")), "{err}");
    }
}
