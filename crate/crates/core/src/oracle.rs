//! Independent references: finite differences, the EM gradient identity on a
//! linear-Gaussian latent model, the discretized Langevin stationary variance
//! and an online-drift form of the corrector.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corrector::{CorrectorConfig, NoiseLedger, ScoreContext};
use crate::error::{EmdError, Result};
use crate::schedule::TimePoint;

/// `x = theta * z + sigma_obs * n` with `z, n ~ N(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianModel {
    pub theta: f64,
    pub sigma_obs: f64,
}

impl LinearGaussianModel {
    pub fn new(theta: f64, sigma_obs: f64) -> Result<Self> {
        if !(sigma_obs > 0.0) || !theta.is_finite() || !sigma_obs.is_finite() {
            return Err(EmdError::Domain(format!(
                "linear-Gaussian model needs finite theta and sigma_obs > 0, got ({theta}, {sigma_obs})"
            )));
        }
        Ok(LinearGaussianModel { theta, sigma_obs })
    }

    pub fn marginal_variance(&self) -> f64 {
        self.theta * self.theta + self.sigma_obs * self.sigma_obs
    }

    /// Mean and variance of `p(z | x)`.
    pub fn posterior(&self, x: f64) -> (f64, f64) {
        let v = self.marginal_variance();
        (self.theta * x / v, self.sigma_obs * self.sigma_obs / v)
    }

    /// `d/dtheta log p(x, z)`.
    pub fn joint_grad(&self, x: f64, z: f64) -> f64 {
        (x - self.theta * z) * z / (self.sigma_obs * self.sigma_obs)
    }

    /// `d/dz log p(z | x)`.
    pub fn posterior_score(&self, x: f64, z: f64) -> f64 {
        self.theta * (x - self.theta * z) / (self.sigma_obs * self.sigma_obs) - z
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                let e: f64 = StandardNormal.sample(rng);
                self.theta * z + self.sigma_obs * e
            })
            .collect()
    }
}

/// Exact `d/dtheta` of the marginal log-likelihood, averaged over `data`.
pub fn em_gradient_closed_form(m: &LinearGaussianModel, data: &[f64]) -> Result<f64> {
    if data.is_empty() {
        return Err(EmdError::Domain("closed-form EM gradient needs data".into()));
    }
    let v = m.marginal_variance();
    let s: f64 = data.iter().map(|x| m.theta * (x * x - v) / (v * v)).sum();
    Ok(s / data.len() as f64)
}

/// Monte-Carlo estimate and standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

fn summarize(terms: &[f64]) -> McEstimate {
    let n = terms.len() as f64;
    let mean = terms.iter().sum::<f64>() / n;
    let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
    McEstimate {
        estimate: mean,
        std_error: (var / n).sqrt(),
    }
}

/// Expected joint-likelihood gradient under exact posterior draws. Draw `j`
/// uses datum `j mod |data|`, so with `n` a multiple of `|data|` every datum
/// carries equal weight.
pub fn em_gradient_mc<R: Rng + ?Sized>(
    m: &LinearGaussianModel,
    data: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if n < 2 || data.is_empty() {
        return Err(EmdError::Domain(format!(
            "Monte-Carlo EM gradient needs n >= 2 and data, got n = {n}"
        )));
    }
    let terms: Vec<f64> = (0..n)
        .map(|j| {
            let x = data[j % data.len()];
            let (mu, var) = m.posterior(x);
            let e: f64 = StandardNormal.sample(rng);
            m.joint_grad(x, mu + var.sqrt() * e)
        })
        .collect();
    Ok(summarize(&terms))
}

/// As [`em_gradient_mc`] but with posterior draws from `steps` unadjusted
/// Langevin steps of squared step size `gamma`, started from the prior.
pub fn em_gradient_langevin<R: Rng + ?Sized>(
    m: &LinearGaussianModel,
    data: &[f64],
    n: usize,
    steps: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<McEstimate> {
    if n < 2 || data.is_empty() {
        return Err(EmdError::Domain(format!(
            "Monte-Carlo EM gradient needs n >= 2 and data, got n = {n}"
        )));
    }
    if !(gamma > 0.0) {
        return Err(EmdError::Domain(format!("Langevin step must be positive, got {gamma}")));
    }
    let root = (2.0 * gamma).sqrt();
    let terms: Vec<f64> = (0..n)
        .map(|j| {
            let x = data[j % data.len()];
            let mut z: f64 = StandardNormal.sample(rng);
            for _ in 0..steps {
                let e: f64 = StandardNormal.sample(rng);
                z += gamma * m.posterior_score(x, z) + root * e;
            }
            m.joint_grad(x, z)
        })
        .collect();
    Ok(summarize(&terms))
}

/// Stationary variance of `e <- (1 - gamma) e + sqrt(2 gamma) n`.
pub fn langevin_stationary_variance(gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 2.0) {
        return Err(EmdError::Domain(format!(
            "stationary variance needs gamma in (0, 2), got {gamma}"
        )));
    }
    Ok(1.0 / (1.0 - gamma / 2.0))
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(EmdError::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Corrector in `(eps, z)` space that never subtracts noise. It carries the
/// drift `d <- (1 - gamma) d + gamma sigma delta_k` alongside the chain and
/// returns `g(z^K) + (sigma / alpha) d_K`. With full cancellation the
/// production corrector must agree with this.
pub fn online_drift_corrector(
    cfg: &CorrectorConfig,
    z0: &[f64],
    tp: &TimePoint,
    ctx: &ScoreContext<'_>,
    ledger: &NoiseLedger,
) -> Result<Vec<f64>> {
    let g = ctx.generator;
    let gamma = cfg.gamma_eps;
    let mut eps = ledger.eps0.clone();
    let mut z = z0.to_vec();
    let mut drift = vec![0.0; eps.len()];
    for k in 0..cfg.steps {
        let gz = g.generate(&z)?;
        let x: Vec<f64> = (0..eps.len())
            .map(|i| tp.alpha * gz[i] + tp.sigma * eps[i])
            .collect();
        let delta = ctx.score_gap(&x, tp)?;
        if cfg.sample_z {
            let cot: Vec<f64> = delta.iter().map(|d| tp.alpha * d).collect();
            let pulled = g.vjp(&z, &cot)?;
            for i in 0..z.len() {
                let score = pulled[i] - z[i];
                z[i] += cfg.gamma_z * score + (2.0 * cfg.gamma_z).sqrt() * ledger.z_noises[k][i];
            }
        }
        for i in 0..eps.len() {
            let push = gamma * tp.sigma * delta[i];
            eps[i] = (1.0 - gamma) * eps[i] + push + (2.0 * gamma).sqrt() * ledger.noises[k][i];
            drift[i] = (1.0 - gamma) * drift[i] + push;
        }
    }
    let gz = g.generate(&z)?;
    Ok(gz
        .iter()
        .zip(&drift)
        .map(|(gi, d)| gi + tp.sigma / tp.alpha * d)
        .collect())
}
