//! Target distributions with exact diffused scores.
//!
//! A Gaussian mixture stays a Gaussian mixture under the forward process:
//! at noise level `(alpha, sigma)` component `k` becomes
//! `N(alpha * mu_k, alpha^2 * Sigma_k + sigma^2 I)`. Scores and log densities
//! are computed from that closed form with log-space responsibilities.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, WeightedIndex};

use crate::error::{dim_check, EmdError, Result};
use crate::rng::normal_vec;
use crate::schedule::{ScheduleSpec, TimePoint};
use crate::student::{dsm_step, NeuralScore};
use crate::tensornet::linalg::{backward_solve_t, cholesky, forward_solve, log_det_cholesky, log_sum_exp};
use crate::tensornet::{AdamConfig, AdamState};

/// Anything that can report `grad_x log p_t(x)` at a noise level.
pub trait ScoreModel {
    fn dim(&self) -> usize;
    fn score(&self, x: &[f64], tp: &TimePoint) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    /// Per-coordinate variances.
    Diagonal(Vec<f64>),
    /// Row-major `d x d` symmetric positive definite matrix.
    Full(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Covariance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureTeacher {
    dim: usize,
    components: Vec<Component>,
    log_weights: Vec<f64>,
    // Cholesky factors of the undiffused covariances, used for sampling.
    chol: Vec<Vec<f64>>,
}

impl MixtureTeacher {
    /// Weights must be non-negative with at least one positive entry and sum
    /// to one within `1e-6`; they are renormalized exactly.
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| EmdError::Config("mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(EmdError::Config("mixture dimension must be positive".into()));
        }
        let mut total = 0.0;
        let mut chol = Vec::with_capacity(components.len());
        for (k, c) in components.iter().enumerate() {
            if !(c.weight >= 0.0) || !c.weight.is_finite() {
                return Err(EmdError::Config(format!("component {k}: invalid weight {}", c.weight)));
            }
            total += c.weight;
            dim_check(&format!("component {k} mean"), dim, c.mean.len())?;
            let full = match &c.cov {
                Covariance::Diagonal(v) => {
                    dim_check(&format!("component {k} covariance diagonal"), dim, v.len())?;
                    let mut m = vec![0.0; dim * dim];
                    for (i, vi) in v.iter().enumerate() {
                        m[i * dim + i] = *vi;
                    }
                    m
                }
                Covariance::Full(m) => {
                    dim_check(&format!("component {k} covariance"), dim * dim, m.len())?;
                    for i in 0..dim {
                        for j in 0..i {
                            if (m[i * dim + j] - m[j * dim + i]).abs() > 1e-12 {
                                return Err(EmdError::Config(format!(
                                    "component {k}: covariance is not symmetric"
                                )));
                            }
                        }
                    }
                    m.clone()
                }
            };
            let l = cholesky(&full, dim)
                .map_err(|_| EmdError::Config(format!("component {k}: covariance is not SPD")))?;
            chol.push(l);
        }
        if !(total > 0.0) || (total - 1.0).abs() > 1e-6 {
            return Err(EmdError::Config(format!("mixture weights sum to {total}, expected 1")));
        }
        let mut components = components;
        for c in &mut components {
            c.weight /= total;
        }
        let log_weights = components.iter().map(|c| c.weight.ln()).collect();
        Ok(MixtureTeacher {
            dim,
            components,
            log_weights,
            chol,
        })
    }

    /// `n` isotropic components of variance `var`, equally weighted and evenly
    /// spaced on a circle of the given radius in the plane.
    pub fn ring(n: usize, radius: f64, var: f64) -> Result<Self> {
        let comps = (0..n)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / n as f64;
                Component {
                    weight: 1.0 / n as f64,
                    mean: vec![radius * a.cos(), radius * a.sin()],
                    cov: Covariance::Diagonal(vec![var, var]),
                }
            })
            .collect();
        Self::new(comps)
    }

    /// Eight modes of covariance `0.01 I` on the radius-2 circle.
    pub fn ring8() -> Self {
        Self::ring(8, 2.0, 0.01).expect("valid builtin mixture")
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::new(vec![Component {
            weight: 1.0,
            mean: vec![0.0; dim],
            cov: Covariance::Diagonal(vec![1.0; dim]),
        }])
        .expect("valid builtin mixture")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        self.components.iter().map(|c| c.mean.clone()).collect()
    }

    /// Largest per-coordinate standard deviation over all components.
    pub fn max_component_std(&self) -> f64 {
        let d = self.dim;
        self.components
            .iter()
            .flat_map(|c| match &c.cov {
                Covariance::Diagonal(v) => v.clone(),
                Covariance::Full(m) => (0..d).map(|i| m[i * d + i]).collect(),
            })
            .fold(0.0, f64::max)
            .sqrt()
    }

    fn cov_entry(c: &Component, d: usize, i: usize, j: usize) -> f64 {
        match &c.cov {
            Covariance::Diagonal(v) => {
                if i == j {
                    v[i]
                } else {
                    0.0
                }
            }
            Covariance::Full(m) => m[i * d + j],
        }
    }

    /// Mean of the undiffused mixture.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for c in &self.components {
            for (mi, ci) in m.iter_mut().zip(&c.mean) {
                *mi += c.weight * ci;
            }
        }
        m
    }

    /// Row-major covariance of the undiffused mixture.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let mean = self.mean();
        let mut out = vec![0.0; d * d];
        for c in &self.components {
            for i in 0..d {
                for j in 0..d {
                    let dm = (c.mean[i] - mean[i]) * (c.mean[j] - mean[j]);
                    out[i * d + j] += c.weight * (Self::cov_entry(c, d, i, j) + dm);
                }
            }
        }
        out
    }

    // Per-component log density of the diffused mixture and its score term
    // `-C^{-1}(x - alpha mu)`.
    fn component_terms(&self, x: &[f64], tp: &TimePoint) -> Vec<(f64, Vec<f64>)> {
        let d = self.dim;
        let (a2, s2) = (tp.alpha * tp.alpha, tp.sigma * tp.sigma);
        let log2pi = (2.0 * PI).ln();
        self.components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, &lw)| {
                let r: Vec<f64> = x.iter().zip(&c.mean).map(|(xi, mi)| xi - tp.alpha * mi).collect();
                match &c.cov {
                    Covariance::Diagonal(v) => {
                        let mut quad = 0.0;
                        let mut logdet = 0.0;
                        let g: Vec<f64> = r
                            .iter()
                            .zip(v)
                            .map(|(ri, vi)| {
                                let var = a2 * vi + s2;
                                quad += ri * ri / var;
                                logdet += var.ln();
                                -ri / var
                            })
                            .collect();
                        (lw - 0.5 * (quad + logdet + d as f64 * log2pi), g)
                    }
                    Covariance::Full(m) => {
                        let mut cdiff: Vec<f64> = m.iter().map(|v| a2 * v).collect();
                        for i in 0..d {
                            cdiff[i * d + i] += s2;
                        }
                        let l = cholesky(&cdiff, d).expect("diffused SPD covariance");
                        let y = forward_solve(&l, d, &r);
                        let quad: f64 = y.iter().map(|v| v * v).sum();
                        let sol = backward_solve_t(&l, d, &y);
                        let logdet = log_det_cholesky(&l, d);
                        (
                            lw - 0.5 * (quad + logdet + d as f64 * log2pi),
                            sol.into_iter().map(|v| -v).collect(),
                        )
                    }
                }
            })
            .collect()
    }

    /// Exact log density of the diffused mixture.
    pub fn log_density(&self, x: &[f64], tp: &TimePoint) -> Result<f64> {
        dim_check("teacher query point", self.dim, x.len())?;
        let terms: Vec<f64> = self.component_terms(x, tp).into_iter().map(|t| t.0).collect();
        Ok(log_sum_exp(&terms))
    }

    /// Exact `grad log q_t(x)`.
    pub fn score(&self, x: &[f64], tp: &TimePoint) -> Result<Vec<f64>> {
        dim_check("teacher query point", self.dim, x.len())?;
        let terms = self.component_terms(x, tp);
        let logs: Vec<f64> = terms.iter().map(|t| t.0).collect();
        let norm = log_sum_exp(&logs);
        let mut out = vec![0.0; self.dim];
        for (lp, g) in &terms {
            let r = (lp - norm).exp();
            if r == 0.0 {
                continue;
            }
            for (o, gi) in out.iter_mut().zip(g) {
                *o += r * gi;
            }
        }
        Ok(out)
    }

    /// Posterior mean `E[x0 | x_t]` by Tweedie's formula.
    pub fn denoise(&self, x: &[f64], tp: &TimePoint) -> Result<Vec<f64>> {
        if tp.alpha == 0.0 {
            return Err(EmdError::Domain("cannot denoise at alpha = 0".into()));
        }
        let s = self.score(x, tp)?;
        Ok(x.iter()
            .zip(&s)
            .map(|(xi, si)| (xi + tp.sigma * tp.sigma * si) / tp.alpha)
            .collect())
    }

    /// Ancestral samples: a component by weight, then a Gaussian draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Vec<f64>> {
        let d = self.dim;
        let picker = WeightedIndex::new(self.components.iter().map(|c| c.weight))
            .expect("validated weights");
        (0..n)
            .map(|_| {
                let k = picker.sample(rng);
                let z = normal_vec(rng, d);
                let l = &self.chol[k];
                (0..d)
                    .map(|i| self.components[k].mean[i] + (0..=i).map(|j| l[i * d + j] * z[j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    /// Parses the plain-text teacher format described in the README.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut dim: Option<usize> = None;
        let mut comps: Vec<(Option<f64>, Option<Vec<f64>>, Option<Vec<f64>>)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| EmdError::Parse(format!("line {}: {msg}", lineno + 1));
            if line == "[component]" {
                comps.push((None, None, None));
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let list = || -> Result<Vec<f64>> {
                value
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| err(format!("bad number in `{value}`"))))
                    .collect()
            };
            match (key, comps.last_mut()) {
                ("dim", None) => {
                    dim = Some(value.parse().map_err(|_| err(format!("bad dim `{value}`")))?)
                }
                ("weight", Some(c)) => {
                    c.0 = Some(value.parse().map_err(|_| err(format!("bad weight `{value}`")))?)
                }
                ("mean", Some(c)) => c.1 = Some(list()?),
                ("cov_diag", Some(c)) => c.2 = Some(list()?),
                _ => return Err(err(format!("unexpected key `{key}`"))),
            }
        }
        let dim = dim.ok_or_else(|| EmdError::Parse("missing `dim`".into()))?;
        let components = comps
            .into_iter()
            .enumerate()
            .map(|(k, (w, m, c))| {
                let missing = |f: &str| EmdError::Parse(format!("component {k}: missing `{f}`"));
                Ok(Component {
                    weight: w.ok_or_else(|| missing("weight"))?,
                    mean: m.ok_or_else(|| missing("mean"))?,
                    cov: Covariance::Diagonal(c.ok_or_else(|| missing("cov_diag"))?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let t = Self::new(components)?;
        dim_check("declared teacher dim", dim, t.dim)?;
        Ok(t)
    }

    /// Writes the plain-text format. Full covariances have no text form.
    pub fn to_spec(&self) -> Result<String> {
        let mut s = format!("dim = {}\n", self.dim);
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
        for c in &self.components {
            let Covariance::Diagonal(v) = &c.cov else {
                return Err(EmdError::Config("full covariances cannot be written as text".into()));
            };
            let _ = write!(
                s,
                "\n[component]\nweight = {:?}\nmean = {}\ncov_diag = {}\n",
                c.weight,
                join(&c.mean),
                join(v)
            );
        }
        Ok(s)
    }
}

impl ScoreModel for MixtureTeacher {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: &[f64], tp: &TimePoint) -> Result<Vec<f64>> {
        MixtureTeacher::score(self, x, tp)
    }
}

/// Settings for fitting a neural teacher by denoising score matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuralTeacherConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

/// Fits an epsilon-prediction network to `dataset` by denoising score
/// matching. The result plugs in anywhere a [`ScoreModel`] is expected.
pub fn train_neural_teacher<R: Rng + ?Sized>(
    dataset: &[Vec<f64>],
    mut model: NeuralScore,
    spec: &ScheduleSpec,
    cfg: &NeuralTeacherConfig,
    rng: &mut R,
) -> Result<NeuralScore> {
    if dataset.is_empty() {
        return Err(EmdError::Config("neural teacher dataset is empty".into()));
    }
    let mut opt = AdamState::new(cfg.adam, model.net.n_params());
    for step in 0..cfg.steps {
        let mut x0 = Vec::with_capacity(cfg.batch_size);
        let mut tps = Vec::with_capacity(cfg.batch_size);
        let mut eps = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            x0.push(dataset[rng.gen_range(0..dataset.len())].clone());
            tps.push(crate::schedule::sample_time(spec, rng));
            eps.push(normal_vec(rng, model.dim()));
        }
        let loss = dsm_step(&mut model, &x0, &tps, &eps, &mut opt)?;
        if !loss.is_finite() {
            return Err(EmdError::Numerical(format!(
                "neural teacher loss diverged at step {step}"
            )));
        }
    }
    Ok(model)
}
