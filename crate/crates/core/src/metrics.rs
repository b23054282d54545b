//! Sample-based comparison of a generator against a mixture teacher.

use serde::{Deserialize, Serialize};

use crate::error::{EmdError, Result};
use crate::teacher::MixtureTeacher;
use crate::tensornet::linalg::sq_dist;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance of the pooled samples.
    Median,
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::Median
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRecall {
    pub recall: f64,
    pub hits: Vec<usize>,
}

/// Fraction of teacher modes with at least one sample within `radius` of the
/// mode mean. Each sample counts towards every mode it is close to.
pub fn mode_recall(samples: &[Vec<f64>], teacher: &MixtureTeacher, radius: f64) -> Result<ModeRecall> {
    if samples.is_empty() {
        return Err(EmdError::Domain("mode recall needs at least one sample".into()));
    }
    if !(radius > 0.0) {
        return Err(EmdError::Domain(format!("mode recall radius must be positive, got {radius}")));
    }
    let r2 = radius * radius;
    let means = teacher.means();
    let mut hits = vec![0usize; means.len()];
    for s in samples {
        for (h, m) in hits.iter_mut().zip(&means) {
            if sq_dist(s, m) <= r2 {
                *h += 1;
            }
        }
    }
    let covered = hits.iter().filter(|h| **h > 0).count();
    Ok(ModeRecall {
        recall: covered as f64 / means.len() as f64,
        hits,
    })
}

/// Three times the largest component standard deviation.
pub fn default_recall_radius(teacher: &MixtureTeacher) -> f64 {
    3.0 * teacher.max_component_std()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median pairwise Euclidean distance over the pooled sets. Pools larger than
/// 1000 points are thinned with a fixed stride.
pub fn median_heuristic(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let stride = pooled.len().div_ceil(1000).max(1);
    let pts: Vec<&Vec<f64>> = pooled.into_iter().step_by(stride).collect();
    let mut d = Vec::with_capacity(pts.len() * pts.len() / 2);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            d.push(sq_dist(pts[i], pts[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let m = median(d);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

fn resolve(bw: Bandwidth, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let h = match bw {
        Bandwidth::Fixed(h) => h,
        Bandwidth::Median => median_heuristic(a, b),
    };
    if h > 0.0 && h.is_finite() {
        Ok(h)
    } else {
        Err(EmdError::Domain(format!("kernel bandwidth must be positive, got {h}")))
    }
}

fn kernel_sum(a: &[Vec<f64>], b: &[Vec<f64>], inv: f64, skip_diag: bool) -> f64 {
    let mut s = 0.0;
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            if skip_diag && i == j {
                continue;
            }
            s += (-sq_dist(x, y) * inv).exp();
        }
    }
    s
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(EmdError::Domain("MMD needs two non-empty sample sets".into()));
    }
    Ok(())
}

/// Unbiased Gaussian-kernel MMD^2, `k(x, y) = exp(-|x - y|^2 / (2 h^2))`.
/// May be negative; the within-set sums need two points per set.
pub fn mmd_unbiased(a: &[Vec<f64>], b: &[Vec<f64>], bandwidth: Bandwidth) -> Result<f64> {
    check_sets(a, b)?;
    if a.len() < 2 || b.len() < 2 {
        return Err(EmdError::Domain("unbiased MMD needs at least two samples per set".into()));
    }
    let h = resolve(bandwidth, a, b)?;
    let inv = 1.0 / (2.0 * h * h);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let kaa = kernel_sum(a, a, inv, true) / (n * (n - 1.0));
    let kbb = kernel_sum(b, b, inv, true) / (m * (m - 1.0));
    let kab = kernel_sum(a, b, inv, false) / (n * m);
    Ok(kaa + kbb - 2.0 * kab)
}

/// Biased (V-statistic) MMD^2; never negative up to rounding.
pub fn mmd_biased(a: &[Vec<f64>], b: &[Vec<f64>], bandwidth: Bandwidth) -> Result<f64> {
    check_sets(a, b)?;
    let h = resolve(bandwidth, a, b)?;
    let inv = 1.0 / (2.0 * h * h);
    let (n, m) = (a.len() as f64, b.len() as f64);
    Ok(kernel_sum(a, a, inv, false) / (n * n) + kernel_sum(b, b, inv, false) / (m * m)
        - 2.0 * kernel_sum(a, b, inv, false) / (n * m))
}

/// The unbiased estimate clipped at zero, as reported.
pub fn mmd(a: &[Vec<f64>], b: &[Vec<f64>], bandwidth: Bandwidth) -> Result<f64> {
    Ok(mmd_unbiased(a, b, bandwidth)?.max(0.0))
}

/// Euclidean error of the sample mean and Frobenius error of the sample
/// covariance (unbiased) against the analytic mixture moments.
pub fn moment_error(samples: &[Vec<f64>], teacher: &MixtureTeacher) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(EmdError::Domain("moment error needs at least two samples".into()));
    }
    let d = teacher.dim();
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        crate::error::dim_check("sample", d, s.len())?;
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n;
        }
    }
    let mut cov = vec![0.0; d * d];
    for s in samples {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (s[i] - mean[i]) * (s[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    let mean_err = sq_dist(&mean, &teacher.mean()).sqrt();
    let cov_err = sq_dist(&cov, &teacher.covariance()).sqrt();
    Ok((mean_err, cov_err))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall: f64,
    pub hits: Vec<usize>,
    pub mean_error: f64,
    pub cov_error: f64,
    pub mmd: f64,
    pub n: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap_or_default()
    }
}

/// Full report for `samples` against `teacher`, with MMD measured against
/// `reference` (typically exact teacher samples).
pub fn evaluate(
    samples: &[Vec<f64>],
    reference: &[Vec<f64>],
    teacher: &MixtureTeacher,
    radius: f64,
    bandwidth: Bandwidth,
) -> Result<EvalReport> {
    let rec = mode_recall(samples, teacher, radius)?;
    let (mean_error, cov_error) = moment_error(samples, teacher)?;
    let mmd = mmd(samples, reference, bandwidth)?;
    let report = EvalReport {
        recall: rec.recall,
        hits: rec.hits,
        mean_error,
        cov_error,
        mmd,
        n: samples.len(),
    };
    if [report.recall, report.mean_error, report.cov_error, report.mmd]
        .iter()
        .all(|v| v.is_finite())
    {
        Ok(report)
    } else {
        Err(EmdError::Numerical("evaluation produced a non-finite metric".into()))
    }
}
