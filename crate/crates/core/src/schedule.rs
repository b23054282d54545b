//! Variance-preserving noise schedules, noise-level sampling, forward
//! diffusion and the loss weightings.
//!
//! Noise levels are indexed by `t` in `(0, 1]` with `t -> 0` the clean end.
//! Under a variance-preserving schedule `alpha^2 = sigmoid(lambda)` and
//! `sigma^2 = sigmoid(-lambda)`, where `lambda = log(alpha^2 / sigma^2)` is
//! the log signal-to-noise ratio.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, EmdError, Result};

/// Conditioning level used by ImageNet-64-style x-prediction generators.
pub const LAMBDA_STAR_IMAGENET64: f64 = -3.2189;
pub const DEFAULT_LAMBDA_STAR: f64 = -3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `lambda` linear in `t`.
    #[default]
    LogSnrLinear,
    /// Cosine schedule, truncated to the configured `lambda` range.
    Cosine,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "log_snr_linear" | "linear" => Some(ScheduleKind::LogSnrLinear),
            "cosine" => Some(ScheduleKind::Cosine),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::LogSnrLinear => "log_snr_linear",
            ScheduleKind::Cosine => "cosine",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Fixed conditioning level of an x-prediction generator.
    pub lambda_star: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            kind: ScheduleKind::LogSnrLinear,
            lambda_min: -10.0,
            lambda_max: 10.0,
            lambda_star: DEFAULT_LAMBDA_STAR,
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// Cosine schedule position u in [0, 1] for a given lambda.
fn cosine_u(lambda: f64) -> f64 {
    (-lambda / 2.0).exp().atan() / FRAC_PI_2
}

impl ScheduleSpec {
    /// A degenerate range (`lambda_min == lambda_max`) is allowed and pins
    /// every draw to a single noise level.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("schedule.lambda_min", self.lambda_min),
            ("schedule.lambda_max", self.lambda_max),
            ("schedule.lambda_star", self.lambda_star),
        ] {
            if !v.is_finite() {
                return Err(EmdError::Config(format!("{name} must be finite")));
            }
        }
        if self.lambda_min > self.lambda_max {
            return Err(EmdError::Config(
                "schedule.lambda_min must not exceed schedule.lambda_max".into(),
            ));
        }
        Ok(())
    }

    pub fn lambda_of_t(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::LogSnrLinear => {
                self.lambda_max + (self.lambda_min - self.lambda_max) * t
            }
            ScheduleKind::Cosine => {
                let u0 = cosine_u(self.lambda_max);
                let u1 = cosine_u(self.lambda_min);
                let u = u0 + (u1 - u0) * t;
                -2.0 * (u * FRAC_PI_2).tan().ln()
            }
        }
    }

    pub fn t_of_lambda(&self, lambda: f64) -> f64 {
        if self.lambda_max == self.lambda_min {
            return 1.0;
        }
        match self.kind {
            ScheduleKind::LogSnrLinear => {
                (lambda - self.lambda_max) / (self.lambda_min - self.lambda_max)
            }
            ScheduleKind::Cosine => {
                let u0 = cosine_u(self.lambda_max);
                let u1 = cosine_u(self.lambda_min);
                (cosine_u(lambda) - u0) / (u1 - u0)
            }
        }
    }
}

/// A noise level with its cached schedule coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimePoint {
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub lambda: f64,
}

impl TimePoint {
    /// Coefficients at an explicit log-SNR. `lambda = +inf` gives the clean
    /// limit `alpha = 1, sigma = 0`.
    pub fn from_lambda(t: f64, lambda: f64) -> Self {
        TimePoint {
            t,
            alpha: sigmoid(lambda).sqrt(),
            sigma: sigmoid(-lambda).sqrt(),
            lambda,
        }
    }
}

pub fn time_point(spec: &ScheduleSpec, t: f64) -> Result<TimePoint> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(EmdError::Domain(format!("noise level t={t} outside (0, 1]")));
    }
    Ok(TimePoint::from_lambda(t, spec.lambda_of_t(t)))
}

/// Draws a noise level with `lambda` uniform on `[lambda_min, lambda_max]`.
pub fn sample_time<R: Rng + ?Sized>(spec: &ScheduleSpec, rng: &mut R) -> TimePoint {
    let u: f64 = rng.gen();
    let lambda = spec.lambda_max - (1.0 - u) * (spec.lambda_max - spec.lambda_min);
    let t = spec.t_of_lambda(lambda).clamp(f64::MIN_POSITIVE, 1.0);
    TimePoint::from_lambda(t, lambda)
}

/// `alpha * x0 + sigma * eps`.
pub fn diffuse(x0: &[f64], tp: &TimePoint, eps: &[f64]) -> Result<Vec<f64>> {
    dim_check("diffusion noise", x0.len(), eps.len())?;
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(x, e)| tp.alpha * x + tp.sigma * e)
        .collect())
}

/// Weighting of the generator objective across noise levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GenWeighting {
    /// `sigma^2 / alpha`
    #[default]
    SigmaSqOverAlpha,
    /// `sigma^2 / alpha^2`
    SigmaSqOverAlphaSq,
}

impl GenWeighting {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sigma2_over_alpha" => Some(GenWeighting::SigmaSqOverAlpha),
            "sigma2_over_alpha2" => Some(GenWeighting::SigmaSqOverAlphaSq),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GenWeighting::SigmaSqOverAlpha => "sigma2_over_alpha",
            GenWeighting::SigmaSqOverAlphaSq => "sigma2_over_alpha2",
        }
    }
}

/// Weighting of the score-matching objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreWeighting {
    /// Plain score MSE, `w = 1`.
    Unit,
    /// `w = sigma^2`, i.e. MSE on the predicted noise.
    #[default]
    SigmaSq,
}

impl ScoreWeighting {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "unit" => Some(ScoreWeighting::Unit),
            "sigma2" => Some(ScoreWeighting::SigmaSq),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScoreWeighting::Unit => "unit",
            ScoreWeighting::SigmaSq => "sigma2",
        }
    }
}

pub fn gen_weight(choice: GenWeighting, tp: &TimePoint) -> f64 {
    let s2 = tp.sigma * tp.sigma;
    match choice {
        GenWeighting::SigmaSqOverAlpha => s2 / tp.alpha,
        GenWeighting::SigmaSqOverAlphaSq => s2 / (tp.alpha * tp.alpha),
    }
}

/// Conditioning features a network sees for a noise level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFeatures {
    /// `[lambda / 10]`
    #[default]
    Scaled,
    /// `[lambda / 10]` plus four fixed sinusoids of `lambda`.
    ScaledSinusoidal,
}

impl NoiseFeatures {
    pub fn width(self) -> usize {
        match self {
            NoiseFeatures::Scaled => 1,
            NoiseFeatures::ScaledSinusoidal => 5,
        }
    }

    pub fn features(self, lambda: f64) -> Vec<f64> {
        let s = lambda / 10.0;
        match self {
            NoiseFeatures::Scaled => vec![s],
            NoiseFeatures::ScaledSinusoidal => {
                let w = std::f64::consts::PI * s;
                vec![s, w.sin(), w.cos(), (2.0 * w).sin(), (2.0 * w).cos()]
            }
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "scaled" => Some(NoiseFeatures::Scaled),
            "scaled_sinusoidal" => Some(NoiseFeatures::ScaledSinusoidal),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseFeatures::Scaled => "scaled",
            NoiseFeatures::ScaledSinusoidal => "scaled_sinusoidal",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn lambda_zero_is_balanced() {
        let tp = TimePoint::from_lambda(0.5, 0.0);
        assert!((tp.alpha - INV_SQRT2).abs() < 1e-15);
        assert!((tp.sigma - INV_SQRT2).abs() < 1e-15);
    }

    #[test]
    fn clean_limit() {
        let tp = TimePoint::from_lambda(0.0, f64::INFINITY);
        assert_eq!(tp.alpha, 1.0);
        assert_eq!(tp.sigma, 0.0);
        let big = TimePoint::from_lambda(0.0, 60.0);
        assert!((big.alpha - 1.0).abs() < 1e-15 && big.sigma < 1e-12);
    }

    #[test]
    fn linear_midpoint() {
        let spec = ScheduleSpec::default();
        let tp = time_point(&spec, 0.5).unwrap();
        assert_eq!(tp.lambda, 0.0);
        assert!(matches!(time_point(&spec, 0.0), Err(EmdError::Domain(_))));
        assert!(matches!(time_point(&spec, 1.5), Err(EmdError::Domain(_))));
        assert!(time_point(&spec, 1.0).is_ok());
    }

    #[test]
    fn degenerate_range_pins_lambda() {
        let spec = ScheduleSpec {
            lambda_min: 1.5,
            lambda_max: 1.5,
            ..Default::default()
        };
        spec.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_time(&spec, &mut rng).lambda, 1.5);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let spec = ScheduleSpec::default();
        let a: Vec<f64> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..10).map(|_| sample_time(&spec, &mut r).lambda).collect()
        };
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let b: Vec<f64> = (0..10).map(|_| sample_time(&spec, &mut r).lambda).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn sampled_lambda_histogram_is_uniform() {
        // 20 equal bins under the exact uniform CDF: each count is
        // Binomial(n, 1/20); allow 3 standard deviations.
        for kind in [ScheduleKind::LogSnrLinear, ScheduleKind::Cosine] {
            let spec = ScheduleSpec {
                kind,
                ..Default::default()
            };
            let n = 100_000;
            let bins = 20;
            let mut counts = vec![0usize; bins];
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            for _ in 0..n {
                let tp = sample_time(&spec, &mut rng);
                assert!(tp.t > 0.0 && tp.t <= 1.0);
                let u = (tp.lambda - spec.lambda_min) / (spec.lambda_max - spec.lambda_min);
                counts[((u * bins as f64) as usize).min(bins - 1)] += 1;
            }
            let p = 1.0 / bins as f64;
            let mean = n as f64 * p;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            for c in counts {
                assert!((c as f64 - mean).abs() <= 3.0 * sd + 1.0, "{kind:?}: {c}");
            }
        }
    }

    #[test]
    fn diffuse_examples() {
        let tp = TimePoint::from_lambda(0.5, 0.0);
        let x = diffuse(&[1.0, 0.0], &tp, &[0.0, 1.0]).unwrap();
        assert!((x[0] - INV_SQRT2).abs() < 1e-15 && (x[1] - INV_SQRT2).abs() < 1e-15);
        let clean = TimePoint::from_lambda(0.0, f64::INFINITY);
        assert_eq!(diffuse(&[3.0, -1.0], &clean, &[5.0, 5.0]).unwrap(), vec![3.0, -1.0]);
        let tp = TimePoint::from_lambda(0.3, 2.0);
        assert_eq!(
            diffuse(&[0.0, 0.0], &tp, &[2.0, -1.0]).unwrap(),
            vec![2.0 * tp.sigma, -tp.sigma]
        );
        assert!(diffuse(&[1.0], &tp, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn gen_weight_examples() {
        let tp = TimePoint::from_lambda(0.5, 0.0);
        assert!((gen_weight(GenWeighting::SigmaSqOverAlpha, &tp) - INV_SQRT2).abs() < 1e-15);
        assert!((gen_weight(GenWeighting::SigmaSqOverAlphaSq, &tp) - 1.0).abs() < 1e-15);
        let clean = TimePoint::from_lambda(0.0, 50.0);
        assert!(gen_weight(GenWeighting::SigmaSqOverAlpha, &clean) < 1e-20);
        assert!(gen_weight(GenWeighting::SigmaSqOverAlphaSq, &clean) < 1e-20);
    }

    #[test]
    fn variance_preserving_at_many_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [ScheduleKind::LogSnrLinear, ScheduleKind::Cosine] {
            let spec = ScheduleSpec {
                kind,
                ..Default::default()
            };
            for _ in 0..10_000 {
                let t: f64 = 1.0 - rng.gen::<f64>();
                let tp = time_point(&spec, t).unwrap();
                assert!((tp.alpha.powi(2) + tp.sigma.powi(2) - 1.0).abs() < 1e-12);
                let lam = (tp.alpha.powi(2) / tp.sigma.powi(2)).ln();
                assert!((lam - tp.lambda).abs() < 1e-10, "{lam} vs {}", tp.lambda);
                assert!(gen_weight(GenWeighting::SigmaSqOverAlpha, &tp) > 0.0);
            }
        }
    }

    #[test]
    fn cosine_endpoints_match_range() {
        let spec = ScheduleSpec {
            kind: ScheduleKind::Cosine,
            ..Default::default()
        };
        assert!((spec.lambda_of_t(0.0) - 10.0).abs() < 1e-9);
        assert!((spec.lambda_of_t(1.0) + 10.0).abs() < 1e-9);
        assert!((spec.t_of_lambda(spec.lambda_of_t(0.37)) - 0.37).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn lambda_strictly_decreasing(a in 1e-6f64..1.0, b in 1e-6f64..1.0, cosine in any::<bool>()) {
            prop_assume!((a - b).abs() > 1e-9);
            let spec = ScheduleSpec {
                kind: if cosine { ScheduleKind::Cosine } else { ScheduleKind::LogSnrLinear },
                ..Default::default()
            };
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(spec.lambda_of_t(lo) > spec.lambda_of_t(hi));
        }

        #[test]
        fn diffuse_is_affine(
            x in proptest::collection::vec(-5.0f64..5.0, 3),
            y in proptest::collection::vec(-5.0f64..5.0, 3),
            e in proptest::collection::vec(-3.0f64..3.0, 3),
            a in -2.0f64..2.0, b in -2.0f64..2.0, lam in -10.0f64..10.0,
        ) {
            let tp = TimePoint::from_lambda(0.5, lam);
            let combo: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
            let eps_combo: Vec<f64> = e.iter().map(|v| (a + b) * v).collect();
            let lhs = diffuse(&combo, &tp, &eps_combo).unwrap();
            let dx = diffuse(&x, &tp, &e).unwrap();
            let dy = diffuse(&y, &tp, &e).unwrap();
            for i in 0..3 {
                prop_assert!((lhs[i] - (a * dx[i] + b * dy[i])).abs() < 1e-12);
            }
        }
    }
}
