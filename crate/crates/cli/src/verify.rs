//! Seeded identity and property checks behind `emd verify`.

use std::fmt::Write as _;

use emd_core::corrector::{run_corrector_with_ledger, CorrectorFault, NoiseLedger};
use emd_core::oracle::{
    em_gradient_closed_form, em_gradient_mc, finite_diff_grad, langevin_stationary_variance,
    online_drift_corrector,
};
use emd_core::rng::normal_vec;
use emd_core::schedule::{GenWeighting, NoiseFeatures, TimePoint};
use emd_core::{
    emd1_generator_gradient, generator_loss_and_grad, vsd_target, Activation, CorrectedBatch,
    CorrectorConfig, CorrectorSpace, FeedNet, Generator, GeneratorLoss, GeneratorMode,
    LinearGaussianModel, MixtureTeacher, NeuralScore, Purpose, ScoreContext, StreamSeed,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    FlipCancellationSign,
}

impl Fault {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "flip-cancellation-sign" => Some(Fault::FlipCancellationSign),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn table(&self) -> String {
        let width = self.suites.iter().map(|s| s.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  result  detail\n", "suite");
        for s in &self.suites {
            let _ = writeln!(
                out,
                "{:<width$}  {:<6}  {}",
                s.name,
                if s.passed { "pass" } else { "FAIL" },
                s.detail
            );
        }
        out
    }
}

const SEED: StreamSeed = StreamSeed(0x5eed);

fn rng(element: u64) -> ChaCha8Rng {
    SEED.stream(Purpose::Verify, 0, element)
}

fn with_fault(mut cfg: CorrectorConfig, fault: Option<Fault>) -> CorrectorConfig {
    if let Some(Fault::FlipCancellationSign) = fault {
        cfg.fault = Some(CorrectorFault::FlipCancellationSign);
    }
    cfg
}

fn random_generator(r: &mut ChaCha8Rng) -> Generator {
    Generator::init(2, 2, &[12, 12], Activation::Silu, GeneratorMode::XPred, -3.0, NoiseFeatures::Scaled, r)
        .expect("valid widths")
}

fn random_student(r: &mut ChaCha8Rng) -> NeuralScore {
    NeuralScore::init(2, &[12], Activation::Tanh, NoiseFeatures::Scaled, r).expect("valid widths")
}

fn random_tp(r: &mut ChaCha8Rng) -> TimePoint {
    TimePoint::from_lambda(0.5, r.gen_range(-4.0..4.0))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gradients() -> SuiteResult {
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let mut r = rng(100 + trial);
        let depth = r.gen_range(1..4);
        let widths: Vec<usize> = (0..=depth).map(|_| r.gen_range(1..5)).collect();
        let cond = r.gen_range(0..3);
        let act = if trial % 2 == 0 { Activation::Silu } else { Activation::Tanh };
        let net = FeedNet::new(&widths, cond, act, &mut r).expect("valid widths");
        let x = normal_vec(&mut r, widths[0]);
        let c = normal_vec(&mut r, cond);
        let cot = normal_vec(&mut r, *widths.last().expect("non-empty"));
        let (grads, _) = net.backward(&x, &c, &cot).expect("shapes agree");
        let loss = |p: &[f64]| {
            let n = FeedNet::from_params(&widths, cond, act, p.to_vec()).expect("same shape");
            let y = n.forward(&x, &c).expect("shapes agree");
            y.iter().zip(&cot).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd = finite_diff_grad(loss, net.params(), 1e-5).expect("positive step");
        for (a, b) in grads.iter().zip(&fd) {
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-3));
        }
    }
    SuiteResult {
        name: "tensornet.gradients",
        passed: worst <= 1e-4,
        detail: format!("20 nets, max rel err {worst:.2e}"),
    }
}

fn em_identity() -> SuiteResult {
    let mut passes = 0;
    for trial in 0..20 {
        let mut r = rng(200 + trial);
        let m = LinearGaussianModel::new(r.gen_range(-2.0..2.0), r.gen_range(0.3..1.5)).expect("valid");
        let truth = LinearGaussianModel::new(r.gen_range(-2.0..2.0), r.gen_range(0.3..1.5)).expect("valid");
        let data = truth.sample(&mut r, 10);
        let exact = em_gradient_closed_form(&m, &data).expect("data");
        let est = em_gradient_mc(&m, &data, 10_000, &mut r).expect("n >= 2");
        if (est.estimate - exact).abs() <= 3.0 * est.std_error {
            passes += 1;
        }
    }
    SuiteResult {
        name: "oracle.em_identity",
        passed: passes >= 18,
        detail: format!("{passes}/20 within 3 standard errors"),
    }
}

fn cancellation(fault: Option<Fault>) -> SuiteResult {
    let teacher = MixtureTeacher::ring8();
    let mut worst: f64 = 0.0;
    for &k in &[1usize, 2, 4, 16, 64] {
        for seed in 0..3 {
            let mut r = rng(300 + 10 * k as u64 + seed);
            let g = random_generator(&mut r);
            let s = random_student(&mut r);
            let tp = random_tp(&mut r);
            let ctx = ScoreContext::new(&teacher, &s, &g);
            let cfg = with_fault(CorrectorConfig::from_step_sizes(k, 0.4, 0.004), fault);
            let z0 = normal_vec(&mut r, 2);
            let eps0 = normal_vec(&mut r, 2);
            let ledger = NoiseLedger::sample(&cfg, &eps0, 2, &mut r);
            let out = run_corrector_with_ledger(&cfg, &z0, &tp, &ctx, &ledger, None).expect("finite chain");
            let online = online_drift_corrector(&cfg, &z0, &tp, &ctx, &ledger).expect("finite chain");
            worst = worst.max(max_abs_diff(&out.x_hat, &online));
        }
    }
    SuiteResult {
        name: "corrector.cancellation",
        passed: worst <= 1e-10,
        detail: format!("K in {{1,2,4,16,64}}, max |diff| {worst:.2e}"),
    }
}

fn fixed_point(fault: Option<Fault>) -> SuiteResult {
    let teacher = MixtureTeacher::ring8();
    let mut worst: f64 = 0.0;
    for &k in &[0usize, 1, 5, 16, 64] {
        let mut r = rng(400 + k as u64);
        let g = random_generator(&mut r);
        let ctx = ScoreContext::new(&teacher, &teacher, &g);
        let mut cfg = with_fault(CorrectorConfig::from_step_sizes(k, 0.4, 0.004), fault);
        cfg.sample_z = false;
        let z0 = normal_vec(&mut r, 2);
        let eps0 = normal_vec(&mut r, 2);
        let ledger = NoiseLedger::sample(&cfg, &eps0, 2, &mut r);
        let out = run_corrector_with_ledger(&cfg, &z0, &random_tp(&mut r), &ctx, &ledger, None)
            .expect("finite chain");
        worst = worst.max(max_abs_diff(&out.x_hat, &g.generate(&z0).expect("shapes")));
    }
    SuiteResult {
        name: "corrector.fixed_point",
        passed: worst <= 1e-12,
        detail: format!("K in {{0,1,5,16,64}}, max |x_hat - g(z0)| {worst:.2e}"),
    }
}

fn route_equivalence(fault: Option<Fault>) -> SuiteResult {
    let teacher = MixtureTeacher::ring8();
    let mut worst: f64 = 0.0;
    let mut corrector_vs_closed: f64 = 0.0;
    for trial in 0..5 {
        let mut r = rng(500 + trial);
        let g = random_generator(&mut r);
        let s = random_student(&mut r);
        let ctx = ScoreContext::new(&teacher, &s, &g);
        let cfg = with_fault(CorrectorConfig::single_unit_step(), fault);
        let (mut zs, mut es, mut tps) = (Vec::new(), Vec::new(), Vec::new());
        let mut batch = CorrectedBatch::default();
        for _ in 0..8 {
            let (z, e, tp) = (normal_vec(&mut r, 2), normal_vec(&mut r, 2), random_tp(&mut r));
            let ledger = NoiseLedger::sample(&cfg, &e, 2, &mut r);
            let out = run_corrector_with_ledger(&cfg, &z, &tp, &ctx, &ledger, None).expect("finite");
            let closed = vsd_target(&z, &e, &tp, &ctx).expect("sigma > 0");
            corrector_vs_closed = corrector_vs_closed.max(max_abs_diff(&out.x_hat, &closed.x_hat));
            batch.push(out, tp);
            zs.push(z);
            es.push(e);
            tps.push(tp);
        }
        let (_, via_corrector) =
            generator_loss_and_grad(&g, &batch, GenWeighting::SigmaSqOverAlpha, GeneratorLoss::NoisySpace)
                .expect("batch");
        let direct = emd1_generator_gradient(&g, &s, &teacher, &zs, &es, &tps, GenWeighting::SigmaSqOverAlpha)
            .expect("batch");
        worst = worst.max(max_abs_diff(&via_corrector, &direct));
    }
    SuiteResult {
        name: "distill.emd1_route",
        passed: worst <= 1e-8 && corrector_vs_closed <= 1e-12,
        detail: format!("max grad diff {worst:.2e}, corrector vs closed form {corrector_vs_closed:.2e}"),
    }
}

fn reparameterization(fault: Option<Fault>) -> SuiteResult {
    let teacher = MixtureTeacher::ring8();
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut r = rng(600 + seed);
        let g = random_generator(&mut r);
        let s = random_student(&mut r);
        let tp = random_tp(&mut r);
        let ctx = ScoreContext::new(&teacher, &s, &g);
        let mut cfg = with_fault(CorrectorConfig::from_step_sizes(16, 0.4, 0.004), fault);
        cfg.sample_z = false;
        let z0 = normal_vec(&mut r, 2);
        let eps0 = normal_vec(&mut r, 2);
        let ledger = NoiseLedger::sample(&cfg, &eps0, 2, &mut r);
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut xz = cfg;
        xz.space = CorrectorSpace::XZ;
        run_corrector_with_ledger(&cfg, &z0, &tp, &ctx, &ledger, Some(&mut |_, x: &[f64]| a.push(x.to_vec())))
            .expect("finite chain");
        run_corrector_with_ledger(&xz, &z0, &tp, &ctx, &ledger, Some(&mut |_, x: &[f64]| b.push(x.to_vec())))
            .expect("finite chain");
        for (p, q) in a.iter().zip(&b) {
            worst = worst.max(max_abs_diff(p, q));
        }
    }
    SuiteResult {
        name: "corrector.reparameterization",
        passed: worst <= 1e-8,
        detail: format!("K = 16, max per-step |x diff| {worst:.2e}"),
    }
}

fn stationarity() -> SuiteResult {
    let teacher = MixtureTeacher::standard_normal(2);
    let g = Generator::new(
        FeedNet::zeros(&[2, 2], 0, Activation::Silu).expect("valid widths"),
        GeneratorMode::Direct,
        0.0,
        NoiseFeatures::Scaled,
    )
    .expect("no conditioning");
    let ctx = ScoreContext::new(&teacher, &teacher, &g);
    let tp = TimePoint::from_lambda(0.5, 0.0);
    let burn = 1000;
    let mut cfg = CorrectorConfig::from_step_sizes(burn + 50_000, 0.4, 0.0);
    cfg.sample_z = false;
    let mut r = rng(700);
    let eps0 = normal_vec(&mut r, 2);
    let ledger = NoiseLedger::sample(&cfg, &eps0, 2, &mut r);
    let (mut sum, mut sq, mut n) = (0.0, 0.0, 0.0);
    run_corrector_with_ledger(&cfg, &[0.0, 0.0], &tp, &ctx, &ledger, Some(&mut |k, x: &[f64]| {
        if k > burn {
            for v in x {
                let e = v / tp.sigma;
                sum += e;
                sq += e * e;
                n += 1.0;
            }
        }
    }))
    .expect("finite chain");
    let var = sq / n - (sum / n).powi(2);
    let want = langevin_stationary_variance(cfg.gamma_eps).expect("gamma in range");
    let rel = (var / want - 1.0).abs();
    SuiteResult {
        name: "corrector.stationarity",
        passed: rel <= 0.02,
        detail: format!("{n} draws, variance {var:.4} vs {want:.4}"),
    }
}

fn teacher_score() -> SuiteResult {
    let mut worst: f64 = 0.0;
    for trial in 0..10 {
        let mut r = rng(800 + trial);
        let t = MixtureTeacher::ring(3, r.gen_range(0.5..2.0), r.gen_range(0.05..0.5)).expect("valid ring");
        let tp = TimePoint::from_lambda(0.5, 0.0);
        let x = normal_vec(&mut r, 2);
        let fd = finite_diff_grad(|p| t.log_density(p, &tp).expect("dims"), &x, 1e-5).expect("step");
        let sc = t.score(&x, &tp).expect("dims");
        for (a, b) in sc.iter().zip(&fd) {
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-3));
        }
    }
    SuiteResult {
        name: "teacher.score",
        passed: worst <= 1e-6,
        detail: format!("10 mixtures, max rel err vs finite differences {worst:.2e}"),
    }
}

/// Runs every suite. `fault` injects a deliberate defect into the corrector.
pub fn run(fault: Option<Fault>) -> VerifyReport {
    VerifyReport {
        suites: vec![
            gradients(),
            em_identity(),
            cancellation(fault),
            fixed_point(fault),
            route_equivalence(fault),
            reparameterization(fault),
            stationarity(),
            teacher_score(),
        ],
    }
}

/// Prints the table and fails when any suite fails.
pub fn cmd_verify(fault: Option<&str>) -> CliResult<VerifyReport> {
    let fault = match fault {
        None => None,
        Some(f) => Some(
            Fault::parse(f).ok_or_else(|| CliError::Validation(format!("unknown fault mode `{f}`")))?,
        ),
    };
    let report = run(fault);
    print!("{}", report.table());
    if report.all_passed() {
        Ok(report)
    } else {
        let failed: Vec<&str> = report.suites.iter().filter(|s| !s.passed).map(|s| s.name).collect();
        Err(CliError::Numerical(format!("verification failed: {}", failed.join(", "))))
    }
}
