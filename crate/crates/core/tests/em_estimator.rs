use emd_core::oracle::em_gradient_mc;
use emd_core::LinearGaussianModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn standard_error_shrinks_like_inverse_root_n() {
    let m = LinearGaussianModel::new(0.8, 0.6).unwrap();
    let data = [1.3, -0.4, 2.2];
    let se = |n| em_gradient_mc(&m, &data, n, &mut ChaCha8Rng::seed_from_u64(n as u64)).unwrap().std_error;
    let ratio = se(40_000) / se(2_500);
    assert!((ratio - 0.25).abs() < 0.025, "ratio {ratio}");
}

fn spread_and_reported(data: &[f64]) -> (f64, f64) {
    let m = LinearGaussianModel::new(-1.1, 0.9).unwrap();
    let runs: Vec<_> = (0..400u64)
        .map(|s| em_gradient_mc(&m, data, 500, &mut ChaCha8Rng::seed_from_u64(s)).unwrap())
        .collect();
    let mean = runs.iter().map(|r| r.estimate).sum::<f64>() / runs.len() as f64;
    let spread = (runs.iter().map(|r| (r.estimate - mean).powi(2)).sum::<f64>() / (runs.len() - 1) as f64).sqrt();
    let reported = runs.iter().map(|r| r.std_error).sum::<f64>() / runs.len() as f64;
    (spread, reported)
}

#[test]
fn reported_error_matches_spread_for_one_datum() {
    let (spread, reported) = spread_and_reported(&[0.5]);
    assert!((spread / reported - 1.0).abs() < 0.1, "spread {spread} reported {reported}");
}

/// Cycling through several data points stratifies the draws, so the iid
/// formula overstates the error.
#[test]
fn reported_error_is_conservative_for_several_data() {
    let (spread, reported) = spread_and_reported(&[0.5, -2.0]);
    assert!(spread < reported, "spread {spread} reported {reported}");
}
