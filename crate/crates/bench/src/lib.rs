//! Fixtures shared by the benchmarks.

use emd_core::rng::normal_vec;
use emd_core::{Activation, Generator, GeneratorMode, NeuralScore, NoiseFeatures, TimePoint};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub generator: Generator,
    pub student: NeuralScore,
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
    pub tp: TimePoint,
}

/// Models with the default two hidden layers of the given width.
pub fn fixture(width: usize) -> Fixture {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let hidden = [width, width];
    let generator =
        Generator::init(2, 2, &hidden, Activation::Silu, GeneratorMode::XPred, -3.0, NoiseFeatures::Scaled, &mut r)
            .expect("valid generator");
    let student = NeuralScore::init(2, &hidden, Activation::Silu, NoiseFeatures::ScaledSinusoidal, &mut r)
        .expect("valid student");
    Fixture { generator, student, z: normal_vec(&mut r, 2), eps: normal_vec(&mut r, 2), tp: TimePoint::from_lambda(0.5, 0.3) }
}
