//! EM distillation of a diffusion teacher into a one-step generator.

pub mod checkpoint;
pub mod corrector;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod schedule;
pub mod student;
pub mod teacher;
pub mod tensornet;

pub use corrector::{
    run_corrector, run_corrector_with_ledger, vsd_target, Cancellation, CorrectedBatch,
    CorrectedSample, CorrectorConfig, CorrectorFault, CorrectorSpace, NoiseLedger, ScoreContext,
};
pub use checkpoint::Checkpoint;
pub use distill::{
    emd1_generator_gradient, generator_loss_and_grad, generator_update, train, DistillConfig, Evaluator,
    GeneratorLoss, ModelConfig, TrainOutcome, TrainRecord, TrainTrace,
};
pub use error::{EmdError, Result};
pub use metrics::{Bandwidth, EvalReport};
pub use oracle::LinearGaussianModel;
pub use rng::{Purpose, StreamSeed};
pub use schedule::{GenWeighting, NoiseFeatures, ScheduleKind, ScheduleSpec, ScoreWeighting, TimePoint};
pub use student::{Generator, GeneratorMode, NeuralScore, StudentScore};
pub use teacher::{MixtureTeacher, ScoreModel};
pub use tensornet::{Activation, AdamConfig, AdamState, FeedNet};
