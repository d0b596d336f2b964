//! Training and evaluation pipeline: batches with empty and computation
//! tokens, masked loss, the training loop, per-length evaluation, scoring,
//! sweeps, and the on-disk formats for configs, results and checkpoints.

mod batch;
pub mod checkpoint;
mod config;
pub mod report;
pub mod results;
mod sweep;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use batch::{batch_from_samples, build_batch, build_batch_autoregressive, Batch};
pub use config::{parse_key_values, Profile, TrainConfig, CONFIG_KEYS};
pub use sweep::{
    summarize, sweep, sweep_configs, workers_from_env, CellSummary, SweepGrid, SweepOutcome, WORKERS_ENV,
};
pub use train::{
    compute_score, decode_autoregressive, evaluate, evaluate_with, per_sequence_accuracy, predict_samples, train, train_with,
    Progress,
    RunRecord,
};

/// Independent random streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Train = 2,
    Dropout = 3,
    Eval = 4,
}

/// The generator for `stream` under `seed`. Streams never overlap, so
/// adding evaluation or dropout never perturbs the training data.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
