//! Experiment plumbing: configuration, the training loop, verification
//! and benchmark suites.

pub mod bench;
pub mod config;
pub mod model;
pub mod objective;
pub mod optim;
pub mod train;
pub mod verify;

pub use config::{ExperimentConfig, OptimizerConfig, OptimizerKind, Schedule, TrainConfig};
pub use model::ModelParams;
pub use train::{train, train_with_sink, HistoryRow, HistoryWriter, RunArtifacts};

/// SplitMix64 finalizer over `(a, b)`, used to derive per-step seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
