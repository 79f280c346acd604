//! Replay-based centralized training: episode collection, distributional
//! bootstrap targets, the quantile regression step and the run loop.

mod buffer;
mod config;
mod digm;
mod trainer;

pub use buffer::ReplayBuffer;
pub use config::TrainConfig;
pub use digm::{digm_consistency_check, digm_consistency_check_with_mixer, DIGM_TOLERANCE};
pub use trainer::{
    collect_episode, compute_targets, evaluate_greedy, run_training, stream_rng, MetricPoint, RunMetrics, Trainer,
};
