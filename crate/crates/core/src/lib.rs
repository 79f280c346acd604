//! Distributional value factorization for cooperative multi-agent
//! Q-learning, with a small reverse-mode autodiff engine, stochastic matrix
//! games and reporting tools.
//!
//! ```
//! use dfac::env::two_step_game;
//! use dfac::networks::Algorithm;
//! use dfac::training::{run_training, TrainConfig};
//!
//! let config = TrainConfig { algorithm: Algorithm::Ddn, total_episodes: 64, eval_interval: 64, eval_episodes: 4, ..TrainConfig::default() };
//! let (metrics, model) = run_training(two_step_game(), &config).unwrap();
//! assert_eq!(metrics.points.len(), 1);
//! assert_eq!(model.algorithm(), Algorithm::Ddn);
//! ```

pub mod autodiff;
pub mod distribution;
pub mod env;
pub mod error;
pub mod networks;
pub mod report;
pub mod selftest;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/quantiles.md")]
    mod quantiles {}
    #[doc = include_str!("../../../book/src/factorization.md")]
    mod factorization {}
    #[doc = include_str!("../../../book/src/two_step_game.md")]
    mod two_step_game {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
