use serde::{Deserialize, Serialize};

use crate::autodiff::RmsProp;
use crate::distribution::LossConfig;
use crate::error::{invalid, Result};
use crate::networks::Algorithm;

/// Every hyperparameter of a training run.
///
/// Missing fields take the defaults below when parsed from TOML; unknown
/// fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub rmsprop: RmsProp,
    /// Episodes per gradient step.
    pub batch_size: usize,
    /// Episodes held by the replay buffer.
    pub buffer_capacity: usize,
    /// Train steps between target network syncs.
    pub target_update_interval: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Episodes over which epsilon falls linearly from start to end.
    pub epsilon_anneal_episodes: usize,
    pub total_episodes: usize,
    pub loss: LossConfig,
    /// Episodes between greedy evaluations.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub hidden: usize,
    pub cos_features: usize,
    pub mixing_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Dmix,
            seed: 0,
            gamma: 0.99,
            learning_rate: 5e-4,
            rmsprop: RmsProp::default(),
            batch_size: 32,
            buffer_capacity: 500,
            target_update_interval: 200,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal_episodes: 5_000,
            total_episodes: 20_000,
            loss: LossConfig::default(),
            eval_interval: 500,
            eval_episodes: 100,
            hidden: 64,
            cos_features: 64,
            mixing_width: 8,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| invalid(format!("training config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("training config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(invalid(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.rmsprop.decay > 0.0 && self.rmsprop.decay < 1.0 && self.rmsprop.eps > 0.0) {
            return Err(invalid("rmsprop needs decay in (0, 1) and eps > 0"));
        }
        if !(self.epsilon_start <= 1.0 && self.epsilon_start >= self.epsilon_end && self.epsilon_end >= 0.0) {
            return Err(invalid(format!(
                "epsilon schedule needs 1 >= start >= end >= 0, got {} -> {}",
                self.epsilon_start, self.epsilon_end
            )));
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("buffer_capacity", self.buffer_capacity),
            ("target_update_interval", self.target_update_interval),
            ("epsilon_anneal_episodes", self.epsilon_anneal_episodes),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
            ("hidden", self.hidden),
            ("cos_features", self.cos_features),
            ("mixing_width", self.mixing_width),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("{name} must be positive")));
        }
        if self.batch_size > self.buffer_capacity {
            return Err(invalid("batch_size cannot exceed buffer_capacity"));
        }
        self.loss.validate()
    }

    /// Exploration rate while collecting episode `episode` (0-based).
    pub fn epsilon_at(&self, episode: usize) -> f64 {
        let frac = (episode as f64 / self.epsilon_anneal_episodes as f64).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_toml_overrides() {
        let c = TrainConfig::from_toml(
            "algorithm = \"ddn\"\nseed = 3\n[loss]\nkappa = 1.0\nn_pred = 4\nn_target = 4\nn_eval = 16\n",
        )
        .unwrap();
        assert_eq!(c.algorithm, Algorithm::Ddn);
        assert_eq!(c.seed, 3);
        assert_eq!(c.loss.n_pred, 4);
        assert_eq!(c.batch_size, 32);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_toml("gamma = 0.0").is_err());
        assert!(TrainConfig::from_toml("gamma = 1.5").is_err());
        assert!(TrainConfig::from_toml("epsilon_start = 0.1\nepsilon_end = 0.2").is_err());
        assert!(TrainConfig::from_toml("batch_size = 0").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("algorithm = \"bogus\"").is_err());
    }

    #[test]
    fn epsilon_anneals_linearly() {
        let c = TrainConfig::default();
        assert_eq!(c.epsilon_at(0), 1.0);
        assert!((c.epsilon_at(2_500) - 0.525).abs() < 1e-12);
        assert!((c.epsilon_at(5_000) - 0.05).abs() < 1e-12);
        assert!((c.epsilon_at(19_999) - 0.05).abs() < 1e-12);
    }
}
