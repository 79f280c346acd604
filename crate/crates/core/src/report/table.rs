use serde::{Deserialize, Serialize};

use crate::distribution::{empirical_moments, stratified_grid, Moments};
use crate::env::MatrixGame;
use crate::error::{invalid, Result};
use crate::networks::{Algorithm, JointValueModel, MixerKind, Which};

/// Smallest grid accepted for a factorization table.
pub const MIN_TABLE_SAMPLES: usize = 1000;

/// Moments of one joint action's composed return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointCell {
    /// Comma-separated action labels, agent 1 first.
    pub actions: String,
    pub moments: Moments,
}

/// Everything the model believes about one state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFactorization {
    pub state: String,
    /// `V(s)` of a monotonic mixer.
    pub state_value: Option<f64>,
    /// `agents[k][u]`: moments of agent `k`'s utility for action `u`.
    pub agents: Vec<Vec<Moments>>,
    /// Every joint action in mixed-radix order; empty for independent learners.
    pub joint: Vec<JointCell>,
}

/// Per-agent utility and joint return moments at every state of a game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizationTable {
    pub algorithm: Algorithm,
    pub n_samples: usize,
    /// Action labels of each agent.
    pub actions: Vec<Vec<String>>,
    pub states: Vec<StateFactorization>,
}

impl FactorizationTable {
    pub fn state(&self, label: &str) -> Option<&StateFactorization> {
        self.states.iter().find(|s| s.state == label)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

impl StateFactorization {
    /// Joint cell labelled like `"B,B"`.
    pub fn joint_cell(&self, actions: &str) -> Option<&JointCell> {
        self.joint.iter().find(|c| c.actions == actions)
    }
}

/// Evaluates the online network of `model` on the stratified grid of
/// `n_samples` levels at every state of `game`.
pub fn factorization_table(model: &JointValueModel, game: &MatrixGame, n_samples: usize) -> Result<FactorizationTable> {
    if n_samples < MIN_TABLE_SAMPLES {
        return Err(invalid(format!(
            "factorization table needs at least {MIN_TABLE_SAMPLES} samples, got {n_samples}"
        )));
    }
    let spec = game.spec();
    let arch = model.architecture();
    if spec.num_agents() != arch.num_agents || spec.action_labels.iter().any(|l| l.len() != arch.num_actions) {
        return Err(invalid("model and game disagree on agents or actions"));
    }
    let grid = stratified_grid(n_samples);
    let mut states = Vec::with_capacity(spec.states.len());
    for (s, label) in spec.states.iter().enumerate() {
        let observations = game.observations_in(s);
        let features = game.features_of(s);
        let agents = observations
            .iter()
            .map(|obs| {
                model
                    .utility_quantiles(Which::Online, obs, &grid)?
                    .iter()
                    .map(|batch| empirical_moments(batch.values()))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let joint = if model.algorithm().mixer() == MixerKind::None {
            Vec::new()
        } else {
            model
                .compose_all_joint_quantiles(Which::Online, &observations, &features, &grid)?
                .iter()
                .enumerate()
                .map(|(j, batch)| {
                    Ok(JointCell {
                        actions: spec.joint_label(&spec.joint_actions(j)),
                        moments: empirical_moments(batch.values())?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        };
        states.push(StateFactorization {
            state: label.clone(),
            state_value: model.state_value(Which::Online, &features)?,
            agents,
            joint,
        });
    }
    Ok(FactorizationTable { algorithm: model.algorithm(), n_samples, actions: spec.action_labels.clone(), states })
}
