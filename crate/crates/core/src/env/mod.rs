//! Cooperative Dec-POMDP interface and stochastic matrix games.

mod matrix_game;

pub use matrix_game::{load_matrix_game, two_step_game, GameSpec, MatrixGame, Payoff, TWO_STEP_PRESET};

use rand::Rng;

use crate::error::Result;

/// One observation vector per agent.
pub type JointObservation = Vec<Vec<f64>>;

/// A fully cooperative, partially observable multi-agent environment with a
/// shared team reward. The global state is exposed for centralized training.
pub trait DecPomdp {
    fn num_agents(&self) -> usize;
    fn num_actions(&self, agent: usize) -> usize;
    fn obs_dim(&self) -> usize;
    /// Width of [`DecPomdp::state_features`].
    fn state_dim(&self) -> usize;
    /// Maximum number of steps in an episode.
    fn horizon(&self) -> usize;
    fn gamma(&self) -> f64;

    fn reset(&mut self) -> JointObservation;
    /// Identifier of the current global state, `None` once terminated.
    fn state_id(&self) -> Option<usize>;
    fn state_features(&self) -> Vec<f64>;
    fn observations(&self) -> JointObservation;
    fn step<R: Rng + ?Sized>(&mut self, joint_action: &[usize], rng: &mut R) -> Result<StepOutcome>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub observations: JointObservation,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub state_features: Vec<f64>,
    pub observations: JointObservation,
    pub actions: Vec<usize>,
    pub reward: f64,
    /// `None` when the step ended the episode.
    pub next_state: Option<usize>,
    pub next_state_features: Vec<f64>,
    pub next_observations: JointObservation,
    pub terminal: bool,
}

/// Transitions of one episode, in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeRecord {
    pub transitions: Vec<Transition>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Undiscounted sum of rewards.
    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    /// Steps are contiguous and only the last one is terminal.
    pub fn is_well_formed(&self) -> bool {
        let Some(last) = self.transitions.last() else { return false };
        let contiguous = self
            .transitions
            .windows(2)
            .all(|w| w[0].next_state == Some(w[1].state) && w[0].next_observations == w[1].observations);
        let one_terminal = self.transitions.iter().filter(|t| t.terminal).count() == 1;
        contiguous && one_terminal && last.terminal
    }
}
