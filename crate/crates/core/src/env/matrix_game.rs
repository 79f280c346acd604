use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use super::{DecPomdp, JointObservation, StepOutcome};
use crate::error::{invalid, Error, Result};

/// Text of the shipped two-step game preset.
pub const TWO_STEP_PRESET: &str = include_str!("../../games/two_step.game");

const TERMINAL: &str = "terminal";
const DEFAULT_HORIZON: usize = 100;
const DEFAULT_GAMMA: f64 = 0.99;

/// Normal reward parameters of one payoff cell.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Payoff {
    pub mu: f64,
    pub sigma2: f64,
}

/// Validated description of a stochastic matrix game.
///
/// Joint actions are indexed in mixed radix with agent 0 as the most
/// significant digit, so for two agents with actions `{A, B}` the order is
/// `A,A  A,B  B,A  B,B`.
#[derive(Debug, Clone, PartialEq)]
pub struct GameSpec {
    pub action_labels: Vec<Vec<String>>,
    pub states: Vec<String>,
    pub initial: usize,
    /// `transitions[state][joint]`: next state, or `None` for terminal.
    pub transitions: Vec<Vec<Option<usize>>>,
    pub payoffs: Vec<Vec<Payoff>>,
    pub gamma: f64,
    pub horizon: usize,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawActions {
    Shared(Vec<String>),
    PerAgent(Vec<Vec<String>>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGame {
    agents: usize,
    actions: RawActions,
    states: Vec<String>,
    initial: String,
    gamma: Option<f64>,
    horizon: Option<usize>,
    #[serde(default)]
    transitions: BTreeMap<String, BTreeMap<String, String>>,
    #[serde(default)]
    payoffs: BTreeMap<String, BTreeMap<String, Payoff>>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::GameConfig(msg.into())
}

impl GameSpec {
    pub fn num_agents(&self) -> usize {
        self.action_labels.len()
    }

    pub fn num_joint_actions(&self) -> usize {
        self.action_labels.iter().map(Vec::len).product()
    }

    pub fn joint_index(&self, actions: &[usize]) -> usize {
        actions.iter().zip(&self.action_labels).fold(0, |acc, (&a, labels)| acc * labels.len() + a)
    }

    pub fn joint_actions(&self, index: usize) -> Vec<usize> {
        let mut out = vec![0; self.num_agents()];
        let mut rest = index;
        for (slot, labels) in out.iter_mut().zip(&self.action_labels).rev() {
            *slot = rest % labels.len();
            rest /= labels.len();
        }
        out
    }

    /// `"A,B"` style label of a joint action.
    pub fn joint_label(&self, actions: &[usize]) -> String {
        actions.iter().zip(&self.action_labels).map(|(&a, labels)| labels[a].as_str()).collect::<Vec<_>>().join(",")
    }

    pub fn state_index(&self, label: &str) -> Option<usize> {
        self.states.iter().position(|s| s == label)
    }

    /// Parses `"A,B"` into per-agent action indices.
    pub fn parse_joint(&self, label: &str) -> Option<Vec<usize>> {
        let parts: Vec<&str> = label.split(',').map(str::trim).collect();
        if parts.len() != self.num_agents() {
            return None;
        }
        parts.iter().zip(&self.action_labels).map(|(p, labels)| labels.iter().position(|l| l == p)).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawGame = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        if raw.agents == 0 {
            return Err(config_err("`agents` must be at least 1"));
        }
        let action_labels = match raw.actions {
            RawActions::Shared(labels) => vec![labels; raw.agents],
            RawActions::PerAgent(per) => per,
        };
        if action_labels.len() != raw.agents {
            return Err(config_err(format!(
                "`actions` lists {} agents but `agents` = {}",
                action_labels.len(),
                raw.agents
            )));
        }
        for (k, labels) in action_labels.iter().enumerate() {
            if labels.is_empty() {
                return Err(config_err(format!("actions[{k}] is empty")));
            }
            if has_duplicates(labels) {
                return Err(config_err(format!("actions[{k}] has duplicate labels")));
            }
            if let Some(bad) = labels.iter().find(|l| l.contains(',') || l.trim() != l.as_str() || l.is_empty()) {
                return Err(config_err(format!("action label `{bad}` must be non-empty without commas or padding")));
            }
        }
        if raw.states.is_empty() {
            return Err(config_err("`states` is empty"));
        }
        if has_duplicates(&raw.states) {
            return Err(config_err("`states` has duplicate names"));
        }
        if raw.states.iter().any(|s| s == TERMINAL) {
            return Err(config_err("`terminal` is reserved and cannot name a state"));
        }
        let state_of = |label: &str, key: &str| {
            raw.states
                .iter()
                .position(|s| s == label)
                .ok_or_else(|| config_err(format!("{key}: unknown state `{label}`")))
        };
        let initial = state_of(&raw.initial, "initial")?;
        let gamma = raw.gamma.unwrap_or(DEFAULT_GAMMA);
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(config_err(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        let horizon = raw.horizon.unwrap_or(DEFAULT_HORIZON);
        if horizon == 0 {
            return Err(config_err("horizon must be at least 1"));
        }

        for key in raw.transitions.keys() {
            state_of(key, &format!("transitions[{key}]"))?;
        }
        for key in raw.payoffs.keys() {
            state_of(key, &format!("payoffs[{key}]"))?;
        }

        let mut spec = GameSpec {
            action_labels,
            states: raw.states.clone(),
            initial,
            transitions: Vec::new(),
            payoffs: Vec::new(),
            gamma,
            horizon,
        };
        let n_joint = spec.num_joint_actions();
        let no_transitions = BTreeMap::new();
        let no_payoffs = BTreeMap::new();

        for state in &raw.states {
            let table = raw.transitions.get(state).unwrap_or(&no_transitions);
            let mut row = vec![None; n_joint];
            let mut seen = vec![false; n_joint];
            for (joint, target) in table {
                let key = format!("transitions[{state}][{joint}]");
                let idx = spec
                    .parse_joint(joint)
                    .map(|a| spec.joint_index(&a))
                    .ok_or_else(|| config_err(format!("{key}: unknown joint action")))?;
                seen[idx] = true;
                row[idx] = if target == TERMINAL { None } else { Some(state_of(target, &key)?) };
            }
            if let Some(missing) = seen.iter().position(|s| !s) {
                let label = spec.joint_label(&spec.joint_actions(missing));
                return Err(config_err(format!("missing transition transitions[{state}][{label}]")));
            }
            spec.transitions.push(row);

            let table = raw.payoffs.get(state).unwrap_or(&no_payoffs);
            let mut row = vec![Payoff { mu: 0.0, sigma2: 0.0 }; n_joint];
            let mut seen = vec![false; n_joint];
            for (joint, payoff) in table {
                let key = format!("payoffs[{state}][{joint}]");
                let idx = spec
                    .parse_joint(joint)
                    .map(|a| spec.joint_index(&a))
                    .ok_or_else(|| config_err(format!("{key}: unknown joint action")))?;
                if !payoff.mu.is_finite() {
                    return Err(config_err(format!("{key}: mu must be finite")));
                }
                if !(payoff.sigma2 >= 0.0 && payoff.sigma2.is_finite()) {
                    return Err(config_err(format!("{key}: sigma2 must be a finite non-negative variance")));
                }
                seen[idx] = true;
                row[idx] = *payoff;
            }
            if let Some(missing) = seen.iter().position(|s| !s) {
                let label = spec.joint_label(&spec.joint_actions(missing));
                return Err(config_err(format!("missing payoff payoffs[{state}][{label}]")));
            }
            spec.payoffs.push(row);
        }
        Ok(spec)
    }

    /// Serializes back to the config format. `parse(to_config_string())`
    /// reproduces `self`.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "agents = {}", self.num_agents());
        let per_agent: Vec<String> = self.action_labels.iter().map(|l| quoted_list(l)).collect();
        let _ = writeln!(out, "actions = [{}]", per_agent.join(", "));
        let _ = writeln!(out, "states = {}", quoted_list(&self.states));
        let _ = writeln!(out, "initial = {:?}", self.states[self.initial]);
        let _ = writeln!(out, "gamma = {:?}", self.gamma);
        let _ = writeln!(out, "horizon = {}", self.horizon);
        for (s, row) in self.transitions.iter().enumerate() {
            let _ = writeln!(out, "\n[transitions.{:?}]", self.states[s]);
            for (j, next) in row.iter().enumerate() {
                let target = next.map_or(TERMINAL, |n| self.states[n].as_str());
                let _ = writeln!(out, "{:?} = {:?}", self.joint_label(&self.joint_actions(j)), target);
            }
        }
        for (s, row) in self.payoffs.iter().enumerate() {
            let _ = writeln!(out, "\n[payoffs.{:?}]", self.states[s]);
            for (j, p) in row.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{:?} = {{ mu = {:?}, sigma2 = {:?} }}",
                    self.joint_label(&self.joint_actions(j)),
                    p.mu,
                    p.sigma2
                );
            }
        }
        out
    }
}

fn quoted_list(items: &[String]) -> String {
    let inner: Vec<String> = items.iter().map(|s| format!("{s:?}")).collect();
    format!("[{}]", inner.join(", "))
}

fn has_duplicates(items: &[String]) -> bool {
    let mut sorted: Vec<&String> = items.iter().collect();
    sorted.sort();
    sorted.windows(2).any(|w| w[0] == w[1])
}

/// A running instance of a [`GameSpec`].
///
/// Each agent observes the one-hot current state followed by its own one-hot
/// agent id. The global state features are the one-hot state. Both are all
/// zeros once the episode has ended.
#[derive(Debug, Clone)]
pub struct MatrixGame {
    spec: Arc<GameSpec>,
    current: Option<usize>,
    steps: usize,
}

impl MatrixGame {
    pub fn new(spec: GameSpec) -> Self {
        Self { spec: Arc::new(spec), current: None, steps: 0 }
    }

    pub fn spec(&self) -> &GameSpec {
        &self.spec
    }

    /// Puts the episode in `state`, as if it had just been reached.
    pub fn set_state(&mut self, state: usize) -> Result<()> {
        if state >= self.spec.states.len() {
            return Err(invalid(format!("state index {state} out of range")));
        }
        self.current = Some(state);
        Ok(())
    }

    /// Observations an agent would receive in `state`.
    pub fn observations_in(&self, state: usize) -> JointObservation {
        (0..self.num_agents()).map(|k| self.encode(Some(state), k)).collect()
    }

    /// Global state features of `state`.
    pub fn features_of(&self, state: usize) -> Vec<f64> {
        one_hot(Some(state), self.spec.states.len())
    }

    /// Overrides a payoff cell; used to build degenerate variants in tests.
    pub fn with_payoff(mut self, state: usize, joint: &[usize], payoff: Payoff) -> Self {
        let idx = self.spec.joint_index(joint);
        Arc::make_mut(&mut self.spec).payoffs[state][idx] = payoff;
        self
    }

    fn encode(&self, state: Option<usize>, agent: usize) -> Vec<f64> {
        let k = self.num_agents();
        match state {
            Some(_) => {
                let mut obs = one_hot(state, self.spec.states.len());
                obs.extend(one_hot(Some(agent), k));
                obs
            }
            None => vec![0.0; self.spec.states.len() + k],
        }
    }
}

fn one_hot(index: Option<usize>, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    if let Some(i) = index {
        v[i] = 1.0;
    }
    v
}

impl DecPomdp for MatrixGame {
    fn num_agents(&self) -> usize {
        self.spec.num_agents()
    }

    fn num_actions(&self, agent: usize) -> usize {
        self.spec.action_labels[agent].len()
    }

    fn obs_dim(&self) -> usize {
        self.spec.states.len() + self.num_agents()
    }

    fn state_dim(&self) -> usize {
        self.spec.states.len()
    }

    fn horizon(&self) -> usize {
        self.spec.horizon
    }

    fn gamma(&self) -> f64 {
        self.spec.gamma
    }

    fn reset(&mut self) -> JointObservation {
        self.current = Some(self.spec.initial);
        self.steps = 0;
        self.observations()
    }

    fn state_id(&self) -> Option<usize> {
        self.current
    }

    fn state_features(&self) -> Vec<f64> {
        one_hot(self.current, self.spec.states.len())
    }

    fn observations(&self) -> JointObservation {
        (0..self.num_agents()).map(|k| self.encode(self.current, k)).collect()
    }

    fn step<R: Rng + ?Sized>(&mut self, joint_action: &[usize], rng: &mut R) -> Result<StepOutcome> {
        let state = self.current.ok_or(Error::EpisodeTerminated)?;
        if joint_action.len() != self.num_agents() {
            return Err(invalid(format!("expected {} actions, got {}", self.num_agents(), joint_action.len())));
        }
        for (k, &a) in joint_action.iter().enumerate() {
            if a >= self.num_actions(k) {
                return Err(invalid(format!(
                    "action {a} out of range for agent {k} ({} actions)",
                    self.num_actions(k)
                )));
            }
        }
        let j = self.spec.joint_index(joint_action);
        let payoff = self.spec.payoffs[state][j];
        let reward = if payoff.sigma2 == 0.0 {
            payoff.mu
        } else {
            let normal = Normal::new(payoff.mu, payoff.sigma2.sqrt()).map_err(|e| invalid(e.to_string()))?;
            normal.sample(rng)
        };
        self.steps += 1;
        let next = self.spec.transitions[state][j];
        let terminal = next.is_none() || self.steps >= self.spec.horizon;
        self.current = if terminal { None } else { next };
        Ok(StepOutcome { reward, observations: self.observations(), terminal })
    }
}

/// Parses a game config and returns a fresh environment.
pub fn load_matrix_game(config_text: &str) -> Result<MatrixGame> {
    Ok(MatrixGame::new(GameSpec::parse(config_text)?))
}

/// The stochastic two-step game: agent 1 picks the second-stage matrix, which
/// is deterministic (`2A`, all cells N(7, 0)) or stochastic (`2B`).
pub fn two_step_game() -> MatrixGame {
    let labels = vec!["A".to_string(), "B".to_string()];
    let p = |mu, sigma2| Payoff { mu, sigma2 };
    let spec = GameSpec {
        action_labels: vec![labels.clone(), labels],
        states: vec!["1".into(), "2A".into(), "2B".into()],
        initial: 0,
        transitions: vec![vec![Some(1), Some(1), Some(2), Some(2)], vec![None; 4], vec![None; 4]],
        payoffs: vec![
            vec![p(0.0, 0.0); 4],
            vec![p(7.0, 0.0); 4],
            vec![p(0.0, 2.0), p(1.0, 13.0), p(1.0, 13.0), p(8.0, 29.0)],
        ],
        gamma: 0.99,
        horizon: 2,
    };
    MatrixGame::new(spec)
}
