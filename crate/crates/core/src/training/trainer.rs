use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::buffer::ReplayBuffer;
use super::config::TrainConfig;
use crate::autodiff::{DenseArray, Tape};
use crate::distribution::{huber_on_tape, pairwise_loss_on_tape, sample_omegas, LossConfig};
use crate::env::{DecPomdp, EpisodeRecord, Transition};
use crate::error::{invalid, Error, Result};
use crate::networks::{Architecture, JointValueModel, MixerKind, Which};

const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const COLLECT_STREAM: u64 = 2 << 40;
const EVAL_STREAM: u64 = 3 << 40;

/// Generator for one purpose of a seeded run. Streams never overlap, so
/// changing how much one consumer draws leaves the others untouched.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One evaluation point of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    /// Episodes collected so far.
    pub episode: usize,
    pub greedy_return_mean: f64,
    /// Mean training loss since the previous point; 0 before training starts.
    pub td_loss: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub points: Vec<MetricPoint>,
}

/// Plays one episode. Each agent independently explores uniformly with
/// probability `epsilon` and otherwise acts greedily on its utility mean.
pub fn collect_episode<E, R>(
    env: &mut E,
    model: &JointValueModel,
    epsilon: f64,
    n_eval: usize,
    rng: &mut R,
) -> Result<EpisodeRecord>
where
    E: DecPomdp,
    R: Rng + ?Sized,
{
    let embedding = model.mean_embedding(Which::Online, n_eval)?;
    collect_with(env, model, epsilon, embedding.as_ref(), rng)
}

fn collect_with<E, R>(
    env: &mut E,
    model: &JointValueModel,
    epsilon: f64,
    embedding: Option<&DenseArray>,
    rng: &mut R,
) -> Result<EpisodeRecord>
where
    E: DecPomdp,
    R: Rng + ?Sized,
{
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(invalid(format!("epsilon must lie in [0, 1], got {epsilon}")));
    }
    let mut observations = env.reset();
    let mut record = EpisodeRecord::default();
    loop {
        let state = env.state_id().ok_or_else(|| invalid("environment exposes no state id"))?;
        let state_features = env.state_features();
        let greedy = model.greedy_with(Which::Online, &observations, embedding)?;
        let actions: Vec<usize> = greedy
            .iter()
            .enumerate()
            .map(|(k, &g)| if rng.gen::<f64>() < epsilon { rng.gen_range(0..env.num_actions(k)) } else { g })
            .collect();
        let outcome = env.step(&actions, rng)?;
        let next_state = if outcome.terminal { None } else { env.state_id() };
        record.transitions.push(Transition {
            state,
            state_features,
            observations: std::mem::replace(&mut observations, outcome.observations.clone()),
            actions,
            reward: outcome.reward,
            next_state,
            next_state_features: env.state_features(),
            next_observations: outcome.observations,
            terminal: outcome.terminal,
        });
        if outcome.terminal {
            return Ok(record);
        }
        if record.len() > env.horizon() {
            return Err(invalid("episode ran past the horizon without terminating"));
        }
    }
}

fn stack_observations(rows: impl Iterator<Item = Vec<f64>>) -> Result<DenseArray> {
    DenseArray::from_rows(&rows.collect::<Vec<_>>())
}

/// Bootstrap targets aligned with the rows of
/// [`JointValueModel::predict_on_tape`]: `[B, N′]` with a mixer,
/// `[B·K, N′]` for independent learners, one column for expected utilities.
///
/// Next actions are the online network's greedy choices; their values come
/// from the target network at `N′` fresh levels shared by every agent and
/// transition. Terminal transitions keep the bare reward.
pub fn compute_targets<R: Rng + ?Sized>(
    model: &JointValueModel,
    transitions: &[&Transition],
    gamma: f64,
    loss: &LossConfig,
    rng: &mut R,
) -> Result<DenseArray> {
    let embedding = model.mean_embedding(Which::Online, loss.n_eval)?;
    targets_with(model, transitions, gamma, loss.n_target, embedding.as_ref(), rng)
}

fn targets_with<R: Rng + ?Sized>(
    model: &JointValueModel,
    transitions: &[&Transition],
    gamma: f64,
    n_target: usize,
    embedding: Option<&DenseArray>,
    rng: &mut R,
) -> Result<DenseArray> {
    let k = model.architecture().num_agents;
    let per_sample = if model.algorithm().mixer() == MixerKind::None { k } else { 1 };
    let distributional = model.algorithm().is_distributional();
    let cols = if distributional { n_target } else { 1 };
    let omegas = if distributional { sample_omegas(n_target, rng) } else { vec![0.5] };

    let live: Vec<&Transition> = transitions.iter().copied().filter(|t| !t.terminal).collect();
    let bootstrap = if live.is_empty() {
        None
    } else {
        let next_obs = live.iter().flat_map(|t| t.next_observations.iter().cloned());
        let next_obs = stack_observations(next_obs)?;
        let next_actions: Vec<usize> = {
            let means = model.utility_means(Which::Online, &next_obs, embedding)?;
            (0..next_obs.dims2().map(|(r, _)| r).unwrap_or(0)).map(|r| crate::networks::argmax(means.row(r))).collect()
        };
        let states = DenseArray::from_rows(&live.iter().map(|t| t.next_state_features.clone()).collect::<Vec<_>>())?;
        let mut tape = Tape::new();
        let bound = tape.bind(model.params(Which::Target));
        let out = model.predict_on_tape(&mut tape, &bound, &next_obs, &states, &next_actions, &omegas)?;
        Some(tape.value(out).clone())
    };

    let mut data = Vec::with_capacity(transitions.len() * per_sample * cols);
    let mut live_index = 0;
    for t in transitions {
        for a in 0..per_sample {
            if t.terminal {
                data.extend(std::iter::repeat_n(t.reward, cols));
            } else {
                let next = bootstrap.as_ref().expect("live transitions were evaluated");
                let row = next.row(live_index * per_sample + a);
                data.extend(row.iter().map(|v| t.reward + gamma * v));
            }
        }
        if !t.terminal {
            live_index += 1;
        }
    }
    DenseArray::matrix(transitions.len() * per_sample, cols, data)
}

/// Collection, replay and optimization state of one run.
#[derive(Debug, Clone)]
pub struct Trainer<E> {
    env: E,
    config: TrainConfig,
    model: JointValueModel,
    buffer: ReplayBuffer,
    train_rng: ChaCha8Rng,
    train_steps: usize,
    episodes: usize,
    embedding: Option<Option<DenseArray>>,
}

impl<E: DecPomdp + Clone> Trainer<E> {
    pub fn new(env: E, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let arch = Architecture {
            hidden: config.hidden,
            cos_features: config.cos_features,
            mixing_width: config.mixing_width,
            ..Architecture::for_env(&env)?
        };
        let model = JointValueModel::new(config.algorithm, arch, &mut stream_rng(config.seed, INIT_STREAM))?;
        Ok(Self {
            buffer: ReplayBuffer::new(config.buffer_capacity)?,
            train_rng: stream_rng(config.seed, TRAIN_STREAM),
            env,
            config,
            model,
            train_steps: 0,
            episodes: 0,
            embedding: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &JointValueModel {
        &self.model
    }

    /// Direct access for tests and tools; cached evaluations are dropped.
    pub fn model_mut(&mut self) -> &mut JointValueModel {
        self.embedding = None;
        &mut self.model
    }

    pub fn into_model(self) -> JointValueModel {
        self.model
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    fn embedding(&mut self) -> Result<Option<DenseArray>> {
        if self.embedding.is_none() {
            self.embedding = Some(self.model.mean_embedding(Which::Online, self.config.loss.n_eval)?);
        }
        Ok(self.embedding.clone().flatten())
    }

    /// Collects the next episode with the scheduled epsilon and stores it.
    pub fn collect(&mut self) -> Result<f64> {
        let epsilon = self.config.epsilon_at(self.episodes);
        let embedding = self.embedding()?;
        let mut rng = stream_rng(self.config.seed, COLLECT_STREAM + self.episodes as u64);
        let record = collect_with(&mut self.env, &self.model, epsilon, embedding.as_ref(), &mut rng)?;
        self.buffer.push(record);
        self.episodes += 1;
        Ok(epsilon)
    }

    /// Samples a batch from the buffer and takes one gradient step.
    pub fn train_step(&mut self) -> Result<f64> {
        let batch: Vec<EpisodeRecord> =
            self.buffer.sample(self.config.batch_size, &mut self.train_rng)?.into_iter().cloned().collect();
        let loss = self.train_on_batch(&batch)?;
        if self.train_steps.is_multiple_of(self.config.target_update_interval) {
            self.model.sync_target()?;
        }
        Ok(loss)
    }

    /// One gradient step on the transitions of `episodes`; returns the loss
    /// (mean over transitions) before the update.
    pub fn train_on_batch(&mut self, episodes: &[EpisodeRecord]) -> Result<f64> {
        let transitions: Vec<&Transition> = episodes.iter().flat_map(|e| e.transitions.iter()).collect();
        if transitions.is_empty() {
            return Err(Error::InsufficientData { have: 0, need: 1 });
        }
        let loss_cfg = self.config.loss;
        let distributional = self.model.algorithm().is_distributional();
        let embedding = self.embedding()?;
        let targets = targets_with(
            &self.model,
            &transitions,
            self.config.gamma,
            loss_cfg.n_target,
            embedding.as_ref(),
            &mut self.train_rng,
        )?;
        let omegas = if distributional { sample_omegas(loss_cfg.n_pred, &mut self.train_rng) } else { vec![0.5] };

        let obs = stack_observations(transitions.iter().flat_map(|t| t.observations.iter().cloned()))?;
        let states = DenseArray::from_rows(&transitions.iter().map(|t| t.state_features.clone()).collect::<Vec<_>>())?;
        let actions: Vec<usize> = transitions.iter().flat_map(|t| t.actions.iter().copied()).collect();

        let mut tape = Tape::new();
        let bound = tape.bind(self.model.params(Which::Online));
        let pred = self.model.predict_on_tape(&mut tape, &bound, &obs, &states, &actions, &omegas)?;
        let total = if distributional {
            pairwise_loss_on_tape(&mut tape, pred, &omegas, &targets, loss_cfg.kappa)?
        } else {
            let target = tape.constant(targets);
            let delta = tape.sub(target, pred)?;
            let per_row = huber_on_tape(&mut tape, delta, loss_cfg.kappa)?;
            tape.sum(per_row)?
        };
        let loss = tape.scale(total, 1.0 / transitions.len() as f64)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.train_steps)));
        }
        let grads = tape.backward(loss)?;
        let params = self.model.online_mut();
        params.accumulate(&bound, &grads)?;
        params.rmsprop_step(self.config.learning_rate, &self.config.rmsprop)?;
        self.embedding = None;
        self.train_steps += 1;
        Ok(value)
    }

    /// Undiscounted returns of `episodes` greedy episodes. Every evaluation
    /// replays the same environment randomness.
    pub fn evaluate(&mut self, episodes: usize) -> Result<Vec<f64>> {
        let embedding = self.embedding()?;
        evaluate_with(&self.env, &self.model, self.config.seed, episodes, embedding.as_ref())
    }

    /// Runs the configured number of episodes: one train step per collected
    /// episode once the buffer holds a batch, target syncs every
    /// `target_update_interval` steps and a greedy evaluation every
    /// `eval_interval` episodes.
    pub fn run(&mut self) -> Result<RunMetrics> {
        let mut metrics = RunMetrics::default();
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        while self.episodes < self.config.total_episodes {
            let epsilon = self.collect()?;
            if self.buffer.len() >= self.config.batch_size {
                loss_sum += self.train_step()?;
                loss_count += 1;
            }
            if self.episodes.is_multiple_of(self.config.eval_interval) {
                let returns = self.evaluate(self.config.eval_episodes)?;
                metrics.points.push(MetricPoint {
                    episode: self.episodes,
                    greedy_return_mean: returns.iter().sum::<f64>() / returns.len() as f64,
                    td_loss: if loss_count == 0 { 0.0 } else { loss_sum / loss_count as f64 },
                    epsilon,
                });
                (loss_sum, loss_count) = (0.0, 0);
            }
        }
        Ok(metrics)
    }
}

/// Undiscounted returns of `episodes` greedy episodes of `model` on a copy
/// of `env`, drawn from the evaluation streams of `seed`. A trained model
/// evaluated with its training seed reproduces the run's evaluations.
pub fn evaluate_greedy<E: DecPomdp + Clone>(
    env: &E,
    model: &JointValueModel,
    seed: u64,
    episodes: usize,
    n_eval: usize,
) -> Result<Vec<f64>> {
    let embedding = model.mean_embedding(Which::Online, n_eval)?;
    evaluate_with(env, model, seed, episodes, embedding.as_ref())
}

fn evaluate_with<E: DecPomdp + Clone>(
    env: &E,
    model: &JointValueModel,
    seed: u64,
    episodes: usize,
    embedding: Option<&DenseArray>,
) -> Result<Vec<f64>> {
    let mut env = env.clone();
    (0..episodes)
        .map(|i| {
            let mut rng = stream_rng(seed, EVAL_STREAM + i as u64);
            Ok(collect_with(&mut env, model, 0.0, embedding, &mut rng)?.total_reward())
        })
        .collect()
}

/// Trains a fresh model on `env` and returns the metrics and final model.
pub fn run_training<E: DecPomdp + Clone>(env: E, config: &TrainConfig) -> Result<(RunMetrics, JointValueModel)> {
    let mut trainer = Trainer::new(env, config.clone())?;
    let metrics = trainer.run()?;
    Ok((metrics, trainer.into_model()))
}
