use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mixer::{init_monotonic, mix_on_tape, state_bias_on_tape, MixerKind};
use super::utility::{CosineEmbeddingSpec, UtilityNetwork};
use super::{argmax, Algorithm};
use crate::autodiff::{Bound, DenseArray, ParameterSet, Tape, Var};
use crate::distribution::{stratified_grid, QuantileBatch};
use crate::env::DecPomdp;
use crate::error::{invalid, Result};

/// Layer sizes of a joint value model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub num_agents: usize,
    /// Actions per agent; agents share one network, so this is common.
    pub num_actions: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    /// Width of the observation encoder and of the quantile embedding.
    pub hidden: usize,
    pub cos_features: usize,
    pub mixing_width: usize,
}

impl Architecture {
    /// Default widths (64 hidden, 64 cosine features, mixing width 8) sized
    /// for `env`.
    pub fn for_env<E: DecPomdp>(env: &E) -> Result<Self> {
        let k = env.num_agents();
        let u = env.num_actions(0);
        if (1..k).any(|a| env.num_actions(a) != u) {
            return Err(invalid("shared agent networks need equal action counts"));
        }
        Ok(Self {
            num_agents: k,
            num_actions: u,
            obs_dim: env.obs_dim(),
            state_dim: env.state_dim(),
            hidden: 64,
            cos_features: 64,
            mixing_width: 8,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.num_agents, self.num_actions, self.obs_dim, self.state_dim];
        if dims.contains(&0) || self.hidden == 0 || self.cos_features == 0 || self.mixing_width == 0 {
            return Err(invalid(format!("architecture sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Which copy of the parameters to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Online,
    Target,
}

/// Shared per-agent utilities, an optional mixer and a target copy.
///
/// Distributional algorithms compose joint quantiles as
/// `F_jt(ω) = Ψ(Q₁..Q_K | s) + Σₖ (Fₖ(ω) − Qₖ)` where `Qₖ` is agent `k`'s
/// mean over the very batch of levels being evaluated. Expected algorithms
/// mix scalar utilities and yield a degenerate joint distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct JointValueModel {
    algorithm: Algorithm,
    arch: Architecture,
    online: ParameterSet,
    target: ParameterSet,
}

impl JointValueModel {
    pub fn new<R: Rng + ?Sized>(algorithm: Algorithm, arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut online = ParameterSet::new();
        utility_for(algorithm, &arch).init(&mut online, rng)?;
        if algorithm.mixer() == MixerKind::Monotonic {
            init_monotonic(&mut online, arch.state_dim, arch.num_agents, arch.mixing_width, rng)?;
        }
        let target = online.clone();
        Ok(Self { algorithm, arch, online, target })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes
    /// against a fresh initialization.
    pub fn from_parameters(
        algorithm: Algorithm,
        arch: Architecture,
        online: ParameterSet,
        target: ParameterSet,
    ) -> Result<Self> {
        let reference = Self::new(algorithm, arch, &mut rand::rngs::mock::StepRng::new(0, 1))?;
        for set in [&online, &target] {
            let same_layout = set.len() == reference.online.len()
                && reference
                    .online
                    .iter()
                    .all(|(name, v)| set.get(name).map(|p| p.shape() == v.shape()).unwrap_or(false));
            if !same_layout {
                return Err(invalid(format!("stored parameters do not fit a {algorithm} model of {arch:?}")));
            }
        }
        Ok(Self { algorithm, arch, online, target })
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn utility(&self) -> UtilityNetwork {
        utility_for(self.algorithm, &self.arch)
    }

    pub fn params(&self, which: Which) -> &ParameterSet {
        match which {
            Which::Online => &self.online,
            Which::Target => &self.target,
        }
    }

    pub fn online_mut(&mut self) -> &mut ParameterSet {
        &mut self.online
    }

    /// Target parameters become an exact copy of the online ones.
    pub fn sync_target(&mut self) -> Result<()> {
        self.target.copy_values_from(&self.online)
    }

    /// Per-action quantile values of one agent's utility at `omegas`.
    /// Expected-value utilities repeat one value at every level.
    pub fn utility_quantiles(&self, which: Which, obs: &[f64], omegas: &[f64]) -> Result<Vec<QuantileBatch>> {
        if omegas.is_empty() {
            return Err(invalid("at least one quantile level is required"));
        }
        let net = self.utility();
        let mut tape = Tape::new();
        let bound = tape.bind(self.params(which));
        let x = tape.constant(DenseArray::matrix(1, obs.len(), obs.to_vec())?);
        let psi = net.encode(&mut tape, &bound, x)?;
        let table = if net.embedding.is_some() {
            let phi = net.embed(&mut tape, &bound, omegas)?;
            let out = net.head(&mut tape, &bound, phi, Some(psi))?;
            tape.value(out).clone()
        } else {
            let out = net.head(&mut tape, &bound, psi, None)?;
            let row = tape.value(out).data().to_vec();
            DenseArray::from_rows(&vec![row; omegas.len()])?
        };
        (0..self.arch.num_actions)
            .map(|u| {
                let values = (0..omegas.len()).map(|r| table.get2(r, u)).collect();
                QuantileBatch::new(omegas.to_vec(), values)
            })
            .collect()
    }

    /// Mean embedding over the stratified grid of `n_eval` levels, `[1, H]`;
    /// `None` for expected-value utilities. By linearity of the head,
    /// `head(ψ ⊙ mean φ)` is the grid mean of the utility quantiles.
    pub fn mean_embedding(&self, which: Which, n_eval: usize) -> Result<Option<DenseArray>> {
        let net = self.utility();
        if net.embedding.is_none() {
            return Ok(None);
        }
        if n_eval == 0 {
            return Err(invalid("evaluation grid needs at least one level"));
        }
        let mut tape = Tape::new();
        let bound = tape.bind(self.params(which));
        let phi = net.embed(&mut tape, &bound, &stratified_grid(n_eval))?;
        let mean = tape.mean_axis(phi, 0)?;
        Ok(Some(tape.value(mean).clone()))
    }

    /// Utility means for a stack of observations `[R, obs_dim]`, giving
    /// `[R, U]`. `embedding` comes from [`Self::mean_embedding`].
    pub fn utility_means(
        &self,
        which: Which,
        obs_rows: &DenseArray,
        embedding: Option<&DenseArray>,
    ) -> Result<DenseArray> {
        let net = self.utility();
        if net.embedding.is_some() != embedding.is_some() {
            return Err(invalid("mean embedding must be given exactly for distributional utilities"));
        }
        let distinct = Distinct::new(obs_rows, None)?;
        let mut tape = Tape::new();
        let bound = tape.bind(self.params(which));
        let x = tape.constant(distinct.obs.clone());
        let psi = net.encode(&mut tape, &bound, x)?;
        let e = embedding.map(|e| tape.constant(e.clone()));
        let out = net.head(&mut tape, &bound, psi, e)?;
        let means = tape.value(out);
        let rows: Vec<Vec<f64>> = distinct.index.iter().map(|&i| means.row(i).to_vec()).collect();
        DenseArray::from_rows(&rows)
    }

    /// Mean of each action's utility over the stratified grid of `n_eval`.
    pub fn utility_mean(&self, which: Which, obs: &[f64], n_eval: usize) -> Result<Vec<f64>> {
        let e = self.mean_embedding(which, n_eval)?;
        let rows = DenseArray::matrix(1, obs.len(), obs.to_vec())?;
        Ok(self.utility_means(which, &rows, e.as_ref())?.into_data())
    }

    /// Per-agent argmax of the online utility means; lowest index on ties.
    pub fn greedy_joint_action(&self, observations: &[Vec<f64>], n_eval: usize) -> Result<Vec<usize>> {
        let e = self.mean_embedding(Which::Online, n_eval)?;
        self.greedy_with(Which::Online, observations, e.as_ref())
    }

    /// Greedy actions for each observation, given a precomputed mean embedding.
    pub fn greedy_with(
        &self,
        which: Which,
        observations: &[Vec<f64>],
        embedding: Option<&DenseArray>,
    ) -> Result<Vec<usize>> {
        let rows = DenseArray::from_rows(observations)?;
        let means = self.utility_means(which, &rows, embedding)?;
        Ok((0..observations.len()).map(|r| argmax(means.row(r))).collect())
    }

    /// `Ψ(q | s)` with this model's mixer.
    pub fn mix_expected(&self, which: Which, q: &[f64], state: &[f64]) -> Result<f64> {
        if q.len() != self.arch.num_agents {
            return Err(invalid(format!("{} utilities for {} agents", q.len(), self.arch.num_agents)));
        }
        let mut tape = Tape::new();
        let bound = tape.bind(self.params(which));
        let qv = tape.constant(DenseArray::matrix(1, q.len(), q.to_vec())?);
        let sv = tape.constant(DenseArray::matrix(1, state.len(), state.to_vec())?);
        let out = mix_on_tape(self.algorithm.mixer(), &mut tape, &bound, qv, sv)?;
        Ok(tape.value(out).data()[0])
    }

    /// State-dependent bias `V(s)` of a monotonic mixer; `None` otherwise.
    pub fn state_value(&self, which: Which, state: &[f64]) -> Result<Option<f64>> {
        if self.algorithm.mixer() != MixerKind::Monotonic {
            return Ok(None);
        }
        let mut tape = Tape::new();
        let bound = tape.bind(self.params(which));
        let sv = tape.constant(DenseArray::matrix(1, state.len(), state.to_vec())?);
        let v = state_bias_on_tape(&mut tape, &bound, sv)?;
        Ok(Some(tape.value(v).data()[0]))
    }

    /// Joint return quantiles of one joint action at shared levels `omegas`.
    pub fn compose_joint_quantiles(
        &self,
        which: Which,
        observations: &[Vec<f64>],
        state: &[f64],
        actions: &[usize],
        omegas: &[f64],
    ) -> Result<QuantileBatch> {
        if self.algorithm.mixer() == MixerKind::None {
            return Err(invalid("independent learners have no joint return"));
        }
        if observations.len() != self.arch.num_agents || actions.len() != self.arch.num_agents {
            return Err(invalid(format!("expected {} observations and actions", self.arch.num_agents)));
        }
        if omegas.is_empty() {
            return Err(invalid("at least one quantile level is required"));
        }
        let obs = DenseArray::from_rows(observations)?;
        let states = DenseArray::matrix(1, state.len(), state.to_vec())?;
        let mut tape = Tape::new();
        let bound = tape.bind(self.params(which));
        let out = self.predict_on_tape(&mut tape, &bound, &obs, &states, actions, omegas)?;
        let row = tape.value(out).data().to_vec();
        let values = if row.len() == omegas.len() { row } else { vec![row[0]; omegas.len()] };
        QuantileBatch::new(omegas.to_vec(), values)
    }

    /// Joint return quantiles of every joint action at one state, in
    /// mixed-radix order with agent 0 most significant.
    pub fn compose_all_joint_quantiles(
        &self,
        which: Which,
        observations: &[Vec<f64>],
        state: &[f64],
        omegas: &[f64],
    ) -> Result<Vec<QuantileBatch>> {
        let k = self.arch.num_agents;
        let u = self.arch.num_actions;
        if self.algorithm.mixer() == MixerKind::None {
            return Err(invalid("independent learners have no joint return"));
        }
        if observations.len() != k || omegas.is_empty() {
            return Err(invalid(format!("expected {k} observations and at least one level")));
        }
        let count = u.pow(k as u32);
        let mut obs = Vec::with_capacity(count * k);
        let mut actions = Vec::with_capacity(count * k);
        for index in 0..count {
            let mut rest = index;
            let mut joint = vec![0; k];
            for slot in joint.iter_mut().rev() {
                *slot = rest % u;
                rest /= u;
            }
            obs.extend(observations.iter().cloned());
            actions.extend(joint);
        }
        let obs = DenseArray::from_rows(&obs)?;
        let states = DenseArray::from_rows(&vec![state.to_vec(); count])?;
        let mut tape = Tape::new();
        let bound = tape.bind(self.params(which));
        let out = self.predict_on_tape(&mut tape, &bound, &obs, &states, &actions, omegas)?;
        let out = tape.value(out);
        (0..count)
            .map(|j| {
                let row = out.row(j);
                let values = if row.len() == omegas.len() { row.to_vec() } else { vec![row[0]; omegas.len()] };
                QuantileBatch::new(omegas.to_vec(), values)
            })
            .collect()
    }

    /// Predicted values for a batch of `B` samples.
    ///
    /// `obs` is `[B·K, obs_dim]` with agents contiguous inside each sample,
    /// `states` is `[B, S]` and `actions` has `B·K` entries. The result has
    /// one row per sample (`[B, N]`) when a mixer is present and one row per
    /// agent (`[B·K, N]`) for independent learners; `N = 1` for expected
    /// utilities, which ignore `omegas`.
    pub fn predict_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        obs: &DenseArray,
        states: &DenseArray,
        actions: &[usize],
        omegas: &[f64],
    ) -> Result<Var> {
        let k = self.arch.num_agents;
        let rows = obs.dims2().map(|(r, _)| r).unwrap_or(0);
        if !rows.is_multiple_of(k) || states.dims2().map(|(b, _)| b * k) != Some(rows) {
            return Err(invalid(format!(
                "observation rows {:?} and state rows {:?} disagree for {k} agents",
                obs.shape(),
                states.shape()
            )));
        }
        let batch = rows / k;
        let net = self.utility();
        let mixer = self.algorithm.mixer();
        let distinct = Distinct::new(obs, Some(actions))?;
        let x = tape.constant(distinct.obs.clone());
        let psi = net.encode(tape, bound, x)?;
        let s = tape.constant(states.clone());

        if net.embedding.is_none() {
            let q = net.chosen_values(tape, bound, psi, &distinct.actions)?;
            let q = distinct.expand(tape, q)?;
            if mixer == MixerKind::None {
                return Ok(q);
            }
            let q = tape.reshape(q, &[batch, k])?;
            return mix_on_tape(mixer, tape, bound, q, s);
        }

        let n = omegas.len();
        let phi = net.embed(tape, bound, omegas)?;
        let f = net.chosen_quantiles(tape, bound, psi, phi, &distinct.actions)?;
        let f = distinct.expand(tape, f)?;
        if mixer == MixerKind::None {
            return Ok(f);
        }
        let q = tape.mean_axis(f, 1)?;
        let q_rep = tape.repeat_cols(q, n)?;
        let shape = tape.sub(f, q_rep)?;
        // Rows are (sample, agent); summing each sample's agent rows folds
        // the shape terms into one row per sample.
        let mut fold = vec![0.0; batch * rows];
        for b in 0..batch {
            fold[b * rows + b * k..b * rows + (b + 1) * k].fill(1.0);
        }
        let fold = tape.constant(DenseArray::matrix(batch, rows, fold)?);
        let shape_sum = tape.matmul(fold, shape)?;
        let q = tape.reshape(q, &[batch, k])?;
        let mean = mix_on_tape(mixer, tape, bound, q, s)?;
        let mean = tape.repeat_cols(mean, n)?;
        tape.add(mean, shape_sum)
    }
}

/// Distinct input rows of a batch. Identical (observation, action) rows
/// give identical outputs, so each is evaluated once and gathered back.
struct Distinct {
    obs: DenseArray,
    actions: Vec<usize>,
    /// Distinct row used by each input row.
    index: Vec<usize>,
}

impl Distinct {
    fn new(obs: &DenseArray, actions: Option<&[usize]>) -> Result<Self> {
        let (rows, _) =
            obs.dims2().ok_or_else(|| invalid(format!("observations must be 2-D, got {:?}", obs.shape())))?;
        if let Some(a) = actions {
            if a.len() != rows {
                return Err(invalid(format!("{} actions for {rows} observation rows", a.len())));
            }
        }
        let mut seen: HashMap<(Vec<u64>, usize), usize> = HashMap::new();
        let mut keep = Vec::new();
        let mut index = Vec::with_capacity(rows);
        for r in 0..rows {
            let action = actions.map_or(0, |a| a[r]);
            let key = (obs.row(r).iter().map(|v| v.to_bits()).collect(), action);
            let next = keep.len();
            let slot = *seen.entry(key).or_insert(next);
            if slot == next {
                keep.push(r);
            }
            index.push(slot);
        }
        let kept: Vec<Vec<f64>> = keep.iter().map(|&r| obs.row(r).to_vec()).collect();
        Ok(Self {
            obs: DenseArray::from_rows(&kept)?,
            actions: keep.iter().map(|&r| actions.map_or(0, |a| a[r])).collect(),
            index,
        })
    }

    /// Gathers distinct-row results back to one row per input.
    fn expand(&self, tape: &mut Tape, values: Var) -> Result<Var> {
        let unique = self.actions.len();
        if unique == self.index.len() {
            return Ok(values);
        }
        let mut gather = vec![0.0; self.index.len() * unique];
        for (r, &i) in self.index.iter().enumerate() {
            gather[r * unique + i] = 1.0;
        }
        let gather = tape.constant(DenseArray::matrix(self.index.len(), unique, gather)?);
        tape.matmul(gather, values)
    }
}

fn utility_for(algorithm: Algorithm, arch: &Architecture) -> UtilityNetwork {
    UtilityNetwork {
        obs_dim: arch.obs_dim,
        hidden: arch.hidden,
        num_actions: arch.num_actions,
        embedding: algorithm
            .is_distributional()
            .then_some(CosineEmbeddingSpec { n: arch.cos_features, embed_dim: arch.hidden }),
    }
}
