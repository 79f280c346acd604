use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, DenseArray, ParameterSet, Tape, Var};
use crate::error::{invalid, Result};

/// Cosine expansion of a quantile level followed by one ReLU layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CosineEmbeddingSpec {
    /// Number of cosine features `cos(π i ω)`, `i = 0..n`.
    pub n: usize,
    /// Output width; must match the observation encoder width.
    pub embed_dim: usize,
}

impl Default for CosineEmbeddingSpec {
    fn default() -> Self {
        Self { n: 64, embed_dim: 64 }
    }
}

/// `[N, n]` matrix of `π i ω_r`; the tape's `cos` turns it into features.
pub fn cosine_features(omegas: &[f64], n: usize) -> Result<DenseArray> {
    if let Some(w) = omegas.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(invalid(format!("quantile level {w} outside [0, 1]")));
    }
    let mut data = Vec::with_capacity(omegas.len() * n);
    for &w in omegas {
        data.extend((0..n).map(|i| PI * i as f64 * w));
    }
    DenseArray::matrix(omegas.len(), n, data)
}

/// Uniform `±1/sqrt(fan_in)` initialization of an affine layer.
pub(crate) fn init_linear<R: Rng + ?Sized>(
    params: &mut ParameterSet,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-bound..bound)).collect::<Vec<_>>();
    let w = draw(fan_in * fan_out);
    let b = draw(fan_out);
    params.insert(format!("{prefix}.w"), DenseArray::matrix(fan_in, fan_out, w)?)?;
    params.insert(format!("{prefix}.b"), DenseArray::vector(b)?)?;
    Ok(())
}

/// `x · W + b` with parameters `{prefix}.w` and `{prefix}.b`.
pub(crate) fn linear(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = bound.get(&format!("{prefix}.w"))?;
    let b = bound.get(&format!("{prefix}.b"))?;
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

/// Parameter-shared agent network.
///
/// The observation encoder `ψ` is one ReLU layer. In distributional mode the
/// quantile embedding `φ(ω)` has the same width and the action head reads
/// `ψ ⊙ φ(ω)`; in expected mode the head reads `ψ` directly and the utility
/// does not depend on `ω`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtilityNetwork {
    pub obs_dim: usize,
    pub hidden: usize,
    pub num_actions: usize,
    /// `None` for expected-value utilities.
    pub embedding: Option<CosineEmbeddingSpec>,
}

const OBS: &str = "agent.obs";
const QUANTILE: &str = "agent.quantile";
const HEAD_W: &str = "agent.head.w";
const HEAD_B: &str = "agent.head.b";

impl UtilityNetwork {
    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.hidden == 0 || self.num_actions == 0 {
            return Err(invalid("utility network dimensions must be positive"));
        }
        if let Some(e) = self.embedding {
            if e.n == 0 || e.embed_dim != self.hidden {
                return Err(invalid(format!(
                    "quantile embedding width {} must equal encoder width {} (n = {})",
                    e.embed_dim, self.hidden, e.n
                )));
            }
        }
        Ok(())
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterSet, rng: &mut R) -> Result<()> {
        self.validate()?;
        init_linear(params, OBS, self.obs_dim, self.hidden, rng)?;
        if let Some(e) = self.embedding {
            init_linear(params, QUANTILE, e.n, e.embed_dim, rng)?;
        }
        init_linear(params, "agent.head", self.hidden, self.num_actions, rng)
    }

    /// `ψ(obs)`: `[R, obs_dim] -> [R, hidden]`.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, obs: Var) -> Result<Var> {
        match tape.value(obs).dims2() {
            Some((_, d)) if d == self.obs_dim => {}
            _ => {
                return Err(invalid(format!(
                    "observation shape {:?}, expected [_, {}]",
                    tape.value(obs).shape(),
                    self.obs_dim
                )))
            }
        }
        let h = linear(tape, bound, OBS, obs)?;
        tape.relu(h)
    }

    /// `φ(ω)` for each level: `[N, hidden]`.
    pub fn embed(&self, tape: &mut Tape, bound: &Bound, omegas: &[f64]) -> Result<Var> {
        let spec = self.embedding.ok_or_else(|| invalid("expected-value utility has no quantile embedding"))?;
        if omegas.is_empty() {
            return Err(invalid("at least one quantile level is required"));
        }
        let angles = tape.constant(cosine_features(omegas, spec.n)?);
        let features = tape.cos(angles)?;
        let h = linear(tape, bound, QUANTILE, features)?;
        tape.relu(h)
    }

    /// Quantile values of one action per row: `[R, N]`.
    ///
    /// Uses `head(ψ ⊙ φ)_u = (ψ ⊙ W[:, u]) · φᵀ + b_u`, which avoids
    /// materializing an `[R·N, hidden]` intermediate.
    pub fn chosen_quantiles(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        psi: Var,
        phi: Var,
        actions: &[usize],
    ) -> Result<Var> {
        let rows = self.check_rows(tape, psi, actions)?;
        let n = tape.value(phi).dims2().map(|(n, _)| n).unwrap_or(0);
        let onehot = tape.constant(self.one_hot(actions)?);
        let (w_sel, b_sel) = self.select_head(tape, bound, onehot)?;
        let scaled = tape.mul(psi, w_sel)?;
        let phi_t = tape.transpose(phi)?;
        let values = tape.matmul(scaled, phi_t)?;
        let bias = tape.repeat_cols(b_sel, n)?;
        let out = tape.add(values, bias)?;
        debug_assert_eq!(tape.value(out).dims2(), Some((rows, n)));
        Ok(out)
    }

    /// Expected utility of one action per row: `[R, 1]`.
    pub fn chosen_values(&self, tape: &mut Tape, bound: &Bound, psi: Var, actions: &[usize]) -> Result<Var> {
        self.check_rows(tape, psi, actions)?;
        let onehot = tape.constant(self.one_hot(actions)?);
        let (w_sel, b_sel) = self.select_head(tape, bound, onehot)?;
        let prod = tape.mul(psi, w_sel)?;
        let dot = tape.sum_axis(prod, 1)?;
        tape.add(dot, b_sel)
    }

    /// Head applied to a fixed embedding: `head(ψ ⊙ e)` for `e` of shape
    /// `[1, hidden]`, or `head(ψ)` when `embedding` is `None`. Returns `[R, U]`.
    pub fn head(&self, tape: &mut Tape, bound: &Bound, psi: Var, embedding: Option<Var>) -> Result<Var> {
        let merged = match embedding {
            Some(e) => tape.mul(psi, e)?,
            None => psi,
        };
        let w = bound.get(HEAD_W)?;
        let b = bound.get(HEAD_B)?;
        let out = tape.matmul(merged, w)?;
        tape.add(out, b)
    }

    fn select_head(&self, tape: &mut Tape, bound: &Bound, onehot: Var) -> Result<(Var, Var)> {
        let w = bound.get(HEAD_W)?;
        let b = bound.get(HEAD_B)?;
        let w_t = tape.transpose(w)?;
        let w_sel = tape.matmul(onehot, w_t)?;
        let b_col = tape.reshape(b, &[self.num_actions, 1])?;
        let b_sel = tape.matmul(onehot, b_col)?;
        Ok((w_sel, b_sel))
    }

    fn check_rows(&self, tape: &Tape, psi: Var, actions: &[usize]) -> Result<usize> {
        let rows = tape.value(psi).dims2().map(|(r, _)| r).unwrap_or(0);
        if rows != actions.len() {
            return Err(invalid(format!("{} actions for {rows} encoded rows", actions.len())));
        }
        Ok(rows)
    }

    fn one_hot(&self, actions: &[usize]) -> Result<DenseArray> {
        let mut data = vec![0.0; actions.len() * self.num_actions];
        for (r, &a) in actions.iter().enumerate() {
            if a >= self.num_actions {
                return Err(invalid(format!("action {a} out of range ({} actions)", self.num_actions)));
            }
            data[r * self.num_actions + a] = 1.0;
        }
        DenseArray::matrix(actions.len(), self.num_actions, data)
    }
}
