use rand::Rng;
use serde::{Deserialize, Serialize};

use super::utility::{init_linear, linear};
use crate::autodiff::{Bound, DenseArray, ParameterSet, Tape, Var};
use crate::error::{invalid, Result};

/// How per-agent expected utilities combine into the joint value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    /// Independent learners; nothing is mixed.
    None,
    /// Plain sum.
    Additive,
    /// State-conditioned two-layer network with non-negative weights.
    Monotonic,
}

const W1: &str = "mixer.w1";
const B1: &str = "mixer.b1";
const W2: &str = "mixer.w2";
const V1: &str = "mixer.v1";
const V2: &str = "mixer.v2";

/// Initializes the hypernetworks of a monotonic mixer: first-layer weights
/// (`K·E` outputs), first-layer bias, second-layer weights and the two-layer
/// state value `V(s)`.
pub(crate) fn init_monotonic<R: Rng + ?Sized>(
    params: &mut ParameterSet,
    state_dim: usize,
    num_agents: usize,
    width: usize,
    rng: &mut R,
) -> Result<()> {
    init_linear(params, W1, state_dim, num_agents * width, rng)?;
    init_linear(params, B1, state_dim, width, rng)?;
    init_linear(params, W2, state_dim, width, rng)?;
    init_linear(params, V1, state_dim, width, rng)?;
    init_linear(params, V2, width, 1, rng)
}

/// Mixes `q` (`[B, K]`) under `state` (`[B, S]`) into `[B, 1]`.
///
/// Monotonic: `Σₑ |w2(s)|ₑ · relu(Σₖ qₖ |W1(s)|ₖₑ + b1(s)ₑ) + V(s)`; every
/// weight touching `q` passes through `abs`, so the output is non-decreasing
/// in each `qₖ`.
pub fn mix_on_tape(kind: MixerKind, tape: &mut Tape, bound: &Bound, q: Var, state: Var) -> Result<Var> {
    let (batch, k) = tape.value(q).dims2().ok_or_else(|| invalid("mixer input must be [batch, agents]"))?;
    match kind {
        MixerKind::None => Err(invalid("independent learners have no mixer")),
        MixerKind::Additive => tape.sum_axis(q, 1),
        MixerKind::Monotonic => {
            if tape.value(state).dims2().map(|(b, _)| b) != Some(batch) {
                return Err(invalid("mixer state rows must match the batch"));
            }
            let w1_raw = linear(tape, bound, W1, state)?;
            let ke = tape.value(w1_raw).dims2().map(|(_, c)| c).unwrap_or(0);
            if k == 0 || !ke.is_multiple_of(k) {
                return Err(invalid(format!("mixer built for a different agent count ({ke} weights, {k} agents)")));
            }
            let width = ke / k;
            let w1 = tape.abs(w1_raw)?;

            // Spread q[b, k] over columns k·E..(k+1)·E, weight, then fold agents.
            let mut spread = vec![0.0; k * ke];
            let mut fold = vec![0.0; ke * width];
            for a in 0..k {
                for e in 0..width {
                    spread[a * ke + a * width + e] = 1.0;
                    fold[(a * width + e) * width + e] = 1.0;
                }
            }
            let spread = tape.constant(DenseArray::matrix(k, ke, spread)?);
            let fold = tape.constant(DenseArray::matrix(ke, width, fold)?);
            let q_spread = tape.matmul(q, spread)?;
            let weighted = tape.mul(q_spread, w1)?;
            let pre = tape.matmul(weighted, fold)?;
            let b1 = linear(tape, bound, B1, state)?;
            let pre = tape.add(pre, b1)?;
            let hidden = tape.relu(pre)?;

            let w2_raw = linear(tape, bound, W2, state)?;
            let w2 = tape.abs(w2_raw)?;
            let out = tape.mul(hidden, w2)?;
            let out = tape.sum_axis(out, 1)?;
            let v = state_bias_on_tape(tape, bound, state)?;
            tape.add(out, v)
        }
    }
}

/// State value `V(s)` of a monotonic mixer: `[B, S] -> [B, 1]`.
pub fn state_bias_on_tape(tape: &mut Tape, bound: &Bound, state: Var) -> Result<Var> {
    let h = linear(tape, bound, V1, state)?;
    let h = tape.relu(h)?;
    linear(tape, bound, V2, h)
}
