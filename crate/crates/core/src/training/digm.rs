use crate::distribution::{expectation, stratified_grid, QuantileBatch};
use crate::error::{invalid, Result};
use crate::networks::{argmax, JointValueModel, Which};

/// Absolute slack when comparing joint means; two joint actions whose means
/// differ by less are treated as tied.
pub const DIGM_TOLERANCE: f64 = 1e-12;

/// Whether the per-agent greedy tuple maximizes the mean of the composed
/// joint return, found by enumerating every joint action.
///
/// Levels come from the stratified grid of `n_grid`; agents' greedy actions
/// use utility means on the same grid. Ties are resolved set-wise: the check
/// passes when the greedy tuple attains the maximum.
pub fn digm_consistency_check(
    model: &JointValueModel,
    observations: &[Vec<f64>],
    state: &[f64],
    n_grid: usize,
) -> Result<bool> {
    let omegas = stratified_grid(n_grid);
    check(model, observations, n_grid, |actions| {
        model.compose_joint_quantiles(Which::Online, observations, state, actions, &omegas)
    })
}

/// Same check with the model's mixer replaced by `mixer`, which receives the
/// per-agent means `Qₖ` of the chosen actions. Joint quantiles are
/// `mixer(Q) + Σₖ (Fₖ(ω) − Qₖ)`.
pub fn digm_consistency_check_with_mixer(
    model: &JointValueModel,
    observations: &[Vec<f64>],
    n_grid: usize,
    mixer: impl Fn(&[f64]) -> f64,
) -> Result<bool> {
    let omegas = stratified_grid(n_grid);
    let utilities = observations
        .iter()
        .map(|obs| model.utility_quantiles(Which::Online, obs, &omegas))
        .collect::<Result<Vec<_>>>()?;
    check(model, observations, n_grid, |actions| {
        let chosen: Vec<&QuantileBatch> = actions.iter().enumerate().map(|(k, &u)| &utilities[k][u]).collect();
        let q: Vec<f64> = chosen.iter().map(|b| expectation(b)).collect();
        let mean = mixer(&q);
        let values = (0..omegas.len())
            .map(|i| mean + chosen.iter().zip(&q).map(|(b, qk)| b.values()[i] - qk).sum::<f64>())
            .collect();
        QuantileBatch::new(omegas.clone(), values)
    })
}

fn check(
    model: &JointValueModel,
    observations: &[Vec<f64>],
    n_grid: usize,
    joint: impl Fn(&[usize]) -> Result<QuantileBatch>,
) -> Result<bool> {
    let arch = model.architecture();
    if observations.len() != arch.num_agents {
        return Err(invalid(format!("{} observations for {} agents", observations.len(), arch.num_agents)));
    }
    let greedy: Vec<usize> = observations
        .iter()
        .map(|obs| model.utility_mean(Which::Online, obs, n_grid).map(|m| argmax(&m)))
        .collect::<Result<_>>()?;
    let count = arch.num_actions.pow(arch.num_agents as u32);
    let mut best = f64::NEG_INFINITY;
    let mut greedy_value = f64::NEG_INFINITY;
    for index in 0..count {
        let mut rest = index;
        let mut actions = vec![0; arch.num_agents];
        for slot in actions.iter_mut().rev() {
            *slot = rest % arch.num_actions;
            rest /= arch.num_actions;
        }
        let value = expectation(&joint(&actions)?);
        best = best.max(value);
        if actions == greedy {
            greedy_value = value;
        }
    }
    Ok(greedy_value >= best - DIGM_TOLERANCE)
}
