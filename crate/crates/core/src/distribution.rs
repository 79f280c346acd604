//! Quantile batches and the distributional toolkit built on them: the
//! quantile Huber regression loss, expectation, Wasserstein distance on a
//! shared grid, quantile mixtures and Bessel-corrected moments.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DenseArray, Tape, Var};
use crate::error::{invalid, Result};

/// Samples of an implicit quantile function: `values[i] = F⁻¹(omegas[i])`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileBatch {
    omegas: Vec<f64>,
    values: Vec<f64>,
}

impl QuantileBatch {
    pub fn new(omegas: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if omegas.is_empty() || omegas.len() != values.len() {
            return Err(invalid(format!(
                "quantile batch needs equal non-empty lengths, got {} levels and {} values",
                omegas.len(),
                values.len()
            )));
        }
        if let Some(w) = omegas.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(invalid(format!("quantile level {w} outside [0, 1]")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("quantile values must be finite"));
        }
        Ok(Self { omegas, values })
    }

    /// Evaluates `quantile` on every level.
    pub fn from_fn(omegas: Vec<f64>, quantile: impl Fn(f64) -> f64) -> Result<Self> {
        let values = omegas.iter().map(|&w| quantile(w)).collect();
        Self::new(omegas, values)
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values in ascending order, as needed for plotting a CDF.
    pub fn sorted_values(&self) -> Vec<f64> {
        let mut v = self.values.clone();
        v.sort_by(f64::total_cmp);
        v
    }
}

/// Quantile regression settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Huber threshold.
    pub kappa: f64,
    /// Quantile samples for the online prediction.
    pub n_pred: usize,
    /// Quantile samples for the bootstrap target.
    pub n_target: usize,
    /// Grid size used to estimate means for action selection.
    pub n_eval: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { kappa: 1.0, n_pred: 8, n_target: 8, n_eval: 32 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(invalid(format!("kappa must be positive, got {}", self.kappa)));
        }
        if self.n_pred == 0 || self.n_target == 0 || self.n_eval == 0 {
            return Err(invalid("quantile sample counts must be at least 1"));
        }
        Ok(())
    }
}

/// Mean and Bessel-corrected variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
}

/// Huber loss: `δ²/2` inside `[-κ, κ]`, `κ(|δ| - κ/2)` outside.
pub fn huber(delta: f64, kappa: f64) -> f64 {
    let a = delta.abs();
    if a <= kappa {
        0.5 * delta * delta
    } else {
        kappa * (a - 0.5 * kappa)
    }
}

/// Asymmetric Huber loss `|ω - 1{δ<0}| · L_κ(δ) / κ`.
pub fn quantile_huber(delta: f64, omega: f64, kappa: f64) -> Result<f64> {
    check_omega(omega)?;
    let weight = if delta < 0.0 { 1.0 - omega } else { omega };
    Ok(weight * huber(delta, kappa) / kappa)
}

fn check_omega(omega: f64) -> Result<()> {
    if (0.0..=1.0).contains(&omega) {
        Ok(())
    } else {
        Err(invalid(format!("quantile level {omega} outside [0, 1]")))
    }
}

/// `(1/N′) Σᵢ Σⱼ ρ(targets[j] - pred.values[i])` with `ρ` at level `pred.omegas[i]`.
pub fn pairwise_loss(pred: &QuantileBatch, targets: &[f64], kappa: f64) -> Result<f64> {
    if targets.is_empty() {
        return Err(invalid("pairwise loss needs at least one target"));
    }
    let mut total = 0.0;
    for (&w, &v) in pred.omegas.iter().zip(&pred.values) {
        for &t in targets {
            total += quantile_huber(t - v, w, kappa)?;
        }
    }
    Ok(total / targets.len() as f64)
}

/// Elementwise Huber loss on the tape, built from `abs`, `relu`, `mul` and
/// affine primitives: with `a = |δ|` and `e = relu(a - κ)`,
/// `L = ½(a - e)² + κe`.
pub fn huber_on_tape(tape: &mut Tape, delta: Var, kappa: f64) -> Result<Var> {
    let a = tape.abs(delta)?;
    let shifted = tape.shift(a, -kappa)?;
    let excess = tape.relu(shifted)?;
    let clipped = tape.sub(a, excess)?;
    let sq = tape.mul(clipped, clipped)?;
    let quad = tape.scale(sq, 0.5)?;
    let lin = tape.scale(excess, kappa)?;
    tape.add(quad, lin)
}

/// Pairwise quantile loss for a batch of rows, summed over rows.
///
/// `pred` is `[rows, N]` with column `i` evaluated at `omegas[i]`; `targets`
/// is a constant `[rows, N′]`. Each row contributes
/// `(1/N′) Σᵢ Σⱼ ρ(targets[r,j] - pred[r,i])`. Gradients flow into `pred` only.
pub fn pairwise_loss_on_tape(
    tape: &mut Tape,
    pred: Var,
    omegas: &[f64],
    targets: &DenseArray,
    kappa: f64,
) -> Result<Var> {
    let (rows, n) = tape.value(pred).dims2().ok_or_else(|| invalid("prediction must be [rows, N]"))?;
    let (t_rows, n_target) = targets.dims2().ok_or_else(|| invalid("targets must be [rows, N′]"))?;
    if rows != t_rows || n != omegas.len() || n == 0 || n_target == 0 {
        return Err(invalid(format!(
            "pairwise loss: pred [{rows}, {n}] with {} levels vs targets [{t_rows}, {n_target}]",
            omegas.len()
        )));
    }
    for &w in omegas {
        check_omega(w)?;
    }

    let flat = tape.reshape(pred, &[rows * n, 1])?;
    let pred_rep = tape.repeat_cols(flat, n_target)?;

    let mut target_rep = Vec::with_capacity(rows * n * n_target);
    for r in 0..rows {
        for _ in 0..n {
            target_rep.extend_from_slice(targets.row(r));
        }
    }
    let target_rep = DenseArray::matrix(rows * n, n_target, target_rep)?;
    let pred_vals = tape.value(pred_rep).data().to_vec();
    let weights: Vec<f64> = target_rep
        .data()
        .iter()
        .zip(&pred_vals)
        .enumerate()
        .map(|(idx, (t, p))| {
            let w = omegas[(idx / n_target) % n];
            if t - p < 0.0 {
                1.0 - w
            } else {
                w
            }
        })
        .collect();

    let target_var = tape.constant(target_rep);
    let delta = tape.sub(target_var, pred_rep)?;
    let loss = huber_on_tape(tape, delta, kappa)?;
    let weights = tape.constant(DenseArray::matrix(rows * n, n_target, weights)?);
    let weighted = tape.mul(loss, weights)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, 1.0 / (kappa * n_target as f64))
}

/// Mean of the sampled quantile values.
pub fn expectation(batch: &QuantileBatch) -> f64 {
    batch.values.iter().sum::<f64>() / batch.values.len() as f64
}

/// p-Wasserstein distance estimated on a shared sorted grid.
pub fn wasserstein(a: &QuantileBatch, b: &QuantileBatch, p: f64) -> Result<f64> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(invalid(format!("Wasserstein order must be >= 1, got {p}")));
    }
    check_shared_grid(&[a, b])?;
    if a.omegas.windows(2).any(|w| w[0] > w[1]) {
        return Err(invalid("Wasserstein grid must be sorted"));
    }
    let mean_pow = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs().powf(p)).sum::<f64>() / a.len() as f64;
    Ok(mean_pow.powf(1.0 / p))
}

fn check_shared_grid(batches: &[&QuantileBatch]) -> Result<()> {
    let Some(first) = batches.first() else {
        return Err(invalid("no quantile batches given"));
    };
    for b in &batches[1..] {
        if b.omegas != first.omegas {
            return Err(invalid("quantile batches do not share one grid"));
        }
    }
    Ok(())
}

/// Pointwise `Σₖ βₖ Fₖ⁻¹(ω)` over components sharing one grid.
pub fn quantile_mixture(components: &[QuantileBatch], betas: &[f64]) -> Result<QuantileBatch> {
    if components.is_empty() || components.len() != betas.len() {
        return Err(invalid(format!(
            "mixture needs one weight per component, got {} components and {} weights",
            components.len(),
            betas.len()
        )));
    }
    if let Some(b) = betas.iter().find(|b| !(**b >= 0.0 && b.is_finite())) {
        return Err(invalid(format!("mixture weight {b} must be non-negative")));
    }
    let refs: Vec<&QuantileBatch> = components.iter().collect();
    check_shared_grid(&refs)?;
    let mut values = vec![0.0; components[0].len()];
    for (c, &beta) in components.iter().zip(betas) {
        for (acc, v) in values.iter_mut().zip(&c.values) {
            *acc += beta * v;
        }
    }
    QuantileBatch::new(components[0].omegas.clone(), values)
}

/// Mean and `(n-1)`-denominator variance. Constant samples give exactly
/// their value and zero variance.
pub fn empirical_moments(samples: &[f64]) -> Result<Moments> {
    if samples.len() < 2 {
        return Err(invalid(format!("variance needs at least 2 samples, got {}", samples.len())));
    }
    if samples.iter().all(|&x| x == samples[0]) {
        return Ok(Moments { mean: samples[0], variance: 0.0 });
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let variance = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Ok(Moments { mean, variance })
}

/// Midpoint grid `(i - ½)/n` for `i = 1..=n`.
pub fn stratified_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
}

/// `n` i.i.d. uniform quantile levels.
pub fn sample_omegas<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.gen::<f64>()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch(omegas: &[f64], values: &[f64]) -> QuantileBatch {
        QuantileBatch::new(omegas.to_vec(), values.to_vec()).unwrap()
    }

    #[test]
    fn huber_branches() {
        assert_eq!(huber(0.0, 1.0), 0.0);
        assert!((huber(0.5, 1.0) - 0.125).abs() < 1e-15);
        assert!((huber(2.0, 1.0) - 1.5).abs() < 1e-15);
        assert!((huber(-2.0, 1.0) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn quantile_huber_cases() {
        assert_eq!(quantile_huber(0.0, 0.7, 1.0).unwrap(), 0.0);
        assert!((quantile_huber(0.5, 0.5, 1.0).unwrap() - 0.0625).abs() < 1e-15);
        assert!((quantile_huber(-0.5, 0.5, 1.0).unwrap() - 0.0625).abs() < 1e-15);
        // asymmetric weights
        assert!((quantile_huber(0.5, 0.9, 1.0).unwrap() - 0.9 * 0.125).abs() < 1e-15);
        assert!((quantile_huber(-0.5, 0.9, 1.0).unwrap() - 0.1 * 0.125).abs() < 1e-15);
        assert!(quantile_huber(0.1, 1.2, 1.0).is_err());
        assert!(quantile_huber(0.1, -0.1, 1.0).is_err());
    }

    #[test]
    fn pairwise_loss_cases() {
        let p = batch(&[0.5], &[1.25]);
        assert_eq!(pairwise_loss(&p, &[1.25], 1.0).unwrap(), 0.0);
        let p = batch(&[0.5], &[0.0]);
        assert!((pairwise_loss(&p, &[0.5], 1.0).unwrap() - 0.0625).abs() < 1e-15);
        assert!((pairwise_loss(&p, &[0.5, -0.5], 1.0).unwrap() - 0.0625).abs() < 1e-15);
        assert!(pairwise_loss(&p, &[], 1.0).is_err());
    }

    #[test]
    fn tape_loss_matches_scalar_loss() {
        let omegas = [0.1, 0.5, 0.93];
        let rows = [[0.2, -1.4, 3.0], [0.0, 0.0, 0.0]];
        let targets = [[1.0, -0.3], [2.5, -2.5]];
        let mut tape = Tape::new();
        let pred = tape.variable(DenseArray::from_rows(&rows.map(|r| r.to_vec())).unwrap());
        let t = DenseArray::from_rows(&targets.map(|r| r.to_vec())).unwrap();
        let loss = pairwise_loss_on_tape(&mut tape, pred, &omegas, &t, 1.0).unwrap();
        let expected: f64 =
            rows.iter().zip(&targets).map(|(r, t)| pairwise_loss(&batch(&omegas, r), t, 1.0).unwrap()).sum();
        assert!((tape.value(loss).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_gradient_is_weighted_clipped_error() {
        // d/dv of ρ(t - v) = -weight * clip(t - v, -κ, κ) / κ
        let mut tape = Tape::new();
        let pred = tape.variable(DenseArray::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let t = DenseArray::matrix(1, 1, vec![0.5]).unwrap();
        let loss = pairwise_loss_on_tape(&mut tape, pred, &[0.25, 0.75], &t, 1.0).unwrap();
        let g = tape.backward(loss).unwrap();
        let g = g.get(pred).unwrap().data();
        assert!((g[0] + 0.25 * 0.5).abs() < 1e-15);
        assert!((g[1] + 0.75 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn expectation_cases() {
        assert_eq!(expectation(&batch(&[0.1, 0.5, 0.9], &[1.0, 2.0, 3.0])), 2.0);
        assert_eq!(expectation(&batch(&[0.2, 0.4], &[4.5, 4.5])), 4.5);
    }

    #[test]
    fn wasserstein_cases() {
        let grid = stratified_grid(5);
        let a = QuantileBatch::from_fn(grid.clone(), |w| w * 3.0).unwrap();
        let b = QuantileBatch::from_fn(grid.clone(), |w| w * 3.0 - 1.5).unwrap();
        assert_eq!(wasserstein(&a, &a, 2.0).unwrap(), 0.0);
        assert!((wasserstein(&a, &b, 1.0).unwrap() - 1.5).abs() < 1e-12);
        let other = QuantileBatch::from_fn(stratified_grid(4), |w| w).unwrap();
        assert!(wasserstein(&a, &other, 1.0).is_err());
        assert!(wasserstein(&a, &b, 0.5).is_err());
    }

    #[test]
    fn mixture_cases() {
        let c = batch(&[0.25, 0.75], &[-1.0, 2.0]);
        assert_eq!(quantile_mixture(std::slice::from_ref(&c), &[1.0]).unwrap(), c);
        let doubled = quantile_mixture(&[c.clone(), c.clone()], &[1.0, 1.0]).unwrap();
        assert_eq!(doubled.values(), &[-2.0, 4.0]);
        assert!(quantile_mixture(std::slice::from_ref(&c), &[-0.1]).is_err());
        assert!(quantile_mixture(&[c.clone(), c], &[1.0]).is_err());
    }

    #[test]
    fn moments_cases() {
        assert_eq!(empirical_moments(&[7.0, 7.0, 7.0]).unwrap(), Moments { mean: 7.0, variance: 0.0 });
        assert_eq!(empirical_moments(&[0.0, 2.0]).unwrap(), Moments { mean: 1.0, variance: 2.0 });
        assert!(empirical_moments(&[1.0]).is_err());
    }

    #[test]
    fn stratified_grid_midpoints() {
        assert_eq!(stratified_grid(1), vec![0.5]);
        assert_eq!(stratified_grid(4), vec![0.125, 0.375, 0.625, 0.875]);
    }

    proptest! {
        #[test]
        fn quantile_huber_non_negative_and_zero_only_at_zero(delta in -10.0..10.0f64, omega in 0.001..0.999f64) {
            let v = quantile_huber(delta, omega, 1.0).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert_eq!(v == 0.0, delta == 0.0);
        }

        #[test]
        fn pairwise_loss_permutation_invariant(
            vals in prop::collection::vec(-5.0..5.0f64, 1..6),
            targets in prop::collection::vec(-5.0..5.0f64, 1..6),
        ) {
            let omegas: Vec<f64> = stratified_grid(vals.len());
            let p = QuantileBatch::new(omegas.clone(), vals.clone()).unwrap();
            let base = pairwise_loss(&p, &targets, 1.0).unwrap();
            let mut rt = targets.clone();
            rt.reverse();
            let rp = QuantileBatch::new(omegas.iter().rev().copied().collect(), vals.iter().rev().copied().collect()).unwrap();
            prop_assert!((pairwise_loss(&p, &rt, 1.0).unwrap() - base).abs() < 1e-9);
            prop_assert!((pairwise_loss(&rp, &targets, 1.0).unwrap() - base).abs() < 1e-9);
        }

        #[test]
        fn mixture_is_linear_in_weights(
            a in prop::collection::vec(-5.0..5.0f64, 4),
            b in prop::collection::vec(-5.0..5.0f64, 4),
            beta in prop::collection::vec(0.0..3.0f64, 2),
            c in 0.0..4.0f64,
        ) {
            let grid = stratified_grid(4);
            let comps = [QuantileBatch::new(grid.clone(), a).unwrap(), QuantileBatch::new(grid, b).unwrap()];
            let m = quantile_mixture(&comps, &beta).unwrap();
            let scaled: Vec<f64> = beta.iter().map(|x| c * x).collect();
            let ms = quantile_mixture(&comps, &scaled).unwrap();
            for (x, y) in m.values().iter().zip(ms.values()) {
                prop_assert!((c * x - y).abs() < 1e-9);
            }
            let lhs = expectation(&m);
            let rhs = beta[0] * expectation(&comps[0]) + beta[1] * expectation(&comps[1]);
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn wasserstein_symmetric(
            a in prop::collection::vec(-5.0..5.0f64, 3),
            b in prop::collection::vec(-5.0..5.0f64, 3),
            p in 1.0..4.0f64,
        ) {
            let grid = stratified_grid(3);
            let x = QuantileBatch::new(grid.clone(), a).unwrap();
            let y = QuantileBatch::new(grid, b).unwrap();
            prop_assert_eq!(wasserstein(&x, &y, p).unwrap(), wasserstein(&y, &x, p).unwrap());
            prop_assert_eq!(wasserstein(&x, &x, p).unwrap(), 0.0);
        }
    }
}
