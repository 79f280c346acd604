//! Invariant suites runnable from the command line: tape gradients against
//! finite differences, decentralized greedy consistency, comonotonic quantile
//! mixtures and the quantile Huber kernel.

use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::autodiff::{DenseArray, Primitive, Tape, Var};
use crate::distribution::{
    empirical_moments, expectation, quantile_huber, quantile_mixture, stratified_grid, QuantileBatch,
};
use crate::error::{invalid, Result};
use crate::networks::{Algorithm, Architecture, JointValueModel};
use crate::training::digm_consistency_check;

/// Central difference step.
pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOLERANCE: f64 = 1e-4;
pub const GRAD_ABS_FLOOR: f64 = 1e-7;
const MAX_WIDTH: usize = 8;
const MAX_DEPTH: usize = 4;
/// Pre-activations of `relu` and `abs` closer to their kink than this make
/// finite differences meaningless, so such inputs are redrawn.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
enum NodeSpec {
    Input(Vec<usize>),
    Op(Primitive, Vec<usize>),
}

/// A random expression over the tape primitives, reduced to a scalar by a
/// weighted sum so every output entry matters.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomGraph {
    nodes: Vec<NodeSpec>,
    readout: DenseArray,
}

fn shape2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [r, c] => (*r, *c),
        [n] => (1, *n),
        _ => (1, 1),
    }
}

fn random_array<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> DenseArray {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    DenseArray::new(shape.to_vec(), data).expect("shape matches data")
}

impl RandomGraph {
    /// Draws a graph with at most four layers of primitives whose inputs and
    /// intermediate values have at most 8 rows and columns.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut nodes = Vec::new();
        let mut shapes: Vec<Vec<usize>> = Vec::new();
        let mut depth: Vec<usize> = Vec::new();
        fn add_input(
            nodes: &mut Vec<NodeSpec>,
            shapes: &mut Vec<Vec<usize>>,
            depth: &mut Vec<usize>,
            s: Vec<usize>,
        ) -> usize {
            nodes.push(NodeSpec::Input(s.clone()));
            shapes.push(s);
            depth.push(0);
            nodes.len() - 1
        }
        let first = vec![rng.gen_range(1..=MAX_WIDTH), rng.gen_range(1..=MAX_WIDTH)];
        add_input(&mut nodes, &mut shapes, &mut depth, first);

        let mut current = 0;
        let layers = rng.gen_range(1..=MAX_DEPTH);
        for _ in 0..layers {
            let (r, c) = shape2(&shapes[current]);
            let choice = rng.gen_range(0..14);
            let (prim, inputs, out): (Primitive, Vec<usize>, Vec<usize>) = match choice {
                0 => {
                    let n = rng.gen_range(1..=MAX_WIDTH);
                    let b = add_input(&mut nodes, &mut shapes, &mut depth, vec![c, n]);
                    (Primitive::MatMul, vec![current, b], vec![r, n])
                }
                1 => (Primitive::Transpose, vec![current], vec![c, r]),
                2..=4 => {
                    let prim = [Primitive::Add, Primitive::Sub, Primitive::Mul][choice - 2].clone();
                    let other_shape = if rng.gen_bool(0.3) { vec![1, c] } else { vec![r, c] };
                    let b = match shapes.iter().position(|s| *s == other_shape) {
                        Some(i) if i != current && rng.gen_bool(0.5) => i,
                        _ => add_input(&mut nodes, &mut shapes, &mut depth, other_shape),
                    };
                    (prim, vec![current, b], vec![r, c])
                }
                5 => (Primitive::Relu, vec![current], vec![r, c]),
                6 => (Primitive::Cos, vec![current], vec![r, c]),
                7 => (Primitive::Abs, vec![current], vec![r, c]),
                8 => (Primitive::Scale(rng.gen_range(-2.0..2.0)), vec![current], vec![r, c]),
                9 => (Primitive::Shift(rng.gen_range(-1.0..1.0)), vec![current], vec![r, c]),
                10 => {
                    let axis = rng.gen_range(0..2);
                    let prim = if rng.gen_bool(0.5) { Primitive::SumAxis(axis) } else { Primitive::MeanAxis(axis) };
                    let out = if axis == 0 { vec![1, c] } else { vec![r, 1] };
                    (prim, vec![current], out)
                }
                11 => (Primitive::Reshape(vec![c, r]), vec![current], vec![c, r]),
                12 if r < MAX_WIDTH || c < MAX_WIDTH => {
                    let axis = if r == MAX_WIDTH {
                        1
                    } else if c == MAX_WIDTH {
                        0
                    } else {
                        rng.gen_range(0..2)
                    };
                    let extra = rng.gen_range(1..=MAX_WIDTH - if axis == 0 { r } else { c });
                    let (other, out) = if axis == 0 {
                        (vec![extra, c], vec![r + extra, c])
                    } else {
                        (vec![r, extra], vec![r, c + extra])
                    };
                    let b = add_input(&mut nodes, &mut shapes, &mut depth, other);
                    (Primitive::Concat(axis), vec![current, b], out)
                }
                _ => {
                    if r == 1 {
                        let rows = rng.gen_range(1..=MAX_WIDTH);
                        (Primitive::Broadcast(rows), vec![current], vec![rows, c])
                    } else {
                        (Primitive::Cos, vec![current], vec![r, c])
                    }
                }
            };
            let d = 1 + inputs.iter().map(|&i| depth[i]).max().unwrap_or(0);
            nodes.push(NodeSpec::Op(prim, inputs));
            shapes.push(out);
            depth.push(d);
            current = nodes.len() - 1;
        }
        let readout = random_array(&shapes[current], rng);
        Self { nodes, readout }
    }

    /// Shapes of the inputs, in order.
    pub fn input_shapes(&self) -> Vec<Vec<usize>> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                NodeSpec::Input(s) => Some(s.clone()),
                NodeSpec::Op(..) => None,
            })
            .collect()
    }

    /// Number of primitive applications.
    pub fn num_ops(&self) -> usize {
        self.nodes.len() - self.input_shapes().len()
    }

    pub fn random_inputs<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<DenseArray> {
        self.input_shapes().iter().map(|s| random_array(s, rng)).collect()
    }

    fn build(&self, tape: &mut Tape, inputs: &[DenseArray]) -> Result<(Vec<Var>, Var, f64)> {
        if inputs.len() != self.input_shapes().len() {
            return Err(invalid("wrong number of graph inputs"));
        }
        let mut vars = Vec::with_capacity(self.nodes.len());
        let mut leaves = Vec::new();
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let v = match node {
                NodeSpec::Input(_) => {
                    let v = tape.variable(inputs[leaves.len()].clone());
                    leaves.push(v);
                    v
                }
                NodeSpec::Op(prim, parents) => {
                    let args: Vec<Var> = parents.iter().map(|&p| vars[p]).collect();
                    if matches!(prim, Primitive::Relu | Primitive::Abs) {
                        for &x in tape.value(args[0]).data() {
                            if x != 0.0 {
                                margin = margin.min(x.abs());
                            }
                        }
                    }
                    tape.apply(prim.clone(), &args)?
                }
            };
            vars.push(v);
        }
        let readout = tape.constant(self.readout.clone());
        let weighted = tape.mul(*vars.last().expect("graph has nodes"), readout)?;
        let root = tape.sum(weighted)?;
        Ok((leaves, root, margin))
    }

    /// Scalar output at `inputs`.
    pub fn value(&self, inputs: &[DenseArray]) -> Result<f64> {
        let mut tape = Tape::new();
        let (_, root, _) = self.build(&mut tape, inputs)?;
        Ok(tape.value(root).data()[0])
    }

    /// Smallest non-zero distance of a `relu`/`abs` argument from its kink.
    pub fn kink_margin(&self, inputs: &[DenseArray]) -> Result<f64> {
        let mut tape = Tape::new();
        Ok(self.build(&mut tape, inputs)?.2)
    }

    /// Reverse-mode gradient with respect to every input.
    pub fn gradients(&self, inputs: &[DenseArray]) -> Result<Vec<DenseArray>> {
        let mut tape = Tape::new();
        let (leaves, root, _) = self.build(&mut tape, inputs)?;
        let grads = tape.backward(root)?;
        Ok(leaves
            .iter()
            .zip(inputs)
            .map(|(&v, x)| grads.get(v).cloned().unwrap_or_else(|| DenseArray::zeros(x.shape())))
            .collect())
    }
}

/// Relative error with an absolute floor: passes when either is met.
pub fn gradient_matches(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= GRAD_ABS_FLOOR || diff <= GRAD_REL_TOLERANCE * analytic.abs().max(numeric.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub graphs: usize,
    pub entries: usize,
    pub failures: usize,
    /// Over entries whose absolute error exceeds the floor.
    pub max_relative_error: f64,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Checks `graphs` random graphs against central differences.
pub fn gradient_suite(graphs: usize, seed: u64) -> Result<GradientReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradientReport { graphs, entries: 0, failures: 0, max_relative_error: 0.0 };
    for _ in 0..graphs {
        let graph = RandomGraph::random(&mut rng);
        let mut inputs = graph.random_inputs(&mut rng);
        while graph.kink_margin(&inputs)? < KINK_MARGIN {
            inputs = graph.random_inputs(&mut rng);
        }
        let analytic = graph.gradients(&inputs)?;
        for (i, grad) in analytic.iter().enumerate() {
            for j in 0..grad.len() {
                let numeric = central_difference(&graph, &inputs, i, j)?;
                let a = grad.data()[j];
                let scale = a.abs().max(numeric.abs());
                if (a - numeric).abs() > GRAD_ABS_FLOOR {
                    report.max_relative_error = report.max_relative_error.max((a - numeric).abs() / scale);
                }
                report.entries += 1;
                if !gradient_matches(a, numeric) {
                    report.failures += 1;
                }
            }
        }
    }
    Ok(report)
}

fn central_difference(graph: &RandomGraph, inputs: &[DenseArray], which: usize, entry: usize) -> Result<f64> {
    let shifted = |delta: f64| -> Result<f64> {
        let mut xs = inputs.to_vec();
        let mut data = xs[which].data().to_vec();
        data[entry] += delta;
        xs[which] = DenseArray::new(xs[which].shape().to_vec(), data)?;
        graph.value(&xs)
    };
    Ok((shifted(FD_STEP)? - shifted(-FD_STEP)?) / (2.0 * FD_STEP))
}

/// Random 2-agent, 3-action models of one algorithm; counts instances whose
/// greedy tuple attains the joint maximum.
pub fn digm_suite(algorithm: Algorithm, instances: usize, seed: u64) -> Result<(usize, usize)> {
    let arch = Architecture {
        num_agents: 2,
        num_actions: 3,
        obs_dim: 5,
        state_dim: 4,
        hidden: 16,
        cos_features: 16,
        mixing_width: 8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut passed = 0;
    for _ in 0..instances {
        let model = JointValueModel::new(algorithm, arch, &mut rng)?;
        let obs: Vec<Vec<f64>> = (0..2).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let state: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if digm_consistency_check(&model, &obs, &state, 64)? {
            passed += 1;
        }
    }
    Ok((passed, instances))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureReport {
    pub draws: usize,
    pub variance: f64,
    /// Largest `|E[mixture] - Σ β E[component]|` over the random grids tried.
    pub linearity_error: f64,
}

/// Sums two standard Normals through one shared level per draw, and checks
/// linearity of the expectation on random shared grids.
pub fn mixture_suite(draws: usize, seed: u64) -> Result<MixtureReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).map_err(|e| invalid(e.to_string()))?;
    let omegas: Vec<f64> = (0..draws).map(|_| rng.gen_range(f64::EPSILON..1.0)).collect();
    let unit = QuantileBatch::from_fn(omegas, |w| normal.inverse_cdf(w))?;
    let sum = quantile_mixture(&[unit.clone(), unit], &[1.0, 1.0])?;
    let variance = empirical_moments(sum.values())?.variance;

    let mut linearity_error: f64 = 0.0;
    for _ in 0..20 {
        let grid = stratified_grid(rng.gen_range(2..200));
        let parts: Vec<QuantileBatch> = (0..3)
            .map(|_| {
                let (m, s) = (rng.gen_range(-5.0..5.0), rng.gen_range(0.0..3.0));
                QuantileBatch::from_fn(grid.clone(), |w| m + s * normal.inverse_cdf(w))
            })
            .collect::<Result<_>>()?;
        let betas: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..2.0)).collect();
        let mixed = expectation(&quantile_mixture(&parts, &betas)?);
        let separate: f64 = parts.iter().zip(&betas).map(|(p, b)| b * expectation(p)).sum();
        linearity_error = linearity_error.max((mixed - separate).abs());
    }
    Ok(MixtureReport { draws, variance, linearity_error })
}

/// Hand-evaluated `(δ, ω, κ, expected)` cases of the quantile Huber kernel.
pub const QUANTILE_HUBER_CASES: [(f64, f64, f64, f64); 5] = [
    (0.0, 0.7, 1.0, 0.0),
    (0.5, 0.5, 1.0, 0.0625),
    (-0.5, 0.5, 1.0, 0.0625),
    (2.0, 1.0, 1.0, 1.5),
    (-2.0, 0.0, 1.0, 1.5),
];

/// Largest deviation from [`QUANTILE_HUBER_CASES`].
pub fn loss_suite() -> Result<f64> {
    QUANTILE_HUBER_CASES
        .iter()
        .try_fold(0.0f64, |worst, &(d, w, k, expected)| Ok(worst.max((quantile_huber(d, w, k)? - expected).abs())))
}

/// Outcome of one suite as printed by the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Runs every suite with fixed seeds.
pub fn run_all() -> Result<Vec<SuiteResult>> {
    let grad = gradient_suite(100, 0)?;
    let mut results = vec![SuiteResult {
        name: "gradients",
        passed: grad.passed(),
        detail: format!(
            "{} graphs, {} entries, {} failures, max relative error {:.2e}",
            grad.graphs, grad.entries, grad.failures, grad.max_relative_error
        ),
    }];
    for (algo, seed) in [(Algorithm::Ddn, 1), (Algorithm::Dmix, 2)] {
        let (passed, total) = digm_suite(algo, 200, seed)?;
        results.push(SuiteResult {
            name: if algo == Algorithm::Ddn { "greedy consistency (ddn)" } else { "greedy consistency (dmix)" },
            passed: passed == total,
            detail: format!("{passed}/{total} instances"),
        });
    }
    let mix = mixture_suite(100_000, 3)?;
    results.push(SuiteResult {
        name: "comonotonic mixture",
        passed: (mix.variance - 4.0).abs() <= 0.1 && mix.linearity_error <= 1e-12,
        detail: format!("variance {:.4}, linearity error {:.2e}", mix.variance, mix.linearity_error),
    });
    let worst = loss_suite()?;
    results.push(SuiteResult {
        name: "quantile huber",
        passed: worst <= 1e-12,
        detail: format!("max deviation {worst:.2e}"),
    });
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_suite_passes() {
        let r = gradient_suite(30, 11).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.entries > 0);
    }

    #[test]
    fn graphs_respect_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let g = RandomGraph::random(&mut rng);
            assert!(g.num_ops() >= 1 && g.num_ops() <= MAX_DEPTH);
            for s in g.input_shapes() {
                assert!(s.iter().all(|&d| (1..=MAX_WIDTH).contains(&d)));
            }
            let x = g.random_inputs(&mut rng);
            assert!(g.value(&x).unwrap().is_finite());
        }
    }

    #[test]
    fn wrong_gradient_is_caught() {
        assert!(gradient_matches(1.0, 1.00005));
        assert!(!gradient_matches(1.0, 1.001));
        assert!(gradient_matches(0.0, 5e-8));
    }

    #[test]
    fn small_suites_pass() {
        assert_eq!(digm_suite(Algorithm::Dmix, 10, 0).unwrap(), (10, 10));
        let m = mixture_suite(20_000, 1).unwrap();
        assert!((m.variance - 4.0).abs() < 0.2);
        assert!(m.linearity_error < 1e-12);
        assert!(loss_suite().unwrap() < 1e-12);
    }
}
