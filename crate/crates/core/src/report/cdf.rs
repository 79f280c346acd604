use std::fmt::Write as _;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::distribution::stratified_grid;
use crate::env::MatrixGame;
use crate::error::{invalid, Result};
use crate::networks::{JointValueModel, MixerKind, Which};

/// Sorted quantile samples of each agent's utility and of the joint return
/// for one state and joint action, next to the true reward CDF of that cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfSampleDump {
    pub state: String,
    /// Per-agent action labels.
    pub actions: Vec<String>,
    /// `i / n` for `i = 1..=n`.
    pub cumulative_probability: Vec<f64>,
    /// `agents[k]`: ascending samples of agent `k`'s utility.
    pub agents: Vec<Vec<f64>>,
    /// Ascending joint samples; `None` for independent learners.
    pub joint: Option<Vec<f64>>,
    /// Evenly spaced points covering the samples and `μ ± 4σ`.
    pub grid_value: Vec<f64>,
    /// CDF of the cell's Normal reward at each grid value.
    pub true_cdf: Vec<f64>,
}

impl CdfSampleDump {
    pub fn columns(&self) -> Vec<String> {
        let mut cols = vec!["cumulative_probability".to_string()];
        cols.extend((1..=self.agents.len()).map(|k| format!("agent_{k}")));
        if self.joint.is_some() {
            cols.push("joint".into());
        }
        cols.push("grid_value".into());
        cols.push("true_cdf".into());
        cols
    }

    /// Conventional file name, e.g. `cdf_2B_B-B.csv`.
    pub fn file_name(&self) -> String {
        cdf_file_name(&self.state, &self.actions)
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns().join(",");
        out.push('\n');
        for i in 0..self.cumulative_probability.len() {
            let mut fields = vec![self.cumulative_probability[i]];
            fields.extend(self.agents.iter().map(|a| a[i]));
            if let Some(j) = &self.joint {
                fields.push(j[i]);
            }
            fields.push(self.grid_value[i]);
            fields.push(self.true_cdf[i]);
            let line: Vec<String> = fields.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }
}

pub fn cdf_file_name(state: &str, actions: &[String]) -> String {
    format!("cdf_{state}_{}.csv", actions.join("-"))
}

/// Samples the online network of `model` on the stratified grid of `n`
/// levels at `state` under `joint`.
pub fn cdf_sample_dump(
    model: &JointValueModel,
    game: &MatrixGame,
    state: usize,
    joint: &[usize],
    n: usize,
) -> Result<CdfSampleDump> {
    let spec = game.spec();
    if n < 2 {
        return Err(invalid("a CDF dump needs at least 2 samples"));
    }
    if state >= spec.states.len() {
        return Err(invalid(format!("state index {state} out of range")));
    }
    if joint.len() != spec.num_agents() || joint.iter().zip(&spec.action_labels).any(|(&a, l)| a >= l.len()) {
        return Err(invalid(format!("joint action {joint:?} does not fit the game")));
    }
    let grid = stratified_grid(n);
    let observations = game.observations_in(state);
    let agents = observations
        .iter()
        .zip(joint)
        .map(|(obs, &u)| {
            let batches = model.utility_quantiles(Which::Online, obs, &grid)?;
            batches.get(u).map(|b| b.sorted_values()).ok_or_else(|| invalid("action outside the model"))
        })
        .collect::<Result<Vec<_>>>()?;
    let joint_samples = if model.algorithm().mixer() == MixerKind::None {
        None
    } else {
        let batch =
            model.compose_joint_quantiles(Which::Online, &observations, &game.features_of(state), joint, &grid)?;
        Some(batch.sorted_values())
    };

    let payoff = spec.payoffs[state][spec.joint_index(joint)];
    let sigma = payoff.sigma2.sqrt();
    let all = agents.iter().flatten().chain(joint_samples.iter().flatten());
    let (mut lo, mut hi) =
        all.fold((payoff.mu - 4.0 * sigma, payoff.mu + 4.0 * sigma), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi - lo < 1e-9 {
        lo -= 1.0;
        hi += 1.0;
    }
    let grid_value: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let true_cdf = if sigma > 0.0 {
        let normal = Normal::new(payoff.mu, sigma).map_err(|e| invalid(e.to_string()))?;
        grid_value.iter().map(|&x| normal.cdf(x)).collect()
    } else {
        grid_value.iter().map(|&x| if x >= payoff.mu { 1.0 } else { 0.0 }).collect()
    };

    Ok(CdfSampleDump {
        state: spec.states[state].clone(),
        actions: joint.iter().zip(&spec.action_labels).map(|(&a, l)| l[a].clone()).collect(),
        cumulative_probability: (1..=n).map(|i| i as f64 / n as f64).collect(),
        agents,
        joint: joint_samples,
        grid_value,
        true_cdf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::two_step_game;
    use crate::networks::{Algorithm, Architecture};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dump(algo: Algorithm, state: usize, joint: &[usize], n: usize) -> CdfSampleDump {
        let game = two_step_game();
        let mut arch = Architecture::for_env(&game).unwrap();
        arch.hidden = 16;
        arch.cos_features = 16;
        let m = JointValueModel::new(algo, arch, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        cdf_sample_dump(&m, &game, state, joint, n).unwrap()
    }

    #[test]
    fn columns_and_name() {
        let d = dump(Algorithm::Dmix, 2, &[1, 1], 50);
        assert_eq!(d.file_name(), "cdf_2B_B-B.csv");
        assert_eq!(d.columns(), ["cumulative_probability", "agent_1", "agent_2", "joint", "grid_value", "true_cdf"]);
        let csv = d.to_csv();
        assert_eq!(csv.lines().count(), 51);
        let iql = dump(Algorithm::Diql, 2, &[1, 1], 50);
        assert!(!iql.columns().contains(&"joint".to_string()));
    }

    #[test]
    fn samples_sorted_and_probabilities_exact() {
        let d = dump(Algorithm::Ddn, 2, &[1, 1], 64);
        for col in d.agents.iter().chain(d.joint.iter()) {
            assert!(col.windows(2).all(|w| w[0] <= w[1]));
        }
        for (i, p) in d.cumulative_probability.iter().enumerate() {
            assert_eq!(*p, (i + 1) as f64 / 64.0);
        }
        assert!(d.true_cdf.windows(2).all(|w| w[0] <= w[1]));
        assert!(d.grid_value[0] <= 8.0 - 4.0 * 29f64.sqrt());
    }

    #[test]
    fn degenerate_cell_has_step_cdf() {
        let d = dump(Algorithm::Ddn, 1, &[0, 0], 20);
        for (x, c) in d.grid_value.iter().zip(&d.true_cdf) {
            assert_eq!(*c, if *x >= 7.0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn bad_arguments_are_rejected() {
        let game = two_step_game();
        let m = JointValueModel::new(
            Algorithm::Ddn,
            Architecture::for_env(&game).unwrap(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(cdf_sample_dump(&m, &game, 9, &[0, 0], 10).is_err());
        assert!(cdf_sample_dump(&m, &game, 0, &[0, 2], 10).is_err());
        assert!(cdf_sample_dump(&m, &game, 0, &[0], 10).is_err());
    }
}
