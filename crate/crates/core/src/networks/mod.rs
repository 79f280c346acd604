//! Per-agent implicit quantile utilities, expected-value mixers and the
//! mean-shape composition of joint return quantiles.

mod mixer;
mod model;
mod utility;

pub use mixer::{mix_on_tape, state_bias_on_tape, MixerKind};
pub use model::{Architecture, JointValueModel, Which};
pub use utility::{cosine_features, CosineEmbeddingSpec, UtilityNetwork};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error};

/// Training algorithm: an expected-value method or its distributional variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Iql,
    Vdn,
    Qmix,
    Diql,
    Ddn,
    Dmix,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] =
        [Algorithm::Iql, Algorithm::Vdn, Algorithm::Qmix, Algorithm::Diql, Algorithm::Ddn, Algorithm::Dmix];

    pub fn mixer(self) -> MixerKind {
        match self {
            Algorithm::Iql | Algorithm::Diql => MixerKind::None,
            Algorithm::Vdn | Algorithm::Ddn => MixerKind::Additive,
            Algorithm::Qmix | Algorithm::Dmix => MixerKind::Monotonic,
        }
    }

    /// Whether utilities are implicit quantile functions.
    pub fn is_distributional(self) -> bool {
        matches!(self, Algorithm::Diql | Algorithm::Ddn | Algorithm::Dmix)
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Iql => "iql",
            Algorithm::Vdn => "vdn",
            Algorithm::Qmix => "qmix",
            Algorithm::Diql => "diql",
            Algorithm::Ddn => "ddn",
            Algorithm::Dmix => "dmix",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| invalid(format!("unknown algorithm `{s}`")))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
