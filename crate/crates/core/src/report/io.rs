use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{DenseArray, ParameterSet};
use crate::env::{GameSpec, MatrixGame};
use crate::error::{Error, Result};
use crate::networks::{Algorithm, Architecture, JointValueModel, Which};
use crate::training::{RunMetrics, TrainConfig};

pub const METRICS_HEADER: &str = "episode,greedy_return_mean,td_loss,epsilon";
pub const SNAPSHOT_FORMAT: &str = "dfac-model-snapshot";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Writes `contents` to a temporary file next to `path`, then renames it
/// over `path`, so readers never see a partial file.
pub fn atomic_write(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name")))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(contents)?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// One row per evaluation point, reals with six decimals.
pub fn metrics_csv(metrics: &RunMetrics) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for p in &metrics.points {
        let _ = writeln!(out, "{},{:.6},{:.6},{:.6}", p.episode, p.greedy_return_mean, p.td_loss, p.epsilon);
    }
    out
}

pub fn write_metrics_csv(path: &Path, metrics: &RunMetrics) -> Result<()> {
    atomic_write(path, metrics_csv(metrics).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Self-describing saved model: enough to rebuild the network, the training
/// configuration and the game it was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub format: String,
    pub version: u32,
    pub algorithm: Algorithm,
    pub architecture: Architecture,
    pub config: TrainConfig,
    /// Game definition in the TOML game format.
    pub game: String,
    pub online: Vec<NamedArray>,
    pub target: Vec<NamedArray>,
}

fn named_arrays(params: &ParameterSet) -> Vec<NamedArray> {
    params
        .iter()
        .map(|(name, v)| NamedArray { name: name.to_string(), shape: v.shape().to_vec(), values: v.data().to_vec() })
        .collect()
}

fn parameter_set(arrays: &[NamedArray]) -> Result<ParameterSet> {
    let mut set = ParameterSet::new();
    for a in arrays {
        let value = DenseArray::new(a.shape.clone(), a.values.clone())
            .map_err(|e| Error::Snapshot(format!("parameter `{}`: {e}", a.name)))?;
        set.insert(a.name.clone(), value)?;
    }
    Ok(set)
}

impl ModelSnapshot {
    pub fn capture(model: &JointValueModel, config: &TrainConfig, game: &GameSpec) -> Self {
        Self {
            format: SNAPSHOT_FORMAT.into(),
            version: SNAPSHOT_VERSION,
            algorithm: model.algorithm(),
            architecture: *model.architecture(),
            config: config.clone(),
            game: game.to_config_string(),
            online: named_arrays(model.params(Which::Online)),
            target: named_arrays(model.params(Which::Target)),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses and checks the format marker and version.
    pub fn from_json(text: &str) -> Result<Self> {
        let snap: Self = serde_json::from_str(text)?;
        if snap.format != SNAPSHOT_FORMAT {
            return Err(Error::Snapshot(format!("unexpected format `{}`", snap.format)));
        }
        if snap.version != SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!("unsupported version {}", snap.version)));
        }
        Ok(snap)
    }

    pub fn model(&self) -> Result<JointValueModel> {
        JointValueModel::from_parameters(
            self.algorithm,
            self.architecture,
            parameter_set(&self.online)?,
            parameter_set(&self.target)?,
        )
    }

    pub fn game(&self) -> Result<MatrixGame> {
        Ok(MatrixGame::new(GameSpec::parse(&self.game)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
