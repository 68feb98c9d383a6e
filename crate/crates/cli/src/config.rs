//! Run configuration: one TOML file per run, merged with command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use multimode_asr::data::TaskSpec;
use multimode_asr::decode::DEFAULT_MAX_SYMBOLS_PER_FRAME;
use multimode_asr::masking::ContextSchedule;
use multimode_asr::model::ModelConfig;
use multimode_asr::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 2000,
            valid: 200,
            test: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Canonical schedule encodings; empty means fixed 0, 1, 2 and full.
    pub schedules: Vec<String>,
    pub max_symbols: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            schedules: Vec::new(),
            max_symbols: DEFAULT_MAX_SYMBOLS_PER_FRAME,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameConfig {
    pub frame_ms: f64,
    /// Falls back to the model's downsampling factor.
    pub downsample: Option<usize>,
    pub frontend_frames: usize,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            frame_ms: 10.0,
            downsample: None,
            frontend_frames: 0,
        }
    }
}

/// Input locations. Outputs always go under `--out`; inputs default to it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub data: SplitSizes,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub frame: FrameConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            seed: train.seed,
            model: ModelConfig::default(),
            task: TaskSpec::default(),
            data: SplitSizes::default(),
            train,
            sweep: SweepConfig::default(),
            frame: FrameConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Cross-field checks once all overrides are applied.
    pub fn finish(&mut self) -> anyhow::Result<()> {
        self.train.seed = self.seed;
        self.model.validate()?;
        self.task.validate()?;
        self.train.validate()?;
        if self.model.vocab != self.task.vocab || self.model.feat_dim != self.task.feat_dim {
            bail!(
                "model (vocab {}, feat_dim {}) does not fit the task (vocab {}, feat_dim {})",
                self.model.vocab,
                self.model.feat_dim,
                self.task.vocab,
                self.task.feat_dim
            );
        }
        if self.sweep.max_symbols == 0 {
            bail!("sweep.max_symbols must be at least 1");
        }
        if !(self.frame.frame_ms.is_finite() && self.frame.frame_ms >= 0.0) {
            bail!("frame.frame_ms must be a non-negative number");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 over the experiment settings; input paths are excluded so a
    /// relocated run keeps its hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        format!("{digest:x}")
    }

    pub fn downsample(&self) -> usize {
        self.frame.downsample.unwrap_or(self.model.downsample)
    }

    pub fn schedules(&self, layers: usize) -> anyhow::Result<Vec<ContextSchedule>> {
        if self.sweep.schedules.is_empty() {
            return Ok(multimode_asr::eval::default_schedules(layers));
        }
        self.sweep
            .schedules
            .iter()
            .map(|s| ContextSchedule::parse(s, layers).map_err(anyhow::Error::from))
            .collect()
    }
}

/// Splits a comma-separated schedule list, rejecting empty tokens.
pub fn split_list(text: &str) -> anyhow::Result<Vec<String>> {
    let items: Vec<String> = text.split(',').map(|s| s.trim().to_owned()).collect();
    if items.iter().any(String::is_empty) {
        bail!("empty entry in schedule list `{text}`");
    }
    Ok(items)
}
