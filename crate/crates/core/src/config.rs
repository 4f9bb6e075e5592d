//! Run configuration: every tunable in one versioned JSON document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coupling::{Normalization, Strategy};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::heads::ModelConfig;
use crate::proposals::ProposalConfig;
use crate::synth::DatasetConfig;
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Each seed drives model init, sampling and proposals of one run per cell.
    pub seeds: Vec<u64>,
    /// Restrict the grid to these cell labels (e.g. `conv+sum`, `local-only`).
    pub cells: Option<Vec<String>>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![1, 2, 3],
            cells: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    /// Seed for model initialization, sampling and proposals.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub proposals: ProposalConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 1,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            proposals: ProposalConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.dataset.scene.validate()?;
        self.model.validate()?;
        self.proposals.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.ablation.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        Ok(())
    }

    /// Applies command-line overrides, then re-validates.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(s) = o.strategy {
            self.model.coupling.strategy = s;
        }
        if let Some(n) = o.normalization {
            self.model.coupling.normalization = n;
        }
        if let Some(b) = o.branches {
            let c = &mut self.model.coupling;
            (c.enable_local, c.enable_global) = match b {
                Branches::Local => (true, false),
                Branches::Global => (false, true),
                Branches::Both => (true, true),
            };
        }
        if let Some(c) = o.context {
            self.model.context = c;
        }
        if let Some(k) = o.k {
            self.model.k = k;
        }
        if let Some(s) = &o.scales {
            self.train.scales = s.clone();
        }
        self.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branches {
    Local,
    Global,
    Both,
}

impl std::str::FromStr for Branches {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Branches::Local),
            "global" => Ok(Branches::Global),
            "both" => Ok(Branches::Both),
            other => Err(Error::Config(format!("unknown branches {other:?} (local|global|both)"))),
        }
    }
}

/// Command-line overrides of config keys; `None` keeps the file's value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub strategy: Option<Strategy>,
    pub normalization: Option<Normalization>,
    pub branches: Option<Branches>,
    pub context: Option<bool>,
    pub k: Option<usize>,
    pub scales: Option<Vec<f64>>,
}
