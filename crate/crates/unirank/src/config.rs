//! Run configuration: one JSON document, defaults filled in for every key
//! except `version`, `world.n_items` and `world.n_queries`. Unknown keys are
//! rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::UpqeParams;
use crate::trainer::{SystemKind, TrainingConfig};
use crate::world::{World, WorldSpec};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemSelector {
    LtTtd,
    Cascade,
    #[default]
    Both,
}

impl SystemSelector {
    pub fn systems(self) -> Vec<SystemKind> {
        match self {
            SystemSelector::LtTtd => vec![SystemKind::LtTtd],
            SystemSelector::Cascade => vec![SystemKind::Cascade],
            SystemSelector::Both => vec![SystemKind::LtTtd, SystemKind::Cascade],
        }
    }
}

/// Grids for the scaling benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub k_grid: Vec<usize>,
    pub n_grid: Vec<usize>,
    /// Timed repetitions per grid point; the minimum is kept.
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { k_grid: vec![16, 32, 64, 128, 256], n_grid: vec![1_000, 10_000, 100_000], repeats: 15 }
    }
}

/// Sizes of the theorem suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoremConfig {
    pub seed: u64,
    /// Random instances per randomized property.
    pub instances: usize,
}

impl Default for TheoremConfig {
    fn default() -> Self {
        Self { seed: 0, instances: 100 }
    }
}

fn default_cutoffs() -> Vec<usize> {
    vec![1, 5, 10, 50]
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub world: WorldSpec,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub upqe: UpqeParams,
    #[serde(default = "default_cutoffs")]
    pub cutoffs: Vec<usize>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub system: SystemSelector,
    #[serde(default)]
    pub benchmark: BenchConfig,
    #[serde(default)]
    pub theorems: TheoremConfig,
}

impl RunConfig {
    /// Parse and check everything that does not need the generated world.
    pub fn from_json(s: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    /// The fully resolved document, defaults included.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Standard desk-scale setup for `seed`.
    pub fn standard(seed: u64) -> Self {
        let mut world = WorldSpec::new(seed, 2000, 300, crate::world::defaults::vocab_size(), crate::world::defaults::latent_dim());
        world.n_heldout = 100;
        Self {
            version: CONFIG_VERSION,
            world,
            training: TrainingConfig { seed, ..TrainingConfig::default() },
            upqe: UpqeParams::default(),
            cutoffs: default_cutoffs(),
            out_dir: default_out(),
            system: SystemSelector::Both,
            benchmark: BenchConfig::default(),
            theorems: TheoremConfig::default(),
        }
    }

    /// Override both the world and the training seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.world.seed = seed;
        self.training.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return cfg(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        self.world.validate().map_err(|e| Error::Config(format!("world: {e}")))?;
        self.upqe.validate().map_err(|e| Error::Config(format!("upqe: {e}")))?;
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            return cfg("cutoffs must be a non-empty list of positive integers".into());
        }
        let b = &self.benchmark;
        if b.repeats == 0 || b.k_grid.len() < 2 || b.n_grid.len() < 2 || b.k_grid.contains(&0) || b.n_grid.contains(&0) {
            return cfg("benchmark grids need at least two positive points and repeats > 0".into());
        }
        Ok(())
    }

    /// Checks that need the world (slate size against relevant counts, ...).
    pub fn validate_with(&self, world: &World) -> Result<()> {
        self.training.validate(world).map_err(|e| Error::Config(format!("training: {e}")))
    }

    /// Report cutoffs: the configured ones plus the slate size, sorted.
    pub fn report_cutoffs(&self) -> Vec<usize> {
        let mut c = self.cutoffs.clone();
        c.push(self.training.k);
        c.sort_unstable();
        c.dedup();
        c
    }
}
