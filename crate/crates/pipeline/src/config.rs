//! The pipeline configuration file (TOML). Every field has a default, so an
//! empty file is a complete configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stepmap_core::episode::{ObjectiveWeights, SimConfig, Simulator};
use stepmap_core::maps::SvmParams;
use stepmap_core::paramopt::{linspace, BoBudget};

use crate::error::{PipelineError, Result};

/// A uniformly spaced velocity × position grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AxesConfig {
    /// Initial CoM velocity range (m/s).
    pub velocity: [f64; 2],
    pub velocity_count: usize,
    /// Desired step position range (m).
    pub position: [f64; 2],
    pub position_count: usize,
}

impl AxesConfig {
    pub fn new(velocity_count: usize, position_count: usize) -> Self {
        Self {
            velocity: [0.1, 0.5],
            velocity_count,
            position: [0.1, 0.8],
            position_count,
        }
    }

    pub fn velocities(&self) -> Vec<f64> {
        linspace(self.velocity[0], self.velocity[1], self.velocity_count)
    }

    pub fn positions(&self) -> Vec<f64> {
        linspace(self.position[0], self.position[1], self.position_count)
    }

    fn validate(&self, name: &str) -> Result<()> {
        let ok = |r: [f64; 2], n: usize| {
            r[0].is_finite() && r[1].is_finite() && r[0] > 0.0 && (r[0] < r[1] || (n == 1 && r[0] == r[1])) && n >= 1
        };
        if !ok(self.velocity, self.velocity_count) || !ok(self.position, self.position_count) {
            return Err(PipelineError::Config(format!(
                "{name}: ranges must be positive and increasing with at least one sample"
            )));
        }
        Ok(())
    }
}

impl Default for AxesConfig {
    fn default() -> Self {
        Self::new(40, 20)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    pub n_random: usize,
    pub n_bayes: usize,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        let b = BoBudget::default();
        Self {
            n_random: b.n_random,
            n_bayes: b.n_bayes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    pub reach_samples: usize,
    pub step_samples: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            reach_samples: 1000,
            step_samples: 150,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Resolution multiplier of the safe-region rendering over the dense axes.
    pub fine_factor: usize,
    /// Raster size of one dense cell (pixels).
    pub cell_pixels: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            fine_factor: 4,
            cell_pixels: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed for every random stream.
    pub seed: u64,
    /// Worker threads for episode farms; results do not depend on it.
    pub workers: usize,
    pub out_dir: PathBuf,
    pub phase1: AxesConfig,
    pub phase2: AxesConfig,
    pub budget: BudgetConfig,
    pub weights: ObjectiveWeights,
    pub svm: SvmParams,
    pub validation: ValidationConfig,
    pub render: RenderConfig,
    pub sim: SimConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            out_dir: PathBuf::from("stepmap-out"),
            phase1: AxesConfig::new(15, 10),
            phase2: AxesConfig::new(40, 20),
            budget: BudgetConfig::default(),
            weights: ObjectiveWeights::default(),
            svm: SvmParams::default(),
            validation: ValidationConfig::default(),
            render: RenderConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(PipelineError::Config("workers must be at least 1".into()));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(PipelineError::Config("out_dir must not be empty".into()));
        }
        if self.out_dir.exists() && !self.out_dir.is_dir() {
            return Err(PipelineError::Config(format!(
                "out_dir {} exists and is not a directory",
                self.out_dir.display()
            )));
        }
        self.phase1.validate("phase1")?;
        self.phase2.validate("phase2")?;
        self.bo_budget().validate()?;
        self.weights.validate()?;
        if self.render.fine_factor == 0 || self.render.cell_pixels == 0 {
            return Err(PipelineError::Config("render factors must be positive".into()));
        }
        Simulator::new(&self.sim)?;
        Ok(())
    }

    pub fn bo_budget(&self) -> BoBudget {
        BoBudget {
            n_random: self.budget.n_random,
            n_bayes: self.budget.n_bayes,
            seed: self.seed,
        }
    }

    pub fn simulator(&self) -> Result<Simulator> {
        Ok(Simulator::new(&self.sim)?)
    }

    /// Hash of everything that can change an output; the worker count and
    /// output directory are excluded.
    pub fn hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.workers = 1;
        canonical.out_dir = PathBuf::from(".");
        Ok(hex::encode(Sha256::digest(canonical.to_toml()?.as_bytes())))
    }
}
