//! Experiment configuration file.

use std::path::{Path, PathBuf};

use knudsen::geometry::{TubeFamily, TubeSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

fn default_dim() -> u32 {
    2
}

fn default_snapshots() -> usize {
    1000
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", deny_unknown_fields)]
pub enum TubeConfig {
    StraightStrip {
        width: f64,
        #[serde(default = "default_dim")]
        dim: u32,
    },
    RoughRandom {
        w_min_half: f64,
        w_max_half: f64,
        tooth_min: f64,
        tooth_max: f64,
        #[serde(default = "default_dim")]
        dim: u32,
    },
}

impl TubeConfig {
    pub fn spec(&self) -> TubeSpec {
        match *self {
            TubeConfig::StraightStrip { width, dim } => TubeSpec {
                family: TubeFamily::StraightStrip { width },
                dim,
            },
            TubeConfig::RoughRandom {
                w_min_half,
                w_max_half,
                tooth_min,
                tooth_max,
                dim,
            } => TubeSpec {
                family: TubeFamily::RoughRandom {
                    w_min_half,
                    w_max_half,
                    tooth_min,
                    tooth_max,
                },
                dim,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub t_max: f64,
    pub points_per_decade: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub tube: TubeConfig,
    pub seed: u64,
    #[serde(rename = "H")]
    pub h: f64,
    pub lambda_left: f64,
    pub lambda_right: f64,
    pub n_particles: usize,
    pub n_traj: usize,
    pub m_bins: usize,
    pub t_grid: TimeGrid,
    pub n_envs: usize,
    pub output_dir: PathBuf,
    /// Worker threads; all available cores when absent.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Snapshots taken by the event-driven gas.
    #[serde(default = "default_snapshots")]
    pub n_snapshots: usize,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: &str| Err(CliError::Config(msg.to_string()));
        self.tube.spec().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if !(self.h.is_finite() && self.h.fract() == 0.0 && self.h >= 16.0) {
            return bad("H must be an integer of at least 16");
        }
        if !(self.lambda_left >= 0.0 && self.lambda_right >= 0.0) || !self.lambda_left.is_finite() {
            return bad("injection intensities must be non-negative");
        }
        if self.lambda_left <= 0.0 {
            return bad("lambda_left must be positive");
        }
        if self.n_particles == 0 || self.n_traj < 2 || self.m_bins < 5 {
            return bad("need n_particles >= 1, n_traj >= 2 and m_bins >= 5");
        }
        if !(self.t_grid.t_max >= 100.0 && self.t_grid.t_max.is_finite()) || self.t_grid.points_per_decade == 0 {
            return bad("t_grid needs t_max >= 100 and points_per_decade >= 1");
        }
        if self.n_envs == 0 || (2..10).contains(&self.n_envs) {
            return bad("n_envs must be 1 or at least 10");
        }
        if self.n_snapshots < 100 {
            return bad("n_snapshots must be at least 100");
        }
        if self.workers == Some(0) {
            return bad("workers must be positive");
        }
        Ok(())
    }

    /// SHA-256 of the normalized configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Tube lengths of the crossing ladder: `H/4`, `H/2` and `H`.
    pub fn ladder(&self) -> Vec<f64> {
        [4.0, 2.0, 1.0].iter().map(|k| (self.h / k).round()).collect()
    }
}
