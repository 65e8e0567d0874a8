//! Run configuration, read from TOML.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::demand::{build_profile, load_trips, synth_scenario, DemandProfile, DemandSource, Hotspot, LoadOptions};
use crate::error::{Error, Result};
use crate::policy::{ModelKind, TrainConfig};
use crate::sim::SimConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DemandConfig {
    /// No requests at all.
    Empty,
    /// Gaussian-in-time hotspots over a flat base rate.
    Synthetic {
        #[serde(default)]
        base_rate: f64,
        #[serde(default)]
        hotspots: Vec<Hotspot>,
    },
    /// Replay a trip file tick by tick.
    Replay {
        path: PathBuf,
        #[serde(default)]
        load: LoadOptions,
    },
    /// Poisson arrivals at the hourly rates estimated from a trip file.
    Profile {
        path: PathBuf,
        #[serde(default)]
        load: LoadOptions,
        /// Number of days the file spans; rates are divided by it.
        #[serde(default = "one")]
        days: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Default for DemandConfig {
    fn default() -> Self {
        DemandConfig::Empty
    }
}

impl DemandConfig {
    /// Build the demand source; relative paths resolve against `base`.
    pub fn source(&self, sim: &SimConfig, base: &Path) -> Result<DemandSource> {
        let hours = sim.episode_ticks.div_ceil(sim.hour_ticks) as usize;
        let n = sim.grid.num_cells();
        match self {
            DemandConfig::Empty => Ok(DemandSource::Poisson(DemandProfile::zero(n, sim.hour_ticks, hours))),
            DemandConfig::Synthetic { base_rate, hotspots } => Ok(DemandSource::Poisson(synth_scenario(
                &sim.grid,
                hotspots,
                *base_rate,
                sim.hour_ticks,
                hours,
            )?)),
            DemandConfig::Replay { path, load } => {
                let (trips, _) = load_trips(&base.join(path), &sim.grid, load)?;
                Ok(DemandSource::replay(trips))
            }
            DemandConfig::Profile { path, load, days } => {
                if !(*days > 0.0) {
                    return Err(Error::Config("days must be positive".into()));
                }
                let (trips, _) = load_trips(&base.join(path), &sim.grid, load)?;
                let mut p = build_profile(&trips, &sim.grid, sim.hour_ticks, hours);
                p.scale(1.0 / days);
                Ok(DemandSource::Poisson(p))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    /// Episodes per seed.
    pub episodes: usize,
    /// Ticks at which demand-supply gap grids are captured.
    pub gap_ticks: Vec<u32>,
    /// Run evaluation seeds on separate threads.
    pub parallel: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { seeds: vec![1, 2, 3, 4, 5], episodes: 1, gap_ticks: Vec::new(), parallel: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelKind,
    pub sim: SimConfig,
    pub demand: DemandConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelKind::Drdqn,
            sim: SimConfig::default(),
            demand: DemandConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.train.validate()?;
        if self.eval.episodes == 0 || self.eval.seeds.is_empty() {
            return Err(Error::Config("eval needs at least one seed and one episode".into()));
        }
        Ok(())
    }

    /// Simulator settings for `kind`; Greedy matches without the pickup limit.
    pub fn sim_for(&self, kind: ModelKind) -> SimConfig {
        let mut s = self.sim.clone();
        if kind == ModelKind::Greedy {
            s.unlimited_radius = true;
        }
        s
    }
}
