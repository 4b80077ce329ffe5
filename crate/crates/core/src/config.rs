//! TOML run configuration with one section per pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalParams;
use crate::geodata::WorldConfig;
use crate::gnn::TrainConfig;
use crate::graph::GraphParams;
use crate::rl::RLConfig;
use crate::states::StateParams;
use crate::traffic::{TrafficMode, TrafficProviderConfig};

/// Density clustering of raw request points into hotspots. When disabled the
/// generated hotspot layout is used as is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbscanConfig {
    pub enabled: bool,
    pub eps_km: f64,
    pub min_pts: usize,
}

impl Default for DbscanConfig {
    fn default() -> Self {
        DbscanConfig {
            enabled: false,
            eps_km: 1.0,
            min_pts: 5,
        }
    }
}

/// Demo query used for the exported map's recommendation markers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoQuery {
    pub lat: f64,
    pub lon: f64,
    pub t_of_day: f64,
    pub top_k: usize,
}

impl Default for DemoQuery {
    fn default() -> Self {
        DemoQuery {
            lat: 28.6139,
            lon: 77.2090,
            t_of_day: 18.0,
            top_k: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub world: WorldConfig,
    pub traffic: TrafficProviderConfig,
    pub dbscan: DbscanConfig,
    pub graph: GraphParams,
    pub gnn: TrainConfig,
    pub states: StateParams,
    pub rl: RLConfig,
    pub eval: EvalParams,
    pub demo: DemoQuery,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            out_dir: PathBuf::from("run"),
            world: WorldConfig::default(),
            traffic: TrafficProviderConfig::default(),
            dbscan: DbscanConfig::default(),
            graph: GraphParams::default(),
            gnn: TrainConfig::default(),
            states: StateParams::default(),
            rl: RLConfig::default(),
            eval: EvalParams::default(),
            demo: DemoQuery::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Uses one seed for every random stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.world.rng_seed = seed;
        self.traffic.mock_seed = seed;
        self.gnn.rng_seed = seed;
        self.states.rng_seed = seed;
        self.rl.rng_seed = seed;
    }

    pub fn set_traffic_mode(&mut self, mode: TrafficMode) {
        self.traffic.mode = mode;
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.traffic.validate()?;
        if self.dbscan.enabled {
            if !(self.dbscan.eps_km > 0.0) || !self.dbscan.eps_km.is_finite() {
                return Err(Error::config("dbscan.eps_km", "must be positive"));
            }
            if self.dbscan.min_pts == 0 {
                return Err(Error::config("dbscan.min_pts", "must be at least 1"));
            }
        }
        self.graph.validate()?;
        self.gnn.validate()?;
        self.states.validate()?;
        if !self.dbscan.enabled && self.states.k > self.world.n_hotspots {
            return Err(Error::config(
                "states.k",
                format!("k = {} exceeds the {} hotspots", self.states.k, self.world.n_hotspots),
            ));
        }
        self.rl.validate()?;
        self.eval.validate()?;
        if self.demo.top_k == 0 {
            return Err(Error::config("demo.top_k", "must be at least 1"));
        }
        if !(0.0..24.0).contains(&self.demo.t_of_day) {
            return Err(Error::config("demo.t_of_day", "must lie in [0, 24)"));
        }
        Ok(())
    }
}
