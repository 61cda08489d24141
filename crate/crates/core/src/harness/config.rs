use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::{ClusteringParams, MetricWeights};
use crate::error::{Error, Result};
use crate::hflagg::EpcMode;
use crate::mobility::RoadConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Proposed,
    NoClustering,
    MobilityOnly,
    SimilarityOnly,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(Mode::Proposed),
            "no_clustering" => Ok(Mode::NoClustering),
            "mobility_only" => Ok(Mode::MobilityOnly),
            "similarity_only" => Ok(Mode::SimilarityOnly),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub seed: u64,
    pub mode: Mode,
    pub ticks_per_round: u64,
    pub max_rounds: u64,
    /// Freeze mobility and injection; the population is supplied up front.
    pub static_topology: bool,
    /// Keep running after the stopping rule fires.
    pub run_past_convergence: bool,
    pub eval_ch_accuracy: bool,
    pub log_messages: bool,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection {
            seed: 1,
            mode: Mode::Proposed,
            ticks_per_round: 10,
            max_rounds: 30,
            static_topology: false,
            run_past_convergence: false,
            eval_ch_accuracy: false,
            log_messages: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub tx_range_m: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection { tx_range_m: 100.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    #[default]
    NonIid,
    Iid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlSection {
    pub dataset: DatasetKind,
    /// Directory holding the four IDX files (optionally gzipped).
    pub data_dir: PathBuf,
    /// Training samples drawn from the training file; 0 keeps all.
    pub train_samples: usize,
    /// Test samples drawn from the test file; 0 keeps all.
    pub test_samples: usize,
    pub synthetic_dim: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub hidden_layers: Vec<usize>,
    pub partition: PartitionKind,
    pub shards_per_vehicle: usize,
    pub eta: f64,
    pub batch_size: usize,
    pub local_steps: usize,
    pub t_data_max: u64,
}

impl Default for FlSection {
    fn default() -> Self {
        FlSection {
            dataset: DatasetKind::Mnist,
            data_dir: PathBuf::from("data/mnist"),
            train_samples: 6000,
            test_samples: 1000,
            synthetic_dim: 20,
            synthetic_train: 2000,
            synthetic_test: 500,
            hidden_layers: vec![64, 64],
            partition: PartitionKind::NonIid,
            shards_per_vehicle: 2,
            eta: 0.1,
            batch_size: 32,
            local_steps: 5,
            t_data_max: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationSection {
    pub epsilon: f64,
    pub epc_mode: EpcMode,
    pub t_collect_max: u64,
    pub convergence_window: usize,
    pub ch_trains: bool,
}

impl Default for AggregationSection {
    fn default() -> Self {
        AggregationSection {
            epsilon: 0.01,
            epc_mode: EpcMode::FedavgMean,
            t_collect_max: 3,
            convergence_window: 3,
            ch_trains: true,
        }
    }
}

/// Parameter lists swept by the `grid` and `packets` commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub alphas: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
    pub max_hops: Vec<u32>,
    pub packet_alphas: Vec<f64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            alphas: vec![0.0, 0.1, 0.5, 0.7, 0.9, 1.0],
            epsilons: vec![0.01, 0.005, 0.001],
            seeds: vec![1, 2, 3, 4, 5],
            max_hops: vec![0, 1, 2, 3],
            packet_alphas: vec![0.9, 1.0],
        }
    }
}

/// Full parameterisation of one run. Serialises to the TOML accepted by `--config`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioSection,
    pub mobility: RoadConfig,
    pub network: NetworkSection,
    pub clustering: ClusteringParams,
    pub fl: FlSection,
    pub aggregation: AggregationSection,
    pub experiment: ExperimentSection,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Small synthetic-data scenario for tests and fuzzing.
    pub fn synthetic() -> Self {
        let mut cfg = ScenarioConfig::default();
        cfg.fl.dataset = DatasetKind::Synthetic;
        cfg.fl.hidden_layers = vec![16];
        cfg
    }

    /// The mode's alpha: forced to 1 or 0 for the single-metric baselines.
    pub fn effective_alpha(&self) -> f64 {
        match self.scenario.mode {
            Mode::MobilityOnly => 1.0,
            Mode::SimilarityOnly => 0.0,
            _ => self.clustering.alpha,
        }
    }

    pub fn clusters(&self) -> bool {
        self.scenario.mode != Mode::NoClustering
    }

    pub fn metric_weights(&self) -> MetricWeights {
        let spread = self.mobility.speed_max_mps - self.mobility.speed_min_mps;
        let speed_scale = if self.clustering.normalize_metric && spread > 0.0 { 1.0 / spread } else { 1.0 };
        MetricWeights {
            alpha: self.effective_alpha(),
            speed_scale,
        }
    }

    /// Clustering parameters with the mode's alpha applied.
    pub fn resolved_clustering(&self) -> ClusteringParams {
        ClusteringParams {
            alpha: self.effective_alpha(),
            ..self.clustering.clone()
        }
    }

    /// Sets `max_hop`, mapping 0 to the no-clustering baseline.
    pub fn set_max_hop(&mut self, max_hop: u32) {
        if max_hop == 0 {
            self.scenario.mode = Mode::NoClustering;
        } else {
            self.clustering.max_hop = max_hop;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mobility.validate()?;
        if self.clusters() {
            self.clustering.validate()?;
            if self.clustering.max_hop == 0 {
                return Err(Error::Config("max_hop must be >= 1 when clustering".into()));
            }
        }
        let s = &self.scenario;
        if s.ticks_per_round == 0 {
            return Err(Error::Config("ticks_per_round must be > 0".into()));
        }
        if !(self.network.tx_range_m > 0.0) {
            return Err(Error::Config(format!("tx_range_m must be > 0, got {}", self.network.tx_range_m)));
        }
        let fl = &self.fl;
        if !(fl.eta > 0.0 && fl.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be > 0, got {}", fl.eta)));
        }
        if fl.batch_size == 0 || fl.local_steps == 0 || fl.shards_per_vehicle == 0 {
            return Err(Error::Config("batch_size, local_steps and shards_per_vehicle must be > 0".into()));
        }
        if fl.hidden_layers.contains(&0) {
            return Err(Error::Config("hidden layer widths must be > 0".into()));
        }
        let agg = &self.aggregation;
        if !(agg.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", agg.epsilon)));
        }
        if agg.t_collect_max == 0 || agg.convergence_window == 0 {
            return Err(Error::Config("t_collect_max and convergence_window must be > 0".into()));
        }
        if self.mobility.target_population() == 0 {
            return Err(Error::Config("target density yields an empty road".into()));
        }
        Ok(())
    }
}
