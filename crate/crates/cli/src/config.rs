use std::fs;
use std::path::Path;

use dcl_core::graph::{build_complete, build_inverse_chord_expander, build_random_regular, build_ring};
use dcl_core::Graph;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub fn load<C: DeserializeOwned>(path: &Path) -> CliResult<C> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Ring,
    Expander,
    Complete,
    Random,
}

impl GraphKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ring => "ring",
            Self::Expander => "expander",
            Self::Complete => "complete",
            Self::Random => "random",
        }
    }

    /// `degree` and `seed` only matter for random regular graphs.
    pub fn build(self, nodes: usize, degree: usize, seed: u64) -> dcl_core::Result<Graph> {
        match self {
            Self::Ring => build_ring(nodes),
            Self::Expander => build_inverse_chord_expander(nodes),
            Self::Complete => build_complete(nodes),
            Self::Random => build_random_regular(nodes, degree, seed),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub graphs: Vec<GraphKind>,
    /// Explicit sizes; when empty, `s_min..=s_max` stepping by `s_step`.
    pub sizes: Vec<usize>,
    pub s_min: usize,
    pub s_max: usize,
    pub s_step: usize,
    pub delta: f64,
    pub eps: Option<f64>,
    pub degree: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            graphs: vec![GraphKind::Ring, GraphKind::Expander],
            sizes: Vec::new(),
            s_min: 3,
            s_max: 199,
            s_step: 1,
            delta: 1e-3,
            eps: None,
            degree: 3,
            trials: 3,
            seed: 0,
        }
    }
}

impl ScalingConfig {
    pub fn node_counts(&self) -> CliResult<Vec<usize>> {
        let sizes: Vec<usize> = if self.sizes.is_empty() {
            if self.s_step == 0 {
                return Err(CliError::Config("s_step must be positive".into()));
            }
            (self.s_min..=self.s_max).step_by(self.s_step).collect()
        } else {
            self.sizes.clone()
        };
        if sizes.is_empty() || self.graphs.is_empty() {
            return Err(CliError::Config("scaling needs at least one size and one graph type".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) || self.trials == 0 {
            return Err(CliError::Config("delta must lie in (0, 1) and trials must be positive".into()));
        }
        Ok(sizes)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyConfig {
    pub agents: usize,
    pub degree: usize,
    /// Defaults to `agents * degree`.
    pub edge_total: Option<usize>,
    pub chunks_max: usize,
    /// Defaults to `agents - 1`.
    pub colluders_max: Option<usize>,
    pub tapped_step: usize,
    /// When set, also writes the minimum chunk counts reaching this target.
    pub eta: Option<f64>,
    pub mc_trials: usize,
    pub mc_chunks: Vec<usize>,
    pub mc_colluders: Vec<usize>,
    pub mc_tapped: Vec<usize>,
    pub seed: u64,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            agents: 100,
            degree: 3,
            edge_total: None,
            chunks_max: 20,
            colluders_max: None,
            tapped_step: 1,
            eta: None,
            mc_trials: 0,
            mc_chunks: vec![1, 2, 4],
            mc_colluders: vec![10, 30, 50],
            mc_tapped: vec![30, 60, 120],
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Plain,
    Shamir,
    Chunk,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Plain => "plain",
            Self::Shamir => "shamir",
            Self::Chunk => "chunk",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggbenchConfig {
    pub sizes: Vec<usize>,
    pub methods: Vec<Method>,
    pub graph: GraphKind,
    pub degree: usize,
    pub n_chunks: usize,
    pub tol: f64,
    pub eps: Option<f64>,
    pub repeats: usize,
    pub value_low: f64,
    pub value_high: f64,
    pub seed: u64,
}

impl Default for AggbenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![7, 13, 31],
            methods: vec![Method::Plain, Method::Shamir, Method::Chunk],
            graph: GraphKind::Expander,
            degree: 3,
            n_chunks: 4,
            tol: 1e-8,
            eps: None,
            repeats: 1,
            value_low: -1.0,
            value_high: 2.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorKind {
    Direct,
    Consensus,
    Shamir,
    Chunk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    Derived,
    Uncentered,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnConfig {
    /// Directory holding `agent_<id>.csv`; relative paths resolve against the config file.
    pub data_dir: String,
    pub components: usize,
    pub gamma: f64,
    pub lambda0: f64,
    pub rho: f64,
    pub covariance: CovarianceKind,
    pub tol: f64,
    pub max_rounds: usize,
    pub aggregator: AggregatorKind,
    pub graph: GraphKind,
    pub degree: usize,
    pub n_chunks: usize,
    pub consensus_tol: f64,
    pub seed: u64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            data_dir: ".".into(),
            components: 2,
            gamma: 1.0,
            lambda0: 1e-3,
            rho: 0.1,
            covariance: CovarianceKind::Derived,
            tol: 1e-6,
            max_rounds: 200,
            aggregator: AggregatorKind::Direct,
            graph: GraphKind::Ring,
            degree: 3,
            n_chunks: 3,
            consensus_tol: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub agents: usize,
    pub components: usize,
    pub dim: usize,
    /// One entry per agent, or a single entry shared by all.
    pub samples: Vec<usize>,
    /// Spread of per-agent mixing weights; 0 gives uniform weights.
    pub skew: f64,
    /// Explicit per-agent weights, overriding `skew`.
    pub weights: Option<Vec<Vec<f64>>>,
    /// Standard deviation of the component means.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            agents: 3,
            components: 2,
            dim: 2,
            samples: vec![200],
            skew: 1.0,
            weights: None,
            separation: 4.0,
            seed: 0,
        }
    }
}
