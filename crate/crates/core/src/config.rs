//! Experiment configuration read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{DEFAULT_GENERATED_SEQUENCES, DEFAULT_SMOOTHING};
use crate::model::ModelConfig;
use crate::simulate::{BoundRefresh, GroundTruthKind, GroundTruthSpec, SimConfig, DEFAULT_HORIZON};
use crate::train::TrainConfig;

/// Where the graph comes from: a built-in ground truth or an edge-list file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSource {
    pub ground_truth: Option<GroundTruthKind>,
    pub edge_list: Option<PathBuf>,
    /// Background rate of the ground truth; its calibrated default otherwise.
    pub mu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub num_sequences: usize,
    pub refresh: BoundRefresh,
    pub clamp_negative: bool,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let d = SimConfig::default();
        Self {
            num_sequences: d.num_sequences,
            refresh: d.refresh,
            clamp_negative: d.clamp_negative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub events: Option<PathBuf>,
    /// Share of sequences held out for testing.
    pub test_fraction: f64,
    /// Share of the remaining sequences used for snapshot selection.
    pub validation_fraction: f64,
    /// Break duplicate timestamps with a seeded perturbation instead of failing.
    pub jitter: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            events: None,
            test_fraction: 0.2,
            validation_fraction: 0.1,
            jitter: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub generated_sequences: usize,
    pub smoothing: f64,
    /// Largest lag of the kernel probe grid.
    pub probe_max_lag: f64,
    /// Quadrature step for likelihoods of closed-form kernels.
    pub quadrature_step: f64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            generated_sequences: DEFAULT_GENERATED_SEQUENCES,
            smoothing: DEFAULT_SMOOTHING,
            probe_max_lag: 2.0,
            quadrature_step: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds simulation, initialization, splitting and batch order.
    pub seed: u64,
    pub horizon: f64,
    pub graph: GraphSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub simulation: SimulationSection,
    pub data: DataSection,
    pub evaluation: EvaluationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            horizon: DEFAULT_HORIZON,
            graph: GraphSource::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            simulation: SimulationSection::default(),
            data: DataSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

fn config_error(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let field = message
                .split('`')
                .nth(1)
                .filter(|_| message.contains("field"))
                .unwrap_or("<document>")
                .to_string();
            Error::Config { field, message }
        })?;
        Ok(cfg)
    }

    /// Reads, resolves relative paths against the file's directory and
    /// validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.graph.edge_list, &mut cfg.data.events].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_error("<document>", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(config_error("horizon", "must be positive"));
        }
        match (&self.graph.ground_truth, &self.graph.edge_list) {
            (Some(_), Some(_)) => {
                return Err(config_error(
                    "graph",
                    "set either `ground_truth` or `edge_list`, not both",
                ))
            }
            (None, None) => {
                return Err(config_error("graph", "needs `ground_truth` or `edge_list`"))
            }
            (None, Some(p)) if !p.exists() => {
                return Err(config_error(
                    "graph.edge_list",
                    format!("file {} does not exist", p.display()),
                ))
            }
            _ => {}
        }
        if self.graph.mu.is_some_and(|m| !(m > 0.0)) {
            return Err(config_error("graph.mu", "must be positive"));
        }
        if let Some(p) = &self.data.events {
            if !p.exists() {
                return Err(config_error(
                    "data.events",
                    format!("file {} does not exist", p.display()),
                ));
            }
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(config_error("data.test_fraction", "must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.data.validation_fraction) {
            return Err(config_error("data.validation_fraction", "must lie in [0, 1)"));
        }
        if self.evaluation.generated_sequences == 0 {
            return Err(config_error("evaluation.generated_sequences", "must be at least 1"));
        }
        if !(self.evaluation.smoothing > 0.0) {
            return Err(config_error("evaluation.smoothing", "must be positive"));
        }
        if !(self.evaluation.probe_max_lag > 0.0) {
            return Err(config_error("evaluation.probe_max_lag", "must be positive"));
        }
        if !(self.evaluation.quadrature_step > 0.0) {
            return Err(config_error("evaluation.quadrature_step", "must be positive"));
        }
        self.model.validate()?;
        self.train.validate()
    }

    pub fn truth_spec(&self) -> Option<GroundTruthSpec> {
        self.graph.ground_truth.map(|kind| GroundTruthSpec {
            kind,
            mu: self.graph.mu.unwrap_or_else(|| kind.default_mu()),
            horizon: self.horizon,
        })
    }

    pub fn load_graph(&self) -> Result<Graph> {
        match (&self.graph.edge_list, self.truth_spec()) {
            (Some(path), _) => Graph::load_edge_list(path),
            (None, Some(spec)) => Ok(spec.build()?.graph().clone()),
            (None, None) => Err(config_error("graph", "needs `ground_truth` or `edge_list`")),
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            num_sequences: self.simulation.num_sequences,
            horizon: self.horizon,
            seed: self.seed,
            refresh: self.simulation.refresh,
            clamp_negative: self.simulation.clamp_negative,
            ..Default::default()
        }
    }

    /// Training settings with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}
