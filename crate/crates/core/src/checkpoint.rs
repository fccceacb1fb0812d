//! Versioned JSON checkpoints holding either a learned model or a reference
//! to a closed-form ground truth.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::events::EventSequence;
use crate::exec::Parallelism;
use crate::metrics::{quadrature_loglik, test_loglik};
use crate::model::{InfluenceModel, KernelModel, ModelState};
use crate::simulate::{GroundTruthKernel, GroundTruthSpec};
use crate::train::LogRecord;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IntensitySource {
    Learned { state: ModelState },
    GroundTruth { spec: GroundTruthSpec },
}

/// Summary of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogDigest {
    pub epochs: usize,
    pub steps: usize,
    pub skipped_batches: usize,
    pub backtracks: usize,
    pub final_loss: Option<f64>,
    pub final_validation_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_validation_loss: Option<f64>,
}

impl LogDigest {
    pub fn from_log(log: &[LogRecord], best: Option<(usize, f64)>) -> Self {
        let summaries: Vec<&LogRecord> = log.iter().filter(|r| r.step.is_none()).collect();
        let steps: Vec<&LogRecord> = log.iter().filter(|r| r.step.is_some()).collect();
        Self {
            epochs: summaries.len(),
            steps: steps.iter().filter(|r| !r.skipped).count(),
            skipped_batches: steps.iter().filter(|r| r.skipped).count(),
            backtracks: steps.iter().map(|r| r.backtracks).sum(),
            final_loss: summaries.last().map(|r| r.loss),
            final_validation_loss: summaries.last().and_then(|r| r.validation_loss),
            best_epoch: best.map(|b| b.0),
            best_validation_loss: best.map(|b| b.1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ExperimentConfig,
    pub source: IntensitySource,
    #[serde(default)]
    pub log_digest: Option<LogDigest>,
}

impl Checkpoint {
    pub fn learned(config: ExperimentConfig, model: &KernelModel, digest: Option<LogDigest>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config,
            source: IntensitySource::Learned {
                state: model.state().clone(),
            },
            log_digest: digest,
        }
    }

    pub fn ground_truth(config: ExperimentConfig, spec: GroundTruthSpec) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config,
            source: IntensitySource::GroundTruth { spec },
            log_digest: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        match raw.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => Ok(serde_json::from_value(raw)?),
            Some(v) => Err(Error::invalid(format!(
                "checkpoint version {v} is not supported (expected {CHECKPOINT_VERSION})"
            ))),
            None => Err(Error::invalid("checkpoint has no version field")),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn instantiate(&self) -> Result<LoadedSource> {
        match &self.source {
            IntensitySource::Learned { state } => {
                KernelModel::from_state(state.clone()).map(LoadedSource::Learned)
            }
            IntensitySource::GroundTruth { spec } => spec.build().map(LoadedSource::GroundTruth),
        }
    }
}

/// A checkpoint's intensity ready for evaluation.
pub enum LoadedSource {
    Learned(KernelModel),
    GroundTruth(GroundTruthKernel),
}

impl LoadedSource {
    pub fn influence(&self) -> &dyn InfluenceModel {
        match self {
            LoadedSource::Learned(m) => m,
            LoadedSource::GroundTruth(g) => g,
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            LoadedSource::Learned(m) => m.horizon(),
            LoadedSource::GroundTruth(g) => g.horizon(),
        }
    }

    /// Held-out log-likelihood per event: the grid path for learned models,
    /// quadrature with step `step` for closed-form kernels.
    pub fn test_loglik(&self, test: &[EventSequence], step: f64) -> Result<f64> {
        match self {
            LoadedSource::Learned(m) => test_loglik(m, test),
            LoadedSource::GroundTruth(g) => quadrature_loglik(g, test, step, Parallelism::Auto),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Event;
    use crate::model::ModelConfig;
    use crate::simulate::GroundTruthKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn learned_round_trip_is_bit_exact() {
        let truth = GroundTruthSpec::new(GroundTruthKind::Gt3Negative).build().unwrap();
        let cfg = ModelConfig {
            num_basis: 2,
            grid_points: Some(301),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = KernelModel::new(truth.graph(), &cfg, 50.0, &mut rng).unwrap();
        let ck = Checkpoint::learned(ExperimentConfig::default(), &model, None);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        let LoadedSource::Learned(loaded) = back.instantiate().unwrap() else {
            panic!("expected a learned model");
        };
        let history: Vec<Event> = (0..20)
            .map(|k| Event {
                t: 2.0 * k as f64 + 0.3,
                node: k % 3,
            })
            .collect();
        for _ in 0..1000 {
            let t = rng.gen_range(40.0..50.0);
            let v = rng.gen_range(0..3);
            let a = model.intensity(t, v, &history, false).unwrap();
            let b = loaded.intensity(t, v, &history, false).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn version_is_checked() {
        let ck = Checkpoint::ground_truth(
            ExperimentConfig::default(),
            GroundTruthSpec::new(GroundTruthKind::Gt16Twohop),
        );
        let text = ck.to_json().unwrap().replace("\"version\": 1", "\"version\": 99");
        assert!(Checkpoint::from_json(&text).is_err());
        let ok = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert!(matches!(ok.instantiate().unwrap(), LoadedSource::GroundTruth(_)));
    }
}
