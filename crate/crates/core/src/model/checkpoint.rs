//! Single-document JSON checkpoints.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{LossVariant, ModelConfig};
use crate::tensor::{ParamRegistry, Tensor, PARAM_FORMAT_VERSION};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// How the parameters were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub rate_hz: Option<f64>,
    pub optimizer: String,
    pub weight_decay: String,
    pub init: String,
    pub teacher_forcing: bool,
    pub loss_variant: LossVariant,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        Self {
            rate_hz: None,
            optimizer: "adam(beta1=0.9, beta2=0.999, eps=1e-8)".into(),
            weight_decay: "decoupled".into(),
            init: "xavier_uniform weights, zero biases, normal(0, 0.02) embeddings, unit layer-norm gains".into(),
            teacher_forcing: true,
            loss_variant: LossVariant::PaperL2,
        }
    }
}

/// Adam moments and progress, for resuming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub hyperparams: ModelConfig,
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, ParamRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(cfg: &ModelConfig, meta: CheckpointMeta, params: &ParamRegistry<f64>) -> Self {
        Self {
            format_version: PARAM_FORMAT_VERSION,
            hyperparams: cfg.clone(),
            meta,
            params: params
                .iter()
                .map(|(k, t)| {
                    (
                        k.to_string(),
                        ParamRecord {
                            shape: t.shape().to_vec(),
                            data: t.data().to_vec(),
                        },
                    )
                })
                .collect(),
            optimizer: None,
        }
    }

    /// Rebuilds the registry, checking every tensor against the
    /// hyperparameters' expected layout.
    pub fn registry(&self) -> Result<ParamRegistry<f64>, CheckpointError> {
        if self.format_version != PARAM_FORMAT_VERSION {
            return Err(CheckpointError::Incompatible(format!(
                "format_version {} (expected {PARAM_FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.hyperparams
            .validate()
            .map_err(|e| CheckpointError::Incompatible(e.to_string()))?;
        let specs = self.hyperparams.param_specs();
        if specs.len() != self.params.len() {
            let expected: std::collections::BTreeSet<_> = specs.iter().map(|s| s.name.as_str()).collect();
            let extra: Vec<_> = self.params.keys().filter(|k| !expected.contains(k.as_str())).collect();
            return Err(CheckpointError::Incompatible(format!(
                "expected {} tensors, found {} (unexpected: {extra:?})",
                specs.len(),
                self.params.len()
            )));
        }
        let mut reg = ParamRegistry::new();
        for spec in specs {
            let rec = self
                .params
                .get(&spec.name)
                .ok_or_else(|| CheckpointError::Incompatible(format!("missing tensor `{}`", spec.name)))?;
            if rec.shape != spec.shape {
                return Err(CheckpointError::Incompatible(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    spec.name, rec.shape, spec.shape
                )));
            }
            let t = Tensor::new(rec.shape.clone(), rec.data.clone())
                .map_err(|e| CheckpointError::Incompatible(format!("`{}`: {e}", spec.name)))?;
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(CheckpointError::Incompatible(format!("`{}` holds non-finite values", spec.name)));
            }
            reg.insert(&spec.name, t)
                .map_err(|e| CheckpointError::Incompatible(e.to_string()))?;
        }
        Ok(reg)
    }

    pub fn to_writer<W: Write>(&self, w: W) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(w);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn from_reader<R: Read>(r: R) -> Result<Self, CheckpointError> {
        Ok(serde_json::from_reader(BufReader::new(r))?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        self.to_writer(File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_reader(File::open(path)?)
    }
}
