//! Model checkpoints: a JSON metadata record next to the weight tensors.
//!
//! ```text
//! <dir>/checkpoint.json
//! <dir>/w1.sidt, <dir>/w2.sidt     (orthogonal head: d x k, k x 1)
//! <dir>/w.sidt                     (linear probe: p x 1)
//! <dir>/wc.sidt, <dir>/ws.sidt     (concept model: n x 1, n x p)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::concept::{ConceptModel, ConceptTrainConfig};
use crate::dataset::Vocabulary;
use crate::error::{Error, Result};
use crate::linear_head::{HeadMode, LinearHeadModel, TrainConfig};
use crate::tensor_io::{read_matrix, to_f32, to_f64, write_matrix};
use crate::training::TrainLog;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    OrthogonalHead,
    LinearProbe,
    Concept,
}

impl From<HeadMode> for ModelKind {
    fn from(m: HeadMode) -> Self {
        match m {
            HeadMode::OrthogonalHead => ModelKind::OrthogonalHead,
            HeadMode::LinearProbe => ModelKind::LinearProbe,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMeta {
    pub alpha: f64,
    pub tau: f64,
    pub beta: f64,
    pub vocabulary: String,
    pub vocabulary_hash: String,
    pub n_concepts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_kind: ModelKind,
    pub train_dataset: String,
    /// Width of the consumed embedding (hidden `d` or joint `p`).
    pub input_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub final_epoch: usize,
    pub best_epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_val_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_config: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_config: Option<ConceptTrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept: Option<ConceptMeta>,
    pub tensors: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Head(LinearHeadModel),
    Concept(ConceptModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
}

fn log_summary(log: &TrainLog) -> (usize, usize, Option<f64>) {
    let final_epoch = log.epochs.last().map_or(0, |e| e.epoch);
    let best = log.best_val_loss.is_finite().then_some(log.best_val_loss);
    (final_epoch, log.best_epoch, best)
}

/// FNV-1a over term names and f32 embedding bits.
pub fn vocabulary_fingerprint(v: &Vocabulary) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for t in &v.terms {
        eat(t.name.as_bytes());
        eat(&[0]);
    }
    for x in v.embeddings.iter() {
        eat(&(*x as f32).to_le_bytes());
    }
    format!("{h:016x}")
}

impl Checkpoint {
    pub fn from_head(model: LinearHeadModel, config: &TrainConfig, log: &TrainLog, train_dataset: &str) -> Self {
        let (final_epoch, best_epoch, best_val_loss) = log_summary(log);
        let tensors = match model.mode {
            HeadMode::OrthogonalHead => [("w1", "w1.sidt"), ("w2", "w2.sidt")].as_slice(),
            HeadMode::LinearProbe => [("w", "w.sidt")].as_slice(),
        }
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        Checkpoint {
            meta: CheckpointMeta {
                model_kind: model.mode.into(),
                train_dataset: train_dataset.to_string(),
                input_dim: model.input_dim(),
                k: (model.mode == HeadMode::OrthogonalHead).then(|| model.k()),
                final_epoch,
                best_epoch,
                best_val_loss,
                head_config: Some(config.clone()),
                concept_config: None,
                concept: None,
                tensors,
            },
            model: Model::Head(model),
        }
    }

    pub fn from_concept(
        model: ConceptModel,
        config: &ConceptTrainConfig,
        log: &TrainLog,
        train_dataset: &str,
        vocabulary: &Vocabulary,
    ) -> Self {
        let (final_epoch, best_epoch, best_val_loss) = log_summary(log);
        let tensors = [("wc", "wc.sidt"), ("ws", "ws.sidt")]
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Checkpoint {
            meta: CheckpointMeta {
                model_kind: ModelKind::Concept,
                train_dataset: train_dataset.to_string(),
                input_dim: model.p(),
                k: None,
                final_epoch,
                best_epoch,
                best_val_loss,
                head_config: None,
                concept_config: Some(config.clone()),
                concept: Some(ConceptMeta {
                    alpha: model.alpha,
                    tau: model.tau,
                    beta: model.beta,
                    vocabulary: vocabulary.name.clone(),
                    vocabulary_hash: vocabulary_fingerprint(vocabulary),
                    n_concepts: model.n_concepts(),
                }),
                tensors,
            },
            model: Model::Concept(model),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tensor = |key: &str| dir.join(&self.meta.tensors[key]);
        match &self.model {
            Model::Head(m) => match &m.w1 {
                Some(w1) => {
                    write_matrix(tensor("w1"), &to_f32(w1))?;
                    write_matrix(tensor("w2"), &to_f32(&column(&m.w2)))?;
                }
                None => write_matrix(tensor("w"), &to_f32(&column(&m.w2)))?,
            },
            Model::Concept(m) => {
                write_matrix(tensor("wc"), &to_f32(&column(&m.wc)))?;
                write_matrix(tensor("ws"), &to_f32(&m.ws))?;
            }
        }
        let path = dir.join(CHECKPOINT_FILE);
        let text = serde_json::to_string_pretty(&self.meta).expect("metadata serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(CHECKPOINT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|source| Error::Manifest {
            path: path.clone(),
            source,
        })?;
        let tensor = |key: &str| -> Result<Array2<f64>> {
            let file = meta
                .tensors
                .get(key)
                .ok_or_else(|| Error::format(&path, format!("missing tensor entry {key:?}")))?;
            Ok(to_f64(&read_matrix(dir.join(file))?))
        };
        let model = match meta.model_kind {
            ModelKind::OrthogonalHead => Model::Head(LinearHeadModel::new(
                HeadMode::OrthogonalHead,
                Some(tensor("w1")?),
                flatten(tensor("w2")?, &path)?,
            )?),
            ModelKind::LinearProbe => Model::Head(LinearHeadModel::new(
                HeadMode::LinearProbe,
                None,
                flatten(tensor("w")?, &path)?,
            )?),
            ModelKind::Concept => {
                let c = meta
                    .concept
                    .as_ref()
                    .ok_or_else(|| Error::format(&path, "concept checkpoint without `concept` metadata"))?;
                let m = ConceptModel {
                    wc: flatten(tensor("wc")?, &path)?,
                    ws: tensor("ws")?,
                    alpha: c.alpha,
                    tau: c.tau,
                    beta: c.beta,
                    vocabulary: c.vocabulary.clone(),
                };
                m.validate()?;
                Model::Concept(m)
            }
        };
        Ok(Checkpoint { meta, model })
    }
}

fn column(v: &Array1<f64>) -> Array2<f64> {
    v.clone().insert_axis(Axis(1))
}

fn flatten(m: Array2<f64>, path: &Path) -> Result<Array1<f64>> {
    if m.ncols() != 1 {
        return Err(Error::format(path, format!("expected a column tensor, got {}x{}", m.nrows(), m.ncols())));
    }
    Ok(m.column(0).to_owned())
}
