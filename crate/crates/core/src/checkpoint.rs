//! Binary snapshot of a run: weights, optimizer moments, the meta-recognition
//! model and the random state. Floats are stored as raw bits, so a load
//! restores the exact values that were saved.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::continual::{DualModel, ExperimentResult, Mode};
use crate::error::{Error, Result};
use crate::evt::MetaRecognitionModel;
use crate::model::{DiscriminatorTrainer, Predictor, Trainer};
use crate::numcore::RngState;

const MAGIC: &[u8; 8] = b"OCRPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub mode: Mode,
    /// Number of tasks completed.
    pub task: usize,
    /// Original dataset label of each global class.
    pub class_map: Vec<usize>,
    pub trainer: Trainer,
    pub discriminator: Option<DiscriminatorTrainer>,
    pub meta: Option<MetaRecognitionModel>,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn from_result(mode: Mode, class_map: Vec<usize>, result: &ExperimentResult, rng: RngState) -> Self {
        Self {
            mode,
            task: result.records.last().map_or(0, |r| r.task),
            class_map,
            trainer: result.trainer.clone(),
            discriminator: result.discriminator.clone(),
            meta: result.meta.clone(),
            rng,
        }
    }

    pub fn dual_model(&self) -> Option<DualModel> {
        self.discriminator.as_ref().map(|d| DualModel {
            generator: self.trainer.model.clone(),
            discriminator: d.net.clone(),
        })
    }

    /// The model used for prediction: the dual pair when present, otherwise
    /// the joint model.
    pub fn predictor(&self) -> Box<dyn Predictor + Send + Sync> {
        match self.dual_model() {
            Some(d) => Box::new(d),
            None => Box::new(self.trainer.model.clone()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let body = bincode::serialize(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(body.len() + 12);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        bincode::deserialize(&bytes[12..]).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
