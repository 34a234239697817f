//! Generative replay: prior sampling, latent outlier filtering, labeling, and
//! the half-real/half-replay training stream.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::evt::MetaRecognitionModel;
use crate::model::{Batch, Predictor};
use crate::numcore::{sigmoid, Matrix, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayConfig {
    /// Rejection prior Ω: a draw is kept iff its outlier probability is ≤ Ω.
    pub omega: f64,
    /// Number of samples to generate; `None` means the size of all previous
    /// tasks.
    pub replay_count: Option<usize>,
    pub max_attempts_factor: usize,
    /// Prior draws per scoring batch.
    pub batch: usize,
    pub filtering: bool,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            omega: 0.01,
            replay_count: None,
            max_attempts_factor: 100,
            batch: 128,
            filtering: true,
        }
    }
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::invalid(format!("omega must lie in [0, 1], got {}", self.omega)));
        }
        if self.batch == 0 || self.max_attempts_factor == 0 {
            return Err(Error::invalid("replay batch and attempt factor must be positive"));
        }
        Ok(())
    }
}

/// Accepted replay samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSet {
    /// Decoder mean probabilities.
    pub x: Matrix,
    pub y: Vec<usize>,
    pub z: Matrix,
    /// Outlier probability of each accepted `z` (when filtering).
    pub omega_scores: Option<Vec<f64>>,
    /// Prior draws examined.
    pub attempts: usize,
    pub acceptance_rate: f64,
    /// Accepted samples per label.
    pub class_histogram: Vec<usize>,
}

impl GeneratedSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn to_dataset(&self, name: &str) -> Result<LabeledDataset> {
        LabeledDataset::new(self.x.clone(), self.y.clone(), name)
    }
}

/// `n × latent_dim` standard normal draws.
pub fn sample_prior(n: usize, latent_dim: usize, rng: &mut Rng) -> Matrix {
    rng.normal_matrix(n, latent_dim)
}

/// Draws prior batches, keeps rows whose latent outlier probability is at
/// most Ω (all rows when filtering is off), then decodes and labels the kept
/// rows. Rows are examined in draw order and generation stops at exactly
/// `count` accepted samples.
pub fn generate_replay<P: Predictor + ?Sized>(
    model: &P,
    meta: Option<&MetaRecognitionModel>,
    cfg: &ReplayConfig,
    count: usize,
    rng: &mut Rng,
) -> Result<GeneratedSet> {
    cfg.validate()?;
    let meta = if cfg.filtering {
        Some(meta.ok_or_else(|| Error::invalid("filtered replay needs a meta-recognition model"))?)
    } else {
        None
    };
    let latent = model.latent_dim();
    let budget = count.saturating_mul(cfg.max_attempts_factor);
    let mut kept: Vec<f64> = Vec::with_capacity(count * latent);
    let mut scores = meta.map(|_| Vec::with_capacity(count));
    let mut accepted = 0;
    let mut attempts = 0;
    while accepted < count {
        let z = sample_prior(cfg.batch, latent, rng);
        let probs = match meta {
            Some(m) => Some(m.outlier_probabilities(&z)?),
            None => None,
        };
        for r in 0..z.rows() {
            if accepted == count || attempts == budget {
                break;
            }
            attempts += 1;
            let p = probs.as_ref().map(|p| p[r]);
            if p.map_or(true, |p| p <= cfg.omega) {
                kept.extend_from_slice(z.row(r));
                if let (Some(s), Some(p)) = (scores.as_mut(), p) {
                    s.push(p);
                }
                accepted += 1;
            }
        }
        if accepted < count && attempts >= budget {
            return Err(Error::ReplayBudgetExhausted {
                accepted,
                requested: count,
                attempts,
                acceptance_rate: accepted as f64 / attempts.max(1) as f64,
            });
        }
    }
    let z = Matrix::new(accepted, latent, kept)?;
    let mut x = Matrix::zeros(0, model.input_dim());
    let mut y = Vec::with_capacity(accepted);
    let chunk = cfg.batch.max(256);
    let mut parts = Vec::new();
    for start in (0..accepted).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(accepted)).collect();
        let zc = z.select_rows(&idx);
        let xc = sigmoid(&model.decode_logits(&zc)?);
        y.extend(model.class_logits(&xc, &zc)?.argmax_rows());
        parts.push(xc);
    }
    if !parts.is_empty() {
        x = Matrix::vstack(&parts.iter().collect::<Vec<_>>(), model.input_dim())?;
    }
    let mut class_histogram = vec![0; model.num_classes()];
    for &label in &y {
        class_histogram[label] += 1;
    }
    Ok(GeneratedSet {
        x,
        y,
        z,
        omega_scores: scores,
        attempts,
        acceptance_rate: if attempts == 0 {
            1.0
        } else {
            accepted as f64 / attempts as f64
        },
        class_histogram,
    })
}

/// Training stream for one task. Without replay every step is a full batch of
/// real data with uniform weights. With replay each step holds half a batch
/// of real rows and half a batch of replay rows, weighted `0.5/n_real` and
/// `0.5/n_replay` so the loss is the average of the two half-batch means.
///
/// An epoch is one pass over the real data. The replay order is reshuffled
/// whenever it is exhausted and otherwise carries over between epochs.
pub struct MixedStream<'a> {
    real: &'a LabeledDataset,
    replay: Option<&'a LabeledDataset>,
    batch_size: usize,
    real_order: Vec<usize>,
    real_cursor: usize,
    replay_order: Vec<usize>,
    replay_cursor: usize,
}

impl<'a> MixedStream<'a> {
    pub fn new(real: &'a LabeledDataset, replay: Option<&'a LabeledDataset>, batch_size: usize) -> Result<Self> {
        if real.is_empty() {
            return Err(Error::invalid("training stream needs real data"));
        }
        if replay.is_some_and(|r| r.is_empty()) {
            return Err(Error::invalid("replay was requested but the generated set is empty"));
        }
        if batch_size == 0 || (replay.is_some() && batch_size < 2) {
            return Err(Error::invalid(format!("batch size {batch_size} is too small")));
        }
        Ok(Self {
            real,
            replay,
            batch_size,
            real_order: Vec::new(),
            real_cursor: 0,
            replay_order: Vec::new(),
            replay_cursor: 0,
        })
    }

    fn real_half(&self) -> usize {
        if self.replay.is_some() {
            self.batch_size / 2
        } else {
            self.batch_size
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.real.len().div_ceil(self.real_half())
    }

    /// Reshuffles the real data for a new epoch.
    pub fn start_epoch(&mut self, rng: &mut Rng) {
        self.real_order = rng.permutation(self.real.len());
        self.real_cursor = 0;
    }

    /// Next weighted batch of the current epoch, `None` once the real data is
    /// used up.
    pub fn next_batch(&mut self, rng: &mut Rng) -> Option<(Batch, Vec<f64>)> {
        if self.real_cursor >= self.real_order.len() {
            return None;
        }
        let end = (self.real_cursor + self.real_half()).min(self.real_order.len());
        let real_idx = &self.real_order[self.real_cursor..end];
        self.real_cursor = end;
        let real = self.real.batch(real_idx);
        let Some(replay) = self.replay else {
            let n = real.len();
            return Some((real, vec![1.0 / n as f64; n]));
        };
        let want = self.batch_size - self.batch_size / 2;
        let mut rep_idx = Vec::with_capacity(want);
        while rep_idx.len() < want {
            if self.replay_cursor >= self.replay_order.len() {
                self.replay_order = rng.permutation(replay.len());
                self.replay_cursor = 0;
            }
            let take = (want - rep_idx.len()).min(self.replay_order.len() - self.replay_cursor);
            rep_idx.extend_from_slice(&self.replay_order[self.replay_cursor..self.replay_cursor + take]);
            self.replay_cursor += take;
        }
        let rep = replay.batch(&rep_idx);
        let (nr, np) = (real.len(), rep.len());
        let mut weights = vec![0.5 / nr as f64; nr];
        weights.extend(std::iter::repeat(0.5 / np as f64).take(np));
        let x = Matrix::vstack(&[&real.x, &rep.x], real.x.cols()).expect("matching widths");
        let mut y = real.y;
        y.extend(rep.y);
        Some((Batch { x, y }, weights))
    }
}

/// Writes up to `limit` generated images as binary PGM files together with
/// `samples.csv` listing index, label and outlier probability.
pub fn dump_generated(set: &GeneratedSet, dir: &Path, height: usize, width: usize, limit: usize) -> Result<()> {
    if height * width != set.x.cols() {
        return Err(Error::invalid(format!(
            "{height}x{width} does not match {} pixels",
            set.x.cols()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("samples.csv");
    let mut csv = String::from("# schema=1\nindex,label,omega\n");
    for i in 0..set.len().min(limit) {
        let path = dir.join(format!("sample_{i:05}.pgm"));
        let mut bytes = format!("P5 {width} {height} 255\n").into_bytes();
        bytes.extend(set.x.row(i).iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        let omega = set
            .omega_scores
            .as_ref()
            .map_or(String::new(), |s| format!("{:.17e}", s[i]));
        csv.push_str(&format!("{i},{},{omega}\n", set.y[i]));
    }
    std::fs::File::create(&csv_path)
        .and_then(|mut f| f.write_all(csv.as_bytes()))
        .map_err(|e| Error::io(&csv_path, e))
}
