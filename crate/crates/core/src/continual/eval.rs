use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::TaskSequence;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{kl_per_dim, Predictor};
use crate::numcore::{bce_with_logit, softmax_rows, Matrix, Rng};

/// Rows per evaluation chunk. Each chunk draws from its own derived stream,
/// so results do not depend on the number of threads.
pub const EVAL_CHUNK: usize = 250;

/// Applies `f` to consecutive chunks of `0..n` on up to `threads` threads and
/// returns the results in chunk order.
pub fn par_chunks<T, F>(n: usize, chunk: usize, threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, Range<usize>) -> Result<T> + Sync,
{
    let chunk = chunk.max(1);
    let ranges: Vec<Range<usize>> = (0..n).step_by(chunk).map(|s| s..(s + chunk).min(n)).collect();
    let threads = threads.clamp(1, ranges.len().max(1));
    if threads == 1 {
        return ranges.into_iter().enumerate().map(|(i, r)| f(i, r)).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..ranges.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let ranges = &ranges;
                let f = &f;
                scope.spawn(move || {
                    (w..ranges.len())
                        .step_by(threads)
                        .map(|i| (i, f(i, ranges[i].clone())))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every chunk evaluated")).collect()
}

/// Posterior means of `x`, computed in chunks.
pub fn encode_means<P: Predictor + Sync + ?Sized>(model: &P, x: &Matrix, threads: usize) -> Result<Matrix> {
    let parts = par_chunks(x.rows(), EVAL_CHUNK, threads, |_, r| {
        let idx: Vec<usize> = r.collect();
        Ok(model.encode(&x.select_rows(&idx))?.0)
    })?;
    Matrix::vstack(&parts.iter().collect::<Vec<_>>(), model.latent_dim())
}

/// Metrics after one increment. Accuracies are fractions; `gamma_*` are
/// reconstruction losses in nats per image (`*_pixel` per pixel); `kl_all`
/// is nats per latent dimension on the union test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub task: usize,
    pub alpha_base: f64,
    pub alpha_new: f64,
    pub alpha_all: f64,
    pub gamma_base: f64,
    pub gamma_new: f64,
    pub gamma_all: f64,
    pub gamma_base_pixel: f64,
    pub gamma_new_pixel: f64,
    pub gamma_all_pixel: f64,
    pub kl_all: f64,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "task,alpha_base,alpha_new,alpha_all,gamma_base,gamma_new,gamma_all,\
gamma_base_pixel,gamma_new_pixel,gamma_all_pixel,kl_all";

    pub fn csv_row(&self) -> String {
        let v = [
            self.alpha_base,
            self.alpha_new,
            self.alpha_all,
            self.gamma_base,
            self.gamma_new,
            self.gamma_all,
            self.gamma_base_pixel,
            self.gamma_new_pixel,
            self.gamma_all_pixel,
            self.kl_all,
        ];
        let mut s = self.task.to_string();
        for x in v {
            s.push(',');
            s.push_str(&format!("{x:.17e}"));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub record: MetricsRecord,
    /// `confusion[true][predicted]` over the union test set.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

struct RowScores {
    pred: Vec<usize>,
    gamma: Vec<f64>,
    kl: Vec<f64>,
}

fn score_rows<P: Predictor + ?Sized>(model: &P, x: &Matrix, samples: usize, rng: &mut Rng) -> Result<RowScores> {
    let n = x.rows();
    let (mu, logvar) = model.encode(x)?;
    let std = logvar.map(|v| (0.5 * v).exp());
    let mut probs = Matrix::zeros(n, model.num_classes());
    let mut gamma = vec![0.0; n];
    for _ in 0..samples {
        let eps = rng.normal_matrix(n, model.latent_dim());
        let mut z = eps.zip_map(&std, |e, s| e * s)?;
        z.add_assign(&mu)?;
        probs.add_assign(&softmax_rows(&model.class_logits(x, &z)?))?;
        let logits = model.decode_logits(&z)?;
        for (i, g) in gamma.iter_mut().enumerate() {
            *g += logits
                .row(i)
                .iter()
                .zip(x.row(i))
                .map(|(&l, &t)| bce_with_logit(l, t))
                .sum::<f64>();
        }
    }
    for g in &mut gamma {
        *g /= samples as f64;
    }
    let kl = (0..n).map(|i| kl_per_dim(mu.row(i), logvar.row(i))).collect();
    Ok(RowScores {
        pred: probs.argmax_rows(),
        gamma,
        kl,
    })
}

/// Evaluates after task `upto` (0-based) on the test sets of tasks
/// `0..=upto`. Classes are predicted by the argmax of the softmax averaged
/// over `samples` posterior draws; inputs are clean.
pub fn evaluate<P: Predictor + Sync + ?Sized>(
    model: &P,
    seq: &TaskSequence,
    upto: usize,
    samples: usize,
    rng: &Rng,
    threads: usize,
) -> Result<EvalOutput> {
    if samples == 0 {
        return Err(Error::invalid("evaluation needs at least one posterior sample"));
    }
    if upto >= seq.len() {
        return Err(Error::invalid(format!(
            "task {upto} is outside a {}-task sequence",
            seq.len()
        )));
    }
    let tests: Vec<&LabeledDataset> = seq.tasks[..=upto].iter().map(|t| &t.test).collect();
    let union = LabeledDataset::concat(&tests, "union")?;
    let chunks = par_chunks(union.len(), EVAL_CHUNK, threads, |i, r| {
        let idx: Vec<usize> = r.collect();
        score_rows(
            model,
            &union.images.select_rows(&idx),
            samples,
            &mut rng.derive(i as u64),
        )
    })?;
    let pred: Vec<usize> = chunks.iter().flat_map(|c| c.pred.iter().copied()).collect();
    let gamma: Vec<f64> = chunks.iter().flat_map(|c| c.gamma.iter().copied()).collect();
    let kl: Vec<f64> = chunks.iter().flat_map(|c| c.kl.iter().copied()).collect();

    let mut offsets = vec![0];
    for t in &tests {
        offsets.push(offsets.last().unwrap() + t.len());
    }
    let summarize = |range: Range<usize>| {
        let n = range.len() as f64;
        let correct = range.clone().filter(|&i| pred[i] == union.labels[i]).count() as f64;
        let g = range.map(|i| gamma[i]).sum::<f64>() / n;
        (correct / n, g)
    };
    let (alpha_base, gamma_base) = summarize(offsets[0]..offsets[1]);
    let (alpha_new, gamma_new) = summarize(offsets[upto]..offsets[upto + 1]);
    let (alpha_all, gamma_all) = summarize(0..union.len());
    let pixels = union.dim() as f64;
    let classes = model.num_classes().max(seq.classes_through(upto));
    let mut confusion = vec![vec![0; classes]; classes];
    for (&t, &p) in union.labels.iter().zip(&pred) {
        confusion[t][p] += 1;
    }
    Ok(EvalOutput {
        record: MetricsRecord {
            task: upto + 1,
            alpha_base,
            alpha_new,
            alpha_all,
            gamma_base,
            gamma_new,
            gamma_all,
            gamma_base_pixel: gamma_base / pixels,
            gamma_new_pixel: gamma_new / pixels,
            gamma_all_pixel: gamma_all / pixels,
            kl_all: kl.iter().sum::<f64>() / kl.len() as f64,
        },
        confusion,
        predictions: pred,
    })
}
