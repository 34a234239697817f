//! Extreme-value meta-recognition in latent space.
//!
//! For every class the mean posterior mean of its correctly classified
//! training points is stored together with a Weibull fit to the far tail of
//! cosine distances to that mean. A latent vector's outlier probability is the
//! smallest Weibull CDF value over all classes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Predictor;
use crate::numcore::{bce_with_logit, log_softmax_rows, Matrix, Rng};

pub const DEFAULT_TAIL_FRACTION: f64 = 0.05;
pub const DEFAULT_MIN_CORRECT: usize = 10;
const MIN_TAIL_LEN: usize = 2;
const NORM_FLOOR: f64 = 1e-12;
const DEGENERATE_SPREAD: f64 = 1e-12;
const KAPPA_BRACKET: (f64, f64) = (1e-3, 1e3);
const KAPPA_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 100;

/// `1 − a·b / max(‖a‖‖b‖, 1e-12)`, clamped to `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine_distance on vectors of different length");
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = (na.sqrt() * nb.sqrt()).max(NORM_FLOOR);
    (1.0 - dot / denom).clamp(0.0, 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeibullParams {
    pub tau: f64,
    pub kappa: f64,
    pub lambda: f64,
}

impl WeibullParams {
    pub fn new(tau: f64, kappa: f64, lambda: f64) -> Result<Self> {
        if !tau.is_finite() || !(kappa > 0.0 && kappa.is_finite()) || !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "Weibull parameters must be finite with positive shape and scale, got \
                 tau={tau}, kappa={kappa}, lambda={lambda}"
            )));
        }
        Ok(Self { tau, kappa, lambda })
    }

    pub fn cdf(&self, d: f64) -> f64 {
        weibull_cdf(self, d)
    }
}

/// Zero on `d ≤ τ`, else `1 − exp(−((d − τ)/λ)^κ)`.
pub fn weibull_cdf(p: &WeibullParams, d: f64) -> f64 {
    if d <= p.tau {
        return 0.0;
    }
    let t = ((d - p.tau) / p.lambda).powf(p.kappa);
    -(-t).exp_m1()
}

/// Maximum-likelihood Weibull fit to an ascending tail of distances.
///
/// The location sits just below the smallest value so every point is in the
/// support; shape and scale are the MLE of the shifted values.
pub fn fit_weibull_tail(tail: &[f64]) -> Result<WeibullParams> {
    if tail.len() < MIN_TAIL_LEN {
        return Err(Error::invalid(format!(
            "Weibull tail needs at least {MIN_TAIL_LEN} values, got {}",
            tail.len()
        )));
    }
    if tail.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::invalid("Weibull tail values must be finite and non-negative"));
    }
    if tail.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("Weibull tail must be sorted ascending"));
    }
    if tail[tail.len() - 1] - tail[0] <= DEGENERATE_SPREAD {
        return Err(Error::DegenerateTail { class: None });
    }
    let tau = tail[0] * (1.0 - 1e-6) - 1e-12;
    let shifted: Vec<f64> = tail.iter().map(|d| d - tau).collect();
    let max = shifted[shifted.len() - 1];
    // Work on x / max so that x^κ cannot overflow for large κ.
    let log_y: Vec<f64> = shifted.iter().map(|x| (x / max).ln()).collect();
    let kappa = solve_shape(&log_y)?;
    let n = log_y.len() as f64;
    let mean_pow = log_y.iter().map(|l| (kappa * l).exp()).sum::<f64>() / n;
    let lambda = max * mean_pow.powf(1.0 / kappa);
    WeibullParams::new(tau, kappa, lambda)
        .map_err(|e| Error::NoConvergence(format!("fit produced invalid parameters: {e}")))
}

/// Sums `Σ y^κ`, `Σ y^κ ln y`, `Σ y^κ (ln y)²`.
fn power_sums(log_y: &[f64], kappa: f64) -> (f64, f64, f64) {
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for &l in log_y {
        let p = (kappa * l).exp();
        s0 += p;
        s1 += p * l;
        s2 += p * l * l;
    }
    (s0, s1, s2)
}

/// Profile-likelihood score in κ; increasing, with its root at the MLE.
fn shape_score(log_y: &[f64], mean_log: f64, kappa: f64) -> (f64, f64) {
    let (s0, s1, s2) = power_sums(log_y, kappa);
    let g = s1 / s0 - 1.0 / kappa - mean_log;
    let dg = (s2 * s0 - s1 * s1) / (s0 * s0) + 1.0 / (kappa * kappa);
    (g, dg)
}

fn solve_shape(log_y: &[f64]) -> Result<f64> {
    let mean_log = log_y.iter().sum::<f64>() / log_y.len() as f64;
    let (lo, hi) = KAPPA_BRACKET;
    let mut kappa = 1.0;
    for _ in 0..NEWTON_MAX_ITER {
        let (g, dg) = shape_score(log_y, mean_log, kappa);
        let next = kappa - g / dg;
        if !next.is_finite() || next <= lo || next >= hi {
            break;
        }
        if (next - kappa).abs() <= KAPPA_TOL * kappa.max(1.0) {
            return Ok(next);
        }
        kappa = next;
    }
    bisect_shape(log_y, mean_log)
}

fn bisect_shape(log_y: &[f64], mean_log: f64) -> Result<f64> {
    let (mut lo, mut hi) = KAPPA_BRACKET;
    let g_lo = shape_score(log_y, mean_log, lo).0;
    let g_hi = shape_score(log_y, mean_log, hi).0;
    if !(g_lo < 0.0 && g_hi > 0.0) {
        return Err(Error::NoConvergence(format!(
            "shape root not bracketed in [{lo}, {hi}] (score {g_lo} .. {g_hi})"
        )));
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if shape_score(log_y, mean_log, mid).0 < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= KAPPA_TOL * lo.max(1.0) {
            return Ok(0.5 * (lo + hi));
        }
    }
    Err(Error::NoConvergence("bisection exhausted its iterations".into()))
}

/// Per-class ascending cosine distances of correctly classified points to
/// their class mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceSet {
    pub classes: Vec<usize>,
    pub distances: Vec<Vec<f64>>,
}

impl DistanceSet {
    pub fn get(&self, class: usize) -> Option<&[f64]> {
        let i = self.classes.iter().position(|&c| c == class)?;
        Some(&self.distances[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    /// Fraction η of each class's distances, taken from the far end, used
    /// for the Weibull fit.
    pub tail_fraction: f64,
    pub min_correct: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            tail_fraction: DEFAULT_TAIL_FRACTION,
            min_correct: DEFAULT_MIN_CORRECT,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "tail fraction must lie in (0, 1], got {}",
                self.tail_fraction
            )));
        }
        Ok(())
    }

    /// Number of tail points used for a class with `n` correct instances.
    pub fn tail_len(&self, n: usize) -> usize {
        let k = (self.tail_fraction * n as f64).ceil() as usize;
        k.max(MIN_TAIL_LEN).min(n)
    }
}

/// Class means and Weibull bounds. Immutable once built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaRecognitionModel {
    pub classes: Vec<usize>,
    pub class_means: Vec<Vec<f64>>,
    pub weibulls: Vec<WeibullParams>,
    pub tail_fraction: f64,
    pub built_at_task: usize,
}

/// Means and distance sets over correctly classified rows (prediction equal
/// to label), for every class that appears in `labels`.
pub fn class_distances(
    mu: &Matrix,
    labels: &[usize],
    predictions: &[usize],
    min_correct: usize,
) -> Result<(Vec<Vec<f64>>, DistanceSet)> {
    if mu.rows() != labels.len() || labels.len() != predictions.len() {
        return Err(Error::invalid(format!(
            "{} latent rows, {} labels and {} predictions",
            mu.rows(),
            labels.len(),
            predictions.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("cannot build a meta-recognition model from no data"));
    }
    mu.ensure_finite("latent means")?;
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();

    let mut means = Vec::with_capacity(classes.len());
    let mut distances = Vec::with_capacity(classes.len());
    for &class in &classes {
        let rows: Vec<usize> = (0..labels.len())
            .filter(|&i| labels[i] == class && predictions[i] == class)
            .collect();
        if rows.len() < min_correct.max(1) {
            return Err(Error::TooFewCorrect {
                class,
                count: rows.len(),
                required: min_correct.max(1),
            });
        }
        let mut mean = vec![0.0; mu.cols()];
        for &r in &rows {
            for (m, v) in mean.iter_mut().zip(mu.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= rows.len() as f64;
        }
        let mut d: Vec<f64> = rows.iter().map(|&r| cosine_distance(mu.row(r), &mean)).collect();
        d.sort_by(f64::total_cmp);
        means.push(mean);
        distances.push(d);
    }
    Ok((means, DistanceSet { classes, distances }))
}

impl MetaRecognitionModel {
    /// Builds the model from posterior means with their labels and the
    /// classifier's predictions.
    pub fn build(mu: &Matrix, labels: &[usize], predictions: &[usize], cfg: &MetaConfig) -> Result<Self> {
        cfg.validate()?;
        let (class_means, set) = class_distances(mu, labels, predictions, cfg.min_correct)?;
        let weibulls = set
            .classes
            .iter()
            .zip(&set.distances)
            .map(|(&class, d)| {
                let tail = &d[d.len() - cfg.tail_len(d.len())..];
                fit_weibull_tail(tail).map_err(|e| match e {
                    Error::DegenerateTail { .. } => Error::DegenerateTail { class: Some(class) },
                    Error::NoConvergence(msg) => Error::NoConvergence(format!("class {class}: {msg}")),
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            classes: set.classes,
            class_means,
            weibulls,
            tail_fraction: cfg.tail_fraction,
            built_at_task: 0,
        })
    }

    pub fn with_task(mut self, task: usize) -> Self {
        self.built_at_task = task;
        self
    }

    pub fn latent_dim(&self) -> usize {
        self.class_means.first().map_or(0, Vec::len)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn check(&self, len: usize) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::invalid("meta-recognition model has no classes"));
        }
        if len != self.latent_dim() {
            return Err(Error::invalid(format!(
                "latent vector has length {len}, model expects {}",
                self.latent_dim()
            )));
        }
        Ok(())
    }

    fn probability_unchecked(&self, z: &[f64]) -> f64 {
        self.class_means
            .iter()
            .zip(&self.weibulls)
            .map(|(mean, w)| weibull_cdf(w, cosine_distance(z, mean)))
            .fold(f64::INFINITY, f64::min)
    }

    /// Smallest Weibull CDF over classes of the cosine distance to each mean.
    pub fn outlier_probability(&self, z: &[f64]) -> Result<f64> {
        self.check(z.len())?;
        Ok(self.probability_unchecked(z))
    }

    /// Row-wise [`Self::outlier_probability`].
    pub fn outlier_probabilities(&self, z: &Matrix) -> Result<Vec<f64>> {
        self.check(z.cols())?;
        Ok(z.iter_rows().map(|r| self.probability_unchecked(r)).collect())
    }

    pub fn is_outlier(&self, z: &[f64], omega: f64) -> Result<bool> {
        Ok(self.outlier_probability(z)? > omega)
    }

    /// Rejection prior at which `target_inlier_fraction` of the validation
    /// latents count as inliers.
    pub fn calibrate_omega(&self, validation_mu: &Matrix, target_inlier_fraction: f64) -> Result<f64> {
        calibrate_threshold(&self.outlier_probabilities(validation_mu)?, target_inlier_fraction)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn validate(&self) -> Result<()> {
        if self.classes.len() != self.class_means.len() || self.classes.len() != self.weibulls.len() {
            return Err(Error::invalid("meta-recognition model has mismatched class lists"));
        }
        let dim = self.latent_dim();
        for (c, mean) in self.classes.iter().zip(&self.class_means) {
            if mean.len() != dim || mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("class {c} has a malformed mean vector")));
            }
        }
        for w in &self.weibulls {
            WeibullParams::new(w.tau, w.kappa, w.lambda)?;
        }
        Ok(())
    }
}

/// The `⌈fraction·n⌉`-th smallest value, so that at least that many values
/// are `≤` the returned threshold.
pub fn calibrate_threshold(values: &[f64], target_inlier_fraction: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("cannot calibrate on an empty validation set"));
    }
    if !(target_inlier_fraction > 0.0 && target_inlier_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "target inlier fraction must lie in (0, 1], got {target_inlier_fraction}"
        )));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite {
            name: "calibration scores".into(),
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = ((target_inlier_fraction * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[k - 1])
}

/// Per-datum open-set scores, each averaged over posterior samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenSetScores {
    /// Predictive entropy of the classifier in nats.
    pub entropy: Vec<f64>,
    /// Bernoulli reconstruction loss in nats per pixel.
    pub recon: Vec<f64>,
    /// Latent EVT outlier probability, when a meta model is available.
    pub evt: Option<Vec<f64>>,
}

/// Scores `x` under the three open-set criteria using `samples` posterior
/// draws per row.
pub fn openset_criteria<P: Predictor + ?Sized>(
    model: &P,
    meta: Option<&MetaRecognitionModel>,
    x: &Matrix,
    samples: usize,
    rng: &mut Rng,
) -> Result<OpenSetScores> {
    if samples == 0 {
        return Err(Error::invalid("open-set scoring needs at least one sample"));
    }
    let n = x.rows();
    let (mu, logvar) = model.encode(x)?;
    let std = logvar.map(|v| (0.5 * v).exp());
    let mut entropy = vec![0.0; n];
    let mut recon = vec![0.0; n];
    let mut evt = meta.map(|_| vec![0.0; n]);
    let pixels = x.cols() as f64;
    for _ in 0..samples {
        let eps = rng.normal_matrix(n, model.latent_dim());
        let mut z = eps.zip_map(&std, |e, s| e * s)?;
        z.add_assign(&mu)?;
        let log_p = log_softmax_rows(&model.class_logits(x, &z)?);
        let logits = model.decode_logits(&z)?;
        for i in 0..n {
            entropy[i] -= log_p.row(i).iter().map(|l| l.exp() * l).sum::<f64>();
            recon[i] += logits
                .row(i)
                .iter()
                .zip(x.row(i))
                .map(|(&l, &t)| bce_with_logit(l, t))
                .sum::<f64>()
                / pixels;
        }
        if let (Some(meta), Some(evt)) = (meta, evt.as_mut()) {
            for (e, p) in evt.iter_mut().zip(meta.outlier_probabilities(&z)?) {
                *e += p;
            }
        }
    }
    let s = samples as f64;
    for v in entropy
        .iter_mut()
        .chain(recon.iter_mut())
        .chain(evt.iter_mut().flatten())
    {
        *v /= s;
    }
    Ok(OpenSetScores { entropy, recon, evt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{JointModel, ModelConfig};
    use crate::numcore::Dense;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn sample_weibull(rng: &mut Rng, n: usize, kappa: f64, lambda: f64) -> Vec<f64> {
        let mut v: Vec<f64> = (0..n)
            .map(|_| lambda * (-(1.0 - rng.uniform()).ln()).powf(1.0 / kappa))
            .collect();
        v.sort_by(f64::total_cmp);
        v
    }

    /// Direct maximization of the two-parameter log-likelihood by nested
    /// golden-section search, independent of the score equation.
    fn reference_mle(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let sum_log: f64 = x.iter().map(|v| v.ln()).sum();
        let loglik = |k: f64, l: f64| {
            n * k.ln() - n * k * l.ln() + (k - 1.0) * sum_log - x.iter().map(|v| (v / l).powf(k)).sum::<f64>()
        };
        let golden = |lo: f64, hi: f64, f: &dyn Fn(f64) -> f64| {
            let r = (5f64.sqrt() - 1.0) / 2.0;
            let (mut a, mut b) = (lo, hi);
            for _ in 0..80 {
                let c = b - r * (b - a);
                let d = a + r * (b - a);
                if f(c) > f(d) {
                    b = d;
                } else {
                    a = c;
                }
            }
            0.5 * (a + b)
        };
        let best_lambda = |k: f64| golden(-15.0, 5.0, &|ll: f64| loglik(k, ll.exp())).exp();
        let k = golden(0.05, 20.0, &|k| loglik(k, best_lambda(k)));
        (k, best_lambda(k))
    }

    #[test]
    fn cosine_examples() {
        assert!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]) < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, -3.0], &[-1.0, 3.0]) - 2.0).abs() < 1e-15);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
    }

    #[test]
    fn cdf_examples() {
        let p = WeibullParams::new(0.3, 1.0, 1.0).unwrap();
        assert_eq!(weibull_cdf(&p, 0.3), 0.0);
        assert_eq!(weibull_cdf(&p, 0.1), 0.0);
        assert!((weibull_cdf(&p, 0.3 + 2f64.ln()) - 0.5).abs() < 1e-15);
        let q = WeibullParams::new(0.0, 2.0, 0.5).unwrap();
        assert!(1.0 - weibull_cdf(&q, 50.0 * 0.5) < 1e-12);
        assert!(WeibullParams::new(0.0, 0.0, 1.0).is_err());
        assert!(WeibullParams::new(0.0, 1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn fit_recovers_known_parameters() {
        let mut rng = Rng::new(5);
        for (kappa, lambda) in [(2.0, 1.5), (1.0, 0.7)] {
            let data = sample_weibull(&mut rng, 10_000, kappa, lambda);
            let fit = fit_weibull_tail(&data).unwrap();
            assert!((fit.kappa - kappa).abs() / kappa < 0.05, "{fit:?}");
            assert!((fit.lambda - lambda).abs() / lambda < 0.05, "{fit:?}");
            let shifted: Vec<f64> = data.iter().map(|d| d - fit.tau).collect();
            let (rk, rl) = reference_mle(&shifted);
            assert!((fit.kappa - rk).abs() / rk < 1e-4, "{} vs {rk}", fit.kappa);
            assert!((fit.lambda - rl).abs() / rl < 1e-4, "{} vs {rl}", fit.lambda);
        }
    }

    #[test]
    fn fitted_cdf_tracks_empirical_tail() {
        let mut rng = Rng::new(6);
        let data = sample_weibull(&mut rng, 200, 2.0, 1.5);
        let fit = fit_weibull_tail(&data).unwrap();
        let n = data.len() as f64;
        let ks = data
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let f = weibull_cdf(&fit, d);
                (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.15, "{ks}");
    }

    #[test]
    fn two_point_tail_is_feasible() {
        let fit = fit_weibull_tail(&[1.0, 1.1]).unwrap();
        assert!(fit.kappa.is_finite() && fit.lambda.is_finite());
        let (rk, rl) = reference_mle(&[1.0 - fit.tau, 1.1 - fit.tau]);
        assert!((fit.kappa - rk).abs() / rk < 1e-4, "{fit:?} vs {rk}");
        assert!((fit.lambda - rl).abs() / rl < 1e-4, "{fit:?} vs {rl}");
        // With only two points the smaller one keeps noticeable mass below it.
        let (lo, hi) = (weibull_cdf(&fit, 1.0), weibull_cdf(&fit, 1.1));
        assert!(lo < 0.2 && lo < hi && hi < 1.0, "{lo} {hi}");
    }

    #[test]
    fn fit_rejects_bad_tails() {
        assert!(matches!(
            fit_weibull_tail(&[0.4, 0.4, 0.4]),
            Err(Error::DegenerateTail { class: None })
        ));
        assert!(fit_weibull_tail(&[0.4]).is_err());
        assert!(fit_weibull_tail(&[0.5, 0.4]).is_err());
        assert!(fit_weibull_tail(&[-0.1, 0.4]).is_err());
    }

    fn clusters(rng: &mut Rng, per_class: usize) -> (Matrix, Vec<usize>) {
        let rows: Vec<Vec<f64>> = (0..2 * per_class)
            .map(|i| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                vec![sign + 0.1 * rng.normal(), 0.1 * rng.normal(), 0.1 * rng.normal()]
            })
            .collect();
        let labels = (0..2 * per_class).map(|i| i % 2).collect();
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn symmetric_clusters_give_opposite_means() {
        let mut rng = Rng::new(7);
        let (mu, labels) = clusters(&mut rng, 2000);
        let meta = MetaRecognitionModel::build(&mu, &labels, &labels, &MetaConfig::default()).unwrap();
        assert_eq!(meta.classes, vec![0, 1]);
        assert!((meta.class_means[0][0] - 1.0).abs() < 0.01);
        assert!((meta.class_means[1][0] + 1.0).abs() < 0.01);
        assert!(meta.class_means[0][1].abs() < 0.01);
        for (c, mean) in meta.class_means.iter().enumerate() {
            assert_eq!(meta.outlier_probability(mean).unwrap(), 0.0, "class {c}");
        }
        assert!(meta.is_outlier(&[0.0, 5.0, 0.0], 0.5).unwrap());
        assert!(!meta.is_outlier(&[0.0, 5.0, 0.0], 1.0).unwrap());
        assert!(!meta.is_outlier(&meta.class_means[1].clone(), 0.0).unwrap());
    }

    #[test]
    fn only_correct_rows_enter_the_means() {
        let mut rng = Rng::new(8);
        let (mu, labels) = clusters(&mut rng, 50);
        let mut predictions = labels.clone();
        // Mislabel every class-0 row whose first coordinate is below 1.
        for i in 0..labels.len() {
            if labels[i] == 0 && mu.get(i, 0) < 1.0 {
                predictions[i] = 1;
            }
        }
        let (means, set) = class_distances(&mu, &labels, &predictions, 10).unwrap();
        let rows: Vec<usize> = (0..labels.len())
            .filter(|&i| labels[i] == 0 && predictions[i] == 0)
            .collect();
        let expected = rows.iter().map(|&i| mu.get(i, 0)).sum::<f64>() / rows.len() as f64;
        assert!((means[0][0] - expected).abs() < 1e-12);
        assert_eq!(set.get(0).unwrap().len(), rows.len());
        assert!(set.distances.iter().all(|d| d.windows(2).all(|w| w[0] <= w[1])));
    }

    #[test]
    fn build_errors() {
        let mu = Matrix::filled(20, 3, 0.5);
        let labels = vec![0; 20];
        assert!(matches!(
            MetaRecognitionModel::build(&mu, &labels, &labels, &MetaConfig::default()),
            Err(Error::DegenerateTail { class: Some(0) })
        ));
        let wrong = vec![1; 20];
        assert!(matches!(
            MetaRecognitionModel::build(&mu, &labels, &wrong, &MetaConfig::default()),
            Err(Error::TooFewCorrect { class: 0, count: 0, .. })
        ));
        let mut rng = Rng::new(9);
        let (mu, labels) = clusters(&mut rng, 9);
        assert!(matches!(
            MetaRecognitionModel::build(&mu, &labels, &labels, &MetaConfig::default()),
            Err(Error::TooFewCorrect {
                class: 0,
                count: 9,
                required: 10
            })
        ));
    }

    #[test]
    fn tail_length_rule() {
        let cfg = MetaConfig::default();
        assert_eq!(cfg.tail_len(10), 2);
        assert_eq!(cfg.tail_len(100), 5);
        assert_eq!(cfg.tail_len(101), 6);
        assert_eq!(cfg.tail_len(5923), 297);
    }

    fn hand_model() -> MetaRecognitionModel {
        MetaRecognitionModel {
            classes: vec![0, 1],
            class_means: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            weibulls: vec![
                WeibullParams::new(0.1, 2.0, 0.3).unwrap(),
                WeibullParams::new(0.05, 1.0, 0.5).unwrap(),
            ],
            tail_fraction: 0.05,
            built_at_task: 1,
        }
    }

    #[test]
    fn outlier_probability_is_min_over_classes() {
        let m = hand_model();
        for z in [[1.0f64, 0.4], [0.3, 1.0], [-1.0, 0.2], [0.7, 0.7]] {
            let d0 = 1.0 - z[0] / (z[0].hypot(z[1]));
            let d1 = 1.0 - z[1] / (z[0].hypot(z[1]));
            let f0: f64 = if d0 <= 0.1 {
                0.0
            } else {
                1.0 - (-((d0 - 0.1) / 0.3).powi(2)).exp()
            };
            let f1: f64 = if d1 <= 0.05 {
                0.0
            } else {
                1.0 - (-(d1 - 0.05) / 0.5).exp()
            };
            let got = m.outlier_probability(&z).unwrap();
            assert!((got - f0.min(f1)).abs() < 1e-12, "{z:?}: {got} vs {}", f0.min(f1));
        }
        assert!(m.outlier_probability(&[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn single_class_boundary() {
        let m = MetaRecognitionModel {
            classes: vec![3],
            class_means: vec![vec![1.0, 0.0]],
            weibulls: vec![WeibullParams::new(0.5, 1.5, 0.2).unwrap()],
            tail_fraction: 0.05,
            built_at_task: 0,
        };
        // Cosine distance 0.5 at 60 degrees.
        let at = [0.5, 3f64.sqrt() / 2.0];
        assert!(m.outlier_probability(&at).unwrap() < 1e-9);
        let above = [0.45, (1.0f64 - 0.45 * 0.45).sqrt()];
        assert!(m.outlier_probability(&above).unwrap() > 0.0);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = Rng::new(10);
        let (mu, labels) = clusters(&mut rng, 300);
        let meta = MetaRecognitionModel::build(&mu, &labels, &labels, &MetaConfig::default())
            .unwrap()
            .with_task(2);
        let back = MetaRecognitionModel::from_json(&meta.to_json().unwrap()).unwrap();
        assert_eq!(back, meta);
        let probe = rng.normal_matrix(50, 3);
        let a = meta.outlier_probabilities(&probe).unwrap();
        let b = back.outlier_probabilities(&probe).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12));
        assert!(MetaRecognitionModel::from_json("{\"classes\":[0]}").is_err());
    }

    #[test]
    fn calibration_examples() {
        assert_eq!(calibrate_threshold(&[0.4, 0.1, 0.3, 0.2], 0.5).unwrap(), 0.2);
        assert_eq!(calibrate_threshold(&[0.0; 30], 0.95).unwrap(), 0.0);
        assert!(calibrate_threshold(&[], 0.95).is_err());
        assert!(calibrate_threshold(&[0.1], 0.0).is_err());
    }

    #[test]
    fn calibration_recount_on_clusters() {
        let mut rng = Rng::new(11);
        let (train, labels) = clusters(&mut rng, 500);
        let meta = MetaRecognitionModel::build(&train, &labels, &labels, &MetaConfig::default()).unwrap();
        let (val, _) = clusters(&mut rng, 200);
        let omega = meta.calibrate_omega(&val, 0.95).unwrap();
        let probs = meta.outlier_probabilities(&val).unwrap();
        let flagged = probs.iter().filter(|&&p| p > omega).count();
        let n = probs.len();
        assert!(flagged as f64 <= 0.05 * n as f64 + 1.0);
        let (held_out, _) = clusters(&mut rng, 500);
        let pass = meta
            .outlier_probabilities(&held_out)
            .unwrap()
            .iter()
            .filter(|&&p| p <= omega)
            .count();
        assert!(pass as f64 >= 0.9 * held_out.rows() as f64, "{pass}");
    }

    #[test]
    fn scale_invariance() {
        let mut rng = Rng::new(12);
        let (mu, labels) = clusters(&mut rng, 200);
        let meta = MetaRecognitionModel::build(&mu, &labels, &labels, &MetaConfig::default()).unwrap();
        let mut scaled = meta.clone();
        for m in &mut scaled.class_means {
            m.iter_mut().for_each(|v| *v *= 7.5);
        }
        let z = rng.normal_matrix(100, 3);
        let mut z_scaled = z.clone();
        z_scaled.scale(7.5);
        let a = meta.outlier_probabilities(&z).unwrap();
        let b = scaled.outlier_probabilities(&z_scaled).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    fn tiny_model(classes: usize) -> JointModel {
        let cfg = ModelConfig {
            input_dim: 6,
            hidden: vec![5],
            latent_dim: 3,
            beta: 0.1,
            class_weight: 1.0,
        };
        JointModel::new(cfg, classes, &mut Rng::new(13)).unwrap()
    }

    #[test]
    fn uniform_classifier_has_log_k_entropy() {
        let mut m = tiny_model(10);
        *m.classifier_mut() = Dense::zeros(3, 10);
        let x = Matrix::filled(4, 6, 0.5);
        let s = openset_criteria(&m, None, &x, 3, &mut Rng::new(1)).unwrap();
        assert!(s.entropy.iter().all(|e| (e - 10f64.ln()).abs() < 1e-12));
        assert!(s.evt.is_none());
    }

    #[test]
    fn collapsed_posterior_matches_single_pass() {
        let mut m = tiny_model(2);
        let (_, lv) = m.encoder_heads_mut();
        lv.weight = Matrix::zeros(lv.input_dim(), lv.output_dim());
        lv.bias = Matrix::filled(1, lv.output_dim(), -60.0);
        let meta = hand_model_3d();
        let x = Matrix::from_fn(3, 6, |r, c| ((r + c) % 3) as f64 / 2.0);
        let s = openset_criteria(&m, Some(&meta), &x, 1, &mut Rng::new(2)).unwrap();
        let (mu, _) = m.encode(&x).unwrap();
        let probs = crate::numcore::softmax_rows(&m.classify(&mu).unwrap());
        let logits = m.decode_logits(&mu).unwrap();
        let evt = meta.outlier_probabilities(&mu).unwrap();
        for i in 0..3 {
            let h: f64 = -probs.row(i).iter().map(|p| p * p.ln()).sum::<f64>();
            let r: f64 = logits
                .row(i)
                .iter()
                .zip(x.row(i))
                .map(|(&l, &t)| bce_with_logit(l, t))
                .sum::<f64>()
                / 6.0;
            assert!((s.entropy[i] - h).abs() < 1e-9);
            assert!((s.recon[i] - r).abs() < 1e-9);
            assert!((s.evt.as_ref().unwrap()[i] - evt[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn perfect_reconstruction_scores_near_zero() {
        let mut m = tiny_model(2);
        let out = m.decoder_output_mut();
        out.weight = Matrix::zeros(out.input_dim(), out.output_dim());
        out.bias = Matrix::row_vector(&[40.0, -40.0, 40.0, -40.0, 40.0, -40.0]);
        let x = Matrix::from_rows(&[[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]]).unwrap();
        let s = openset_criteria(&m, None, &x, 5, &mut Rng::new(3)).unwrap();
        assert!(s.recon[0] < 1e-15);
    }

    fn hand_model_3d() -> MetaRecognitionModel {
        MetaRecognitionModel {
            classes: vec![0, 1],
            class_means: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            weibulls: vec![
                WeibullParams::new(0.1, 2.0, 0.3).unwrap(),
                WeibullParams::new(0.05, 1.0, 0.5).unwrap(),
            ],
            tail_fraction: 0.05,
            built_at_task: 1,
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn cdf_is_monotone_and_bounded(
            tau in 0.0f64..2.0,
            kappa in 0.05f64..20.0,
            lambda in 1e-3f64..5.0,
            a in -1.0f64..4.0,
            b in -1.0f64..4.0,
        ) {
            let p = WeibullParams::new(tau, kappa, lambda).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (flo, fhi) = (weibull_cdf(&p, lo), weibull_cdf(&p, hi));
            prop_assert!((0.0..=1.0).contains(&flo) && (0.0..=1.0).contains(&fhi));
            prop_assert!(flo <= fhi);
            if lo <= tau {
                prop_assert_eq!(flo, 0.0);
            }
        }
    }
}
