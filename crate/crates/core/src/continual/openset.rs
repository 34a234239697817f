use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evt::{calibrate_threshold, openset_criteria, MetaRecognitionModel, OpenSetScores};
use crate::model::Predictor;
use crate::numcore::{Matrix, Rng};

/// Fraction of validation data kept below each criterion's threshold.
pub const CALIBRATION_FRACTION: f64 = 0.95;
/// Number of equally spaced outlier-probability thresholds in the sweep.
pub const OMEGA_GRID: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenSetRow {
    pub criterion: String,
    pub dataset: String,
    pub threshold: f64,
    /// Percentage of the dataset flagged as unknown.
    pub percent_flagged: f64,
}

/// Percentage of each dataset flagged when the EVT threshold is `omega`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaPoint {
    pub omega: f64,
    pub percent_flagged: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenSetReport {
    /// Dataset names in column order; the known test set comes first.
    pub datasets: Vec<String>,
    pub rows: Vec<OpenSetRow>,
    pub omega_curve: Vec<OmegaPoint>,
}

impl OpenSetReport {
    pub fn row(&self, criterion: &str, dataset: &str) -> Option<&OpenSetRow> {
        self.rows
            .iter()
            .find(|r| r.criterion == criterion && r.dataset == dataset)
    }
}

fn percent_above(values: &[f64], threshold: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    100.0 * values.iter().filter(|&&v| v > threshold).count() as f64 / values.len() as f64
}

fn criteria(scores: &OpenSetScores) -> Vec<(&'static str, &[f64])> {
    let mut out = vec![
        ("entropy", scores.entropy.as_slice()),
        ("recon", scores.recon.as_slice()),
    ];
    if let Some(evt) = &scores.evt {
        out.push(("evt", evt.as_slice()));
    }
    out
}

/// Calibrates every criterion on `val_x` so that 95% of it is accepted, then
/// reports the fraction of each dataset rejected. Scores use `samples`
/// posterior draws per row. `known` is the in-distribution test set.
pub fn openset_sweep<P: Predictor + ?Sized>(
    model: &P,
    meta: Option<&MetaRecognitionModel>,
    val_x: &Matrix,
    known: (&str, &Matrix),
    unknown: &[(&str, &Matrix)],
    samples: usize,
    rng: &Rng,
) -> Result<OpenSetReport> {
    if val_x.rows() == 0 {
        return Err(Error::invalid("open-set calibration needs validation data"));
    }
    let val = openset_criteria(model, meta, val_x, samples, &mut rng.derive(0))?;
    let mut sets = vec![known];
    sets.extend_from_slice(unknown);
    let scored: Vec<OpenSetScores> = sets
        .iter()
        .enumerate()
        .map(|(i, (_, x))| openset_criteria(model, meta, x, samples, &mut rng.derive(i as u64 + 1)))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (c, (name, values)) in criteria(&val).into_iter().enumerate() {
        let threshold = calibrate_threshold(values, CALIBRATION_FRACTION)?;
        for ((dataset, _), s) in sets.iter().zip(&scored) {
            rows.push(OpenSetRow {
                criterion: name.to_string(),
                dataset: dataset.to_string(),
                threshold,
                percent_flagged: percent_above(criteria(s)[c].1, threshold),
            });
        }
    }

    let omega_curve = if meta.is_some() {
        (0..OMEGA_GRID)
            .map(|i| {
                let omega = i as f64 / (OMEGA_GRID - 1) as f64;
                OmegaPoint {
                    omega,
                    percent_flagged: scored
                        .iter()
                        .map(|s| percent_above(s.evt.as_deref().unwrap_or(&[]), omega))
                        .collect(),
                }
            })
            .collect()
    } else {
        Vec::new()
    };

    Ok(OpenSetReport {
        datasets: sets.iter().map(|(n, _)| n.to_string()).collect(),
        rows,
        omega_curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strict_inequality_when_flagging() {
        assert_eq!(percent_above(&[0.1, 0.2, 0.3, 0.4], 0.2), 50.0);
        assert_eq!(percent_above(&[], 0.2), 0.0);
        assert_eq!(percent_above(&[1.0], 1.0), 0.0);
    }
}
