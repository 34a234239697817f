//! Finite-difference check of the full joint loss, reported per parameter
//! group. Denoising noise and reparameterization noise are drawn once per case
//! and held fixed, so the loss is a deterministic function of the weights.

use serde::Serialize;

use super::joint::{flatten_layers, uniform_weights};
use super::{Batch, JointModel, ModelConfig};
use crate::error::{Error, Result};
use crate::numcore::{relative_errors, Matrix, Rng};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

/// One small random configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckCase {
    pub seed: u64,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub batch: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupError {
    /// `<layer>.weight` or `<layer>.bias`.
    pub group: String,
    pub params: usize,
    pub max_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseReport {
    pub case: GradCheckCase,
    pub groups: Vec<GroupError>,
}

impl CaseReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_error).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub cases: Vec<CaseReport>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.cases.iter().map(CaseReport::max_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < self.tolerance
    }

    /// Groups at or above tolerance, with the case seed they failed in.
    pub fn failures(&self) -> Vec<(u64, &GroupError)> {
        self.cases
            .iter()
            .flat_map(|c| {
                c.groups
                    .iter()
                    .filter(|g| !(g.max_error < self.tolerance))
                    .map(move |g| (c.case.seed, g))
            })
            .collect()
    }

    /// Max error of each group name across all cases, in first-seen order.
    pub fn by_group(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for g in self.cases.iter().flat_map(|c| &c.groups) {
            match out.iter_mut().find(|(n, _)| *n == g.group) {
                Some((_, e)) => *e = e.max(g.max_error),
                None => out.push((g.group.clone(), g.max_error)),
            }
        }
        out
    }
}

/// `count` random configurations with batch ≤ 4, latent ≤ 8 and hidden
/// widths ≤ 16.
pub fn random_cases(count: usize, seed: u64) -> Vec<GradCheckCase> {
    let mut rng = Rng::new(seed);
    let mut pick = |lo: usize, hi: usize| lo + (rng.uniform() * (hi - lo + 1) as f64) as usize % (hi - lo + 1);
    (0..count)
        .map(|i| {
            let depth = pick(1, 2);
            GradCheckCase {
                seed: seed.wrapping_add(i as u64),
                input_dim: pick(3, 9),
                hidden: (0..depth).map(|_| pick(4, 16)).collect(),
                latent_dim: pick(2, 8),
                batch: pick(1, 4),
                classes: pick(2, 4),
            }
        })
        .collect()
}

/// Checks one case. `fault` doubles the analytic gradient of every group
/// whose name starts with it, which the check must catch.
pub fn check_case(case: &GradCheckCase, fault: Option<&str>) -> Result<CaseReport> {
    let mut rng = Rng::new(case.seed);
    let config = ModelConfig {
        input_dim: case.input_dim,
        hidden: case.hidden.clone(),
        latent_dim: case.latent_dim,
        beta: 0.1,
        class_weight: 1.0,
    };
    let model = JointModel::new(config, case.classes, &mut rng)?;
    let x = Matrix::from_fn(case.batch, case.input_dim, |_, _| rng.uniform());
    let batch = Batch::new(x, (0..case.batch).map(|i| i % case.classes).collect())?;
    let mut noise = rng.normal_matrix(case.batch, case.input_dim);
    noise.scale(0.25);
    let eps = rng.normal_matrix(case.batch, case.latent_dim);
    let weights = uniform_weights(case.batch);

    let mut spans = Vec::new();
    for (name, layer) in model.layer_names().into_iter().zip(model.layers()) {
        spans.push((format!("{name}.weight"), layer.weight.len()));
        spans.push((format!("{name}.bias"), layer.bias.len()));
    }
    let mut scale = Vec::new();
    if let Some(prefix) = fault {
        if !spans.iter().any(|(n, _)| n.starts_with(prefix)) {
            return Err(Error::invalid(format!("no parameter group matches {prefix:?}")));
        }
    }
    for (name, len) in &spans {
        let s = match fault {
            Some(prefix) if name.starts_with(prefix) => 2.0,
            _ => 1.0,
        };
        scale.extend(std::iter::repeat(s).take(*len));
    }

    let mut failure = None;
    let flat = model.flatten_params();
    let errors = relative_errors(
        |p| {
            let mut m = model.clone();
            let out = m
                .load_flat_params(p)
                .and_then(|_| m.loss_and_grads(&batch, &weights, Some(&noise), &eps, None));
            match out {
                Ok((loss, grads)) => {
                    let g = flatten_layers(grads.iter())
                        .iter()
                        .zip(&scale)
                        .map(|(g, s)| g * s)
                        .collect();
                    (loss.total, g)
                }
                Err(e) => {
                    failure.get_or_insert(e);
                    (f64::NAN, vec![f64::NAN; p.len()])
                }
            }
        },
        &flat,
        STEP,
    );
    if let Some(e) = failure {
        return Err(e);
    }

    let mut groups = Vec::with_capacity(spans.len());
    let mut offset = 0;
    for (group, len) in spans {
        let max_error = errors[offset..offset + len]
            .iter()
            .fold(0.0, |a: f64, &e| if e.is_nan() { f64::NAN } else { a.max(e) });
        groups.push(GroupError {
            group,
            params: len,
            max_error,
        });
        offset += len;
    }
    Ok(CaseReport {
        case: case.clone(),
        groups,
    })
}

pub fn run_gradcheck(cases: &[GradCheckCase], fault: Option<&str>) -> Result<GradCheckReport> {
    let cases = cases.iter().map(|c| check_case(c, fault)).collect::<Result<_>>()?;
    Ok(GradCheckReport {
        tolerance: GRADCHECK_TOLERANCE,
        cases,
    })
}
