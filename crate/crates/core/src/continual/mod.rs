//! Class-incremental experiments: task sequences, training modes, evaluation
//! and open-set sweeps.

mod dual;
mod engine;
mod eval;
mod openset;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use dual::DualModel;
pub use engine::{run_experiment, run_experiment_with, Event, ExperimentConfig, ExperimentResult, ReplayStats};
pub use eval::{encode_means, evaluate, par_chunks, EvalOutput, MetricsRecord};
pub use openset::{openset_sweep, OmegaPoint, OpenSetReport, OpenSetRow};

use crate::data::{train_val_split, LabeledDataset};
use crate::error::{Error, Result};
use crate::numcore::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// All classes at once, a single task.
    Iso,
    /// Accumulates the real data of every task seen so far.
    Ub,
    /// Current task only.
    Lb,
    /// Unfiltered generative replay.
    Cdvae,
    /// Generative replay filtered by the latent Weibull bound.
    Ocdvae,
    /// Separate generative and discriminative networks.
    Dual,
}

impl Mode {
    pub const ALL: [Mode; 6] = [Mode::Iso, Mode::Ub, Mode::Lb, Mode::Cdvae, Mode::Ocdvae, Mode::Dual];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Iso => "iso",
            Mode::Ub => "ub",
            Mode::Lb => "lb",
            Mode::Cdvae => "cdvae",
            Mode::Ocdvae => "ocdvae",
            Mode::Dual => "dual",
        }
    }

    pub fn uses_replay(self) -> bool {
        matches!(self, Mode::Cdvae | Mode::Ocdvae | Mode::Dual)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown mode {s:?} (expected iso, ub, lb, cdvae, ocdvae or dual)"
                ))
            })
    }
}

/// Groups of `per_task` classes in ascending order; the last group takes the
/// remainder.
pub fn split_classes(classes: &[usize], per_task: usize) -> Result<Vec<Vec<usize>>> {
    if per_task == 0 {
        return Err(Error::invalid("classes per task must be at least 1"));
    }
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    Ok(sorted.chunks(per_task).map(<[usize]>::to_vec).collect())
}

/// One increment: its global class ids and data with global labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub classes: Vec<usize>,
    pub train: LabeledDataset,
    pub val: Option<LabeledDataset>,
    pub test: LabeledDataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<Task>,
    /// `class_map[g]` is the original label of global class `g`.
    pub class_map: Vec<usize>,
}

impl TaskSequence {
    /// Splits train and test data into class-disjoint tasks of
    /// `classes_per_task` classes and remaps labels to contiguous global ids
    /// in task order. With `val_fraction`, each task's training data is split
    /// into stratified train and validation parts.
    pub fn split_classes(
        train: &LabeledDataset,
        test: &LabeledDataset,
        classes_per_task: usize,
        val_fraction: Option<f64>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let groups = split_classes(&train.classes(), classes_per_task)?;
        let class_map: Vec<usize> = groups.iter().flatten().copied().collect();
        let remap = |ds: &LabeledDataset| {
            let mut out = ds.clone();
            for l in &mut out.labels {
                *l = class_map.iter().position(|c| c == l).expect("class present in map");
            }
            out
        };
        let mut tasks = Vec::with_capacity(groups.len());
        for group in &groups {
            let tr = remap(&train.filter_classes(group));
            let te = remap(&test.filter_classes(group));
            if te.is_empty() {
                return Err(Error::invalid(format!("no test data for classes {group:?}")));
            }
            let (tr, val) = match val_fraction {
                Some(f) => {
                    let (a, b) = train_val_split(&tr, f, rng)?;
                    (a, Some(b))
                }
                None => (tr, None),
            };
            let classes = group
                .iter()
                .map(|c| class_map.iter().position(|m| m == c).expect("class present in map"))
                .collect();
            tasks.push(Task {
                classes,
                train: tr,
                val,
                test: te,
            });
        }
        Ok(Self { tasks, class_map })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.train.dim())
    }

    /// Number of classes in tasks `0..=upto`.
    pub fn classes_through(&self, upto: usize) -> usize {
        self.tasks[..=upto].iter().map(|t| t.classes.len()).sum()
    }

    pub fn total_classes(&self) -> usize {
        self.class_map.len()
    }

    /// Collapses the sequence into one task holding everything.
    pub fn merged(&self) -> Result<Self> {
        let train: Vec<&LabeledDataset> = self.tasks.iter().map(|t| &t.train).collect();
        let test: Vec<&LabeledDataset> = self.tasks.iter().map(|t| &t.test).collect();
        let val: Option<Vec<&LabeledDataset>> = self.tasks.iter().map(|t| t.val.as_ref()).collect();
        let name = self
            .tasks
            .first()
            .map_or("merged".to_string(), |t| t.train.name.clone());
        Ok(Self {
            tasks: vec![Task {
                classes: self.tasks.iter().flat_map(|t| t.classes.iter().copied()).collect(),
                train: LabeledDataset::concat(&train, name.clone())?,
                val: val.map(|v| LabeledDataset::concat(&v, name.clone())).transpose()?,
                test: LabeledDataset::concat(&test, name)?,
            }],
            class_map: self.class_map.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Matrix;

    #[test]
    fn class_grouping() {
        let ten: Vec<usize> = (0..10).collect();
        assert_eq!(
            split_classes(&ten, 2).unwrap(),
            vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7], vec![8, 9]]
        );
        assert_eq!(split_classes(&[2, 0, 1], 2).unwrap(), vec![vec![0, 1], vec![2]]);
        assert_eq!(split_classes(&ten, 10).unwrap().len(), 1);
        assert!(split_classes(&ten, 0).is_err());
    }

    #[test]
    fn mode_parsing() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert_eq!("OCDVAE".parse::<Mode>().unwrap(), Mode::Ocdvae);
        assert!("ewc".parse::<Mode>().is_err());
    }

    fn ds(labels: &[usize]) -> LabeledDataset {
        let x = Matrix::from_fn(labels.len(), 2, |r, _| r as f64 / labels.len() as f64);
        LabeledDataset::new(x, labels.to_vec(), "d").unwrap()
    }

    #[test]
    fn remapping_is_a_bijection() {
        let train = ds(&[5, 7, 9, 5, 7, 9, 5, 7, 9, 5, 7, 9]);
        let test = ds(&[9, 7, 5]);
        let seq = TaskSequence::split_classes(&train, &test, 2, None, &mut Rng::new(0)).unwrap();
        assert_eq!(seq.class_map, vec![5, 7, 9]);
        assert_eq!(seq.tasks[0].classes, vec![0, 1]);
        assert_eq!(seq.tasks[1].classes, vec![2]);
        assert_eq!(seq.tasks[1].train.labels, vec![2, 2, 2, 2]);
        assert_eq!(seq.tasks[0].test.labels, vec![1, 0]);
        assert_eq!(seq.classes_through(1), 3);
        let merged = seq.merged().unwrap();
        assert_eq!(merged.tasks.len(), 1);
        assert_eq!(merged.tasks[0].train.len(), 12);
    }
}
