use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::numcore::{Matrix, Rng};

/// Gaussian blobs around lattice points in the unit cube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub points_per_class: usize,
    pub dim: usize,
    pub center_separation: f64,
    pub cluster_sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            points_per_class: 500,
            dim: 16,
            center_separation: 0.5,
            cluster_sigma: 0.05,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.points_per_class == 0 || self.dim == 0 {
            return Err(Error::invalid("blob counts and dimension must be positive"));
        }
        if !(self.center_separation > 0.0) || !(self.cluster_sigma > 0.0) {
            return Err(Error::invalid("blob separation and sigma must be positive"));
        }
        Ok(())
    }

    /// Smallest lattice side `k` with `k^dim ≥ num_classes`.
    fn lattice_side(&self) -> usize {
        let mut k = 1usize;
        while (k as f64).powi(self.dim.min(64) as i32) < self.num_classes as f64 {
            k += 1;
        }
        k
    }

    /// Class `c` sits at the base-`k` digits of `c`, spaced by the separation
    /// and centered in the unit cube.
    pub fn center(&self, class: usize) -> Vec<f64> {
        let k = self.lattice_side();
        let offset = 0.5 - self.center_separation * (k - 1) as f64 / 2.0;
        let mut rest = class;
        (0..self.dim)
            .map(|_| {
                let digit = rest % k;
                rest /= k;
                offset + self.center_separation * digit as f64
            })
            .collect()
    }
}

/// Samples `points_per_class` points per class, class by class, each
/// coordinate clamped into `[0, 1]`.
pub fn make_blobs(spec: &SyntheticSpec, rng: &mut Rng) -> Result<LabeledDataset> {
    spec.validate()?;
    let n = spec.num_classes * spec.points_per_class;
    let mut images = Matrix::zeros(n, spec.dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.num_classes {
        let center = spec.center(class);
        for i in 0..spec.points_per_class {
            let row = images.row_mut(class * spec.points_per_class + i);
            for (v, c) in row.iter_mut().zip(&center) {
                *v = (c + spec.cluster_sigma * rng.normal()).clamp(0.0, 1.0);
            }
            labels.push(class);
        }
    }
    LabeledDataset::new(images, labels, "blobs")
}
