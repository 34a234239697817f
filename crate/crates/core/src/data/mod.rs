//! Datasets: IDX ingestion, synthetic blobs and stratified splits.

mod idx;
mod synthetic;

use std::path::{Path, PathBuf};

pub use idx::{maybe_gunzip, parse_idx, read_idx_file, write_idx_images, write_idx_labels, IdxData};
pub use synthetic::{make_blobs, SyntheticSpec};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::numcore::{Matrix, Rng};

/// Images in `[0, 1]`, one per row, with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Matrix,
    pub labels: Vec<usize>,
    pub name: String,
}

impl LabeledDataset {
    pub fn new(images: Matrix, labels: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(i) = images.as_slice().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!(
                "pixel {} of image {} is {}, outside [0, 1]",
                i % images.cols().max(1),
                i / images.cols().max(1),
                images.as_slice()[i]
            )));
        }
        Ok(Self {
            images,
            labels,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn ensure_label_range(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= num_classes) {
            Some(&label) => Err(Error::LabelOutOfRange { label, num_classes }),
            None => Ok(()),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            name: self.name.clone(),
        }
    }

    /// Rows whose label is in `classes`, in their original order.
    pub fn filter_classes(&self, classes: &[usize]) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        self.subset(&idx)
    }

    pub fn concat(parts: &[&LabeledDataset], name: impl Into<String>) -> Result<Self> {
        let dim = parts.first().map_or(0, |p| p.dim());
        let images = Matrix::vstack(&parts.iter().map(|p| &p.images).collect::<Vec<_>>(), dim)?;
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        Self::new(images, labels, name)
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            x: self.images.select_rows(indices),
            y: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Keeps the first `per_class` rows of every class (all rows when
    /// `per_class` is `None`).
    pub fn take_per_class(&self, per_class: Option<usize>) -> Self {
        let Some(limit) = per_class else {
            return self.clone();
        };
        let mut seen = std::collections::HashMap::new();
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let count = seen.entry(self.labels[i]).or_insert(0usize);
                *count += 1;
                *count <= limit
            })
            .collect();
        self.subset(&idx)
    }
}

/// Stratified split: each class contributes `round(fraction·n_c)` rows to
/// validation (at least one, leaving at least one for training). Both parts
/// keep the original row order.
pub fn train_val_split(
    ds: &LabeledDataset,
    val_fraction: f64,
    rng: &mut Rng,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "validation fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let mut is_val = vec![false; ds.len()];
    for class in ds.classes() {
        let mut rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        if rows.len() < 2 {
            return Err(Error::invalid(format!(
                "class {class} has {} sample(s), a split needs at least 2",
                rows.len()
            )));
        }
        rng.shuffle(&mut rows);
        let k = ((val_fraction * rows.len() as f64).round() as usize).clamp(1, rows.len() - 1);
        for &r in &rows[..k] {
            is_val[r] = true;
        }
    }
    let (val, train): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| is_val[i]);
    Ok((ds.subset(&train), ds.subset(&val)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

fn find_file(dir: &Path, stem: &str, kind: &str) -> Result<PathBuf> {
    let candidates = [
        format!("{stem}-{kind}-ubyte"),
        format!("{stem}-{kind}-ubyte.gz"),
        format!("{stem}-{}", kind.replacen('-', ".", 1) + "-ubyte"),
        format!("{stem}-{}", kind.replacen('-', ".", 1) + "-ubyte.gz"),
    ];
    candidates
        .iter()
        .map(|name| dir.join(name))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            Error::io(
                dir.join(&candidates[0]),
                std::io::Error::new(std::io::ErrorKind::NotFound, "IDX file not found (also tried .gz)"),
            )
        })
}

/// Loads an MNIST-layout directory (`train-images-idx3-ubyte`,
/// `t10k-labels-idx1-ubyte`, ... optionally gzipped).
pub fn load_mnist_dir(dir: &Path, split: Split, name: &str) -> Result<LabeledDataset> {
    let images = read_idx_file(&find_file(dir, split.prefix(), "images-idx3")?)?;
    let labels = read_idx_file(&find_file(dir, split.prefix(), "labels-idx1")?)?;
    let (IdxData::Images { images, .. }, IdxData::Labels(labels)) = (images, labels) else {
        return Err(Error::invalid(format!(
            "{}: image and label files have the wrong IDX types",
            dir.display()
        )));
    };
    let ds = LabeledDataset::new(images, labels, name)?;
    ds.ensure_label_range(10)?;
    Ok(ds)
}
