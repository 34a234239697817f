use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ocreplay::continual::TaskSequence;
use ocreplay::data::{load_mnist_dir, make_blobs, LabeledDataset, Split, SyntheticSpec};
use ocreplay::numcore::Rng;

use crate::config::{DatasetKind, RunConfig};

/// Random stream for data subsampling and splits, apart from the training
/// streams that derive from the same seed.
const STREAM_DATA: u64 = 16;

/// The task sequence plus test images of classes left out by `classes`.
pub struct RunData {
    pub sequence: TaskSequence,
    pub unseen: Option<LabeledDataset>,
}

pub fn load_image_dir(dir: &Path, split: Split) -> Result<LabeledDataset> {
    let name = dir
        .file_name()
        .map_or("images".into(), |n| n.to_string_lossy().into_owned());
    load_mnist_dir(dir, split, &name).with_context(|| format!("loading {}", dir.display()))
}

/// `mnist` and `fashion` resolve under the data root; anything else is a
/// directory in MNIST layout.
pub fn resolve_dataset(root: &Path, name: &str) -> PathBuf {
    match name {
        "mnist" | "fashion" => root.join(name),
        other => PathBuf::from(other),
    }
}

pub fn build_run_data(cfg: &RunConfig) -> Result<RunData> {
    let mut rng = Rng::new(cfg.seed).derive(STREAM_DATA);
    let (train, test) = match cfg.dataset {
        DatasetKind::Blobs => {
            let b = &cfg.blobs;
            let spec = SyntheticSpec {
                num_classes: b.num_classes,
                points_per_class: b.train_per_class,
                dim: b.dim,
                center_separation: b.center_separation,
                cluster_sigma: b.cluster_sigma,
            };
            let train = make_blobs(&spec, &mut rng)?;
            let test = make_blobs(
                &SyntheticSpec {
                    points_per_class: b.test_per_class,
                    ..spec
                },
                &mut rng,
            )?;
            (train, test)
        }
        kind => {
            let dir = cfg.data_root().join(kind.dir_name());
            (load_image_dir(&dir, Split::Train)?, load_image_dir(&dir, Split::Test)?)
        }
    };
    let train = train.take_per_class(cfg.train_per_class);
    let (train, test, unseen) = match &cfg.classes {
        Some(keep) => {
            let present = train.classes();
            if let Some(c) = keep.iter().find(|c| !present.contains(c)) {
                bail!("class {c} is not in the {} dataset", cfg.dataset.dir_name());
            }
            let rest: Vec<usize> = present.into_iter().filter(|c| !keep.contains(c)).collect();
            let unseen = (!rest.is_empty()).then(|| test.filter_classes(&rest));
            (train.filter_classes(keep), test.filter_classes(keep), unseen)
        }
        None => (train, test, None),
    };
    let sequence = TaskSequence::split_classes(&train, &test, cfg.classes_per_task, Some(cfg.val_fraction), &mut rng)?;
    Ok(RunData { sequence, unseen })
}
