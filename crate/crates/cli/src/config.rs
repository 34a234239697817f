use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, ValueEnum};
use ocreplay::continual::{ExperimentConfig, Mode};
use ocreplay::evt::MetaConfig;
use ocreplay::model::{IntroConfig, ModelConfig};
use ocreplay::numcore::AdamConfig;
use ocreplay::replay::ReplayConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Fashion,
    Blobs,
}

impl DatasetKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Fashion => "fashion",
            DatasetKind::Blobs => "blobs",
        }
    }
}

/// Synthetic dataset used by `dataset = "blobs"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobsConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub center_separation: f64,
    pub cluster_sigma: f64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            dim: 16,
            train_per_class: 300,
            test_per_class: 100,
            center_separation: 0.8,
            cluster_sigma: 0.05,
        }
    }
}

/// A fully resolved run. Serialized verbatim into `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub dataset: DatasetKind,
    /// Dataset root holding `mnist/` and `fashion/`. Falls back to
    /// `OCREPLAY_DATA_DIR`, then the workspace `data/` directory.
    pub data_dir: Option<PathBuf>,
    /// Restrict the dataset to these original labels.
    pub classes: Option<Vec<usize>>,
    pub classes_per_task: usize,
    /// Keep only the first n training images of each class.
    pub train_per_class: Option<usize>,
    pub val_fraction: f64,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta: f64,
    pub latent_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub denoise_sigma: f64,
    pub omega: f64,
    pub tail_fraction: f64,
    /// Replay samples per task; unset means the number of real images seen so far.
    pub replay_count: Option<usize>,
    pub max_attempts_factor: usize,
    pub eval_samples: usize,
    pub intro_margin: Option<f64>,
    pub dual_evt_filter: bool,
    /// Extra unknown datasets for the open-set sweep: `mnist`, `fashion`, or
    /// a directory in MNIST layout.
    pub openset_unknown: Vec<String>,
    pub seed: u64,
    pub threads: usize,
    pub output_dir: PathBuf,
    pub blobs: BlobsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Ocdvae,
            dataset: DatasetKind::Mnist,
            data_dir: None,
            classes: None,
            classes_per_task: 2,
            train_per_class: None,
            val_fraction: 0.05,
            epochs_per_task: 20,
            batch_size: 128,
            learning_rate: 1e-3,
            beta: 0.1,
            latent_dim: 60,
            hidden_width: 400,
            hidden_layers: 2,
            denoise_sigma: 0.25,
            omega: 0.01,
            tail_fraction: 0.05,
            replay_count: None,
            max_attempts_factor: 100,
            eval_samples: 100,
            intro_margin: None,
            dual_evt_filter: false,
            openset_unknown: Vec::new(),
            seed: 0,
            threads: 1,
            output_dir: PathBuf::from("results"),
            blobs: BlobsConfig::default(),
        }
    }
}

/// Command-line overrides; every flag wins over the config file.
#[derive(Args, Debug, Default, Clone)]
pub struct Overrides {
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Comma-separated original labels to keep.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<usize>>,
    #[arg(long)]
    pub classes_per_task: Option<usize>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub epochs_per_task: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub hidden_width: Option<usize>,
    #[arg(long)]
    pub hidden_layers: Option<usize>,
    #[arg(long)]
    pub denoise_sigma: Option<f64>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub tail_fraction: Option<f64>,
    #[arg(long)]
    pub replay_count: Option<usize>,
    #[arg(long)]
    pub max_attempts_factor: Option<usize>,
    #[arg(long)]
    pub eval_samples: Option<usize>,
    #[arg(long)]
    pub intro_margin: Option<f64>,
    #[arg(long)]
    pub dual_evt_filter: bool,
    #[arg(long)]
    pub openset_unknown: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: ocreplay::Error| e.to_string())
}

macro_rules! take {
    ($cfg:ident, $o:ident, $($field:ident),*) => {
        $(if let Some(v) = $o.$field.clone() { $cfg.$field = v; })*
    };
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let o = self;
        take!(
            cfg,
            o,
            mode,
            dataset,
            classes_per_task,
            val_fraction,
            epochs_per_task,
            batch_size,
            learning_rate,
            beta,
            latent_dim,
            hidden_width,
            hidden_layers,
            denoise_sigma,
            omega,
            tail_fraction,
            max_attempts_factor,
            eval_samples,
            seed,
            threads,
            output_dir
        );
        if o.data_dir.is_some() {
            cfg.data_dir = o.data_dir.clone();
        }
        if o.classes.is_some() {
            cfg.classes = o.classes.clone();
        }
        if o.train_per_class.is_some() {
            cfg.train_per_class = o.train_per_class;
        }
        if o.replay_count.is_some() {
            cfg.replay_count = o.replay_count;
        }
        if o.intro_margin.is_some() {
            cfg.intro_margin = o.intro_margin;
        }
        if o.dual_evt_filter {
            cfg.dual_evt_filter = true;
        }
        if !o.openset_unknown.is_empty() {
            cfg.openset_unknown = o.openset_unknown.clone();
        }
    }
}

impl RunConfig {
    /// Parses TOML, or JSON when the file ends in `.json`.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(CliError::Usage)?;
        let parsed = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            serde_json::from_str(&text).map_err(anyhow::Error::from)
        } else {
            toml::from_str(&text).map_err(anyhow::Error::from)
        };
        parsed
            .with_context(|| format!("invalid config {}", path.display()))
            .map_err(CliError::Usage)
    }

    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        overrides.apply(&mut cfg);
        cfg.validate().map_err(CliError::Usage)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(self.classes_per_task > 0, "classes_per_task must be positive");
        anyhow::ensure!(self.hidden_layers > 0, "hidden_layers must be positive");
        anyhow::ensure!(self.threads > 0, "threads must be positive");
        anyhow::ensure!(
            self.val_fraction > 0.0 && self.val_fraction < 1.0,
            "val_fraction must lie in (0, 1)"
        );
        if let Some(m) = self.intro_margin {
            IntroConfig::enabled(m)?;
        }
        // Input width is checked against the data later; any positive value
        // passes here.
        self.experiment(1).validate()?;
        Ok(())
    }

    pub fn experiment(&self, input_dim: usize) -> ExperimentConfig {
        ExperimentConfig {
            mode: self.mode,
            model: ModelConfig {
                input_dim,
                hidden: vec![self.hidden_width; self.hidden_layers],
                latent_dim: self.latent_dim,
                beta: self.beta,
                class_weight: 1.0,
            },
            adam: AdamConfig {
                lr: self.learning_rate,
                ..AdamConfig::default()
            },
            replay: ReplayConfig {
                omega: self.omega,
                replay_count: self.replay_count,
                max_attempts_factor: self.max_attempts_factor,
                ..ReplayConfig::default()
            },
            meta: MetaConfig {
                tail_fraction: self.tail_fraction,
                ..MetaConfig::default()
            },
            intro: self.intro_margin.map(|margin| IntroConfig { enabled: true, margin }),
            epochs_per_task: self.epochs_per_task,
            batch_size: self.batch_size,
            denoise_sigma: self.denoise_sigma,
            eval_samples: self.eval_samples,
            dual_evt_filter: self.dual_evt_filter,
            seed: self.seed,
            threads: self.threads,
        }
    }

    pub fn data_root(&self) -> PathBuf {
        if let Some(d) = &self.data_dir {
            return d.clone();
        }
        default_data_root()
    }
}

pub fn default_data_root() -> PathBuf {
    if let Some(d) = std::env::var_os("OCREPLAY_DATA_DIR") {
        return PathBuf::from(d);
    }
    let workspace = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    if workspace.is_dir() {
        return workspace;
    }
    PathBuf::from("data")
}
