use serde::{Deserialize, Serialize};

use super::eval::{encode_means, evaluate, MetricsRecord};
use super::{DualModel, Mode, TaskSequence};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::evt::{MetaConfig, MetaRecognitionModel};
use crate::model::{Discriminator, DiscriminatorTrainer, IntroConfig, JointModel, ModelConfig, Predictor, Trainer};
use crate::numcore::{AdamConfig, Rng};
use crate::replay::{generate_replay, MixedStream, ReplayConfig};

const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_REPLAY: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_EXPAND: u64 = 5;

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub replay: ReplayConfig,
    pub meta: MetaConfig,
    pub intro: Option<IntroConfig>,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    /// Standard deviation of the Gaussian noise added to encoder inputs.
    pub denoise_sigma: f64,
    /// Posterior samples per test point.
    pub eval_samples: usize,
    /// Dual mode only: filter replay through a latent Weibull bound.
    pub dual_evt_filter: bool,
    pub seed: u64,
    /// Threads for evaluation; results do not depend on it.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Ocdvae,
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            replay: ReplayConfig::default(),
            meta: MetaConfig::default(),
            intro: None,
            epochs_per_task: 20,
            batch_size: 128,
            denoise_sigma: 0.25,
            eval_samples: 100,
            dual_evt_filter: false,
            seed: 0,
            threads: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.replay.validate()?;
        self.meta.validate()?;
        if self.epochs_per_task == 0 || self.batch_size < 2 || self.eval_samples == 0 {
            return Err(Error::invalid(
                "epochs_per_task and eval_samples must be positive and batch_size at least 2",
            ));
        }
        if !(self.denoise_sigma >= 0.0) {
            return Err(Error::invalid("denoise_sigma must be non-negative"));
        }
        Ok(())
    }

    fn filtering(&self) -> bool {
        match self.mode {
            Mode::Ocdvae => true,
            Mode::Dual => self.dual_evt_filter,
            _ => false,
        }
    }
}

/// Replay bookkeeping for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayStats {
    pub task: usize,
    pub requested: usize,
    pub attempts: usize,
    pub acceptance_rate: f64,
    pub class_histogram: Vec<usize>,
}

#[derive(Clone, Debug)]
/// Progress notifications; task and epoch numbers are 1-based.
pub enum Event<'a> {
    TaskStart {
        task: usize,
        train_size: usize,
        replay_size: usize,
    },
    EpochEnd {
        task: usize,
        epoch: usize,
        mean_loss: f64,
    },
    Replay(&'a ReplayStats),
    MetaBuilt {
        task: usize,
        classes: usize,
    },
    MetaFailed {
        task: usize,
        error: String,
    },
    TaskEnd(&'a MetricsRecord),
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub records: Vec<MetricsRecord>,
    pub replay: Vec<ReplayStats>,
    /// The joint model (or the generator in dual mode) with its optimizer.
    pub trainer: Trainer,
    pub discriminator: Option<DiscriminatorTrainer>,
    pub meta: Option<MetaRecognitionModel>,
    /// Confusion matrix of the final evaluation.
    pub confusion: Vec<Vec<usize>>,
}

impl ExperimentResult {
    pub fn dual_model(&self) -> Option<DualModel> {
        self.discriminator.as_ref().map(|d| DualModel {
            generator: self.trainer.model.clone(),
            discriminator: d.net.clone(),
        })
    }
}

pub fn run_experiment(seq: &TaskSequence, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    run_experiment_with(seq, cfg, |_| {})
}

enum Learner {
    Joint(Trainer),
    Dual {
        generator: Trainer,
        discriminator: DiscriminatorTrainer,
    },
}

impl Learner {
    fn snapshot(&self) -> Snapshot {
        match self {
            Learner::Joint(t) => Snapshot::Joint(t.model.clone()),
            Learner::Dual {
                generator,
                discriminator,
            } => Snapshot::Dual(DualModel {
                generator: generator.model.clone(),
                discriminator: discriminator.net.clone(),
            }),
        }
    }
}

/// A frozen copy taken at a task boundary.
enum Snapshot {
    Joint(JointModel),
    Dual(DualModel),
}

impl Snapshot {
    fn predictor(&self) -> &(dyn Predictor + Sync) {
        match self {
            Snapshot::Joint(m) => m,
            Snapshot::Dual(m) => m,
        }
    }
}

fn build_meta(
    model: &(dyn Predictor + Sync),
    data: &LabeledDataset,
    cfg: &ExperimentConfig,
    task: usize,
) -> Result<MetaRecognitionModel> {
    let mu = encode_means(model, &data.images, cfg.threads)?;
    let predictions = model.class_logits(&data.images, &mu)?.argmax_rows();
    Ok(MetaRecognitionModel::build(&mu, &data.labels, &predictions, &cfg.meta)?.with_task(task))
}

/// Runs every task of `seq` under `cfg.mode`, reporting progress to
/// `on_event`.
pub fn run_experiment_with(
    seq: &TaskSequence,
    cfg: &ExperimentConfig,
    mut on_event: impl FnMut(&Event),
) -> Result<ExperimentResult> {
    cfg.validate()?;
    if seq.is_empty() {
        return Err(Error::invalid("empty task sequence"));
    }
    if seq.input_dim() != cfg.model.input_dim {
        return Err(Error::invalid(format!(
            "data has {} features but the model expects {}",
            seq.input_dim(),
            cfg.model.input_dim
        )));
    }
    let merged;
    let train_seq = if cfg.mode == Mode::Iso {
        merged = seq.merged()?;
        &merged
    } else {
        seq
    };
    let root = Rng::new(cfg.seed);
    let mut init_rng = root.derive(STREAM_INIT);
    let first_classes = train_seq.tasks[0].classes.len();
    let mut learner = if cfg.mode == Mode::Dual {
        let mut gen_cfg = cfg.model.clone();
        gen_cfg.class_weight = 0.0;
        let generator = JointModel::new(gen_cfg, seq.total_classes(), &mut init_rng)?;
        let disc = Discriminator::new(cfg.model.input_dim, &cfg.model.hidden, first_classes, &mut init_rng);
        Learner::Dual {
            generator: trainer_for(generator, cfg),
            discriminator: DiscriminatorTrainer::new(disc, cfg.adam),
        }
    } else {
        let model = JointModel::new(cfg.model.clone(), first_classes, &mut init_rng)?;
        Learner::Joint(trainer_for(model, cfg))
    };

    let mut records = Vec::new();
    let mut replay_stats = Vec::new();
    let mut meta: Option<MetaRecognitionModel> = None;
    let mut confusion = Vec::new();
    let mut seen_real = 0usize;

    for (t, task) in train_seq.tasks.iter().enumerate() {
        // Replay from the frozen model of the previous boundary, before the
        // classifier grows.
        let mut replay_set = None;
        if t > 0 && cfg.mode.uses_replay() {
            let frozen = learner.snapshot();
            let count = cfg.replay.replay_count.unwrap_or(seen_real);
            let replay_cfg = ReplayConfig {
                filtering: cfg.filtering(),
                ..cfg.replay.clone()
            };
            let set = generate_replay(
                frozen.predictor(),
                meta.as_ref(),
                &replay_cfg,
                count,
                &mut root.derive(STREAM_REPLAY).derive(t as u64),
            )?;
            let stats = ReplayStats {
                task: t + 1,
                requested: count,
                attempts: set.attempts,
                acceptance_rate: set.acceptance_rate,
                class_histogram: set.class_histogram.clone(),
            };
            on_event(&Event::Replay(&stats));
            replay_stats.push(stats);
            if !set.is_empty() {
                replay_set = Some(set.to_dataset("replay")?);
            }
        }

        let total_classes = train_seq.classes_through(t);
        let mut expand_rng = root.derive(STREAM_EXPAND).derive(t as u64);
        match &mut learner {
            Learner::Joint(tr) => tr.expand_classifier(total_classes, &mut expand_rng)?,
            Learner::Dual { discriminator, .. } => discriminator.expand(total_classes, &mut expand_rng)?,
        }

        let union;
        let real = if cfg.mode == Mode::Ub && t > 0 {
            let parts: Vec<&LabeledDataset> = train_seq.tasks[..=t].iter().map(|k| &k.train).collect();
            union = LabeledDataset::concat(&parts, "accumulated")?;
            &union
        } else {
            &task.train
        };
        on_event(&Event::TaskStart {
            task: t + 1,
            train_size: real.len(),
            replay_size: replay_set.as_ref().map_or(0, |r| r.len()),
        });

        let mut stream = MixedStream::new(real, replay_set.as_ref(), cfg.batch_size)?;
        let mut train_rng = root.derive(STREAM_TRAIN).derive(t as u64);
        for epoch in 0..cfg.epochs_per_task {
            stream.start_epoch(&mut train_rng);
            let mut loss_sum = 0.0;
            let mut steps = 0usize;
            while let Some((batch, weights)) = stream.next_batch(&mut train_rng) {
                let loss = match &mut learner {
                    Learner::Joint(tr) => {
                        tr.train_step_weighted(&batch, &weights, cfg.denoise_sigma, &mut train_rng)?
                            .total
                    }
                    Learner::Dual {
                        generator,
                        discriminator,
                    } => {
                        let g = generator.train_step_weighted(&batch, &weights, cfg.denoise_sigma, &mut train_rng)?;
                        g.total + discriminator.train_step_weighted(&batch, &weights)?
                    }
                };
                loss_sum += loss;
                steps += 1;
            }
            on_event(&Event::EpochEnd {
                task: t + 1,
                epoch: epoch + 1,
                mean_loss: loss_sum / steps.max(1) as f64,
            });
        }
        seen_real += task.train.len();

        let current = learner.snapshot();
        let training_set = match &replay_set {
            Some(r) => LabeledDataset::concat(&[real, r], "task")?,
            None => real.clone(),
        };
        match build_meta(current.predictor(), &training_set, cfg, t + 1) {
            Ok(m) => {
                on_event(&Event::MetaBuilt {
                    task: t + 1,
                    classes: m.num_classes(),
                });
                meta = Some(m);
            }
            Err(e) if cfg.filtering() => return Err(e),
            Err(e) => {
                on_event(&Event::MetaFailed {
                    task: t + 1,
                    error: e.to_string(),
                });
                meta = None;
            }
        }
        drop(training_set);

        // ISO trains once on everything and reports against the original
        // task structure.
        let (eval_seq, upto) = if cfg.mode == Mode::Iso {
            (seq, seq.len() - 1)
        } else {
            (seq, t)
        };
        let out = evaluate(
            current.predictor(),
            eval_seq,
            upto,
            cfg.eval_samples,
            &root.derive(STREAM_EVAL).derive(t as u64),
            cfg.threads,
        )?;
        on_event(&Event::TaskEnd(&out.record));
        records.push(out.record);
        confusion = out.confusion;
    }

    let (trainer, discriminator) = match learner {
        Learner::Joint(t) => (t, None),
        Learner::Dual {
            generator,
            discriminator,
        } => (generator, Some(discriminator)),
    };
    Ok(ExperimentResult {
        records,
        replay: replay_stats,
        trainer,
        discriminator,
        meta,
        confusion,
    })
}

fn trainer_for(model: JointModel, cfg: &ExperimentConfig) -> Trainer {
    let trainer = Trainer::new(model, cfg.adam);
    match cfg.intro {
        Some(intro) => trainer.with_intro(intro),
        None => trainer,
    }
}
