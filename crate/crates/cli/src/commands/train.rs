use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use ocreplay::checkpoint::Checkpoint;
use ocreplay::continual::{run_experiment_with, Event, ExperimentResult};
use ocreplay::numcore::Rng;

use super::openset::{sweep_run, write_openset};
use crate::config::RunConfig;
use crate::data::build_run_data;
use crate::output::{confusion_csv, metrics_csv, replay_csv, write_text};
use crate::CliError;

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const WEIBULL_FILE: &str = "weibull.json";

pub fn log_event(e: &Event) {
    match e {
        Event::TaskStart {
            task,
            train_size,
            replay_size,
        } => {
            eprintln!("task {task}: {train_size} real, {replay_size} replay")
        }
        Event::EpochEnd { task, epoch, mean_loss } => {
            eprintln!("  task {task} epoch {epoch}: loss {mean_loss:.5}")
        }
        Event::Replay(s) => eprintln!(
            "  replay: {} samples from {} draws (acceptance {:.4})",
            s.requested, s.attempts, s.acceptance_rate
        ),
        Event::MetaBuilt { task, classes } => eprintln!("  weibull fit after task {task}: {classes} classes"),
        Event::MetaFailed { task, error } => eprintln!("  weibull fit after task {task} failed: {error}"),
        Event::TaskEnd(r) => eprintln!(
            "  after task {}: alpha_base {:.4} alpha_new {:.4} alpha_all {:.4}",
            r.task, r.alpha_base, r.alpha_new, r.alpha_all
        ),
    }
}

/// Trains, evaluates and writes every artifact into `cfg.output_dir`.
pub fn run_train(cfg: &RunConfig, verbose: bool) -> Result<ExperimentResult, CliError> {
    let started = Instant::now();
    let out = cfg.output_dir.as_path();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let json = serde_json::to_string_pretty(cfg).context("serializing config")?;
    write_text(&out.join(CONFIG_FILE), &(json + "\n"))?;

    let data = build_run_data(cfg)?;
    let exp = cfg.experiment(data.sequence.input_dim());
    let result = run_experiment_with(&data.sequence, &exp, |e| {
        if verbose {
            log_event(e)
        }
    })?;

    write_text(&out.join("metrics.csv"), &metrics_csv(&result.records))?;
    write_text(&out.join("replay.csv"), &replay_csv(&result.replay))?;
    write_text(
        &out.join("confusion.csv"),
        &confusion_csv(&result.confusion, &data.sequence.class_map),
    )?;
    if let Some(meta) = &result.meta {
        meta.save(&out.join(WEIBULL_FILE))?;
    }
    let ckpt = Checkpoint::from_result(
        cfg.mode,
        data.sequence.class_map.clone(),
        &result,
        Rng::new(cfg.seed).state(),
    );
    ckpt.save(&out.join(CHECKPOINT_FILE))?;

    let report = sweep_run(cfg, &data, &*ckpt.predictor(), result.meta.as_ref(), &[])?;
    write_openset(out, &report)?;
    if verbose {
        eprintln!("wrote {} in {:.1} s", out.display(), started.elapsed().as_secs_f64());
    }
    Ok(result)
}

pub fn run_dir_config(dir: &Path) -> Result<RunConfig, CliError> {
    RunConfig::from_file(&dir.join(CONFIG_FILE))
}
