use std::path::Path;

use anyhow::Context;
use ocreplay::checkpoint::Checkpoint;
use ocreplay::continual::{openset_sweep, OpenSetReport};
use ocreplay::data::{LabeledDataset, Split};
use ocreplay::evt::MetaRecognitionModel;
use ocreplay::model::Predictor;
use ocreplay::numcore::Rng;

use crate::config::RunConfig;
use crate::data::{build_run_data, load_image_dir, resolve_dataset, RunData};
use crate::output::{omega_curve_csv, openset_csv, write_text};
use crate::CliError;

const STREAM_OPENSET: u64 = 17;

/// Known data is the union of all task test sets, calibrated on the union of
/// validation sets. Unknowns are held-out classes (`unseen`), the configured
/// `openset_unknown` datasets and `extra`.
pub fn sweep_run(
    cfg: &RunConfig,
    data: &RunData,
    model: &dyn Predictor,
    meta: Option<&MetaRecognitionModel>,
    extra: &[String],
) -> anyhow::Result<OpenSetReport> {
    let seq = &data.sequence;
    let tests: Vec<&LabeledDataset> = seq.tasks.iter().map(|t| &t.test).collect();
    let vals: Vec<&LabeledDataset> = seq.tasks.iter().filter_map(|t| t.val.as_ref()).collect();
    let known = LabeledDataset::concat(&tests, "known")?;
    let val = LabeledDataset::concat(&vals, "val")?;

    let mut unknown: Vec<(String, LabeledDataset)> = Vec::new();
    if let Some(u) = &data.unseen {
        unknown.push(("unseen".into(), u.clone()));
    }
    let root = cfg.data_root();
    for name in cfg.openset_unknown.iter().chain(extra) {
        let ds = load_image_dir(&resolve_dataset(&root, name), Split::Test)?;
        anyhow::ensure!(
            ds.dim() == known.dim(),
            "{name} has {} features, the model expects {}",
            ds.dim(),
            known.dim()
        );
        let label = Path::new(name)
            .file_name()
            .map_or(name.clone(), |n| n.to_string_lossy().into_owned());
        unknown.push((label, ds));
    }
    let refs: Vec<(&str, &ocreplay::numcore::Matrix)> = unknown.iter().map(|(n, d)| (n.as_str(), &d.images)).collect();
    let rng = Rng::new(cfg.seed).derive(STREAM_OPENSET);
    Ok(openset_sweep(
        model,
        meta,
        &val.images,
        ("known", &known.images),
        &refs,
        cfg.eval_samples,
        &rng,
    )?)
}

pub fn write_openset(dir: &Path, report: &OpenSetReport) -> anyhow::Result<()> {
    write_text(&dir.join("openset.csv"), &openset_csv(report))?;
    write_text(&dir.join("omega_curve.csv"), &omega_curve_csv(report))
}

/// Re-creates the run's data from its config, loads the checkpoint (and an
/// optional separate Weibull file) and writes the sweep into `output_dir`.
pub fn run_openset(
    config: &Path,
    checkpoint: &Path,
    meta: Option<&Path>,
    unknown: &[String],
    output_dir: &Path,
) -> Result<OpenSetReport, CliError> {
    let cfg = RunConfig::from_file(config)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let meta = match meta {
        Some(p) => Some(MetaRecognitionModel::load(p)?),
        None => ckpt.meta.clone(),
    };
    let data = build_run_data(&cfg)?;
    if data.sequence.class_map != ckpt.class_map {
        return Err(CliError::Usage(anyhow::anyhow!(
            "checkpoint classes {:?} do not match the config's {:?}",
            ckpt.class_map,
            data.sequence.class_map
        )));
    }
    let report = sweep_run(&cfg, &data, &*ckpt.predictor(), meta.as_ref(), unknown)?;
    std::fs::create_dir_all(output_dir).with_context(|| format!("creating {}", output_dir.display()))?;
    write_openset(output_dir, &report)?;
    Ok(report)
}

pub fn format_report(report: &OpenSetReport) -> String {
    let mut s = format!("{:<10}", "criterion");
    for d in &report.datasets {
        s.push_str(&format!(" {d:>12}"));
    }
    s.push('\n');
    for criterion in ["entropy", "recon", "evt"] {
        if report.row(criterion, "known").is_none() {
            continue;
        }
        s.push_str(&format!("{criterion:<10}"));
        for d in &report.datasets {
            let p = report.row(criterion, d).map_or(f64::NAN, |r| r.percent_flagged);
            s.push_str(&format!(" {p:>11.2}%"));
        }
        s.push('\n');
    }
    s
}
