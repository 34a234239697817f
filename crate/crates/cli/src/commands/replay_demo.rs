use std::path::Path;

use anyhow::Context;
use ocreplay::checkpoint::Checkpoint;
use ocreplay::evt::MetaRecognitionModel;
use ocreplay::numcore::Rng;
use ocreplay::replay::{dump_generated, generate_replay, GeneratedSet, ReplayConfig};

use crate::CliError;

pub struct DemoArgs<'a> {
    pub checkpoint: &'a Path,
    pub meta: Option<&'a Path>,
    pub n: usize,
    pub omega: f64,
    pub filter: bool,
    pub max_attempts_factor: usize,
    pub seed: u64,
    pub output_dir: &'a Path,
}

/// Square images when the width is a perfect square, otherwise one row.
pub fn image_shape(pixels: usize) -> (usize, usize) {
    let side = (pixels as f64).sqrt().round() as usize;
    if side * side == pixels {
        (side, side)
    } else {
        (1, pixels)
    }
}

pub fn run(args: &DemoArgs) -> Result<GeneratedSet, CliError> {
    let ckpt = Checkpoint::load(args.checkpoint)?;
    let meta = match args.meta {
        Some(p) => Some(MetaRecognitionModel::load(p)?),
        None => ckpt.meta.clone(),
    };
    if args.filter && meta.is_none() {
        return Err(CliError::Usage(anyhow::anyhow!(
            "filtered replay needs a Weibull model; pass --meta or --no-filter"
        )));
    }
    let cfg = ReplayConfig {
        omega: args.omega,
        replay_count: Some(args.n),
        max_attempts_factor: args.max_attempts_factor,
        filtering: args.filter,
        ..ReplayConfig::default()
    };
    cfg.validate().map_err(|e| CliError::Usage(e.into()))?;
    let model = ckpt.predictor();
    let set = generate_replay(&*model, meta.as_ref(), &cfg, args.n, &mut Rng::new(args.seed))?;
    let (h, w) = image_shape(set.x.cols());
    std::fs::create_dir_all(args.output_dir).with_context(|| format!("creating {}", args.output_dir.display()))?;
    dump_generated(&set, args.output_dir, h, w, args.n)?;
    Ok(set)
}
