use serde::{Deserialize, Serialize};

use super::joint::uniform_weights;
use super::{Batch, IntroConfig, JointModel, LossBreakdown};
use crate::error::{Error, Result};
use crate::numcore::{adam_step, AdamConfig, AdamState, Dense, Matrix, Rng};

/// Adam moments for a list of dense layers (weight and bias per layer).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerOptimizer {
    pub cfg: AdamConfig,
    pub states: Vec<(AdamState, AdamState)>,
}

impl LayerOptimizer {
    pub fn new<'a>(layers: impl Iterator<Item = &'a Dense>, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            states: layers
                .map(|l| (AdamState::for_param(&l.weight), AdamState::for_param(&l.bias)))
                .collect(),
        }
    }

    pub fn step(&mut self, names: &[String], layers: Vec<&mut Dense>, grads: &[Dense]) -> Result<()> {
        if layers.len() != self.states.len() || grads.len() != self.states.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} layers, got {} layers and {} gradients",
                self.states.len(),
                layers.len(),
                grads.len()
            )));
        }
        // Validate every gradient before touching any parameter.
        for (name, g) in names.iter().zip(grads) {
            g.weight.ensure_finite(&format!("gradient of {name}.weight"))?;
            g.bias.ensure_finite(&format!("gradient of {name}.bias"))?;
        }
        for (((layer, g), (sw, sb)), name) in layers.into_iter().zip(grads).zip(&mut self.states).zip(names) {
            adam_step(&mut layer.weight, &g.weight, sw, &self.cfg, &format!("{name}.weight"))?;
            adam_step(&mut layer.bias, &g.bias, sb, &self.cfg, &format!("{name}.bias"))?;
        }
        Ok(())
    }

    /// Appends `extra` zero-moment output columns to layer `index`.
    pub fn expand_columns(&mut self, index: usize, extra: usize) -> Result<()> {
        let (sw, sb) = self
            .states
            .get_mut(index)
            .ok_or_else(|| Error::invalid(format!("no optimizer state for layer {index}")))?;
        for s in [sw, sb] {
            let rows = s.first_moment.rows();
            s.first_moment = s.first_moment.hstack(&Matrix::zeros(rows, extra))?;
            s.second_moment = s.second_moment.hstack(&Matrix::zeros(rows, extra))?;
        }
        Ok(())
    }
}

/// A [`JointModel`] together with its optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub model: JointModel,
    pub optimizer: LayerOptimizer,
    pub intro: Option<IntroConfig>,
}

impl Trainer {
    pub fn new(model: JointModel, adam: AdamConfig) -> Self {
        let optimizer = LayerOptimizer::new(model.layers().into_iter(), adam);
        Self {
            model,
            optimizer,
            intro: None,
        }
    }

    pub fn with_intro(mut self, intro: IntroConfig) -> Self {
        self.intro = intro.enabled.then_some(intro);
        self
    }

    /// One Adam update on a uniformly weighted batch.
    pub fn train_step(&mut self, batch: &Batch, denoise_sigma: f64, rng: &mut Rng) -> Result<LossBreakdown> {
        let weights = uniform_weights(batch.len());
        self.train_step_weighted(batch, &weights, denoise_sigma, rng)
    }

    /// One Adam update with explicit per-sample weights (summing to one).
    ///
    /// The encoder sees `x + Normal(0, σ²)` (noise drawn first, skipped when
    /// σ = 0), then one reparameterization sample per row is drawn.
    pub fn train_step_weighted(
        &mut self,
        batch: &Batch,
        weights: &[f64],
        denoise_sigma: f64,
        rng: &mut Rng,
    ) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        let noise = (denoise_sigma > 0.0).then(|| {
            let mut n = rng.normal_matrix(batch.x.rows(), batch.x.cols());
            n.scale(denoise_sigma);
            n
        });
        let eps = rng.normal_matrix(batch.len(), self.model.latent_dim());
        let (loss, grads) = self
            .model
            .loss_and_grads(batch, weights, noise.as_ref(), &eps, self.intro.as_ref())?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite {
                name: "training loss".into(),
            });
        }
        let names = self.model.layer_names();
        self.optimizer.step(&names, self.model.layers_mut(), &grads)?;
        Ok(loss)
    }

    /// Expands the classifier and its optimizer moments.
    pub fn expand_classifier(&mut self, new_num_classes: usize, rng: &mut Rng) -> Result<()> {
        let extra = new_num_classes.saturating_sub(self.model.num_classes());
        self.model.expand_classifier(new_num_classes, rng)?;
        if extra > 0 {
            let idx = self.optimizer.states.len() - 1;
            self.optimizer.expand_columns(idx, extra)?;
        }
        Ok(())
    }
}
