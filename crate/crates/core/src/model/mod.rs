//! The joint variational model: a shared probabilistic encoder, a Bernoulli
//! pixel decoder and a linear classifier on the latent code, trained with
//!
//! ```text
//! total = recon / pixels + class_weight · CE + β · KL / latent_dim
//! ```
//!
//! where every term is a (weighted) mean over the batch.

mod discriminator;
pub mod gradcheck;
mod joint;
mod mlp;
mod trainer;

use serde::{Deserialize, Serialize};

pub use discriminator::{Discriminator, DiscriminatorTrainer};
pub use joint::{kl_per_dim, recon_per_pixel, reparameterize_with, JointModel};
pub use mlp::{Trunk, TrunkCache};
pub use trainer::{LayerOptimizer, Trainer};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Hidden widths of both the encoder and decoder trunks.
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub beta: f64,
    /// Weight on the classification term; 0 turns the model into a plain VAE.
    pub class_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 784,
            hidden: vec![400, 400],
            latent_dim: 60,
            beta: 0.1,
            class_weight: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 {
            return Err(Error::invalid("input_dim and latent_dim must be positive"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        if !(self.beta >= 0.0) || !(self.class_weight >= 0.0) {
            return Err(Error::invalid("beta and class_weight must be non-negative"));
        }
        Ok(())
    }
}

/// Images in `[0,1]` with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn new(x: Matrix, y: Vec<usize>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::invalid(format!(
                "batch has {} images but {} labels",
                x.rows(),
                y.len()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Per-term losses. `recon` is nats per pixel, `kl` nats per latent dimension,
/// `class_loss` mean cross-entropy in nats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub class_loss: f64,
    pub total: f64,
    pub intro: Option<IntroLosses>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntroConfig {
    pub enabled: bool,
    /// Hinge margin in nats per latent dimension.
    pub margin: f64,
}

impl Default for IntroConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            margin: 1.0,
        }
    }
}

impl IntroConfig {
    pub fn enabled(margin: f64) -> Result<Self> {
        if !(margin >= 0.0) {
            return Err(Error::invalid(format!("intro margin must be >= 0, got {margin}")));
        }
        Ok(Self { enabled: true, margin })
    }
}

/// Introspection terms in the sign convention of the bound being maximized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntroLosses {
    pub kl_fake: f64,
    pub encoder_extra: f64,
    pub decoder_extra: f64,
}

impl IntroLosses {
    pub fn from_kl(kl_fake: f64, beta: f64, margin: f64) -> Self {
        Self {
            kl_fake,
            encoder_extra: -beta * (margin - kl_fake).max(0.0),
            decoder_extra: -beta * kl_fake,
        }
    }
}

/// Read-only view shared by the joint model and the dual baseline: a latent
/// posterior, a pixel decoder and class scores.
pub trait Predictor {
    fn input_dim(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Posterior mean and log-variance.
    fn encode(&self, x: &Matrix) -> Result<(Matrix, Matrix)>;
    fn decode_logits(&self, z: &Matrix) -> Result<Matrix>;
    /// Class logits for inputs `x` with latent draws `z` (one row each).
    fn class_logits(&self, x: &Matrix, z: &Matrix) -> Result<Matrix>;
}

impl Predictor for JointModel {
    fn input_dim(&self) -> usize {
        JointModel::input_dim(self)
    }

    fn latent_dim(&self) -> usize {
        JointModel::latent_dim(self)
    }

    fn num_classes(&self) -> usize {
        JointModel::num_classes(self)
    }

    fn encode(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        JointModel::encode(self, x)
    }

    fn decode_logits(&self, z: &Matrix) -> Result<Matrix> {
        JointModel::decode_logits(self, z)
    }

    fn class_logits(&self, _x: &Matrix, z: &Matrix) -> Result<Matrix> {
        self.classify(z)
    }
}

#[cfg(test)]
mod tests;
