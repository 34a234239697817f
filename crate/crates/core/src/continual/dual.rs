use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Discriminator, JointModel, Predictor};
use crate::numcore::Matrix;

/// An unsupervised variational model paired with a separate classifier on
/// raw inputs. The two share no parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualModel {
    pub generator: JointModel,
    pub discriminator: Discriminator,
}

impl Predictor for DualModel {
    fn input_dim(&self) -> usize {
        self.generator.input_dim()
    }

    fn latent_dim(&self) -> usize {
        self.generator.latent_dim()
    }

    fn num_classes(&self) -> usize {
        self.discriminator.num_classes()
    }

    fn encode(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        self.generator.encode(x)
    }

    fn decode_logits(&self, z: &Matrix) -> Result<Matrix> {
        self.generator.decode_logits(z)
    }

    fn class_logits(&self, x: &Matrix, _z: &Matrix) -> Result<Matrix> {
        self.discriminator.logits(x)
    }
}
