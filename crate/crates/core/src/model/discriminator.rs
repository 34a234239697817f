//! Stand-alone discriminative network for the dual-model baseline.

use serde::{Deserialize, Serialize};

use super::joint::uniform_weights;
use super::mlp::Trunk;
use super::{Batch, LayerOptimizer};
use crate::error::{Error, Result};
use crate::numcore::{he_normal_init, log_softmax_rows, softmax_rows, AdamConfig, Dense, Matrix, Rng};

/// ReLU MLP on raw input followed by a linear output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    trunk: Trunk,
    head: Dense,
    input_dim: usize,
}

impl Discriminator {
    pub fn new(input_dim: usize, hidden: &[usize], num_classes: usize, rng: &mut Rng) -> Self {
        let trunk = Trunk::new(input_dim, hidden, rng);
        let h = trunk.output_dim(input_dim);
        Self {
            head: Dense::he_normal(h, num_classes, rng),
            trunk,
            input_dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.output_dim()
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "discriminator",
                left: x.shape(),
                right: (x.rows(), self.input_dim),
            });
        }
        self.head.forward(&self.trunk.forward(x)?)
    }

    pub fn probabilities(&self, x: &Matrix) -> Result<Matrix> {
        Ok(softmax_rows(&self.logits(x)?))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.trunk.layers.len())
            .map(|i| format!("discriminator.{i}"))
            .collect();
        names.push("discriminator.out".into());
        names
    }

    fn layers_mut(&mut self) -> Vec<&mut Dense> {
        let mut out: Vec<&mut Dense> = self.trunk.layers.iter_mut().collect();
        out.push(&mut self.head);
        out
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.layers.iter().chain(std::iter::once(&self.head))
    }

    /// Weighted mean cross-entropy and its gradients.
    pub fn loss_and_grads(&self, batch: &Batch, weights: &[f64]) -> Result<(f64, Vec<Dense>)> {
        if let Some(&label) = batch.y.iter().find(|&&l| l >= self.num_classes()) {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: self.num_classes(),
            });
        }
        let cache = self.trunk.forward_cached(batch.x.clone())?;
        let logits = self.head.forward(cache.output())?;
        let log_probs = log_softmax_rows(&logits);
        let mut loss = 0.0;
        let mut g = softmax_rows(&logits);
        for (n, &w) in weights.iter().enumerate() {
            loss -= w * log_probs.get(n, batch.y[n]);
            let row = g.row_mut(n);
            row[batch.y[n]] -= 1.0;
            for v in row.iter_mut() {
                *v *= w;
            }
        }
        let (g_h, g_head) = self.head.backward(cache.output(), &g, true)?;
        let (_, mut grads) = self.trunk.backward(&cache, g_h.unwrap(), false)?;
        grads.push(g_head);
        Ok((loss, grads))
    }

    pub fn expand(&mut self, new_num_classes: usize, rng: &mut Rng) -> Result<()> {
        let old = self.num_classes();
        if new_num_classes < old {
            return Err(Error::invalid(format!(
                "cannot shrink discriminator from {old} to {new_num_classes} classes"
            )));
        }
        let extra = new_num_classes - old;
        if extra == 0 {
            return Ok(());
        }
        let fan_in = self.head.input_dim();
        self.head.weight = self.head.weight.hstack(&he_normal_init(fan_in, extra, fan_in, rng))?;
        self.head.bias = self.head.bias.hstack(&Matrix::zeros(1, extra))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorTrainer {
    pub net: Discriminator,
    pub optimizer: LayerOptimizer,
}

impl DiscriminatorTrainer {
    pub fn new(net: Discriminator, adam: AdamConfig) -> Self {
        let optimizer = LayerOptimizer::new(net.layers(), adam);
        Self { net, optimizer }
    }

    pub fn train_step(&mut self, batch: &Batch) -> Result<f64> {
        self.train_step_weighted(batch, &uniform_weights(batch.len()))
    }

    pub fn train_step_weighted(&mut self, batch: &Batch, weights: &[f64]) -> Result<f64> {
        let (loss, grads) = self.net.loss_and_grads(batch, weights)?;
        let names = self.net.layer_names();
        self.optimizer.step(&names, self.net.layers_mut(), &grads)?;
        Ok(loss)
    }

    pub fn expand(&mut self, new_num_classes: usize, rng: &mut Rng) -> Result<()> {
        let extra = new_num_classes.saturating_sub(self.net.num_classes());
        self.net.expand(new_num_classes, rng)?;
        if extra > 0 {
            let idx = self.optimizer.states.len() - 1;
            self.optimizer.expand_columns(idx, extra)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check;

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(11);
        let net = Discriminator::new(5, &[7, 6], 3, &mut rng);
        let x = rng.normal_matrix(4, 5);
        let batch = Batch::new(x, vec![0, 2, 1, 2]).unwrap();
        let weights = uniform_weights(4);
        let flat: Vec<f64> = super::super::joint::flatten_layers(net.layers());
        let err = grad_check(
            |p| {
                let mut n = net.clone();
                let mut offset = 0;
                for layer in n.layers_mut() {
                    for m in [&mut layer.weight, &mut layer.bias] {
                        let len = m.len();
                        m.as_mut_slice().copy_from_slice(&p[offset..offset + len]);
                        offset += len;
                    }
                }
                let (l, g) = n.loss_and_grads(&batch, &weights).unwrap();
                (l, super::super::joint::flatten_layers(g.iter()))
            },
            &flat,
            1e-5,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn expand_keeps_old_outputs() {
        let mut rng = Rng::new(2);
        let mut net = Discriminator::new(4, &[5], 2, &mut rng);
        let x = rng.normal_matrix(3, 4);
        let before = net.logits(&x).unwrap();
        net.expand(4, &mut rng).unwrap();
        let after = net.logits(&x).unwrap();
        for r in 0..3 {
            assert_eq!(&after.row(r)[..2], before.row(r));
        }
        assert!(net.expand(3, &mut rng).is_err());
    }
}
