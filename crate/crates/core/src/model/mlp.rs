use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numcore::{relu_backward, Dense, Matrix, Rng};

/// A stack of dense layers, each followed by ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trunk {
    pub layers: Vec<Dense>,
}

/// Activations kept for the backward pass; `activations[0]` is the input and
/// `activations[k + 1]` the ReLU output of layer `k`.
#[derive(Clone, Debug)]
pub struct TrunkCache {
    pub activations: Vec<Matrix>,
}

impl TrunkCache {
    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("cache holds at least the input")
    }
}

impl Trunk {
    pub fn new(input: usize, widths: &[usize], rng: &mut Rng) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = input;
        for &w in widths {
            layers.push(Dense::he_normal(prev, w, rng));
            prev = w;
        }
        Self { layers }
    }

    pub fn output_dim(&self, input: usize) -> usize {
        self.layers.last().map_or(input, Dense::output_dim)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?;
            h.map_inplace(|v| v.max(0.0));
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: Matrix) -> Result<TrunkCache> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x);
        for layer in &self.layers {
            let mut h = layer.forward(activations.last().unwrap())?;
            h.map_inplace(|v| v.max(0.0));
            activations.push(h);
        }
        Ok(TrunkCache { activations })
    }

    /// Returns the input gradient (if requested) and per-layer gradients.
    pub fn backward(
        &self,
        cache: &TrunkCache,
        grad_out: Matrix,
        need_input_grad: bool,
    ) -> Result<(Option<Matrix>, Vec<Dense>)> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut grad = Some(grad_out);
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let g_pre = relu_backward(grad.as_ref().unwrap(), &cache.activations[k + 1])?;
            let want_input = k > 0 || need_input_grad;
            let (g_in, g_layer) = layer.backward(&cache.activations[k], &g_pre, want_input)?;
            grads.push(g_layer);
            grad = g_in;
        }
        grads.reverse();
        Ok((grad, grads))
    }
}
