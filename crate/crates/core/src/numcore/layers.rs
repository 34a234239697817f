//! Dense layers, activations and weight initialization.

use serde::{Deserialize, Serialize};

use super::{Matrix, Rng};
use crate::error::{Error, Result};

/// `y = x·W + b` with `W: in×out` and `b: 1×out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    pub fn he_normal(input: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            weight: he_normal_init(input, output, input, rng),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        dense_forward(x, &self.weight, self.bias.as_slice())
    }

    /// Gradients for this layer, given its input and the upstream gradient.
    /// `grad_x` is skipped when `need_input_grad` is false.
    pub fn backward(&self, x: &Matrix, grad_y: &Matrix, need_input_grad: bool) -> Result<(Option<Matrix>, Dense)> {
        let grad_w = x.matmul_tn(grad_y)?;
        let grad_b = Matrix::row_vector(&grad_y.column_sums());
        let grad_x = if need_input_grad {
            Some(grad_y.matmul_nt(&self.weight)?)
        } else {
            None
        };
        Ok((
            grad_x,
            Dense {
                weight: grad_w,
                bias: grad_b,
            },
        ))
    }
}

pub fn dense_forward(x: &Matrix, weight: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if x.cols() != weight.rows() {
        return Err(Error::ShapeMismatch {
            op: "dense_forward",
            left: x.shape(),
            right: weight.shape(),
        });
    }
    let mut y = x.matmul(weight)?;
    y.add_row_broadcast(bias)?;
    Ok(y)
}

/// Returns `(grad_x, grad_W, grad_b)`.
pub fn dense_backward(x: &Matrix, weight: &Matrix, grad_y: &Matrix) -> Result<(Matrix, Matrix, Vec<f64>)> {
    if x.cols() != weight.rows() || grad_y.cols() != weight.cols() || grad_y.rows() != x.rows() {
        return Err(Error::ShapeMismatch {
            op: "dense_backward",
            left: x.shape(),
            right: grad_y.shape(),
        });
    }
    let grad_w = x.matmul_tn(grad_y)?;
    let grad_x = grad_y.matmul_nt(weight)?;
    Ok((grad_x, grad_w, grad_y.column_sums()))
}

/// Entries drawn from `Normal(0, 2 / fan_in)`.
pub fn he_normal_init(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Matrix {
    assert!(fan_in > 0, "he_normal_init needs fan_in > 0");
    let std = (2.0 / fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| std * rng.normal())
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// Backward through ReLU given its output.
pub fn relu_backward(grad: &Matrix, output: &Matrix) -> Result<Matrix> {
    grad.zip_map(output, |g, y| if y > 0.0 { g } else { 0.0 })
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Matrix) -> Matrix {
    x.map(sigmoid_scalar)
}

/// Backward through sigmoid given its output.
pub fn sigmoid_backward(grad: &Matrix, output: &Matrix) -> Result<Matrix> {
    grad.zip_map(output, |g, s| g * s * (1.0 - s))
}

/// Row-wise `log(softmax)` with max subtraction.
pub fn log_softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Backward through row softmax given its output: `s ⊙ (g − ⟨g, s⟩)`.
pub fn softmax_backward(grad: &Matrix, output: &Matrix) -> Result<Matrix> {
    let mut out = grad.zip_map(output, |g, s| g * s)?;
    for r in 0..out.rows() {
        let dot: f64 = out.row(r).iter().sum();
        let s = output.row(r).to_vec();
        for (v, s) in out.row_mut(r).iter_mut().zip(s) {
            *v -= s * dot;
        }
    }
    Ok(out)
}

/// Numerically stable binary cross-entropy between a target in `[0,1]` and
/// `sigmoid(logit)`.
#[inline]
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// Binary cross-entropy against a probability, clamped away from 0 and 1.
#[inline]
pub fn bce_with_prob(prob: f64, target: f64) -> f64 {
    let p = prob.clamp(1e-12, 1.0 - 1e-12);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}
