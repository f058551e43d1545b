use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis, Zip};

use super::ParamTensor;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// `y = x W^T + b` with `W` stored `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamTensor,
    pub bias: ParamTensor,
}

impl Linear {
    pub fn zeros(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: ParamTensor::filled(format!("{prefix}.weight"), vec![out_dim, in_dim], 0.0),
            bias: ParamTensor::filled(format!("{prefix}.bias"), vec![out_dim], 0.0),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape[0]
    }

    /// Kaiming-uniform with `a = sqrt(5)`, i.e. `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for weights and biases alike. Weights are drawn row-major, then biases.
    pub fn init_uniform(&mut self, rng: &mut Rng) {
        let bound = 1.0 / (self.in_dim() as f64).sqrt();
        for v in self.weight.values.iter_mut().chain(self.bias.values.iter_mut()) {
            *v = bound * (2.0 * rng::unit_f64(rng) - 1.0);
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.mat().t());
        y += &self.bias.vec();
        y
    }

    /// Accumulates `dW += dy^T x`, `db += sum_rows(dy)`.
    pub fn accumulate_grads(&mut self, x: &Array2<f64>, dy: &Array2<f64>) {
        general_mat_mul(1.0, &dy.t(), x, 1.0, &mut self.weight.grad_mat_mut());
        let db = dy.sum_axis(Axis(0));
        self.bias.grad_vec_mut().zip_mut_with(&db, |g, d| *g += d);
    }

    pub fn input_grad(&self, dy: &Array2<f64>) -> Array2<f64> {
        dy.dot(&self.weight.mat())
    }

    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        self.accumulate_grads(x, dy);
        self.input_grad(dy)
    }
}

/// Per-feature batch normalisation over the batch axis.
///
/// Train mode normalises with the biased batch variance and updates the
/// running statistics with `momentum` (the running variance uses the
/// unbiased estimate). Eval mode uses the running statistics and never
/// mutates state.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm1d {
    pub weight: ParamTensor,
    pub bias: ParamTensor,
    pub running_mean: ParamTensor,
    pub running_var: ParamTensor,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub(crate) xhat: Array2<f64>,
    pub(crate) inv_std: Array1<f64>,
    pub(crate) train: bool,
}

impl BatchNorm1d {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            weight: ParamTensor::filled(format!("{prefix}.weight"), vec![dim], 1.0),
            bias: ParamTensor::filled(format!("{prefix}.bias"), vec![dim], 0.0),
            running_mean: ParamTensor::filled(format!("{prefix}.running_mean"), vec![dim], 0.0),
            running_var: ParamTensor::filled(format!("{prefix}.running_var"), vec![dim], 1.0),
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.len()
    }

    pub fn forward_train(&mut self, x: &Array2<f64>) -> Result<(Array2<f64>, BnCache)> {
        let n = x.nrows();
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty batch");
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = &centered * &inv_std;

        let m = self.momentum;
        let unbias = n as f64 / (n as f64 - 1.0);
        for (r, b) in self.running_mean.values.iter_mut().zip(mean.iter()) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.values.iter_mut().zip(var.iter()) {
            *r = (1.0 - m) * *r + m * b * unbias;
        }

        let y = self.affine(&xhat);
        Ok((
            y,
            BnCache {
                xhat,
                inv_std,
                train: true,
            },
        ))
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> (Array2<f64>, BnCache) {
        let inv_std = self.running_var.vec().mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = (x - &self.running_mean.vec()) * &inv_std;
        let y = self.affine(&xhat);
        (
            y,
            BnCache {
                xhat,
                inv_std,
                train: false,
            },
        )
    }

    fn affine(&self, xhat: &Array2<f64>) -> Array2<f64> {
        xhat * &self.weight.vec() + &self.bias.vec()
    }

    pub fn accumulate_grads(&mut self, cache: &BnCache, dy: &Array2<f64>) {
        let dgamma = (dy * &cache.xhat).sum_axis(Axis(0));
        let dbeta = dy.sum_axis(Axis(0));
        self.weight.grad_vec_mut().zip_mut_with(&dgamma, |g, d| *g += d);
        self.bias.grad_vec_mut().zip_mut_with(&dbeta, |g, d| *g += d);
    }

    /// Input gradient; in train mode this includes the coupling through the
    /// batch mean and variance.
    pub fn input_grad(&self, cache: &BnCache, dy: &Array2<f64>) -> Array2<f64> {
        let dxhat = dy * &self.weight.vec();
        if !cache.train {
            return dxhat * &cache.inv_std;
        }
        let n = dy.nrows() as f64;
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
        let mut dx = dxhat * n - &sum_dxhat - &(&cache.xhat * &sum_dxhat_xhat);
        dx *= &(&cache.inv_std / n);
        dx
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Array2<f64>) -> Array2<f64> {
        self.accumulate_grads(cache, dy);
        self.input_grad(cache, dy)
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient of ReLU given its input: passes where the input was positive.
pub fn relu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(pre).for_each(|d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Inverted-dropout mask: each entry is `0` with probability `p`, otherwise
/// `1 / (1 - p)`. Entries are drawn row-major.
pub fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Array2<f64> {
    if p == 0.0 {
        return Array2::ones((rows, cols));
    }
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn((rows, cols), || {
        if rng::unit_f64(rng) < p {
            0.0
        } else {
            keep
        }
    })
}
