//! Dense building blocks shared by the encoder and the regression heads.

use crate::rng::{self, Rng};
use crate::tensor::{dot, Params, Tensor};

/// Affine map `y = W x + b` with `W` stored as `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[n_out, n_in]),
            bias: Tensor::zeros(&[n_out]),
        }
    }

    /// Weights ~ Normal(0, 1/n_in), biases zero.
    pub fn init(n_in: usize, n_out: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (n_in as f64).sqrt();
        let mut l = Linear::zeros(n_in, n_out);
        for w in l.weight.data_mut() {
            *w = rng::normal(rng, std);
        }
        l
    }

    pub fn n_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn n_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n_in());
        (0..self.n_out())
            .map(|o| dot(self.weight.row(o), x) + self.bias.data()[o])
            .collect()
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grads: &mut Linear) -> Vec<f64> {
        let mut dx = vec![0.0; self.n_in()];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.bias.data_mut()[o] += g;
            let gw = grads.weight.row_mut(o);
            for (gwi, xi) in gw.iter_mut().zip(x) {
                *gwi += g * xi;
            }
            for (dxi, wi) in dx.iter_mut().zip(self.weight.row(o)) {
                *dxi += g * wi;
            }
        }
        dx
    }

    /// Row-wise forward over an `[L, in]` matrix.
    pub fn forward_rows(&self, x: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(&[x.rows(), self.n_out()]);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&self.forward(x.row(r)));
        }
        out
    }

    pub fn backward_rows(&self, x: &Tensor, dy: &Tensor, grads: &mut Linear) -> Tensor {
        let mut dx = Tensor::zeros(&[x.rows(), self.n_in()]);
        for r in 0..x.rows() {
            let g = self.backward(x.row(r), dy.row(r), grads);
            dx.row_mut(r).copy_from_slice(&g);
        }
        dx
    }
}

impl Params for Linear {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

/// Per-row statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        LayerNorm {
            gain: Tensor::filled(&[width], 1.0),
            bias: Tensor::zeros(&[width]),
        }
    }

    pub fn forward_rows(&self, x: &Tensor) -> (Tensor, LayerNormCache) {
        let (rows, width) = (x.rows(), x.cols());
        let mut out = Tensor::zeros(&[rows, width]);
        let mut normalized = Tensor::zeros(&[rows, width]);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(istd);
            let nrow = normalized.row_mut(r);
            for (n, v) in nrow.iter_mut().zip(row) {
                *n = (v - mean) * istd;
            }
            let orow = out.row_mut(r);
            for i in 0..width {
                orow[i] = normalized.row(r)[i] * self.gain.data()[i] + self.bias.data()[i];
            }
        }
        (
            out,
            LayerNormCache {
                normalized,
                inv_std,
            },
        )
    }

    pub fn backward_rows(
        &self,
        cache: &LayerNormCache,
        dy: &Tensor,
        grads: &mut LayerNorm,
    ) -> Tensor {
        let (rows, width) = (dy.rows(), dy.cols());
        let n = width as f64;
        let mut dx = Tensor::zeros(&[rows, width]);
        for r in 0..rows {
            let xhat = cache.normalized.row(r);
            let g = dy.row(r);
            let mut dxhat = vec![0.0; width];
            for i in 0..width {
                grads.gain.data_mut()[i] += g[i] * xhat[i];
                grads.bias.data_mut()[i] += g[i];
                dxhat[i] = g[i] * self.gain.data()[i];
            }
            let mean_d = dxhat.iter().sum::<f64>() / n;
            let mean_dx = dot(&dxhat, xhat) / n;
            let istd = cache.inv_std[r];
            let out = dx.row_mut(r);
            for i in 0..width {
                out[i] = istd * (dxhat[i] - mean_d - xhat[i] * mean_dx);
            }
        }
        dx
    }
}

impl Params for LayerNorm {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("gain".into(), &self.gain), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("gain".into(), &mut self.gain),
            ("bias".into(), &mut self.bias),
        ]
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `elu(x) + 1`, strictly positive.
pub fn elu_plus_one(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

pub fn elu_plus_one_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}
