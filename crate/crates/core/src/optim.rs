//! AdamW with decoupled weight decay.

use crate::tensor::{Params, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments mirroring a parameter list, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new<P: Params>(params: &P) -> Self {
        let zeros: Vec<Tensor> = params
            .params()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

impl AdamW {
    /// One update:
    ///
    /// ```text
    /// m <- b1 m + (1 - b1) g        v <- b2 v + (1 - b2) g^2
    /// p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
    /// ```
    ///
    /// with bias-corrected `m_hat`, `v_hat`. Nothing is modified if any
    /// gradient is non-finite; the error names the parameter.
    pub fn step<P: Params>(&self, params: &mut P, grads: &P, state: &mut AdamState) -> Result<()> {
        let grads = grads.params();
        for (name, g) in &grads {
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}`[{i}]")));
            }
        }
        state.t += 1;
        let t = state.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, ((_, p), (_, g))) in params.params_mut().into_iter().zip(&grads).enumerate() {
            let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
            for (i, (pi, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *pi -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *pi);
            }
        }
        Ok(())
    }
}
