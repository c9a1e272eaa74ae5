//! Rotary position encoding and linear attention for one head.
//!
//! With `phi(u) = elu(u) + 1` applied elementwise and `R_m` the rotary
//! rotation for position `m`, output row `m` is
//!
//! ```text
//! sum_n <phi(R_m q_m), phi(R_n k_n)> v_n  /  sum_n <phi(R_m q_m), phi(R_n k_n)>
//! ```
//!
//! where `n` ranges over unmasked positions. [`linear_attention`] folds the
//! keys into a `d x d` key-value sum and a `d` key sum first, so the cost
//! is `O(L d^2)`; [`attention_bruteforce`] materializes the `L x L` kernel.

use crate::nn::{elu_plus_one, elu_plus_one_grad};
use crate::tensor::{dot, Tensor};
use crate::{Error, Result};

/// Base of the rotary frequency ladder.
pub const ROTARY_BASE: f64 = 10_000.0;

/// Query, key and value rows of one attention head, each `[L, d]`.
#[derive(Clone, Debug)]
pub struct AttentionInputs {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

impl AttentionInputs {
    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.rows() == 0
    }

    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }
}

fn rotate_into(x: &[f64], m: usize, inverse: bool, out: &mut [f64]) {
    let d = x.len();
    for j in 0..d / 2 {
        let theta = ROTARY_BASE.powf(-2.0 * j as f64 / d as f64);
        let (sin, cos) = (m as f64 * theta).sin_cos();
        let sin = if inverse { -sin } else { sin };
        let (a, b) = (x[2 * j], x[2 * j + 1]);
        out[2 * j] = a * cos - b * sin;
        out[2 * j + 1] = a * sin + b * cos;
    }
}

/// Rotates each pair `(x[2j], x[2j+1])` by `m * 10000^(-2j/d)`.
pub fn rotary_rotate(x: &[f64], m: usize) -> Result<Vec<f64>> {
    if !x.len().is_multiple_of(2) {
        return Err(Error::Dimension(format!(
            "rotary needs an even width, got {}",
            x.len()
        )));
    }
    let mut out = vec![0.0; x.len()];
    rotate_into(x, m, false, &mut out);
    Ok(out)
}

/// `phi(R_m x_m)` for every row, plus the rotated pre-activations.
fn features(x: &Tensor) -> (Tensor, Tensor) {
    let mut rotated = Tensor::zeros(x.shape());
    for m in 0..x.rows() {
        rotate_into(x.row(m), m, false, rotated.row_mut(m));
    }
    let mut feat = rotated.clone();
    for v in feat.data_mut() {
        *v = elu_plus_one(*v);
    }
    (feat, rotated)
}

/// Intermediate values kept for [`linear_attention_backward`].
#[derive(Clone, Debug)]
pub(crate) struct AttentionCache {
    q_rot: Tensor,
    k_rot: Tensor,
    q_feat: Tensor,
    k_feat: Tensor,
    /// `sum_n phi_k(n) v_n^T`, `[d, d]`
    kv: Tensor,
    /// `sum_n phi_k(n)`
    ksum: Vec<f64>,
    den: Vec<f64>,
    out: Tensor,
}

fn check(inp: &AttentionInputs, mask: &[bool]) {
    assert_eq!(
        inp.k.shape(),
        inp.q.shape(),
        "key shape differs from query shape"
    );
    assert_eq!(
        inp.v.rows(),
        inp.q.rows(),
        "value count differs from query count"
    );
    assert_eq!(
        mask.len(),
        inp.q.rows(),
        "mask length differs from sequence length"
    );
    assert!(
        inp.head_dim().is_multiple_of(2),
        "rotary needs an even head width"
    );
}

pub(crate) fn linear_attention_cached(
    inp: &AttentionInputs,
    mask: &[bool],
) -> (Tensor, AttentionCache) {
    check(inp, mask);
    let (l, d, dv) = (inp.len(), inp.head_dim(), inp.v.cols());
    let (q_feat, q_rot) = features(&inp.q);
    let (k_feat, k_rot) = features(&inp.k);

    let mut kv = Tensor::zeros(&[d, dv]);
    let mut ksum = vec![0.0; d];
    for n in (0..l).filter(|&n| mask[n]) {
        let (kf, v) = (k_feat.row(n), inp.v.row(n));
        for i in 0..d {
            ksum[i] += kf[i];
            let row = kv.row_mut(i);
            for (r, vj) in row.iter_mut().zip(v) {
                *r += kf[i] * vj;
            }
        }
    }

    let mut out = Tensor::zeros(&[l, dv]);
    let mut den = vec![0.0; l];
    for m in 0..l {
        let qf = q_feat.row(m);
        den[m] = dot(qf, &ksum);
        // NaN from diverged weights passes through to the loss check.
        assert!(
            den[m] > 0.0 || den[m].is_nan(),
            "attention normalizer is zero: no unmasked keys"
        );
        let o = out.row_mut(m);
        for i in 0..d {
            for (oj, kvij) in o.iter_mut().zip(kv.row(i)) {
                *oj += qf[i] * kvij;
            }
        }
        for oj in o.iter_mut() {
            *oj /= den[m];
        }
    }
    let cache = AttentionCache {
        q_rot,
        k_rot,
        q_feat,
        k_feat,
        kv,
        ksum,
        den,
        out: out.clone(),
    };
    (out, cache)
}

/// Linear-time attention over unmasked keys. Masked query rows are
/// still computed (they attend to the unmasked keys).
///
/// Panics if no key is unmasked.
pub fn linear_attention(inp: &AttentionInputs, mask: &[bool]) -> Tensor {
    linear_attention_cached(inp, mask).0
}

/// Reference quadratic-time evaluation of the same attention.
pub fn attention_bruteforce(inp: &AttentionInputs, mask: &[bool]) -> Tensor {
    check(inp, mask);
    let l = inp.len();
    let phi = |x: &[f64], m: usize| -> Vec<f64> {
        rotary_rotate(x, m)
            .expect("even width")
            .into_iter()
            .map(elu_plus_one)
            .collect()
    };
    let qf: Vec<Vec<f64>> = (0..l).map(|m| phi(inp.q.row(m), m)).collect();
    let kf: Vec<Vec<f64>> = (0..l).map(|n| phi(inp.k.row(n), n)).collect();
    let mut kernel = vec![vec![0.0; l]; l];
    for m in 0..l {
        for n in 0..l {
            if mask[n] {
                kernel[m][n] = dot(&qf[m], &kf[n]);
            }
        }
    }
    let mut out = Tensor::zeros(&[l, inp.v.cols()]);
    for m in 0..l {
        let total: f64 = kernel[m].iter().sum();
        for n in 0..l {
            let w = kernel[m][n] / total;
            for (o, v) in out.row_mut(m).iter_mut().zip(inp.v.row(n)) {
                *o += w * v;
            }
        }
    }
    out
}

/// Gradients of the attention output with respect to `q`, `k` and `v`.
pub(crate) fn linear_attention_backward(
    inp: &AttentionInputs,
    mask: &[bool],
    cache: &AttentionCache,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (l, d, dv) = (inp.len(), inp.head_dim(), inp.v.cols());
    let mut dq_feat = Tensor::zeros(&[l, d]);
    let mut dkv = Tensor::zeros(&[d, dv]);
    let mut dksum = vec![0.0; d];

    for m in 0..l {
        let g = dout.row(m);
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        let den = cache.den[m];
        // out = num / den: d num = g / den, d den = -<g, out> / den
        let dnum: Vec<f64> = g.iter().map(|x| x / den).collect();
        let dden = -dot(g, cache.out.row(m)) / den;
        let qf = cache.q_feat.row(m);
        let dqf = dq_feat.row_mut(m);
        for i in 0..d {
            dqf[i] = dot(cache.kv.row(i), &dnum) + cache.ksum[i] * dden;
            let row = dkv.row_mut(i);
            for (r, dn) in row.iter_mut().zip(&dnum) {
                *r += qf[i] * dn;
            }
            dksum[i] += qf[i] * dden;
        }
    }

    let mut dk_feat = Tensor::zeros(&[l, d]);
    let mut dv_out = Tensor::zeros(&[l, dv]);
    for n in (0..l).filter(|&n| mask[n]) {
        let kf = cache.k_feat.row(n);
        let v = inp.v.row(n);
        let dkf = dk_feat.row_mut(n);
        for i in 0..d {
            dkf[i] = dot(dkv.row(i), v) + dksum[i];
        }
        let dvn = dv_out.row_mut(n);
        for i in 0..d {
            for (dvj, dkvij) in dvn.iter_mut().zip(dkv.row(i)) {
                *dvj += kf[i] * dkvij;
            }
        }
    }

    let unfeature = |dfeat: &Tensor, rot: &Tensor| -> Tensor {
        let mut dx = Tensor::zeros(&[l, d]);
        let mut drot = vec![0.0; d];
        for m in 0..l {
            for i in 0..d {
                drot[i] = dfeat.row(m)[i] * elu_plus_one_grad(rot.row(m)[i]);
            }
            rotate_into(&drot, m, true, dx.row_mut(m));
        }
        dx
    };
    (
        unfeature(&dq_feat, &cache.q_rot),
        unfeature(&dk_feat, &cache.k_rot),
        dv_out,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_inputs(l: usize, d: usize, seed: u64) -> AttentionInputs {
        let mut r = rng::seeded(seed);
        let mut t = || {
            Tensor::from_vec(
                &[l, d],
                (0..l * d).map(|_| rng::normal(&mut r, 1.0)).collect(),
            )
        };
        AttentionInputs {
            q: t(),
            k: t(),
            v: t(),
        }
    }

    #[test]
    fn rotary_examples() {
        let x = [0.3, -1.2, 2.0, 0.7];
        assert_eq!(rotary_rotate(&x, 0).unwrap(), x.to_vec());
        let y = rotary_rotate(&x, 17).unwrap();
        assert!((dot(&y, &y).sqrt() - dot(&x, &x).sqrt()).abs() < 1e-12);
        assert!(rotary_rotate(&[1.0, 2.0, 3.0], 1).is_err());
    }

    #[test]
    fn single_key_returns_its_value() {
        let inp = random_inputs(1, 4, 2);
        let out = linear_attention(&inp, &[true]);
        for (a, b) in out.row(0).iter().zip(inp.v.row(0)) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_values_give_constant_output() {
        let mut inp = random_inputs(6, 4, 3);
        for m in 0..6 {
            inp.v.row_mut(m).copy_from_slice(&[1.5, -2.0, 0.25, 3.0]);
        }
        let out = linear_attention(&inp, &[true; 6]);
        for m in 0..6 {
            for (o, c) in out.row(m).iter().zip([1.5, -2.0, 0.25, 3.0]) {
                assert!((o - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_bruteforce_with_mask() {
        let inp = random_inputs(8, 4, 11);
        let mask = [true, true, false, true, true, true, false, true];
        let a = linear_attention(&inp, &mask);
        let b = attention_bruteforce(&inp, &mask);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let inp = random_inputs(5, 4, 21);
        let mask = [true, true, true, false, true];
        let mut r = rng::seeded(99);
        let w: Vec<f64> = (0..20).map(|_| rng::normal(&mut r, 1.0)).collect();
        let loss = |inp: &AttentionInputs| dot(linear_attention(inp, &mask).data(), &w);
        let (_, cache) = linear_attention_cached(&inp, &mask);
        let (dq, dk, dv) =
            linear_attention_backward(&inp, &mask, &cache, &Tensor::from_vec(&[5, 4], w.clone()));
        let h = 1e-6;
        for (which, grad) in [(0, &dq), (1, &dk), (2, &dv)] {
            for i in 0..20 {
                let bump = |s: f64| {
                    let mut p = inp.clone();
                    let t = match which {
                        0 => &mut p.q,
                        1 => &mut p.k,
                        _ => &mut p.v,
                    };
                    t.data_mut()[i] += s;
                    loss(&p)
                };
                let num = (bump(h) - bump(-h)) / (2.0 * h);
                assert!(
                    (num - grad.data()[i]).abs() < 1e-7,
                    "tensor {which} entry {i}: {num} vs {}",
                    grad.data()[i]
                );
            }
        }
    }
}
