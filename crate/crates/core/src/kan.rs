//! Kolmogorov-Arnold layers with B-spline edge functions.
//!
//! Every edge `p -> q` of a layer carries a univariate function
//!
//! ```text
//! phi_qp(x) = base_weight[q][p] * silu(x)
//!           + spline_scale[q][p] * sum_j coeffs[q][p][j] * B_j(x)
//! ```
//!
//! and output `q` is `sum_p phi_qp(x_p)`. The B-spline basis lives on a
//! fixed uniform grid extended by `order` knots on each side. Inputs
//! outside `[t_min, t_max]` are not clamped: the spline term fades out
//! over the extended knots and the silu base term carries on.

use crate::nn::{silu, silu_grad};
use crate::rng::{self, Rng};
use crate::tensor::{prefixed, Params, Tensor};
use crate::{Error, Result};

/// Uniform extended knot vector for order-`order` B-splines.
#[derive(Clone, Debug, PartialEq)]
pub struct BSplineGrid {
    pub order: usize,
    pub intervals: usize,
    pub t_min: f64,
    pub t_max: f64,
    knots: Vec<f64>,
}

impl Default for BSplineGrid {
    /// Cubic splines, 5 intervals on `[-2, 2]`.
    fn default() -> Self {
        BSplineGrid::new(3, 5, -2.0, 2.0).expect("valid default grid")
    }
}

impl BSplineGrid {
    pub fn new(order: usize, intervals: usize, t_min: f64, t_max: f64) -> Result<Self> {
        if intervals == 0 {
            return Err(Error::InvalidValue(
                "grid needs at least one interval".into(),
            ));
        }
        if !(t_min < t_max) {
            return Err(Error::InvalidValue(format!(
                "grid domain [{t_min}, {t_max}] is empty"
            )));
        }
        let h = (t_max - t_min) / intervals as f64;
        let knots = (0..intervals + 2 * order + 1)
            .map(|i| t_min + (i as f64 - order as f64) * h)
            .collect();
        Ok(BSplineGrid {
            order,
            intervals,
            t_min,
            t_max,
            knots,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions, `intervals + order`.
    pub fn num_basis(&self) -> usize {
        self.intervals + self.order
    }

    /// Cox-de Boor tables: level `r` holds the order-`r` basis values.
    /// Returns the order `order - 1` and `order` levels.
    fn levels(&self, x: f64) -> (Vec<f64>, Vec<f64>) {
        let t = &self.knots;
        let mut cur: Vec<f64> = (0..t.len() - 1)
            .map(|i| if t[i] <= x && x < t[i + 1] { 1.0 } else { 0.0 })
            .collect();
        let mut prev = cur.clone();
        for r in 1..=self.order {
            prev = cur;
            cur = (0..prev.len() - 1)
                .map(|i| {
                    (x - t[i]) / (t[i + r] - t[i]) * prev[i]
                        + (t[i + r + 1] - x) / (t[i + r + 1] - t[i + 1]) * prev[i + 1]
                })
                .collect();
        }
        (prev, cur)
    }

    /// The `intervals + order` basis values at `x`.
    pub fn basis(&self, x: f64) -> Vec<f64> {
        self.levels(x).1
    }

    /// Basis values and their derivatives with respect to `x`.
    pub fn basis_with_derivative(&self, x: f64) -> (Vec<f64>, Vec<f64>) {
        let (lower, basis) = self.levels(x);
        let k = self.order;
        if k == 0 {
            return (basis.clone(), vec![0.0; basis.len()]);
        }
        let t = &self.knots;
        let kf = k as f64;
        let deriv = (0..basis.len())
            .map(|j| {
                kf / (t[j + k] - t[j]) * lower[j] - kf / (t[j + k + 1] - t[j + 1]) * lower[j + 1]
            })
            .collect();
        (basis, deriv)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KanLayer {
    pub grid: BSplineGrid,
    /// `[n_out, n_in, num_basis]`
    pub coeffs: Tensor,
    /// `[n_out, n_in]`
    pub base_weight: Tensor,
    /// `[n_out, n_in]`
    pub spline_scale: Tensor,
}

impl KanLayer {
    pub fn zeros(n_in: usize, n_out: usize, grid: BSplineGrid) -> Self {
        KanLayer {
            coeffs: Tensor::zeros(&[n_out, n_in, grid.num_basis()]),
            base_weight: Tensor::zeros(&[n_out, n_in]),
            spline_scale: Tensor::zeros(&[n_out, n_in]),
            grid,
        }
    }

    /// `base_weight ~ Normal(0, 1/n_in)`, `spline_scale = 1`,
    /// `coeffs ~ Normal(0, 0.1/sqrt(n_in))`.
    pub fn init(n_in: usize, n_out: usize, grid: BSplineGrid, rng: &mut Rng) -> Self {
        let mut l = KanLayer::zeros(n_in, n_out, grid);
        let std = 1.0 / (n_in as f64).sqrt();
        for w in l.base_weight.data_mut() {
            *w = rng::normal(rng, std);
        }
        l.spline_scale.fill(1.0);
        for c in l.coeffs.data_mut() {
            *c = rng::normal(rng, 0.1 * std);
        }
        l
    }

    pub fn n_in(&self) -> usize {
        self.base_weight.cols()
    }

    pub fn n_out(&self) -> usize {
        self.base_weight.rows()
    }

    fn edge(&self, q: usize, p: usize) -> usize {
        q * self.n_in() + p
    }

    fn coeffs_of(&self, q: usize, p: usize) -> &[f64] {
        let nb = self.grid.num_basis();
        let e = self.edge(q, p);
        &self.coeffs.data()[e * nb..(e + 1) * nb]
    }

    /// `phi_{q,p}(x)`.
    pub fn phi_eval(&self, p: usize, q: usize, x: f64) -> f64 {
        let e = self.edge(q, p);
        let spline: f64 = self
            .coeffs_of(q, p)
            .iter()
            .zip(self.grid.basis(x))
            .map(|(c, b)| c * b)
            .sum();
        self.base_weight.data()[e] * silu(x) + self.spline_scale.data()[e] * spline
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_in() {
            return Err(Error::Dimension(format!(
                "KAN layer expects {} inputs, got {}",
                self.n_in(),
                x.len()
            )));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("KAN layer input {i} is {}", x[i])));
        }
        let nb = self.grid.num_basis();
        let basis: Vec<Vec<f64>> = x.iter().map(|&v| self.grid.basis(v)).collect();
        let base: Vec<f64> = x.iter().map(|&v| silu(v)).collect();
        let (bw, ss, c) = (
            self.base_weight.data(),
            self.spline_scale.data(),
            self.coeffs.data(),
        );
        Ok((0..self.n_out())
            .map(|q| {
                (0..self.n_in())
                    .map(|p| {
                        let e = self.edge(q, p);
                        let spline: f64 = c[e * nb..(e + 1) * nb]
                            .iter()
                            .zip(&basis[p])
                            .map(|(ci, bi)| ci * bi)
                            .sum();
                        bw[e] * base[p] + ss[e] * spline
                    })
                    .sum()
            })
            .collect())
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], upstream: &[f64], grads: &mut KanLayer) -> Vec<f64> {
        let nb = self.grid.num_basis();
        let mut dx = vec![0.0; self.n_in()];
        for (p, &xp) in x.iter().enumerate() {
            let (basis, dbasis) = self.grid.basis_with_derivative(xp);
            let (s, ds) = (silu(xp), silu_grad(xp));
            for (q, &g) in upstream.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let e = self.edge(q, p);
                let coeffs = &self.coeffs.data()[e * nb..(e + 1) * nb];
                let (bw, ss) = (self.base_weight.data()[e], self.spline_scale.data()[e]);
                let mut spline = 0.0;
                let mut dspline = 0.0;
                let gc = &mut grads.coeffs.data_mut()[e * nb..(e + 1) * nb];
                for j in 0..nb {
                    spline += coeffs[j] * basis[j];
                    dspline += coeffs[j] * dbasis[j];
                    gc[j] += g * ss * basis[j];
                }
                grads.base_weight.data_mut()[e] += g * s;
                grads.spline_scale.data_mut()[e] += g * spline;
                dx[p] += g * (bw * ds + ss * dspline);
            }
        }
        dx
    }
}

impl Params for KanLayer {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("coeffs".into(), &self.coeffs),
            ("base_weight".into(), &self.base_weight),
            ("spline_scale".into(), &self.spline_scale),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("coeffs".into(), &mut self.coeffs),
            ("base_weight".into(), &mut self.base_weight),
            ("spline_scale".into(), &mut self.spline_scale),
        ]
    }
}

/// Composition `layers[n-1] o ... o layers[0]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KanStack {
    pub layers: Vec<KanLayer>,
}

impl KanStack {
    pub fn new(layers: Vec<KanLayer>) -> Result<Self> {
        for w in layers.windows(2) {
            if w[0].n_out() != w[1].n_in() {
                return Err(Error::Dimension(format!(
                    "KAN layer outputs {} but next layer expects {}",
                    w[0].n_out(),
                    w[1].n_in()
                )));
            }
        }
        Ok(KanStack { layers })
    }

    /// Fresh stack through `widths` (`widths[0]` is the input width).
    pub fn init(widths: &[usize], grid: &BSplineGrid, rng: &mut Rng) -> Self {
        KanStack {
            layers: widths
                .windows(2)
                .map(|w| KanLayer::init(w[0], w[1], grid.clone(), rng))
                .collect(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.layers
            .iter()
            .try_fold(x.to_vec(), |h, l| l.forward(&h))
    }

    /// Forward keeping every layer input for [`KanStack::backward`].
    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for l in &self.layers {
            let next = l.forward(&h)?;
            inputs.push(std::mem::replace(&mut h, next));
        }
        Ok((h, inputs))
    }

    pub fn backward(
        &self,
        inputs: &[Vec<f64>],
        upstream: &[f64],
        grads: &mut KanStack,
    ) -> Vec<f64> {
        let mut g = upstream.to_vec();
        for ((l, x), gl) in self.layers.iter().zip(inputs).zip(&mut grads.layers).rev() {
            g = l.backward(x, &g, gl);
        }
        g
    }
}

impl Params for KanStack {
    fn params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&i.to_string(), l.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&i.to_string(), l.params_mut()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_layer(n_in: usize, n_out: usize, seed: u64) -> KanLayer {
        let mut rng = rng::seeded(seed);
        let mut l = KanLayer::init(n_in, n_out, BSplineGrid::default(), &mut rng);
        for v in l
            .spline_scale
            .data_mut()
            .iter_mut()
            .chain(l.coeffs.data_mut())
        {
            *v = rng::normal(&mut rng, 1.0);
        }
        l
    }

    #[test]
    fn knot_vector_layout() {
        let g = BSplineGrid::default();
        assert_eq!(g.knots().len(), 5 + 2 * 3 + 1);
        assert_eq!(g.num_basis(), 8);
        assert!((g.knots()[3] - -2.0).abs() < 1e-15 && (g.knots()[8] - 2.0).abs() < 1e-15);
        assert!(BSplineGrid::new(3, 0, 0.0, 1.0).is_err());
        assert!(BSplineGrid::new(3, 4, 1.0, 1.0).is_err());
    }

    #[test]
    fn linear_hat_functions() {
        // Knots -0.5, 0, 0.5, 1, 1.5: hats peaking at 0, 0.5, 1.
        let g = BSplineGrid::new(1, 2, 0.0, 1.0).unwrap();
        let b = g.basis(0.25);
        assert_eq!(b.len(), 3);
        for (got, want) in b.iter().zip([0.5, 0.5, 0.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn partition_of_unity_at_domain_ends() {
        let g = BSplineGrid::default();
        for x in [-2.0, 2.0, 0.0, 1.2] {
            let s: f64 = g.basis(x).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "x={x} sum={s}");
        }
        // Left end: only the first `order` splines are non-zero.
        let b = g.basis(-2.0);
        assert!(b[3..].iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn basis_in_unit_interval_and_local(x in -3.5f64..3.5) {
            let g = BSplineGrid::default();
            let t = g.knots();
            for (j, b) in g.basis(x).into_iter().enumerate() {
                prop_assert!((0.0..=1.0 + 1e-15).contains(&b));
                if x < t[j] || x > t[j + g.order + 1] {
                    prop_assert_eq!(b, 0.0);
                }
            }
        }

        #[test]
        fn basis_derivative_matches_fd(x in -1.95f64..1.95) {
            let g = BSplineGrid::default();
            let (_, d) = g.basis_with_derivative(x);
            let h = 1e-6;
            let (p, m) = (g.basis(x + h), g.basis(x - h));
            for j in 0..d.len() {
                prop_assert!((d[j] - (p[j] - m[j]) / (2.0 * h)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn phi_examples() {
        let g = BSplineGrid::default();
        let mut l = KanLayer::zeros(1, 1, g);
        assert_eq!(l.phi_eval(0, 0, 0.7), 0.0);
        l.base_weight.fill(1.0);
        assert_eq!(l.phi_eval(0, 0, 0.0), 0.0);
        l.base_weight.fill(0.0);
        l.spline_scale.fill(1.0);
        l.coeffs.fill(1.0);
        assert!((l.phi_eval(0, 0, 0.37) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn phi_is_linear_in_coefficients() {
        let a = random_layer(2, 2, 4);
        let mut b = a.clone();
        let mut rng = rng::seeded(9);
        for c in b.coeffs.data_mut() {
            *c = rng::normal(&mut rng, 1.0);
        }
        let mut sum = a.clone();
        for (s, c) in sum.coeffs.data_mut().iter_mut().zip(b.coeffs.data()) {
            *s += c;
        }
        for x in [-1.3, 0.2, 1.9] {
            let base = a.base_weight.data()[a.edge(1, 0)] * silu(x);
            let lhs = sum.phi_eval(0, 1, x);
            let rhs = a.phi_eval(0, 1, x) + b.phi_eval(0, 1, x) - base;
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_double_loop() {
        let l = random_layer(4, 3, 1);
        let x = [0.3, -1.1, 1.7, -2.6];
        let y = l.forward(&x).unwrap();
        for q in 0..3 {
            let want: f64 = (0..4).map(|p| l.phi_eval(p, q, x[p])).sum();
            assert!((y[q] - want).abs() < 1e-12);
        }
        assert_eq!(
            KanLayer::zeros(4, 3, BSplineGrid::default())
                .forward(&x)
                .unwrap(),
            vec![0.0; 3]
        );
        assert!(matches!(l.forward(&[1.0]), Err(Error::Dimension(_))));
        assert!(matches!(
            l.forward(&[f64::NAN, 0., 0., 0.]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn coefficient_gradient_is_scaled_basis() {
        let l = random_layer(2, 2, 2);
        let x = [0.4, -0.9];
        let mut g = l.zeros_like();
        l.backward(&x, &[0.7, 0.0], &mut g);
        let nb = l.grid.num_basis();
        let b = l.grid.basis(x[1]);
        let e = l.edge(0, 1);
        for j in 0..nb {
            let want = 0.7 * l.spline_scale.data()[e] * b[j];
            assert!((g.coeffs.data()[e * nb + j] - want).abs() < 1e-15);
        }
        let mut z = l.zeros_like();
        let dx = l.backward(&x, &[0.0, 0.0], &mut z);
        assert_eq!(dx, vec![0.0, 0.0]);
        assert!(z
            .params()
            .iter()
            .all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn stack_composition() {
        let mut rng = rng::seeded(5);
        let s = KanStack::init(&[3, 4, 2], &BSplineGrid::default(), &mut rng);
        let x = [0.1, -0.5, 1.0];
        let manual = s.layers[1]
            .forward(&s.layers[0].forward(&x).unwrap())
            .unwrap();
        assert_eq!(s.forward(&x).unwrap(), manual);
        let single = KanStack::new(vec![s.layers[0].clone()]).unwrap();
        assert_eq!(
            single.forward(&x).unwrap(),
            s.layers[0].forward(&x).unwrap()
        );
        assert!(KanStack::new(vec![s.layers[1].clone(), s.layers[0].clone()]).is_err());
        let zero = KanStack::new(vec![
            KanLayer::zeros(3, 4, BSplineGrid::default()),
            KanLayer::zeros(4, 2, BSplineGrid::default()),
        ])
        .unwrap();
        assert_eq!(zero.forward(&x).unwrap(), vec![0.0, 0.0]);
    }
}
