//! Regression heads mapping a formulation embedding to a scalar LCE.
//!
//! * MLP: linear layers with ReLU and (train-mode) inverted dropout after
//!   every hidden activation; default `H -> 64 -> 1`.
//! * KAN: a stack of KAN layers followed by one linear map; default
//!   `H -> 64 -> 16 -> 1`. No dropout.

use serde::{Deserialize, Serialize};

use crate::kan::{BSplineGrid, KanStack};
use crate::nn::{relu, relu_grad, Linear};
use crate::rng::{self, Rng};
use crate::tensor::{prefixed, Params, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Mlp,
    Kan,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::Mlp => "mlp",
            HeadKind::Kan => "kan",
        })
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(HeadKind::Mlp),
            "kan" => Ok(HeadKind::Kan),
            _ => Err(Error::InvalidValue(format!(
                "unknown head kind `{s}` (expected mlp or kan)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub order: usize,
    pub intervals: usize,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            order: 3,
            intervals: 5,
            t_min: -2.0,
            t_max: 2.0,
        }
    }
}

impl GridConfig {
    pub fn build(&self) -> Result<BSplineGrid> {
        BSplineGrid::new(self.order, self.intervals, self.t_min, self.t_max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Hidden widths between the embedding and the scalar output. For a
    /// KAN head these are the KAN layer outputs.
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub grid: GridConfig,
}

fn default_dropout() -> f64 {
    0.2
}

impl HeadConfig {
    pub fn new(kind: HeadKind) -> Self {
        HeadConfig {
            kind,
            hidden: None,
            dropout: default_dropout(),
            grid: GridConfig::default(),
        }
    }

    /// `depth` layers of width `width`: an MLP with `depth` linear layers
    /// (`depth - 1` hidden), or `depth` KAN layers plus the output map.
    pub fn for_sweep(&self, depth: usize, width: usize) -> Self {
        let hidden = match self.kind {
            HeadKind::Mlp => vec![width; depth.saturating_sub(1)],
            HeadKind::Kan => vec![width; depth],
        };
        HeadConfig {
            hidden: Some(hidden),
            ..self.clone()
        }
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.hidden.clone().unwrap_or_else(|| match self.kind {
            HeadKind::Mlp => vec![64],
            HeadKind::Kan => vec![64, 16],
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidValue(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        let hidden = self.hidden_widths();
        if hidden.contains(&0) {
            return Err(Error::InvalidValue("hidden widths must be positive".into()));
        }
        if self.kind == HeadKind::Kan && hidden.is_empty() {
            return Err(Error::InvalidValue(
                "a KAN head needs at least one KAN layer".into(),
            ));
        }
        self.grid.build().map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpHead {
    pub layers: Vec<Linear>,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KanHead {
    pub kans: KanStack,
    pub out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Mlp(MlpHead),
    Kan(KanHead),
}

/// Per-sample activations for [`Head::backward`].
#[derive(Clone, Debug)]
pub enum HeadCache {
    Mlp {
        /// Input of every linear layer.
        inputs: Vec<Vec<f64>>,
        /// Pre-activation of every hidden layer.
        pre: Vec<Vec<f64>>,
        /// Dropout multipliers (0 or `1/(1-rate)`) of every hidden layer.
        masks: Vec<Vec<f64>>,
    },
    Kan {
        kan_inputs: Vec<Vec<f64>>,
        out_input: Vec<f64>,
    },
}

/// Deterministic initialization of a head for `input_width` inputs.
/// Linear maps use Normal(0, 1/fan_in) weights and zero biases; KAN layers
/// follow [`crate::kan::KanLayer::init`].
pub fn head_init(cfg: &HeadConfig, input_width: usize, seed: u64) -> Result<Head> {
    cfg.validate()?;
    let mut r = rng::seeded(seed);
    let hidden = cfg.hidden_widths();
    let mut widths = vec![input_width];
    widths.extend(&hidden);
    Ok(match cfg.kind {
        HeadKind::Mlp => {
            widths.push(1);
            Head::Mlp(MlpHead {
                layers: widths
                    .windows(2)
                    .map(|w| Linear::init(w[0], w[1], &mut r))
                    .collect(),
                dropout: cfg.dropout,
            })
        }
        HeadKind::Kan => {
            let kans = KanStack::init(&widths, &cfg.grid.build()?, &mut r);
            Head::Kan(KanHead {
                kans,
                out: Linear::init(*widths.last().expect("non-empty"), 1, &mut r),
            })
        }
    })
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Mlp(_) => HeadKind::Mlp,
            Head::Kan(_) => HeadKind::Kan,
        }
    }

    pub fn input_width(&self) -> usize {
        match self {
            Head::Mlp(m) => m.layers[0].n_in(),
            Head::Kan(k) => k.kans.layers[0].n_in(),
        }
    }

    /// Sets the bias of the final linear map. Starting it at the mean
    /// training target spares the optimizer from learning the offset.
    pub fn set_output_bias(&mut self, b: f64) {
        let out = match self {
            Head::Mlp(m) => m.layers.last_mut().expect("at least one layer"),
            Head::Kan(k) => &mut k.out,
        };
        out.bias.data_mut()[0] = b;
    }

    /// `rng` drives dropout in train mode and is untouched in eval mode.
    pub fn forward(&self, x: &[f64], mode: Mode, rng: &mut Rng) -> Result<f64> {
        Ok(self.forward_cached(x, mode, rng)?.0)
    }

    pub fn forward_cached(&self, x: &[f64], mode: Mode, rng: &mut Rng) -> Result<(f64, HeadCache)> {
        if x.len() != self.input_width() {
            return Err(Error::Dimension(format!(
                "head expects an embedding of width {}, got {}",
                self.input_width(),
                x.len()
            )));
        }
        match self {
            Head::Mlp(m) => {
                let n = m.layers.len();
                let (mut inputs, mut pre, mut masks) = (Vec::new(), Vec::new(), Vec::new());
                let mut h = x.to_vec();
                for layer in &m.layers[..n - 1] {
                    let z = layer.forward(&h);
                    let mask: Vec<f64> = if mode == Mode::Train && m.dropout > 0.0 {
                        let keep = 1.0 / (1.0 - m.dropout);
                        z.iter()
                            .map(|_| {
                                if rng::uniform(rng) < m.dropout {
                                    0.0
                                } else {
                                    keep
                                }
                            })
                            .collect()
                    } else {
                        vec![1.0; z.len()]
                    };
                    let next = z.iter().zip(&mask).map(|(v, k)| relu(*v) * k).collect();
                    inputs.push(std::mem::replace(&mut h, next));
                    pre.push(z);
                    masks.push(mask);
                }
                let y = m.layers[n - 1].forward(&h)[0];
                inputs.push(h);
                Ok((y, HeadCache::Mlp { inputs, pre, masks }))
            }
            Head::Kan(k) => {
                let (h, kan_inputs) = k.kans.forward_cached(x)?;
                let y = k.out.forward(&h)[0];
                Ok((
                    y,
                    HeadCache::Kan {
                        kan_inputs,
                        out_input: h,
                    },
                ))
            }
        }
    }

    /// Accumulates parameter gradients for upstream gradient `dy` and
    /// returns the gradient with respect to the head input.
    pub fn backward(&self, cache: &HeadCache, dy: f64, grads: &mut Head) -> Vec<f64> {
        match (self, cache, grads) {
            (Head::Mlp(m), HeadCache::Mlp { inputs, pre, masks }, Head::Mlp(g)) => {
                let n = m.layers.len();
                let mut d = m.layers[n - 1].backward(&inputs[n - 1], &[dy], &mut g.layers[n - 1]);
                for i in (0..n - 1).rev() {
                    for ((di, z), k) in d.iter_mut().zip(&pre[i]).zip(&masks[i]) {
                        *di *= relu_grad(*z) * k;
                    }
                    d = m.layers[i].backward(&inputs[i], &d, &mut g.layers[i]);
                }
                d
            }
            (
                Head::Kan(k),
                HeadCache::Kan {
                    kan_inputs,
                    out_input,
                },
                Head::Kan(g),
            ) => {
                let d = k.out.backward(out_input, &[dy], &mut g.out);
                k.kans.backward(kan_inputs, &d, &mut g.kans)
            }
            _ => panic!("head, cache and gradient kinds differ"),
        }
    }
}

impl Params for Head {
    fn params(&self) -> Vec<(String, &Tensor)> {
        match self {
            Head::Mlp(m) => m
                .layers
                .iter()
                .enumerate()
                .flat_map(|(i, l)| prefixed(&format!("linear.{i}"), l.params()))
                .collect(),
            Head::Kan(k) => {
                let mut v = prefixed("kan", k.kans.params());
                v.extend(prefixed("out", k.out.params()));
                v
            }
        }
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            Head::Mlp(m) => m
                .layers
                .iter_mut()
                .enumerate()
                .flat_map(|(i, l)| prefixed(&format!("linear.{i}"), l.params_mut()))
                .collect(),
            Head::Kan(k) => {
                let mut v = prefixed("kan", k.kans.params_mut());
                v.extend(prefixed("out", k.out.params_mut()));
                v
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(h: &Head, x: &[f64]) -> f64 {
        h.forward(x, Mode::Eval, &mut rng::seeded(0)).unwrap()
    }

    #[test]
    fn zero_heads_output_zero() {
        let mut mlp = head_init(&HeadConfig::new(HeadKind::Mlp), 8, 1).unwrap();
        mlp.zero_params();
        let mut kan = head_init(&HeadConfig::new(HeadKind::Kan), 8, 1).unwrap();
        kan.zero_params();
        let x = [0.5; 8];
        assert_eq!(eval(&mlp, &x), 0.0);
        assert_eq!(eval(&kan, &x), 0.0);
    }

    #[test]
    fn identity_chain() {
        let cfg = HeadConfig {
            hidden: Some(vec![1]),
            ..HeadConfig::new(HeadKind::Mlp)
        };
        let mut h = head_init(&cfg, 1, 0).unwrap();
        if let Head::Mlp(m) = &mut h {
            for l in &mut m.layers {
                l.weight.fill(1.0);
                l.bias.fill(0.0);
            }
        }
        assert_eq!(eval(&h, &[2.0]), 2.0);
        assert_eq!(eval(&h, &[-2.0]), 0.0);
    }

    #[test]
    fn zero_dropout_train_equals_eval() {
        let cfg = HeadConfig {
            dropout: 0.0,
            ..HeadConfig::new(HeadKind::Mlp)
        };
        let h = head_init(&cfg, 6, 3).unwrap();
        let x = [0.1, -0.4, 0.9, 1.3, -2.0, 0.0];
        let t = h.forward(&x, Mode::Train, &mut rng::seeded(5)).unwrap();
        assert_eq!(t, eval(&h, &x));
    }

    #[test]
    fn dropout_preserves_expectation() {
        let h = head_init(&HeadConfig::new(HeadKind::Mlp), 6, 3).unwrap();
        let x = [0.1, -0.4, 0.9, 1.3, -2.0, 0.7];
        let mut r = rng::seeded(21);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| h.forward(&x, Mode::Train, &mut r).unwrap())
            .sum::<f64>()
            / n as f64;
        let want = eval(&h, &x);
        assert!((mean - want).abs() <= 0.02 * want.abs(), "{mean} vs {want}");
        assert_ne!(h.forward(&x, Mode::Train, &mut r).unwrap(), want);
    }

    #[test]
    fn output_bias_shifts_prediction() {
        for kind in [HeadKind::Mlp, HeadKind::Kan] {
            let mut h = head_init(&HeadConfig::new(kind), 3, 2).unwrap();
            let before = eval(&h, &[0.3, 0.1, -0.2]);
            h.set_output_bias(1.5);
            assert!((eval(&h, &[0.3, 0.1, -0.2]) - before - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn kan_head_composes_stack_and_affine() {
        let h = head_init(&HeadConfig::new(HeadKind::Kan), 6, 9).unwrap();
        let x = [0.1, -0.4, 0.9, 1.3, -2.0, 0.0];
        let Head::Kan(k) = &h else { unreachable!() };
        let manual = k.out.forward(&k.kans.forward(&x).unwrap())[0];
        assert_eq!(eval(&h, &x), manual);
        let a = h.forward(&x, Mode::Train, &mut rng::seeded(1)).unwrap();
        assert_eq!(a, manual);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = HeadConfig::new(HeadKind::Kan);
        assert_eq!(
            head_init(&cfg, 4, 7).unwrap(),
            head_init(&cfg, 4, 7).unwrap()
        );
        assert_ne!(
            head_init(&cfg, 4, 7).unwrap(),
            head_init(&cfg, 4, 8).unwrap()
        );
        let y = eval(&head_init(&cfg, 4, 7).unwrap(), &[0.0; 4]);
        assert!(y.is_finite());
    }

    #[test]
    fn dimension_checks() {
        let h = head_init(&HeadConfig::new(HeadKind::Mlp), 4, 0).unwrap();
        assert!(matches!(
            h.forward(&[1.0], Mode::Eval, &mut rng::seeded(0)),
            Err(Error::Dimension(_))
        ));
        let bad = HeadConfig {
            dropout: 1.0,
            ..HeadConfig::new(HeadKind::Mlp)
        };
        assert!(head_init(&bad, 4, 0).is_err());
    }

    #[test]
    fn sweep_shapes() {
        let mlp = HeadConfig::new(HeadKind::Mlp).for_sweep(3, 32);
        assert_eq!(mlp.hidden_widths(), vec![32, 32]);
        let kan = HeadConfig::new(HeadKind::Kan).for_sweep(2, 8);
        assert_eq!(kan.hidden_widths(), vec![8, 8]);
        assert_eq!(HeadConfig::new(HeadKind::Kan).hidden_widths(), vec![64, 16]);
    }
}
