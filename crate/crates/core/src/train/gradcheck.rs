use crate::heads::Mode;
use crate::parallel::Execution;
use crate::rng;
use crate::tensor::Params;
use crate::{Error, Result};

use super::{batch_loss, batch_loss_grad, Model, Sample};

/// Entries per tensor checked exhaustively; larger tensors are sampled.
const EXHAUSTIVE_LIMIT: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Seed for choosing entries of large tensors.
    pub seed: u64,
    /// Entries sampled from tensors larger than the exhaustive limit.
    pub per_tensor: usize,
    /// Adds 1.0 to the first checked analytic gradient. Sensitivity control.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            seed: 0,
            per_tensor: EXHAUSTIVE_LIMIT,
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients of the batch MSE against central finite
/// differences, with dropout disabled. Every entry of small tensors is
/// checked; larger tensors get a seeded random subset.
pub fn gradient_check(
    model: &Model,
    samples: &[Sample],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if samples.is_empty() {
        return Err(Error::Empty(
            "gradient check needs at least one sample".into(),
        ));
    }
    let batch: Vec<&Sample> = samples.iter().collect();
    let seeds = vec![0; batch.len()];
    let analytic = batch_loss_grad(
        model,
        &batch,
        &seeds,
        Mode::Eval,
        true,
        Execution::Sequential,
    )?
    .grads;
    let analytic = analytic.params();

    let mut probe = model.clone();
    let mut pick = rng::seeded(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let n_tensors = probe.params().len();
    for t in 0..n_tensors {
        let (name, len) = {
            let p = probe.params();
            (p[t].0.clone(), p[t].1.len())
        };
        let indices: Vec<usize> = if len <= EXHAUSTIVE_LIMIT {
            (0..len).collect()
        } else {
            (0..opts.per_tensor)
                .map(|_| (rng::uniform(&mut pick) * len as f64) as usize % len)
                .collect()
        };
        for i in indices {
            let original = probe.params()[t].1.data()[i];
            probe.params_mut()[t].1.data_mut()[i] = original + opts.h;
            let plus = batch_loss(&probe, &batch, &seeds, Mode::Eval)?;
            probe.params_mut()[t].1.data_mut()[i] = original - opts.h;
            let minus = batch_loss(&probe, &batch, &seeds, Mode::Eval)?;
            probe.params_mut()[t].1.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * opts.h);
            let mut a = analytic[t].1.data()[i];
            if opts.corrupt && report.checked == 0 {
                a += 1.0;
            }
            let err = relative_error(a, numeric);
            report.checked += 1;
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{Head, HeadConfig, HeadKind, MlpHead};
    use crate::nn::Linear;
    use crate::train::SampleInput;

    fn linear_model() -> Model {
        let mut lin = Linear::zeros(3, 1);
        lin.weight.data_mut().copy_from_slice(&[0.3, -0.2, 0.5]);
        lin.bias.data_mut()[0] = 0.1;
        Model {
            encoder: None,
            head: Head::Mlp(MlpHead {
                layers: vec![lin],
                dropout: 0.0,
            }),
        }
    }

    fn pooled(x: Vec<f64>, target: f64) -> Sample {
        Sample {
            id: "s".into(),
            input: SampleInput::Pooled(x),
            target,
        }
    }

    #[test]
    fn linear_model_quadratic_loss_is_exact() {
        let samples = vec![
            pooled(vec![1.0, 2.0, -1.0], 0.7),
            pooled(vec![0.5, -0.3, 2.0], -0.4),
        ];
        let r = gradient_check(&linear_model(), &samples, &GradCheckOptions::default()).unwrap();
        assert_eq!(r.checked, 4);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn corruption_is_detected() {
        let samples = vec![pooled(vec![1.0, 2.0, -1.0], 0.7)];
        let opts = GradCheckOptions {
            corrupt: true,
            ..Default::default()
        };
        let r = gradient_check(&linear_model(), &samples, &opts).unwrap();
        assert!(r.max_rel_error > 1e-2);
        assert!(!r.passes(1e-4));
    }

    #[test]
    fn mlp_head_with_dropout_configured_checks_in_eval_mode() {
        let head = crate::heads::head_init(&HeadConfig::new(HeadKind::Mlp), 6, 3).unwrap();
        let model = Model {
            encoder: None,
            head,
        };
        let samples = vec![pooled(vec![0.2, -0.4, 0.9, 0.1, -1.2, 0.3], 1.3)];
        let r = gradient_check(&model, &samples, &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
