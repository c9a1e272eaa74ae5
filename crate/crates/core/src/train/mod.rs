//! Fine-tuning: sample preparation, the AdamW training loop with
//! best-validation-epoch selection, evaluation, hyperparameter sweeps and
//! finite-difference gradient checks.
//!
//! Mini-batch work fans out per sample through [`crate::parallel`];
//! per-sample gradients are summed afterwards in batch order, so
//! sequential and parallel runs agree bit for bit.

mod gradcheck;
pub mod metrics;
mod sweep;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{split_indices, Formulation};
use crate::encoder::{EmbeddingTable, Encoder, TokenEmbeddings};
use crate::heads::{Head, Mode};
use crate::optim::{AdamState, AdamW};
use crate::parallel::{self, Execution};
use crate::pool::{self, PoolSpan};
use crate::rng;
use crate::tensor::{prefixed, Params, Tensor};
use crate::tokenizer::{TokenSequence, Vocabulary};
use crate::{Error, Result};

pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use metrics::{mse_loss, rmse};
pub use sweep::{sweep, write_sweep_csv, SweepRow};

const STREAM_VAL: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_HEAD_INIT: u64 = 4;
const STREAM_ENCODER_INIT: u64 = 5;

/// Seed for head initialization derived from a run seed.
pub fn head_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, &[STREAM_HEAD_INIT])
}

/// Seed for encoder initialization derived from a run seed.
pub fn encoder_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, &[STREAM_ENCODER_INIT])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Encoder weights stay fixed; embeddings are computed once.
    Frozen,
    /// Encoder weights are trained with the head.
    #[default]
    Finetune,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    /// One encoder sequence per component molecule.
    #[default]
    Cido,
    /// One `<sep>`-joined sequence per formulation.
    SepJoin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub encoder_mode: EncoderMode,
    pub pooling_mode: PoolingMode,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            learning_rate: 5e-5,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            val_fraction: 0.1,
            encoder_mode: EncoderMode::default(),
            pooling_mode: PoolingMode::default(),
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidValue("batch_size must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidValue(format!(
                "val_fraction must be in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if !(self.learning_rate >= 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::InvalidValue(
                "learning_rate must be >= 0 and betas in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Optional encoder plus regression head. Without an encoder the model
/// only accepts pre-pooled inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: Option<Encoder>,
    pub head: Head,
}

impl Params for Model {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = match &self.encoder {
            Some(e) => prefixed("encoder", e.params()),
            None => Vec::new(),
        };
        v.extend(prefixed("head", self.head.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = match &mut self.encoder {
            Some(e) => prefixed("encoder", e.params_mut()),
            None => Vec::new(),
        };
        v.extend(prefixed("head", self.head.params_mut()));
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SampleInput {
    /// A formulation embedding ready for the head.
    Pooled(Vec<f64>),
    /// Token sequences to run through the encoder, and how to pool them.
    Sequences {
        sequences: Vec<TokenSequence>,
        spans: Vec<PoolSpan>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub input: SampleInput,
    pub target: f64,
}

/// Where token embeddings come from.
#[derive(Clone, Debug)]
pub enum EmbeddingSource {
    /// Tokenize locally and run the model's encoder.
    Encoder(Vocabulary),
    /// Look up embeddings from a CEMB file.
    Pretrained(EmbeddingTable),
}

fn sequence_input(
    f: &Formulation,
    vocab: &Vocabulary,
    pooling: PoolingMode,
) -> Result<SampleInput> {
    Ok(match pooling {
        PoolingMode::Cido => {
            let pb = pool::cido_pack(std::slice::from_ref(f), vocab)?;
            let spans = pb
                .sequences
                .iter()
                .zip(&pb.segments)
                .enumerate()
                .map(|(i, (s, seg))| PoolSpan {
                    sequence: i,
                    rows: 0..s.len(),
                    weight: seg.ratio,
                })
                .collect();
            SampleInput::Sequences {
                sequences: pb.sequences,
                spans,
            }
        }
        PoolingMode::SepJoin => {
            let j = pool::sep_join(f, vocab)?;
            SampleInput::Sequences {
                sequences: vec![j.sequence],
                spans: j
                    .spans
                    .into_iter()
                    .map(|(rows, weight)| PoolSpan {
                        sequence: 0,
                        rows,
                        weight,
                    })
                    .collect(),
            }
        }
    })
}

/// Turns formulations into training samples with LCE targets.
///
/// Pretrained embeddings are pooled immediately (CIDO pooling only). With
/// a local encoder, frozen mode encodes every formulation once and pools;
/// fine-tune mode keeps the token sequences so the encoder runs in the
/// training loop.
pub fn prepare_samples(
    fs: &[Formulation],
    source: &EmbeddingSource,
    encoder: Option<&Encoder>,
    encoder_mode: EncoderMode,
    pooling: PoolingMode,
    exec: Execution,
) -> Result<Vec<Sample>> {
    match source {
        EmbeddingSource::Pretrained(table) => {
            if pooling != PoolingMode::Cido {
                return Err(Error::InvalidValue(
                    "separator-joined pooling needs a local encoder; pretrained embeddings are per molecule".into(),
                ));
            }
            if encoder_mode == EncoderMode::Finetune {
                return Err(Error::InvalidValue(
                    "pretrained embeddings can only be used frozen".into(),
                ));
            }
            fs.iter()
                .map(|f| {
                    let per_mol = f
                        .components
                        .iter()
                        .map(|c| Ok((table.get(&c.smiles)?.clone(), c.molar_ratio)))
                        .collect::<Result<Vec<(TokenEmbeddings, f64)>>>()?;
                    Ok(Sample {
                        id: f.id.clone(),
                        input: SampleInput::Pooled(pool::pool(&per_mol)?.vector),
                        target: f.target_lce,
                    })
                })
                .collect()
        }
        EmbeddingSource::Encoder(vocab) => {
            let samples = fs
                .iter()
                .map(|f| {
                    Ok(Sample {
                        id: f.id.clone(),
                        input: sequence_input(f, vocab, pooling)?,
                        target: f.target_lce,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            match encoder_mode {
                EncoderMode::Finetune => Ok(samples),
                EncoderMode::Frozen => {
                    let encoder = encoder.ok_or_else(|| {
                        Error::InvalidValue("frozen local mode needs an encoder".into())
                    })?;
                    pool_with_encoder(encoder, &samples, exec)
                }
            }
        }
    }
}

/// Encodes all sequences of `samples` as one padded batch and pools them.
fn pool_with_encoder(
    encoder: &Encoder,
    samples: &[Sample],
    exec: Execution,
) -> Result<Vec<Sample>> {
    let mut flat = Vec::new();
    let mut owners = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if let SampleInput::Sequences { sequences, .. } = &s.input {
            flat.extend(sequences.iter().cloned());
            owners.extend(std::iter::repeat_n(i, sequences.len()));
        }
    }
    let mut encoded = encoder.encode(&flat, exec)?.into_iter();
    samples
        .iter()
        .map(|s| {
            let input = match &s.input {
                SampleInput::Pooled(v) => SampleInput::Pooled(v.clone()),
                SampleInput::Sequences { sequences, spans } => {
                    let embs: Vec<TokenEmbeddings> =
                        encoded.by_ref().take(sequences.len()).collect();
                    SampleInput::Pooled(pool::pool_spans(&embs, spans)?)
                }
            };
            Ok(Sample {
                id: s.id.clone(),
                input,
                target: s.target,
            })
        })
        .collect()
}

/// Per-sequence encoder outputs and caches kept for the backward pass.
type EncoderTrace = (Vec<TokenEmbeddings>, Vec<crate::encoder::EncoderCache>);

impl Model {
    fn encode_sample(&self, s: &Sample) -> Result<(Vec<f64>, Option<EncoderTrace>)> {
        match &s.input {
            SampleInput::Pooled(v) => Ok((v.clone(), None)),
            SampleInput::Sequences { sequences, spans } => {
                let encoder = self.encoder.as_ref().ok_or_else(|| {
                    Error::InvalidValue(format!(
                        "sample `{}` needs an encoder but the model has none",
                        s.id
                    ))
                })?;
                let mut embs = Vec::with_capacity(sequences.len());
                let mut caches = Vec::with_capacity(sequences.len());
                for seq in sequences {
                    let (e, c) = encoder.forward_cached(&seq.ids, &vec![true; seq.len()])?;
                    embs.push(e);
                    caches.push(c);
                }
                Ok((pool::pool_spans(&embs, spans)?, Some((embs, caches))))
            }
        }
    }

    /// Prediction for one sample; `rng` feeds dropout in train mode.
    pub fn predict_one(&self, s: &Sample, mode: Mode, rng: &mut rng::Rng) -> Result<f64> {
        let (x, _) = self.encode_sample(s)?;
        self.head.forward(&x, mode, rng)
    }

    /// Forward and backward for one sample. `dloss` maps the prediction to
    /// the loss gradient with respect to it.
    fn forward_backward(
        &self,
        s: &Sample,
        mode: Mode,
        dropout_seed: u64,
        encoder_grads: bool,
        dloss: impl Fn(f64) -> f64,
    ) -> Result<(f64, Model)> {
        let (x, enc) = self.encode_sample(s)?;
        let (y, hc) = self
            .head
            .forward_cached(&x, mode, &mut rng::seeded(dropout_seed))?;
        let mut grads = Model {
            encoder: None,
            head: self.head.zeros_like(),
        };
        let dx = self.head.backward(&hc, dloss(y), &mut grads.head);
        if let (true, Some((embs, caches)), SampleInput::Sequences { spans, .. }) =
            (encoder_grads, enc, &s.input)
        {
            let encoder = self.encoder.as_ref().expect("checked in encode_sample");
            let mut eg = encoder.zeros_like();
            for (cache, d) in caches
                .iter()
                .zip(pool::pool_spans_backward(&embs, spans, &dx))
            {
                encoder.backward(cache, &d, &mut eg);
            }
            grads.encoder = Some(eg);
        }
        Ok((y, grads))
    }

    fn zero_grads(&self, encoder_grads: bool) -> Model {
        Model {
            encoder: self
                .encoder
                .as_ref()
                .filter(|_| encoder_grads)
                .map(Params::zeros_like),
            head: self.head.zeros_like(),
        }
    }
}

fn add_grads(acc: &mut Model, g: &Model) {
    acc.head.accumulate(&g.head);
    if let (Some(a), Some(b)) = (&mut acc.encoder, &g.encoder) {
        a.accumulate(b);
    }
}

pub(crate) struct BatchResult {
    pub loss: f64,
    pub grads: Model,
}

/// Mean squared error over `samples` and its gradient. Per-sample work
/// runs through `exec`; gradients are summed in sample order.
pub(crate) fn batch_loss_grad(
    model: &Model,
    samples: &[&Sample],
    dropout_seeds: &[u64],
    mode: Mode,
    encoder_grads: bool,
    exec: Execution,
) -> Result<BatchResult> {
    let n = samples.len() as f64;
    let items: Vec<(&Sample, u64)> = samples
        .iter()
        .copied()
        .zip(dropout_seeds.iter().copied())
        .collect();
    let results = parallel::map(exec, &items, |(s, seed)| {
        model.forward_backward(s, mode, *seed, encoder_grads, |y| 2.0 * (y - s.target) / n)
    });
    let mut grads = model.zero_grads(encoder_grads);
    let mut loss = 0.0;
    for ((s, _), r) in items.iter().zip(results) {
        let (y, g) = r?;
        loss += (y - s.target) * (y - s.target);
        add_grads(&mut grads, &g);
    }
    Ok(BatchResult {
        loss: loss / n,
        grads,
    })
}

/// Loss only, with the same dropout streams as [`batch_loss_grad`].
pub(crate) fn batch_loss(
    model: &Model,
    samples: &[&Sample],
    dropout_seeds: &[u64],
    mode: Mode,
) -> Result<f64> {
    let mut loss = 0.0;
    for (s, &seed) in samples.iter().zip(dropout_seeds) {
        let y = model.predict_one(s, mode, &mut rng::seeded(seed))?;
        loss += (y - s.target) * (y - s.target);
    }
    Ok(loss / samples.len() as f64)
}

/// Mean target, the natural starting point for a head's output bias.
pub fn target_mean(samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s.target).sum::<f64>() / samples.len() as f64
}

/// Eval-mode predictions in input order.
pub fn predict(model: &Model, samples: &[Sample], exec: Execution) -> Result<Vec<f64>> {
    parallel::map(exec, samples, |s| {
        model.predict_one(s, Mode::Eval, &mut rng::seeded(0))
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub rmse: f64,
}

pub fn evaluate(model: &Model, samples: &[Sample], exec: Execution) -> Result<Metrics> {
    let preds = predict(model, samples, exec)?;
    let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
    Ok(Metrics {
        rmse: rmse(&preds, &targets)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub test_rmse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the lowest validation loss; the earliest on ties.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Parameters at the end of `best_epoch`.
    pub best_model: Model,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// `epoch,train_loss,val_loss,test_rmse`; `test_rmse` is empty when no
/// test set was given.
pub fn write_history_csv<W: Write>(h: &TrainHistory, mut w: W) -> std::io::Result<()> {
    writeln!(w, "epoch,train_loss,val_loss,test_rmse")?;
    for e in &h.epochs {
        let test = e.test_rmse.map(|v| v.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, test)?;
    }
    Ok(())
}

fn mse_of(model: &Model, samples: &[Sample], exec: Execution) -> Result<f64> {
    let preds = predict(model, samples, exec)?;
    let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
    Ok(mse_loss(&preds, &targets)?.0)
}

/// Trains `model` in place.
///
/// A validation subset of `round(n * val_fraction)` samples (at least one
/// and at most `n - 1` when `n >= 2`) is held out with a seeded shuffle.
/// Each epoch visits the rest in a freshly shuffled order in mini-batches,
/// taking one AdamW step per batch on the MSE. With a single sample there
/// is nothing to hold out and the validation loss is the training-set loss.
/// In frozen mode only the head is updated.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    test_set: Option<&[Sample]>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let n = train_set.len();
    let n_val = if n >= 2 {
        ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let (val_idx, fit_idx) = split_indices(n, n_val, rng::derive_seed(cfg.seed, &[STREAM_VAL]));
    let fit: Vec<Sample> = fit_idx.iter().map(|&i| train_set[i].clone()).collect();
    let val: Vec<Sample> = if val_idx.is_empty() {
        fit.clone()
    } else {
        val_idx.iter().map(|&i| train_set[i].clone()).collect()
    };

    let finetune = cfg.encoder_mode == EncoderMode::Finetune && model.encoder.is_some();
    let opt = cfg.optimizer();
    let mut state = if finetune {
        AdamState::new(model)
    } else {
        AdamState::new(&model.head)
    };

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Model)> = None;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..fit.len()).collect();
        rng::fisher_yates(
            &mut order,
            &mut rng::seeded(rng::derive_seed(cfg.seed, &[STREAM_SHUFFLE, epoch as u64])),
        );
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &fit[i]).collect();
            let seeds: Vec<u64> = (0..batch.len())
                .map(|k| {
                    rng::derive_seed(
                        cfg.seed,
                        &[STREAM_DROPOUT, epoch as u64, b as u64, k as u64],
                    )
                })
                .collect();
            let at = |e: Error| match e {
                Error::NonFinite(m) => {
                    Error::NonFinite(format!("{m} at epoch {epoch}, batch {}", b + 1))
                }
                e => e,
            };
            let r = batch_loss_grad(model, &batch, &seeds, Mode::Train, finetune, cfg.execution)
                .map_err(at)?;
            if !r.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {}",
                    b + 1
                )));
            }
            total += r.loss * batch.len() as f64;
            if finetune {
                opt.step(model, &r.grads, &mut state).map_err(at)?;
            } else {
                opt.step(&mut model.head, &r.grads.head, &mut state)
                    .map_err(at)?;
            }
        }
        let train_loss = total / fit.len() as f64;
        let val_loss = mse_of(model, &val, cfg.execution).map_err(|e| match e {
            Error::NonFinite(m) => {
                Error::NonFinite(format!("{m} during validation at epoch {epoch}"))
            }
            e => e,
        })?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "validation loss at epoch {epoch}"
            )));
        }
        let test_rmse = test_set
            .map(|t| evaluate(model, t, cfg.execution))
            .transpose()?
            .map(|m| m.rmse);
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            test_rmse,
        });
        if best.as_ref().is_none_or(|(_, v, _)| val_loss < *v) {
            best = Some((epoch, val_loss, model.clone()));
        }
    }
    let (best_epoch, best_val_loss, best_model) =
        best.unwrap_or_else(|| (0, f64::INFINITY, model.clone()));
    Ok(TrainHistory {
        epochs,
        best_epoch,
        best_val_loss,
        best_model,
        train_ids: fit.iter().map(|s| s.id.clone()).collect(),
        val_ids: val_idx.iter().map(|&i| train_set[i].id.clone()).collect(),
    })
}
