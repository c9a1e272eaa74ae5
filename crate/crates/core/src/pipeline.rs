//! End-to-end runs behind the command-line tool: each function validates
//! its inputs, does the work and writes its artifacts.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use crate::data::{
    boxplot_stats, clean_dataset, load_dataset, split_dataset, synthetic_dataset,
    write_boxplot_csv, write_dataset, BoxStats, Dataset, Formulation, Removal,
};
use crate::encoder::{load_pretrained_embeddings, Encoder, EncoderConfig};
use crate::heads::{head_init, HeadConfig, HeadKind};
use crate::parallel::Execution;
use crate::tokenizer::{build_vocab, load_vocab, Vocabulary};
use crate::train::{
    encoder_seed, gradient_check, head_seed, predict, prepare_samples, rmse, sweep, target_mean,
    train, write_history_csv, write_sweep_csv, EmbeddingSource, EncoderMode, GradCheckOptions,
    GradCheckReport, Model, Sample, SweepRow, TrainConfig,
};
use crate::{Error, Result};

pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Held-out fraction used by sweeps when no test set is configured.
pub const DEFAULT_SWEEP_TEST_FRACTION: f64 = 0.3;

/// Formulations used by a gradient check.
const GRADCHECK_SAMPLES: usize = 3;

fn toy_encoder() -> EncoderConfig {
    EncoderConfig::toy()
}

fn kan_head() -> HeadConfig {
    HeadConfig::new(HeadKind::Kan)
}

/// One JSON file describing a run. Relative paths resolve against the
/// file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    /// Separate test file. Takes precedence over `test_fraction`.
    #[serde(default)]
    pub test_dataset: Option<PathBuf>,
    /// Fraction of `dataset` held out as a test set.
    #[serde(default)]
    pub test_fraction: Option<f64>,
    /// Vocabulary file; built from the data when absent.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    /// CEMB file of pretrained token embeddings. Implies a frozen encoder.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "toy_encoder")]
    pub encoder: EncoderConfig,
    #[serde(default = "kan_head")]
    pub head: HeadConfig,
}

impl RunConfig {
    pub fn new(dataset: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            dataset: dataset.into(),
            test_dataset: None,
            test_fraction: None,
            vocab: None,
            embeddings: None,
            output_dir: output_dir.into(),
            train: TrainConfig::default(),
            encoder: toy_encoder(),
            head: kan_head(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Schema {
            line: e.line(),
            msg: format!("{}: {e}", path.display()),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.dataset);
        resolve(&mut cfg.output_dir);
        for p in [&mut cfg.test_dataset, &mut cfg.vocab, &mut cfg.embeddings]
            .into_iter()
            .flatten()
        {
            resolve(p);
        }
        Ok(cfg)
    }

    /// Checks values and that every input file exists, before any work.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.encoder.validate()?;
        self.head.validate()?;
        if let Some(f) = self.test_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidValue(format!(
                    "test_fraction must be in (0, 1), got {f}"
                )));
            }
        }
        let inputs = [
            Some(&self.dataset),
            self.test_dataset.as_ref(),
            self.vocab.as_ref(),
            self.embeddings.as_ref(),
        ];
        for p in inputs.into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
                ));
            }
        }
        Ok(())
    }

    /// Training config with the encoder mode forced to frozen when
    /// pretrained embeddings are used.
    fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if self.embeddings.is_some() && t.encoder_mode != EncoderMode::Frozen {
            log::info!("pretrained embeddings given; encoder is frozen");
            t.encoder_mode = EncoderMode::Frozen;
        }
        t
    }
}

struct Prepared {
    train: Vec<Sample>,
    test: Option<Vec<Sample>>,
    model: Model,
    meta: CheckpointMeta,
    cfg: TrainConfig,
}

fn load_split(
    cfg: &RunConfig,
    fallback_test_fraction: Option<f64>,
) -> Result<(Dataset, Option<Dataset>)> {
    let data = load_dataset(&cfg.dataset)?;
    if let Some(p) = &cfg.test_dataset {
        return Ok((data, Some(load_dataset(p)?)));
    }
    match cfg.test_fraction.or(fallback_test_fraction) {
        Some(f) => {
            let (train, test) = split_dataset(&data, 1.0 - f, cfg.train.seed)?;
            Ok((train, Some(test)))
        }
        None => Ok((data, None)),
    }
}

fn corpus_vocab(sets: &[&[Formulation]]) -> Result<Vocabulary> {
    let smiles: Vec<&str> = sets
        .iter()
        .flat_map(|s| s.iter())
        .flat_map(|f| f.components.iter().map(|c| c.smiles.as_str()))
        .collect();
    build_vocab(&smiles)
}

/// Builds the initial model and samples for a run.
fn prepare(
    cfg: &RunConfig,
    train_fs: &[Formulation],
    test_fs: Option<&[Formulation]>,
) -> Result<Prepared> {
    let tcfg = cfg.effective_train();
    let exec = tcfg.execution;
    let (source, encoder, width, vocab) = match &cfg.embeddings {
        Some(p) => {
            let table = load_pretrained_embeddings(p)?;
            let width = table.width;
            (EmbeddingSource::Pretrained(table), None, width, None)
        }
        None => {
            let vocab = match &cfg.vocab {
                Some(p) => load_vocab(p)?,
                None => corpus_vocab(&[train_fs, test_fs.unwrap_or(&[])])?,
            };
            let encoder = Encoder::init(cfg.encoder.clone(), vocab.len(), encoder_seed(tcfg.seed))?;
            let width = encoder.width();
            (
                EmbeddingSource::Encoder(vocab.clone()),
                Some(encoder),
                width,
                Some(vocab),
            )
        }
    };
    let samples = |fs: &[Formulation]| {
        prepare_samples(
            fs,
            &source,
            encoder.as_ref(),
            tcfg.encoder_mode,
            tcfg.pooling_mode,
            exec,
        )
    };
    let train_samples = samples(train_fs)?;
    let test_samples = test_fs.map(samples).transpose()?;

    let mut head = head_init(&cfg.head, width, head_seed(tcfg.seed))?;
    head.set_output_bias(target_mean(&train_samples));
    let meta = CheckpointMeta {
        head: cfg.head.clone(),
        input_width: width,
        encoder: encoder.as_ref().map(|e| e.config.clone()),
        encoder_vocab_size: encoder.as_ref().map(Encoder::vocab_size),
        vocab: vocab.as_ref().map(CheckpointMeta::vocab_tokens),
        encoder_mode: tcfg.encoder_mode,
        pooling_mode: tcfg.pooling_mode,
        embeddings: cfg.embeddings.as_ref().map(|p| p.display().to_string()),
    };
    Ok(Prepared {
        train: train_samples,
        test: test_samples,
        model: Model { encoder, head },
        meta,
        cfg: tcfg,
    })
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestReport {
    pub input: usize,
    pub kept: usize,
    pub removals: Vec<Removal>,
}

/// Loads, de-duplicates and re-emits a dataset.
pub fn run_ingest(data: &Path, out: &Path) -> Result<IngestReport> {
    let d = load_dataset(data)?;
    let (clean, removals) = clean_dataset(&d);
    write_dataset(&clean, out)?;
    Ok(IngestReport {
        input: d.len(),
        kept: clean.len(),
        removals,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// RMSE of the best checkpoint on the test set, if there is one.
    pub test_rmse: Option<f64>,
    pub history: PathBuf,
    pub checkpoint: PathBuf,
}

/// Trains and writes `history.csv` plus the best-validation checkpoint.
pub fn run_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let (train_d, test_d) = load_split(cfg, None)?;
    let p = prepare(
        cfg,
        &train_d.formulations,
        test_d.as_ref().map(|d| d.formulations.as_slice()),
    )?;
    create_dir(&cfg.output_dir)?;

    let mut model = p.model;
    let history = train(&mut model, &p.train, p.test.as_deref(), &p.cfg)?;
    let test_rmse = p
        .test
        .as_deref()
        .map(|t| crate::train::evaluate(&history.best_model, t, p.cfg.execution))
        .transpose()?
        .map(|m| m.rmse);

    let history_path = cfg.output_dir.join(HISTORY_FILE);
    let mut w = create_file(&history_path)?;
    write_history_csv(&history, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&history_path, e))?;
    let checkpoint_path = cfg.output_dir.join(CHECKPOINT_FILE);
    save_checkpoint(
        &Checkpoint {
            meta: p.meta,
            model: history.best_model.clone(),
        },
        &checkpoint_path,
    )?;
    Ok(TrainSummary {
        epochs: history.epochs.len(),
        best_epoch: history.best_epoch,
        best_val_loss: history.best_val_loss,
        test_rmse,
        history: history_path,
        checkpoint: checkpoint_path,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub rmse: f64,
    pub rows: usize,
}

/// Scores a checkpoint on a dataset and optionally writes the parity CSV
/// `id,actual_lce,predicted_lce`. `embeddings` overrides the CEMB path
/// stored in the checkpoint.
pub fn run_eval(
    checkpoint: &Path,
    data: &Path,
    parity_csv: Option<&Path>,
    embeddings: Option<&Path>,
    exec: Execution,
) -> Result<EvalSummary> {
    let ck = load_checkpoint(checkpoint)?;
    let d = load_dataset(data)?;
    let source = match (embeddings.map(Path::to_path_buf), &ck.meta.embeddings) {
        (Some(p), _) => EmbeddingSource::Pretrained(load_pretrained_embeddings(&p)?),
        (None, Some(p)) => EmbeddingSource::Pretrained(load_pretrained_embeddings(Path::new(p))?),
        (None, None) => EmbeddingSource::Encoder(ck.meta.vocabulary()?.ok_or_else(|| {
            Error::Checkpoint("checkpoint has neither a vocabulary nor an embeddings file".into())
        })?),
    };
    if let EmbeddingSource::Pretrained(t) = &source {
        if t.width != ck.meta.input_width {
            return Err(Error::Dimension(format!(
                "embeddings have width {}, checkpoint expects {}",
                t.width, ck.meta.input_width
            )));
        }
    }
    let samples = prepare_samples(
        &d.formulations,
        &source,
        ck.model.encoder.as_ref(),
        ck.meta.encoder_mode,
        ck.meta.pooling_mode,
        exec,
    )?;
    let preds = predict(&ck.model, &samples, exec)?;
    let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
    let score = rmse(&preds, &targets)?;
    if let Some(path) = parity_csv {
        let mut w = create_file(path)?;
        let mut write = || -> std::io::Result<()> {
            writeln!(w, "id,actual_lce,predicted_lce")?;
            for ((s, y), p) in samples.iter().zip(&targets).zip(&preds) {
                writeln!(w, "{},{y},{p}", s.id)?;
            }
            w.flush()
        };
        write().map_err(|e| Error::io(path, e))?;
    }
    Ok(EvalSummary {
        rmse: score,
        rows: samples.len(),
    })
}

/// Depth by width sweep for one head kind. Writes `sweep_<kind>.csv` to
/// the output directory and returns the rows.
pub fn run_sweep(
    cfg: &RunConfig,
    kind: HeadKind,
    depths: &[usize],
    widths: &[usize],
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let (train_d, test_d) = load_split(cfg, Some(DEFAULT_SWEEP_TEST_FRACTION))?;
    let test_d = test_d.expect("a test fraction is always available");
    let head = HeadConfig {
        kind,
        ..cfg.head.clone()
    };
    let run = RunConfig {
        head: head.clone(),
        ..cfg.clone()
    };
    let p = prepare(&run, &train_d.formulations, Some(&test_d.formulations))?;
    let rows = sweep(
        &p.train,
        p.test.as_deref().unwrap_or_default(),
        p.model.encoder.as_ref(),
        &head,
        p.meta.input_width,
        depths,
        widths,
        &p.cfg,
    )?;
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join(format!("sweep_{kind}.csv"));
    let mut w = create_file(&path)?;
    write_sweep_csv(&rows, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// Box-plot statistics of LCE grouped by component count.
pub fn run_boxplot(data: &Path, out: Option<&Path>) -> Result<Vec<BoxStats>> {
    let d = load_dataset(data)?;
    let stats = boxplot_stats(&d)?;
    if let Some(path) = out {
        let mut w = create_file(path)?;
        write_boxplot_csv(&stats, &mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(stats)
}

/// Gradient check of a freshly initialized encoder and head on a few
/// formulations, with the encoder trainable. Without a config this is the
/// toy encoder with a KAN head on synthetic data.
pub fn run_gradcheck(cfg: Option<&RunConfig>, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let seed = cfg.map_or(0, |c| c.train.seed);
    let (enc_cfg, head_cfg, pooling) = match cfg {
        Some(c) => (c.encoder.clone(), c.head.clone(), c.train.pooling_mode),
        None => (toy_encoder(), kan_head(), Default::default()),
    };
    let fs = match cfg {
        Some(c) => {
            c.validate()?;
            let d = load_dataset(&c.dataset)?;
            d.formulations.into_iter().take(GRADCHECK_SAMPLES).collect()
        }
        None => synthetic_dataset(GRADCHECK_SAMPLES, seed).formulations,
    };
    let vocab = match cfg.and_then(|c| c.vocab.as_ref()) {
        Some(p) => load_vocab(p)?,
        None => corpus_vocab(&[&fs])?,
    };
    let encoder = Encoder::init(enc_cfg, vocab.len(), encoder_seed(seed))?;
    let samples = prepare_samples(
        &fs,
        &EmbeddingSource::Encoder(vocab),
        Some(&encoder),
        EncoderMode::Finetune,
        pooling,
        Execution::Sequential,
    )?;
    let model = Model {
        head: head_init(&head_cfg, encoder.width(), head_seed(seed))?,
        encoder: Some(encoder),
    };
    gradient_check(&model, &samples, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_paths_resolve_against_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("d.jsonl");
        write_dataset(&synthetic_dataset(4, 1), &data).unwrap();
        let cfg_path = dir.path().join("run.json");
        fs::write(
            &cfg_path,
            r#"{"dataset": "d.jsonl", "output_dir": "out", "train": {"epochs": 2}}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(&cfg_path).unwrap();
        assert_eq!(cfg.dataset, data);
        assert_eq!(cfg.output_dir, dir.path().join("out"));
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.encoder, EncoderConfig::toy());
        assert_eq!(cfg.head.kind, HeadKind::Kan);
        cfg.validate().unwrap();
    }

    #[test]
    fn validation_catches_bad_inputs_before_work() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::new(dir.path().join("missing.jsonl"), dir.path().join("out"));
        assert!(matches!(cfg.validate(), Err(Error::Io { .. })));
        cfg.dataset = dir.path().join("d.jsonl");
        write_dataset(&synthetic_dataset(4, 1), &cfg.dataset).unwrap();
        cfg.test_fraction = Some(1.5);
        assert!(matches!(cfg.validate(), Err(Error::InvalidValue(_))));
        cfg.test_fraction = None;
        cfg.vocab = Some(dir.path().join("nope.vocab"));
        assert!(cfg.validate().is_err());
        assert!(!cfg.output_dir.exists());
    }

    #[test]
    fn train_then_eval_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("d.jsonl");
        write_dataset(&synthetic_dataset(8, 2), &data).unwrap();
        let mut cfg = RunConfig::new(&data, dir.path().join("out"));
        cfg.train.epochs = 3;
        let s = run_train(&cfg).unwrap();
        assert_eq!(s.epochs, 3);
        assert!(s.test_rmse.is_none());
        let parity = dir.path().join("parity.csv");
        let e = run_eval(
            &s.checkpoint,
            &data,
            Some(&parity),
            None,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(e.rows, 8);
        assert_eq!(fs::read_to_string(parity).unwrap().lines().count(), 9);
    }
}
