//! Electrolyte formulation datasets.
//!
//! Records are stored as JSON Lines, one formulation per line:
//!
//! ```text
//! {"id":"f1","components":[{"smiles":"CCO","molar_ratio":1.0}],"ce":0.9}
//! ```
//!
//! Each record carries exactly one of `ce` or `lce`; the other is derived
//! on load with [`lce_from_ce`] / [`ce_from_lce`].

mod stats;
mod synthetic;

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::tokenizer;
use crate::{Error, Result};

pub use stats::{boxplot_stats, write_boxplot_csv, BoxStats};
pub use synthetic::{synthetic_dataset, SYNTHETIC_ALPHABET};

pub const MAX_COMPONENTS: usize = 16;
/// Component counts observed in the reference literature dataset; counts
/// outside this range load with a warning.
pub const TYPICAL_COMPONENTS: std::ops::RangeInclusive<usize> = 2..=7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElectrolyteComponent {
    pub smiles: String,
    pub molar_ratio: f64,
}

/// Which target field a record was loaded with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    Ce,
    Lce,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Formulation {
    pub id: String,
    pub components: Vec<ElectrolyteComponent>,
    pub target_ce: f64,
    pub target_lce: f64,
    pub source: TargetKind,
}

impl Formulation {
    /// Builds a formulation from an LCE target.
    pub fn with_lce(
        id: impl Into<String>,
        components: Vec<ElectrolyteComponent>,
        lce: f64,
    ) -> Result<Self> {
        let f = Formulation {
            id: id.into(),
            components,
            target_ce: ce_from_lce(lce)?,
            target_lce: lce,
            source: TargetKind::Lce,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.molar_ratio).collect()
    }

    fn validate(&self) -> Result<()> {
        let n = self.components.len();
        if n == 0 {
            return Err(Error::InvalidValue(format!(
                "formulation `{}` has no components",
                self.id
            )));
        }
        if n > MAX_COMPONENTS {
            return Err(Error::InvalidValue(format!(
                "formulation `{}` has {n} components (max {MAX_COMPONENTS})",
                self.id
            )));
        }
        for c in &self.components {
            if c.smiles.is_empty() {
                return Err(Error::InvalidValue(format!(
                    "formulation `{}` has an empty SMILES",
                    self.id
                )));
            }
            if !(c.molar_ratio >= 0.0 && c.molar_ratio.is_finite()) {
                return Err(Error::InvalidValue(format!(
                    "formulation `{}`: molar_ratio must be finite and >= 0, got {}",
                    self.id, c.molar_ratio
                )));
            }
            tokenizer::tokenize(&c.smiles)?;
        }
        if self.components.iter().map(|c| c.molar_ratio).sum::<f64>() <= 0.0 {
            return Err(Error::InvalidValue(format!(
                "formulation `{}`: molar ratios sum to zero",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub provenance: String,
    pub formulations: Vec<Formulation>,
}

impl Dataset {
    /// Builds a dataset, rejecting duplicate ids.
    pub fn new(
        name: impl Into<String>,
        provenance: impl Into<String>,
        formulations: Vec<Formulation>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for f in &formulations {
            if !seen.insert(f.id.as_str()) {
                return Err(Error::DuplicateId(f.id.clone()));
            }
        }
        Ok(Dataset {
            name: name.into(),
            provenance: provenance.into(),
            formulations,
        })
    }

    pub fn len(&self) -> usize {
        self.formulations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.formulations.is_empty()
    }

    /// Distinct SMILES in first-seen order.
    pub fn distinct_smiles(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for c in self.formulations.iter().flat_map(|f| &f.components) {
            if seen.insert(c.smiles.as_str()) {
                out.push(c.smiles.clone());
            }
        }
        out
    }

    fn subset(&self, suffix: &str, idx: &[usize]) -> Dataset {
        Dataset {
            name: format!("{}-{suffix}", self.name),
            provenance: self.provenance.clone(),
            formulations: idx.iter().map(|&i| self.formulations[i].clone()).collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    components: Vec<ElectrolyteComponent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ce: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lce: Option<f64>,
}

/// `-log10(1 - ce)`.
pub fn lce_from_ce(ce: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&ce) {
        return Err(Error::InvalidValue(if ce >= 1.0 {
            format!("ce must be < 1, got {ce}")
        } else {
            format!("ce must be >= 0, got {ce}")
        }));
    }
    // 1 - ce is exact for ce >= 0.5; below that ln_1p keeps the
    // relative precision of small efficiencies.
    if ce >= 0.5 {
        Ok(-(1.0 - ce).log10())
    } else {
        Ok(-(-ce).ln_1p() / std::f64::consts::LN_10)
    }
}

/// `1 - 10^(-lce)`, the inverse of [`lce_from_ce`].
pub fn ce_from_lce(lce: f64) -> Result<f64> {
    if !(lce >= 0.0 && lce.is_finite()) {
        return Err(Error::InvalidValue(format!(
            "lce must be finite and >= 0, got {lce}"
        )));
    }
    // -expm1(-lce ln 10) keeps full relative precision for small lce.
    Ok(-(-lce * std::f64::consts::LN_10).exp_m1())
}

fn parse_line(line: &str, lineno: usize) -> Result<Formulation> {
    let schema = |msg: String| Error::Schema { line: lineno, msg };
    let rec: Record = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
    if rec.components.is_empty() {
        return Err(schema(format!("`{}`: empty components", rec.id)));
    }
    let (ce, lce, source) = match (rec.ce, rec.lce) {
        (Some(ce), None) => (
            ce,
            lce_from_ce(ce).map_err(|e| schema(e.to_string()))?,
            TargetKind::Ce,
        ),
        (None, Some(lce)) => (
            ce_from_lce(lce).map_err(|e| schema(e.to_string()))?,
            lce,
            TargetKind::Lce,
        ),
        _ => {
            return Err(schema(format!(
                "`{}`: exactly one of `ce` or `lce` is required",
                rec.id
            )))
        }
    };
    let f = Formulation {
        id: rec.id,
        components: rec.components,
        target_ce: ce,
        target_lce: lce,
        source,
    };
    f.validate().map_err(|e| schema(e.to_string()))?;
    if !TYPICAL_COMPONENTS.contains(&f.components.len()) {
        warn!(
            "line {lineno}: formulation `{}` has {} components (typical range {}..={})",
            f.id,
            f.components.len(),
            TYPICAL_COMPONENTS.start(),
            TYPICAL_COMPONENTS.end()
        );
    }
    Ok(f)
}

/// Loads a JSON Lines dataset. Blank lines are skipped; errors carry the
/// 1-based line number.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut formulations = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let f = parse_line(&line, i + 1)?;
        if !seen.insert(f.id.clone()) {
            return Err(Error::Schema {
                line: i + 1,
                msg: Error::DuplicateId(f.id).to_string(),
            });
        }
        formulations.push(f);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset {
        name,
        provenance: format!("loaded from {}", path.display()),
        formulations,
    })
}

/// Writes `d` in the same JSON Lines schema, keeping each record's
/// original target field.
pub fn write_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for f in &d.formulations {
        let rec = Record {
            id: f.id.clone(),
            components: f.components.clone(),
            ce: (f.source == TargetKind::Ce).then_some(f.target_ce),
            lce: (f.source == TargetKind::Lce).then_some(f.target_lce),
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Deterministic split into `(train, test)` with `round(n * train_fraction)`
/// training entries. Indices are permuted with [`rng::fisher_yates`] on a
/// ChaCha8 stream seeded with `seed`; both parts keep the input order.
pub fn split_dataset(d: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if d.is_empty() {
        return Err(Error::Empty("cannot split an empty dataset".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidValue(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n = d.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    let (mut train, mut test) = split_indices(n, n_train, seed);
    train.sort_unstable();
    test.sort_unstable();
    Ok((d.subset("train", &train), d.subset("test", &test)))
}

/// Shuffled `0..n` cut after `first` entries.
pub(crate) fn split_indices(n: usize, first: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    rng::fisher_yates(&mut idx, &mut rng::seeded(seed));
    let rest = idx.split_off(first.min(n));
    (idx, rest)
}

/// Scales ratios to molar fractions summing to one.
pub fn normalize_ratios(f: &Formulation) -> Result<Formulation> {
    let ratios = normalized(&f.ratios()).ok_or_else(|| {
        Error::InvalidValue(format!("formulation `{}`: all molar ratios are zero", f.id))
    })?;
    let mut out = f.clone();
    for (c, r) in out.components.iter_mut().zip(ratios) {
        c.molar_ratio = r;
    }
    Ok(out)
}

/// `ratios / sum(ratios)`, or `None` if the sum is not positive.
pub fn normalized(ratios: &[f64]) -> Option<Vec<f64>> {
    let sum: f64 = ratios.iter().sum();
    if !(sum > 0.0 && sum.is_finite()) {
        return None;
    }
    let mut out: Vec<f64> = ratios.iter().map(|r| r / sum).collect();
    // Fold the rounding residue into the largest entry so the sum is 1.
    let residue = 1.0 - out.iter().sum::<f64>();
    if residue != 0.0 {
        let imax = (0..out.len()).fold(0, |m, i| if out[i] > out[m] { i } else { m });
        out[imax] += residue;
    }
    Some(out)
}

/// One dropped record from [`clean_dataset`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Removal {
    pub id: String,
    pub duplicate_of: String,
}

fn dedup_key(f: &Formulation) -> Vec<(String, i64)> {
    let ratios = normalized(&f.ratios()).unwrap_or_else(|| f.ratios());
    let mut key: Vec<(String, i64)> = f
        .components
        .iter()
        .zip(ratios)
        .map(|(c, r)| (c.smiles.clone(), (r * 1e9).round() as i64))
        .collect();
    key.sort();
    key
}

/// Drops formulations whose (SMILES, normalized ratio) multiset repeats an
/// earlier entry. The first occurrence is kept.
pub fn clean_dataset(d: &Dataset) -> (Dataset, Vec<Removal>) {
    let mut first_by_key: std::collections::HashMap<Vec<(String, i64)>, String> =
        Default::default();
    let mut kept = Vec::with_capacity(d.len());
    let mut report = Vec::new();
    for f in &d.formulations {
        match first_by_key.entry(dedup_key(f)) {
            std::collections::hash_map::Entry::Occupied(e) => report.push(Removal {
                id: f.id.clone(),
                duplicate_of: e.get().clone(),
            }),
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(f.id.clone());
                kept.push(f.clone());
            }
        }
    }
    (
        Dataset {
            name: d.name.clone(),
            provenance: d.provenance.clone(),
            formulations: kept,
        },
        report,
    )
}
