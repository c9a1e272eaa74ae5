//! From per-molecule token embeddings to one vector per formulation.
//!
//! CIDO packing encodes every component molecule as its own sequence in
//! one encoder batch and regroups the outputs per formulation afterwards.
//! The separator join is the alternative that splices all components into
//! one `<sep>`-delimited sequence.
//!
//! Pooling averages the valid token rows of each molecule and sums those
//! means weighted by the normalized molar ratios, so the result does not
//! depend on how many tokens each molecule has.

use std::ops::Range;

use crate::data::{normalized, Formulation};
use crate::encoder::TokenEmbeddings;
use crate::tensor::Tensor;
use crate::tokenizer::{self, TokenSequence, Vocabulary, BOS, EOS, MAX_TOKENS, SEP, UNK};
use crate::{Error, Result};

/// Provenance of one row of a [`PackedBatch`].
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub formulation: usize,
    pub component: usize,
    /// Molar fraction within the formulation.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedBatch {
    pub sequences: Vec<TokenSequence>,
    pub segments: Vec<Segment>,
    formulations: usize,
}

impl PackedBatch {
    pub fn num_formulations(&self) -> usize {
        self.formulations
    }
}

fn ratios_of(f: &Formulation) -> Result<Vec<f64>> {
    normalized(&f.ratios()).ok_or_else(|| {
        Error::InvalidValue(format!("formulation `{}`: all molar ratios are zero", f.id))
    })
}

fn encode_smiles(smiles: &str, v: &Vocabulary, id: &str) -> Result<TokenSequence> {
    let toks = tokenizer::tokenize(smiles)
        .map_err(|e| Error::InvalidValue(format!("formulation `{id}`: {e}")))?;
    Ok(tokenizer::encode(&toks, v))
}

/// One encoder row per component, in formulation then component order.
pub fn cido_pack(fs: &[Formulation], vocab: &Vocabulary) -> Result<PackedBatch> {
    let mut sequences = Vec::new();
    let mut segments = Vec::new();
    for (fi, f) in fs.iter().enumerate() {
        let ratios = ratios_of(f)?;
        for (ci, (c, ratio)) in f.components.iter().zip(ratios).enumerate() {
            sequences.push(encode_smiles(&c.smiles, vocab, &f.id)?);
            segments.push(Segment {
                formulation: fi,
                component: ci,
                ratio,
            });
        }
    }
    Ok(PackedBatch {
        sequences,
        segments,
        formulations: fs.len(),
    })
}

/// Regroups encoder outputs (aligned with `pb.sequences`) into
/// per-formulation `(embeddings, ratio)` lists in component order.
pub fn cido_unpack(
    embeddings: Vec<TokenEmbeddings>,
    pb: &PackedBatch,
) -> Result<Vec<Vec<(TokenEmbeddings, f64)>>> {
    if embeddings.len() != pb.segments.len() {
        return Err(Error::Dimension(format!(
            "{} embeddings for {} packed sequences",
            embeddings.len(),
            pb.segments.len()
        )));
    }
    let mut out: Vec<Vec<(TokenEmbeddings, f64)>> = vec![Vec::new(); pb.formulations];
    for (emb, seg) in embeddings.into_iter().zip(&pb.segments) {
        out[seg.formulation].push((emb, seg.ratio));
    }
    Ok(out)
}

/// A separator-joined formulation and, per surviving component, the rows
/// holding its chemical tokens with its molar fraction.
#[derive(Clone, Debug, PartialEq)]
pub struct JoinedSequence {
    pub sequence: TokenSequence,
    pub spans: Vec<(Range<usize>, f64)>,
}

/// `<bos> c1 <sep> c2 <sep> ... <eos>`, capped at [`MAX_TOKENS`]. When the
/// cap cuts components off entirely, their ratios are dropped and the rest
/// renormalized.
pub fn sep_join(f: &Formulation, vocab: &Vocabulary) -> Result<JoinedSequence> {
    let ratios = ratios_of(f)?;
    let mut ids = vec![BOS];
    let mut raw_spans = Vec::new();
    let mut unknown = 0;
    let mut truncated = false;
    let budget = MAX_TOKENS - 1;
    for (ci, (c, ratio)) in f.components.iter().zip(&ratios).enumerate() {
        if ci > 0 {
            if ids.len() >= budget {
                truncated = true;
                break;
            }
            ids.push(SEP);
        }
        let toks = tokenizer::tokenize(&c.smiles)
            .map_err(|e| Error::InvalidValue(format!("formulation `{}`: {e}", f.id)))?;
        let start = ids.len();
        for t in &toks {
            if ids.len() >= budget {
                truncated = true;
                break;
            }
            ids.push(vocab.id(t).unwrap_or_else(|| {
                unknown += 1;
                UNK
            }));
        }
        if ids.len() > start {
            raw_spans.push((start..ids.len(), *ratio));
        }
        if truncated {
            break;
        }
    }
    if ids.last() == Some(&SEP) {
        ids.pop();
    }
    ids.push(EOS);
    let weights =
        normalized(&raw_spans.iter().map(|(_, r)| *r).collect::<Vec<_>>()).ok_or_else(|| {
            Error::InvalidValue(format!(
                "formulation `{}`: no component survives the join",
                f.id
            ))
        })?;
    Ok(JoinedSequence {
        sequence: TokenSequence {
            ids,
            truncated,
            unknown,
        },
        spans: raw_spans.into_iter().map(|(r, _)| r).zip(weights).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FormulationEmbedding {
    pub vector: Vec<f64>,
}

/// Weighted mean over rows: `sum_k weight_k * mean(valid rows of span k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolSpan {
    /// Index of the sequence the rows belong to.
    pub sequence: usize,
    pub rows: Range<usize>,
    pub weight: f64,
}

fn valid_rows<'a>(
    emb: &'a TokenEmbeddings,
    rows: &'a Range<usize>,
) -> impl Iterator<Item = usize> + 'a {
    rows.clone().filter(move |&r| emb.valid[r])
}

pub(crate) fn pool_spans(embs: &[TokenEmbeddings], spans: &[PoolSpan]) -> Result<Vec<f64>> {
    let width = embs.first().map_or(0, TokenEmbeddings::width);
    let mut out = vec![0.0; width];
    for s in spans {
        let emb = &embs[s.sequence];
        if emb.width() != width {
            return Err(Error::Dimension(format!(
                "embedding width {} vs {width}",
                emb.width()
            )));
        }
        let count = valid_rows(emb, &s.rows).count();
        if count == 0 {
            return Err(Error::InvalidValue(
                "molecule has no valid token rows to pool".into(),
            ));
        }
        let scale = s.weight / count as f64;
        let mut mean = vec![0.0; width];
        for r in valid_rows(emb, &s.rows) {
            for (m, v) in mean.iter_mut().zip(emb.values.row(r)) {
                *m += v;
            }
        }
        for (o, m) in out.iter_mut().zip(mean) {
            *o += scale * m;
        }
    }
    Ok(out)
}

/// Gradient of [`pool_spans`] with respect to each sequence's rows.
pub(crate) fn pool_spans_backward(
    embs: &[TokenEmbeddings],
    spans: &[PoolSpan],
    dpooled: &[f64],
) -> Vec<Tensor> {
    let mut grads: Vec<Tensor> = embs
        .iter()
        .map(|e| Tensor::zeros(e.values.shape()))
        .collect();
    for s in spans {
        let emb = &embs[s.sequence];
        let count = valid_rows(emb, &s.rows).count();
        let scale = s.weight / count as f64;
        for r in valid_rows(emb, &s.rows) {
            for (g, d) in grads[s.sequence].row_mut(r).iter_mut().zip(dpooled) {
                *g += scale * d;
            }
        }
    }
    grads
}

/// Ratio-weighted sum of per-molecule token means. Raw ratios are
/// normalized to molar fractions first.
pub fn pool(per_mol: &[(TokenEmbeddings, f64)]) -> Result<FormulationEmbedding> {
    if per_mol.is_empty() {
        return Err(Error::Empty("nothing to pool".into()));
    }
    let weights = normalized(&per_mol.iter().map(|(_, r)| *r).collect::<Vec<_>>())
        .ok_or_else(|| Error::InvalidValue("molar ratios sum to zero".into()))?;
    let embs: Vec<TokenEmbeddings> = per_mol.iter().map(|(e, _)| e.clone()).collect();
    let spans: Vec<PoolSpan> = embs
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (e, w))| PoolSpan {
            sequence: i,
            rows: 0..e.rows(),
            weight: w,
        })
        .collect();
    Ok(FormulationEmbedding {
        vector: pool_spans(&embs, &spans)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_dataset, ElectrolyteComponent};
    use crate::tokenizer::build_vocab;

    fn emb(rows: &[&[f64]]) -> TokenEmbeddings {
        let w = rows[0].len();
        TokenEmbeddings::new(Tensor::from_vec(&[rows.len(), w], rows.concat()))
    }

    fn formulation(smiles: &[&str], ratios: &[f64]) -> Formulation {
        let comps = smiles
            .iter()
            .zip(ratios)
            .map(|(s, r)| ElectrolyteComponent {
                smiles: s.to_string(),
                molar_ratio: *r,
            })
            .collect();
        Formulation::with_lce("f", comps, 1.0).unwrap()
    }

    #[test]
    fn hand_computed_pool() {
        let a = emb(&[&[1.0], &[3.0]]);
        let b = emb(&[&[5.0]]);
        let out = pool(&[(a, 1.0), (b, 3.0)]).unwrap();
        assert_eq!(out.vector, vec![4.25]);
    }

    #[test]
    fn single_component_is_token_mean() {
        let a = emb(&[&[1.0, -1.0], &[2.0, 0.0], &[6.0, 4.0]]);
        assert_eq!(pool(&[(a.clone(), 1.0)]).unwrap().vector, vec![3.0, 1.0]);
        let twice = pool(&[(a.clone(), 0.5), (a, 0.5)]).unwrap();
        assert_eq!(twice.vector, vec![3.0, 1.0]);
    }

    #[test]
    fn padding_rows_are_ignored() {
        let mut a = emb(&[&[1.0], &[3.0], &[0.0]]);
        a.valid[2] = false;
        assert_eq!(pool(&[(a, 1.0)]).unwrap().vector, vec![2.0]);
        let mut empty = emb(&[&[1.0]]);
        empty.valid[0] = false;
        assert!(pool(&[(empty, 1.0)]).is_err());
    }

    #[test]
    fn pack_shapes() {
        let v = build_vocab(&["CCO", "[Li+]", "ClCCl"]).unwrap();
        let f3 = formulation(&["CCO", "[Li+]", "ClCCl"], &[1.0, 1.0, 2.0]);
        let pb = cido_pack(std::slice::from_ref(&f3), &v).unwrap();
        assert_eq!((pb.sequences.len(), pb.segments.len()), (3, 3));
        assert_eq!(pb.segments.iter().map(|s| s.ratio).sum::<f64>(), 1.0);

        let f2 = formulation(&["CCO", "[Li+]"], &[1.0, 1.0]);
        let pb = cido_pack(&[f2, f3], &v).unwrap();
        assert_eq!(pb.sequences.len(), 5);

        let embs: Vec<TokenEmbeddings> = (0..5).map(|i| emb(&[&[i as f64]])).collect();
        let groups = cido_unpack(embs, &pb).unwrap();
        assert_eq!(groups.len(), 2);
        let order: Vec<Vec<f64>> = groups
            .iter()
            .map(|g| g.iter().map(|(e, _)| e.values.data()[0]).collect())
            .collect();
        assert_eq!(order, vec![vec![0.0, 1.0], vec![2.0, 3.0, 4.0]]);
        assert!(cido_unpack(vec![], &pb).is_err());
    }

    #[test]
    fn pack_reports_formulation_on_bad_smiles() {
        let v = build_vocab(&["C"]).unwrap();
        let mut f = formulation(&["C"], &[1.0]);
        f.id = "bad-one".into();
        f.components[0].smiles = "C!".into();
        let err = cido_pack(&[f], &v).unwrap_err().to_string();
        assert!(err.contains("bad-one"), "{err}");
    }

    #[test]
    fn sep_join_layout() {
        let v = build_vocab(&["CCO", "OCC"]).unwrap();
        let one = sep_join(&formulation(&["CCO"], &[1.0]), &v).unwrap();
        assert_eq!(one.sequence.len(), 5);
        assert!(!one.sequence.ids.contains(&SEP));

        let two = sep_join(&formulation(&["CCO", "OCC"], &[1.0, 3.0]), &v).unwrap();
        assert_eq!(two.sequence.len(), 9);
        assert_eq!(two.sequence.ids[4], SEP);
        assert_eq!(two.spans, vec![(1..4, 0.25), (5..8, 0.75)]);
    }

    #[test]
    fn sep_join_truncates_at_cap() {
        let long = "C".repeat(150);
        let v = build_vocab(&["C", "O"]).unwrap();
        let j = sep_join(&formulation(&[&long, &long, "O"], &[1.0, 1.0, 1.0]), &v).unwrap();
        assert_eq!(j.sequence.len(), MAX_TOKENS);
        assert!(j.sequence.truncated);
        assert_eq!(j.spans.len(), 2);
        assert!((j.spans.iter().map(|s| s.1).sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn synthetic_formulations_pack() {
        let d = synthetic_dataset(6, 1);
        let v = build_vocab(&d.distinct_smiles()).unwrap();
        let pb = cido_pack(&d.formulations, &v).unwrap();
        let n: usize = d.formulations.iter().map(|f| f.components.len()).sum();
        assert_eq!(pb.sequences.len(), n);
        assert!(pb.sequences.iter().all(|s| s.unknown == 0));
    }
}
