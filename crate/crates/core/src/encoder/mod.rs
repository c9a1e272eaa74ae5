//! Rotary linear-attention transformer encoder producing per-token
//! embeddings, and the CEMB file of pretrained embeddings.
//!
//! Each block is pre-norm: `h += Wo · attn(LN1(h))`, then
//! `h += W2 · gelu(W1 · LN2(h))`, with a final layer norm on top.
//! Padding rows never act as keys, so the embeddings of the real tokens
//! do not depend on how much padding a batch adds.

mod attention;
mod cemb;

use serde::{Deserialize, Serialize};

use crate::nn::{gelu, gelu_grad, LayerNorm, LayerNormCache, Linear};
use crate::parallel::{self, Execution};
use crate::rng;
use crate::tensor::{prefixed, Params, Tensor};
use crate::tokenizer::{TokenSequence, MAX_TOKENS, PAD};
use crate::{Error, Result};

pub use attention::{
    attention_bruteforce, linear_attention, rotary_rotate, AttentionInputs, ROTARY_BASE,
};
pub use cemb::{
    load_pretrained_embeddings, read_embeddings, write_embeddings, EmbeddingTable, CEMB_MAGIC,
    CEMB_VERSION,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    #[default]
    EluPlusOne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    pub feature_map: FeatureMap,
}

impl Default for EncoderConfig {
    /// Full-size encoder: width 768, 12 heads, 12 layers.
    fn default() -> Self {
        EncoderConfig {
            embed_dim: 768,
            num_heads: 12,
            num_layers: 12,
            ffn_mult: 4,
            max_len: MAX_TOKENS,
            feature_map: FeatureMap::EluPlusOne,
        }
    }
}

impl EncoderConfig {
    /// Width 16, 2 heads, 2 layers.
    pub fn toy() -> Self {
        EncoderConfig {
            embed_dim: 16,
            num_heads: 2,
            num_layers: 2,
            ..Default::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidValue(format!("encoder config: {m}")));
        if self.embed_dim == 0 || self.num_heads == 0 || self.num_layers == 0 || self.ffn_mult == 0
        {
            return bad("embed_dim, num_heads, num_layers and ffn_mult must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!(
                "head width {} must be even for rotary encoding",
                self.head_dim()
            ));
        }
        if self.max_len == 0 {
            return bad("max_len must be at least 1".into());
        }
        Ok(())
    }
}

/// Token vectors of one molecule, `[L, H]`, with a validity flag per row.
/// Rows of padding are zero and flagged invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbeddings {
    pub values: Tensor,
    pub valid: Vec<bool>,
}

impl TokenEmbeddings {
    /// All rows valid.
    pub fn new(values: Tensor) -> Self {
        let valid = vec![true; values.rows()];
        TokenEmbeddings { values, valid }
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm2: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl Params for EncoderBlock {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("norm1", self.norm1.params());
        v.extend(prefixed("query", self.query.params()));
        v.extend(prefixed("key", self.key.params()));
        v.extend(prefixed("value", self.value.params()));
        v.extend(prefixed("output", self.output.params()));
        v.extend(prefixed("norm2", self.norm2.params()));
        v.extend(prefixed("ffn_in", self.ffn_in.params()));
        v.extend(prefixed("ffn_out", self.ffn_out.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed("norm1", self.norm1.params_mut());
        v.extend(prefixed("query", self.query.params_mut()));
        v.extend(prefixed("key", self.key.params_mut()));
        v.extend(prefixed("value", self.value.params_mut()));
        v.extend(prefixed("output", self.output.params_mut()));
        v.extend(prefixed("norm2", self.norm2.params_mut()));
        v.extend(prefixed("ffn_in", self.ffn_in.params_mut()));
        v.extend(prefixed("ffn_out", self.ffn_out.params_mut()));
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    /// `[vocab, H]`
    pub embedding: Tensor,
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNorm,
}

struct BlockCache {
    norm1: LayerNormCache,
    x1: Tensor,
    heads: Vec<(AttentionInputs, attention::AttentionCache)>,
    attn: Tensor,
    norm2: LayerNormCache,
    x2: Tensor,
    pre_act: Tensor,
    act: Tensor,
}

/// Activations of one sequence kept for [`Encoder::backward`].
pub(crate) struct EncoderCache {
    ids: Vec<u32>,
    valid: Vec<bool>,
    blocks: Vec<BlockCache>,
    final_norm: LayerNormCache,
}

impl Encoder {
    /// Token embeddings ~ Normal(0, 1); linear weights ~ Normal(0, 1/fan_in)
    /// with zero biases; layer norms start at gain 1, bias 0. Draw order:
    /// embedding table, then per block query, key, value, output, ffn_in,
    /// ffn_out.
    pub fn init(config: EncoderConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::InvalidValue("encoder vocabulary is empty".into()));
        }
        let h = config.embed_dim;
        let f = h * config.ffn_mult;
        let mut r = rng::seeded(seed);
        let embedding = Tensor::from_vec(
            &[vocab_size, h],
            (0..vocab_size * h)
                .map(|_| rng::normal(&mut r, 1.0))
                .collect(),
        );
        let blocks = (0..config.num_layers)
            .map(|_| EncoderBlock {
                norm1: LayerNorm::new(h),
                query: Linear::init(h, h, &mut r),
                key: Linear::init(h, h, &mut r),
                value: Linear::init(h, h, &mut r),
                output: Linear::init(h, h, &mut r),
                norm2: LayerNorm::new(h),
                ffn_in: Linear::init(h, f, &mut r),
                ffn_out: Linear::init(f, h, &mut r),
            })
            .collect();
        Ok(Encoder {
            config,
            embedding,
            blocks,
            final_norm: LayerNorm::new(h),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn width(&self) -> usize {
        self.config.embed_dim
    }

    /// Encodes a batch. Sequences are right-padded with `<pad>` to the
    /// longest one; every output has that many rows with padding flagged
    /// invalid and zeroed.
    pub fn encode(&self, seqs: &[TokenSequence], exec: Execution) -> Result<Vec<TokenEmbeddings>> {
        let len = seqs.iter().map(TokenSequence::len).max().unwrap_or(0);
        let results = parallel::map(exec, seqs, |s| {
            let mut ids = s.ids.clone();
            let mut valid = vec![true; ids.len()];
            ids.resize(len, PAD);
            valid.resize(len, false);
            self.encode_padded(&ids, &valid)
        });
        results.into_iter().collect()
    }

    /// Encodes one sequence whose rows flagged `false` in `valid` are
    /// padding.
    pub fn encode_padded(&self, ids: &[u32], valid: &[bool]) -> Result<TokenEmbeddings> {
        Ok(self.forward_cached(ids, valid)?.0)
    }

    pub(crate) fn forward_cached(
        &self,
        ids: &[u32],
        valid: &[bool],
    ) -> Result<(TokenEmbeddings, EncoderCache)> {
        let (l, h) = (ids.len(), self.width());
        if valid.len() != l {
            return Err(Error::Dimension(format!(
                "mask has {} rows for {l} tokens",
                valid.len()
            )));
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::InvalidValue(
                "sequence has no unmasked tokens".into(),
            ));
        }
        if valid.iter().filter(|&&v| v).count() > self.config.max_len {
            return Err(Error::Dimension(format!(
                "sequence of {l} tokens exceeds max_len {}",
                self.config.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.vocab_size()) {
            return Err(Error::Dimension(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.vocab_size()
            )));
        }

        let mut hidden = Tensor::zeros(&[l, h]);
        for (r, &id) in ids.iter().enumerate() {
            hidden
                .row_mut(r)
                .copy_from_slice(self.embedding.row(id as usize));
        }

        let hd = self.config.head_dim();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (x1, norm1) = block.norm1.forward_rows(&hidden);
            let (q, k, v) = (
                block.query.forward_rows(&x1),
                block.key.forward_rows(&x1),
                block.value.forward_rows(&x1),
            );
            let mut attn = Tensor::zeros(&[l, h]);
            let mut heads = Vec::with_capacity(self.config.num_heads);
            for head in 0..self.config.num_heads {
                let cols = head * hd..(head + 1) * hd;
                let inp = AttentionInputs {
                    q: slice_cols(&q, cols.clone()),
                    k: slice_cols(&k, cols.clone()),
                    v: slice_cols(&v, cols.clone()),
                };
                let (out, cache) = attention::linear_attention_cached(&inp, valid);
                for r in 0..l {
                    attn.row_mut(r)[cols.clone()].copy_from_slice(out.row(r));
                }
                heads.push((inp, cache));
            }
            hidden.add_assign(&block.output.forward_rows(&attn));
            let (x2, norm2) = block.norm2.forward_rows(&hidden);
            let pre_act = block.ffn_in.forward_rows(&x2);
            let mut act = pre_act.clone();
            act.data_mut().iter_mut().for_each(|x| *x = gelu(*x));
            hidden.add_assign(&block.ffn_out.forward_rows(&act));
            caches.push(BlockCache {
                norm1,
                x1,
                heads,
                attn,
                norm2,
                x2,
                pre_act,
                act,
            });
        }
        let (mut out, final_norm) = self.final_norm.forward_rows(&hidden);
        for (r, &ok) in valid.iter().enumerate() {
            if !ok {
                out.row_mut(r).fill(0.0);
            }
        }
        if !out.is_finite() {
            return Err(Error::NonFinite("encoder output".into()));
        }
        let cache = EncoderCache {
            ids: ids.to_vec(),
            valid: valid.to_vec(),
            blocks: caches,
            final_norm,
        };
        Ok((
            TokenEmbeddings {
                values: out,
                valid: valid.to_vec(),
            },
            cache,
        ))
    }

    /// Backpropagates `dout` (`[L, H]`, gradient of the loss with respect
    /// to the encoder output) and accumulates parameter gradients.
    pub(crate) fn backward(&self, cache: &EncoderCache, dout: &Tensor, grads: &mut Encoder) {
        let l = cache.ids.len();
        let hd = self.config.head_dim();
        let mut d = dout.clone();
        for (r, &ok) in cache.valid.iter().enumerate() {
            if !ok {
                d.row_mut(r).fill(0.0);
            }
        }
        let mut dh = self
            .final_norm
            .backward_rows(&cache.final_norm, &d, &mut grads.final_norm);

        for ((block, bc), bg) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(&mut grads.blocks)
            .rev()
        {
            // feed-forward residual
            let dact = block.ffn_out.backward_rows(&bc.act, &dh, &mut bg.ffn_out);
            let mut dpre = dact;
            for (g, x) in dpre.data_mut().iter_mut().zip(bc.pre_act.data()) {
                *g *= gelu_grad(*x);
            }
            let dx2 = block.ffn_in.backward_rows(&bc.x2, &dpre, &mut bg.ffn_in);
            dh.add_assign(&block.norm2.backward_rows(&bc.norm2, &dx2, &mut bg.norm2));

            // attention residual
            let dattn = block.output.backward_rows(&bc.attn, &dh, &mut bg.output);
            let h = self.width();
            let (mut dq, mut dk, mut dv) = (
                Tensor::zeros(&[l, h]),
                Tensor::zeros(&[l, h]),
                Tensor::zeros(&[l, h]),
            );
            for (head, (inp, hc)) in bc.heads.iter().enumerate() {
                let cols = head * hd..(head + 1) * hd;
                let dout_head = slice_cols(&dattn, cols.clone());
                let (gq, gk, gv) =
                    attention::linear_attention_backward(inp, &cache.valid, hc, &dout_head);
                for r in 0..l {
                    dq.row_mut(r)[cols.clone()].copy_from_slice(gq.row(r));
                    dk.row_mut(r)[cols.clone()].copy_from_slice(gk.row(r));
                    dv.row_mut(r)[cols.clone()].copy_from_slice(gv.row(r));
                }
            }
            let mut dx1 = block.query.backward_rows(&bc.x1, &dq, &mut bg.query);
            dx1.add_assign(&block.key.backward_rows(&bc.x1, &dk, &mut bg.key));
            dx1.add_assign(&block.value.backward_rows(&bc.x1, &dv, &mut bg.value));
            dh.add_assign(&block.norm1.backward_rows(&bc.norm1, &dx1, &mut bg.norm1));
        }

        for (r, &id) in cache.ids.iter().enumerate() {
            if cache.valid[r] {
                let g = grads.embedding.row_mut(id as usize);
                for (gi, di) in g.iter_mut().zip(dh.row(r)) {
                    *gi += di;
                }
            }
        }
    }
}

fn slice_cols(t: &Tensor, cols: std::ops::Range<usize>) -> Tensor {
    let mut out = Tensor::zeros(&[t.rows(), cols.len()]);
    for r in 0..t.rows() {
        out.row_mut(r).copy_from_slice(&t.row(r)[cols.clone()]);
    }
    out
}

impl Params for Encoder {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("embedding".to_string(), &self.embedding)];
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(prefixed(&format!("blocks.{i}"), b.params()));
        }
        v.extend(prefixed("final_norm", self.final_norm.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![("embedding".to_string(), &mut self.embedding)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(prefixed(&format!("blocks.{i}"), b.params_mut()));
        }
        v.extend(prefixed("final_norm", self.final_norm.params_mut()));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;
    use crate::tokenizer::{BOS, EOS};

    fn toy(seed: u64) -> Encoder {
        Encoder::init(EncoderConfig::toy(), 12, seed).unwrap()
    }

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence {
            ids: ids.to_vec(),
            truncated: false,
            unknown: 0,
        }
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        assert!(EncoderConfig::toy().validate().is_ok());
        let bad = EncoderConfig {
            embed_dim: 10,
            num_heads: 3,
            ..EncoderConfig::toy()
        };
        assert!(bad.validate().is_err());
        let odd = EncoderConfig {
            embed_dim: 6,
            num_heads: 2,
            ..EncoderConfig::toy()
        };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn output_shape_and_determinism() {
        let e = toy(1);
        let s = seq(&[BOS, 7, 8, 9, EOS]);
        let out = e.encode(&[s.clone(), s], Execution::Sequential).unwrap();
        assert_eq!((out[0].rows(), out[0].width()), (5, 16));
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn padding_does_not_leak() {
        let e = toy(2);
        let short = seq(&[BOS, 6, 7, EOS]);
        let long = seq(&[BOS, 8, 9, 10, 11, 6, 7, 8, EOS]);
        let alone = &e
            .encode(std::slice::from_ref(&short), Execution::Sequential)
            .unwrap()[0];
        let batched = &e.encode(&[short, long], Execution::Sequential).unwrap()[0];
        assert_eq!(batched.rows(), 9);
        assert_eq!(batched.valid_count(), 4);
        for r in 0..4 {
            for (a, b) in alone.values.row(r).iter().zip(batched.values.row(r)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        assert!(batched.values.row(6).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let e = toy(5);
        let ids = [BOS, 6, 7, 8, 9, 10, 11, EOS];
        let (_, cache) = e.forward_cached(&ids, &[true; 8]).unwrap();
        let mut r = rng::seeded(9);
        let dout = Tensor::from_vec(
            &[8, 16],
            (0..8 * 16).map(|_| rng::normal(&mut r, 1.0)).collect(),
        );
        let mut grads = e.zeros_like();
        e.backward(&cache, &dout, &mut grads);
        for (name, g) in grads.params() {
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "{name} has an all-zero gradient"
            );
        }
    }

    /// Frozen output of a seeded toy encoder; catches unintended numeric
    /// changes to any layer.
    #[test]
    fn golden_snapshot() {
        const GOLDEN: [(usize, [f64; 4]); 3] = [
            (
                0,
                [
                    -1.141_068_227_095_176_9,
                    -5.404_284_423_624_627e-1,
                    -4.588_322_231_280_001e-1,
                    -1.138_705_320_034_352,
                ],
            ),
            (
                3,
                [
                    -7.697_982_362_242_514e-1,
                    1.232_886_057_654_194_2,
                    -8.975_554_457_155_249e-1,
                    -1.176_730_939_801_477_4,
                ],
            ),
            (
                5,
                [
                    -8.216_358_121_200_068e-2,
                    1.312_798_722_422_859_9,
                    2.054_332_259_296_182_4e-1,
                    7.373_710_361_291_853e-1,
                ],
            ),
        ];
        let e = toy(2024);
        let out = &e
            .encode(&[seq(&[BOS, 6, 9, 11, 7, EOS])], Execution::Sequential)
            .unwrap()[0];
        for (r, want) in GOLDEN {
            for (got, want) in out.values.row(r).iter().zip(want) {
                assert!((got - want).abs() < 1e-9, "row {r}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn rejects_out_of_range_ids() {
        let e = toy(3);
        assert!(matches!(
            e.encode(&[seq(&[BOS, 99, EOS])], Execution::Sequential),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences_on_sampled_params() {
        let e = toy(4);
        let ids = [BOS, 6, 7, 11, 6, EOS, PAD];
        let valid = [true, true, true, true, true, true, false];
        let mut r = rng::seeded(8);
        let w: Vec<f64> = (0..ids.len() * 16)
            .map(|_| rng::normal(&mut r, 1.0))
            .collect();
        let loss = |e: &Encoder| dot(e.encode_padded(&ids, &valid).unwrap().values.data(), &w);
        let (_, cache) = e.forward_cached(&ids, &valid).unwrap();
        let mut grads = e.zeros_like();
        e.backward(
            &cache,
            &Tensor::from_vec(&[ids.len(), 16], w.clone()),
            &mut grads,
        );
        let gp = grads.params();
        let names: Vec<String> = e.params().iter().map(|(n, _)| n.clone()).collect();
        for (ti, name) in names.iter().enumerate() {
            let len = gp[ti].1.len();
            for k in [0, len / 3, len - 1] {
                let bump = |s: f64| {
                    let mut p = e.clone();
                    p.params_mut()[ti].1.data_mut()[k] += s;
                    loss(&p)
                };
                let num = (bump(1e-6) - bump(-1e-6)) / 2e-6;
                let ana = gp[ti].1.data()[k];
                assert!(
                    (num - ana).abs() <= 1e-5 * num.abs().max(ana.abs()).max(1e-3),
                    "{name}[{k}]: {num} vs {ana}"
                );
            }
        }
    }
}
