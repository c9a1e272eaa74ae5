//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "CKPT" | version u32 | meta_len u32 | meta (JSON, UTF-8)
//! block_count u32
//! per block: name_len u32 | name | rank u32 | dims u32 x rank | values f64 x prod(dims)
//! ```
//!
//! The metadata is enough to rebuild the model skeleton; blocks must then
//! match its parameter names and shapes exactly, in order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::heads::{head_init, HeadConfig};
use crate::tensor::Params;
use crate::tokenizer::{Vocabulary, SPECIALS};
use crate::train::{EncoderMode, Model, PoolingMode};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub head: HeadConfig,
    pub input_width: usize,
    pub encoder: Option<EncoderConfig>,
    pub encoder_vocab_size: Option<usize>,
    /// Chemical tokens of the vocabulary, without the special tokens.
    pub vocab: Option<Vec<String>>,
    pub encoder_mode: EncoderMode,
    pub pooling_mode: PoolingMode,
    /// CEMB file the model was trained on, if any.
    pub embeddings: Option<String>,
}

impl CheckpointMeta {
    pub fn vocabulary(&self) -> Result<Option<Vocabulary>> {
        self.vocab.as_ref().map(Vocabulary::from_tokens).transpose()
    }

    pub fn vocab_tokens(v: &Vocabulary) -> Vec<String> {
        v.tokens()[SPECIALS.len()..].to_vec()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| bad(format!("{what} {n} does not fit in 32 bits")))
}

pub fn write_checkpoint<W: Write>(ck: &Checkpoint, mut w: W) -> Result<()> {
    let meta = serde_json::to_vec(&ck.meta).map_err(|e| bad(e.to_string()))?;
    let params = ck.model.params();
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&u32_of(meta.len(), "metadata length")?.to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&u32_of(params.len(), "block count")?.to_le_bytes());
    for (name, t) in &params {
        buf.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&u32_of(t.shape().len(), "rank")?.to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)
        .map_err(|e| bad(format!("write failed: {e}")))?;
    w.flush().map_err(|e| bad(format!("write failed: {e}")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Rebuilds the parameter skeleton described by `meta`.
pub fn skeleton(meta: &CheckpointMeta) -> Result<Model> {
    let encoder = match (&meta.encoder, meta.encoder_vocab_size) {
        (Some(cfg), Some(v)) => Some(Encoder::init(cfg.clone(), v, 0)?),
        (None, None) => None,
        _ => {
            return Err(bad(
                "encoder config and vocabulary size must be given together",
            ))
        }
    };
    Ok(Model {
        encoder,
        head: head_init(&meta.head, meta.input_width, 0)?,
    })
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| bad(format!("read failed: {e}")))?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let meta_len = c.u32()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(c.take(meta_len)?).map_err(|e| bad(format!("metadata: {e}")))?;
    let mut model = skeleton(&meta)?;
    let count = c.u32()? as usize;
    let mut params = model.params_mut();
    if count != params.len() {
        return Err(bad(format!(
            "{count} parameter blocks, model expects {}",
            params.len()
        )));
    }
    for (expected, t) in params.iter_mut() {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| bad("parameter name is not UTF-8"))?;
        if name != expected {
            return Err(bad(format!("found block `{name}`, expected `{expected}`")));
        }
        let rank = c.u32()? as usize;
        let dims = (0..rank)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != t.shape() {
            return Err(Error::Dimension(format!(
                "`{name}` has shape {dims:?}, model expects {:?}",
                t.shape()
            )));
        }
        for v in t.data_mut() {
            *v = c.f64()?;
        }
    }
    if c.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    drop(params);
    Ok(Checkpoint { meta, model })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(ck, BufWriter::new(f))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::HeadKind;

    fn sample(with_encoder: bool) -> Checkpoint {
        let vocab = Vocabulary::from_tokens(["C", "O", "N"]).unwrap();
        let enc_cfg = EncoderConfig::toy();
        let meta = CheckpointMeta {
            head: HeadConfig::new(HeadKind::Kan),
            input_width: enc_cfg.embed_dim,
            encoder: with_encoder.then(|| enc_cfg.clone()),
            encoder_vocab_size: with_encoder.then(|| vocab.len()),
            vocab: Some(CheckpointMeta::vocab_tokens(&vocab)),
            encoder_mode: EncoderMode::Finetune,
            pooling_mode: PoolingMode::Cido,
            embeddings: None,
        };
        let model = Model {
            encoder: with_encoder.then(|| Encoder::init(enc_cfg.clone(), vocab.len(), 11).unwrap()),
            head: head_init(&meta.head, meta.input_width, 12).unwrap(),
        };
        Checkpoint { meta, model }
    }

    fn bytes(ck: &Checkpoint) -> Vec<u8> {
        let mut v = Vec::new();
        write_checkpoint(ck, &mut v).unwrap();
        v
    }

    #[test]
    fn round_trip_is_exact() {
        for enc in [false, true] {
            let ck = sample(enc);
            let back = read_checkpoint(bytes(&ck).as_slice()).unwrap();
            assert_eq!(back, ck);
            assert_eq!(
                back.meta.vocabulary().unwrap().unwrap().tokens()[6..],
                ["C", "O", "N"]
            );
        }
    }

    #[test]
    fn header_layout() {
        let b = bytes(&sample(false));
        assert_eq!(&b[..4], b"CKPT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn rejects_corruption() {
        let b = bytes(&sample(false));
        assert!(matches!(
            read_checkpoint(&b[..b.len() - 1]),
            Err(Error::Checkpoint(_))
        ));
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(
            read_checkpoint(extra.as_slice()),
            Err(Error::Checkpoint(_))
        ));
        let mut magic = b.clone();
        magic[0] = b'X';
        assert!(matches!(
            read_checkpoint(magic.as_slice()),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut ck = sample(false);
        let b = bytes(&ck);
        ck.meta.input_width += 1;
        let mut other = bytes(&ck);
        // Swap in the original blocks under the altered metadata.
        let meta_end = |x: &[u8]| 12 + u32::from_le_bytes(x[8..12].try_into().unwrap()) as usize;
        other.truncate(meta_end(&other));
        other.extend_from_slice(&b[meta_end(&b)..]);
        assert!(matches!(
            read_checkpoint(other.as_slice()),
            Err(Error::Dimension(_))
        ));
    }
}
