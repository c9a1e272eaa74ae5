//! CEMB: per-molecule token embeddings exported from a pretrained model.
//!
//! Little-endian layout:
//!
//! ```text
//! "CEMB"              4 bytes
//! version: u32        = 1
//! width H: u32
//! record count: u32
//! per record:
//!   smiles length: u32, SMILES UTF-8 bytes
//!   rows L: u32
//!   L * H f32 values, token-major
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::TokenEmbeddings;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const CEMB_MAGIC: [u8; 4] = *b"CEMB";
pub const CEMB_VERSION: u32 = 1;

/// Embeddings keyed by exact SMILES text.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub width: usize,
    pub entries: HashMap<String, TokenEmbeddings>,
}

impl EmbeddingTable {
    pub fn get(&self, smiles: &str) -> Result<&TokenEmbeddings> {
        self.entries
            .get(smiles)
            .ok_or_else(|| Error::MissingEmbedding(smiles.to_owned()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn truncated(what: &str) -> Error {
    Error::Embedding(format!("truncated payload while reading {what}"))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| truncated(what))?;
    Ok(u32::from_le_bytes(b))
}

/// Parses a CEMB stream.
pub fn read_embeddings<R: Read>(mut r: R) -> Result<EmbeddingTable> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| truncated("magic"))?;
    if magic != CEMB_MAGIC {
        return Err(Error::Embedding(format!(
            "bad magic {magic:?}, expected \"CEMB\""
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != CEMB_VERSION {
        return Err(Error::Embedding(format!(
            "unsupported version {version}, expected {CEMB_VERSION}"
        )));
    }
    let width = read_u32(&mut r, "width")? as usize;
    let count = read_u32(&mut r, "record count")?;
    let mut entries = HashMap::with_capacity(count as usize);
    for i in 0..count {
        let n = read_u32(&mut r, "SMILES length")? as usize;
        let mut text = vec![0u8; n];
        r.read_exact(&mut text).map_err(|_| truncated("SMILES"))?;
        let smiles = String::from_utf8(text)
            .map_err(|_| Error::Embedding(format!("record {i}: SMILES is not UTF-8")))?;
        let rows = read_u32(&mut r, "row count")? as usize;
        let mut raw = vec![0u8; rows * width * 4];
        r.read_exact(&mut raw)
            .map_err(|_| truncated(&format!("values of `{smiles}`")))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let emb = TokenEmbeddings::new(Tensor::from_vec(&[rows, width], values));
        if entries.insert(smiles.clone(), emb).is_some() {
            return Err(Error::Embedding(format!("duplicate SMILES key `{smiles}`")));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)
        .map_err(|e| Error::Embedding(e.to_string()))?
        != 0
    {
        return Err(Error::Embedding(
            "trailing bytes after the last record".into(),
        ));
    }
    Ok(EmbeddingTable { width, entries })
}

pub fn load_pretrained_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(io::BufReader::new(file))
}

/// Writes records in the given order. Values are narrowed to `f32`.
pub fn write_embeddings<W: Write>(
    mut w: W,
    width: usize,
    records: &[(String, TokenEmbeddings)],
) -> Result<()> {
    let io_err = |e: io::Error| Error::Embedding(e.to_string());
    let u32_of = |n: usize, what: &str| {
        u32::try_from(n).map_err(|_| Error::Embedding(format!("{what} {n} does not fit in u32")))
    };
    w.write_all(&CEMB_MAGIC).map_err(io_err)?;
    w.write_all(&CEMB_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&u32_of(width, "width")?.to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&u32_of(records.len(), "record count")?.to_le_bytes())
        .map_err(io_err)?;
    for (smiles, emb) in records {
        if emb.width() != width {
            return Err(Error::Dimension(format!(
                "`{smiles}` has width {}, file width is {width}",
                emb.width()
            )));
        }
        w.write_all(&u32_of(smiles.len(), "SMILES length")?.to_le_bytes())
            .map_err(io_err)?;
        w.write_all(smiles.as_bytes()).map_err(io_err)?;
        w.write_all(&u32_of(emb.rows(), "row count")?.to_le_bytes())
            .map_err(io_err)?;
        for &v in emb.values.data() {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}
