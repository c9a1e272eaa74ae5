//! Coulombic efficiency regression for liquid electrolyte formulations.
//!
//! A formulation is a list of component molecules (SMILES) with molar
//! ratios. Each molecule is tokenized and embedded token-by-token, either
//! by a local linear-attention transformer or by looking up embeddings
//! exported from a pretrained model. Per-molecule token means are pooled
//! with the normalized molar ratios and fed to an MLP or KAN regression
//! head that predicts the logarithmic Coulombic efficiency
//! `LCE = -log10(1 - CE)`.
//!
//! Module map:
//!
//! * [`data`]: formulation datasets, LCE transform, cleaning, splits, box-plot stats
//! * [`tokenizer`]: SMILES tokenization and vocabularies
//! * [`encoder`]: rotary linear-attention encoder and the CEMB embedding file
//! * [`pool`]: per-molecule packing, separator joins and ratio-weighted pooling
//! * [`kan`]: B-spline Kolmogorov-Arnold layers
//! * [`heads`]: MLP and KAN regression heads
//! * [`train`]: AdamW, the training loop, evaluation, sweeps and gradient checks
//! * [`checkpoint`]: binary parameter checkpoints
//! * [`pipeline`]: end-to-end runs used by the command-line tool

pub mod checkpoint;
pub mod data;
pub mod encoder;
mod error;
pub mod heads;
pub mod kan;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod pool;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
