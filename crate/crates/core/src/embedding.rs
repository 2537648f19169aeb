//! Trainable token-embedding table standing in for a pretrained encoder.
//!
//! Row `PAD` is pinned at zero: it is initialised to zeros, lookups never
//! send gradient into it, and the optimizer skips it.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::corpus::{SentenceBatch, Vocab, PAD};
use crate::tensor::{Graph, Real, Tensor, TensorResult, Var};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding width must be at least 1")]
    ZeroWidth,
    #[error("invalid model dimensions: {0}")]
    Dims(#[from] crate::tensor::TensorError),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: vector width {found} does not match configured width {expected}")]
    Width {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    /// `V × d`.
    pub weights: Tensor<f32>,
    pub trainable: bool,
}

impl EmbeddingTable {
    pub fn vocab_size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn row(&self, id: usize) -> &[f32] {
        let d = self.dim();
        &self.weights.data()[id * d..(id + 1) * d]
    }
}

/// Uniform(-scale, scale) initialisation, then overwrite rows found in the
/// optional pretrained vector file.
pub fn init_table<R: Rng + ?Sized>(
    vocab: &Vocab,
    dim: usize,
    init_scale: f64,
    rng: &mut R,
    pretrained: Option<&Path>,
) -> Result<EmbeddingTable, EmbeddingError> {
    if dim == 0 {
        return Err(EmbeddingError::ZeroWidth);
    }
    let rows = vocab.len();
    let mut data: Vec<f32> = (0..rows * dim)
        .map(|_| {
            if init_scale > 0.0 {
                rng.gen_range(-init_scale..init_scale) as f32
            } else {
                0.0
            }
        })
        .collect();
    data[PAD * dim..(PAD + 1) * dim].fill(0.0);
    if let Some(path) = pretrained {
        for (token, vector) in read_pretrained(path, dim)? {
            if !vocab.contains(&token) {
                continue;
            }
            let id = vocab.id(&token);
            if id == PAD {
                continue;
            }
            data[id * dim..(id + 1) * dim].copy_from_slice(&vector);
        }
    }
    let weights = Tensor::new(vec![rows, dim], data).expect("table shape");
    Ok(EmbeddingTable {
        weights,
        trainable: true,
    })
}

/// Parses `token v1 … vd` lines.
pub fn read_pretrained(path: &Path, dim: usize) -> Result<Vec<(String, Vec<f32>)>, EmbeddingError> {
    let text = fs::read_to_string(path).map_err(|source| EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Result<Vec<f32>, _> = fields.map(str::parse::<f32>).collect();
        let values = values.map_err(|e| EmbeddingError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        if values.len() != dim {
            return Err(EmbeddingError::Width {
                path: path.to_path_buf(),
                line: i + 1,
                expected: dim,
                found: values.len(),
            });
        }
        out.push((token.to_string(), values));
    }
    Ok(out)
}

/// Looks up every id of `batch` in `table` (a `V × d` node) and applies
/// dropout, giving a `B × L × d` node. Two calls with different RNG states
/// give the two views of a positive pair.
pub fn embed<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    batch: &SentenceBatch,
    table: Var,
    dropout_rate: f64,
    rng: &mut R,
) -> TensorResult<Var> {
    let flat: Vec<usize> = batch.ids.iter().flatten().copied().collect();
    let d = g.shape(table)[1];
    let rows = g.gather_rows(table, &flat, Some(PAD))?;
    let cube = g.reshape(rows, &[batch.size(), batch.width(), d])?;
    g.dropout(cube, dropout_rate, rng)
}
