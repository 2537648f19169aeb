//! Multi-scale convolutional autoencoder over token representations.
//!
//! Encoder: three TextCNN branches (kernel heights 3, 4, 5 spanning the full
//! embedding width) with max-over-time pooling, stacked into a `3 × co_t`
//! plane and integrated by a `3 × 2` convolution into the sentence
//! embedding `Z` of length `co_c · (co_t - 1)`.
//!
//! Decoder: the mirror image. A transposed `3 × 2` convolution rebuilds the
//! `3 × co_t` plane, each row is unpooled at the encoder's argmax positions
//! and pushed through a transposed TextCNN, and the three reconstructions
//! are averaged.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::corpus::{SentenceBatch, Vocab, MIN_BATCH_LEN};
use crate::embedding::{embed, init_table, EmbeddingError};
use crate::tensor::{Graph, Real, Tensor, TensorError, TensorResult, Var};

pub const KERNEL_SIZES: [usize; 3] = [3, 4, 5];
pub const INTEGRATOR_KERNEL: [usize; 2] = [3, 2];

pub const EMBEDDING: &str = "embedding";
pub const ENCODER_INTEGRATOR_WEIGHT: &str = "encoder.integrator.weight";
pub const ENCODER_INTEGRATOR_BIAS: &str = "encoder.integrator.bias";
pub const DECODER_INTEGRATOR_WEIGHT: &str = "decoder.integrator.weight";
pub const DECODER_INTEGRATOR_BIAS: &str = "decoder.integrator.bias";

pub fn textcnn_weight(ks: usize) -> String {
    format!("encoder.textcnn{ks}.weight")
}

pub fn textcnn_bias(ks: usize) -> String {
    format!("encoder.textcnn{ks}.bias")
}

pub fn decoder_textcnn_weight(ks: usize) -> String {
    format!("decoder.textcnn{ks}.weight")
}

pub fn decoder_textcnn_bias(ks: usize) -> String {
    format!("decoder.textcnn{ks}.bias")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub dim: usize,
    /// TextCNN output channels.
    pub co_t: usize,
    /// Integrator output channels.
    pub co_c: usize,
}

impl ModelDims {
    pub fn embedding_len(&self) -> usize {
        self.co_c * (self.co_t - 1)
    }

    pub fn validate(&self) -> TensorResult<()> {
        let bad = |reason: &str| TensorError::InvalidShape {
            op: "model",
            shape: vec![self.vocab_size, self.dim, self.co_t, self.co_c],
            reason: reason.into(),
        };
        if self.co_t < 2 {
            return Err(bad("co_t must be at least 2"));
        }
        if self.co_c < 1 || self.dim < 1 || self.vocab_size < 1 {
            return Err(bad("co_c, dim and vocab size must be positive"));
        }
        Ok(())
    }

    /// Every parameter name with its shape, in a fixed order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, co_t, co_c) = (self.dim, self.co_t, self.co_c);
        let [kh, kw] = INTEGRATOR_KERNEL;
        let mut out = vec![(EMBEDDING.to_string(), vec![self.vocab_size, d])];
        for ks in KERNEL_SIZES {
            out.push((textcnn_weight(ks), vec![co_t, ks, d]));
            out.push((textcnn_bias(ks), vec![co_t]));
        }
        out.push((ENCODER_INTEGRATOR_WEIGHT.into(), vec![co_c, kh, kw]));
        out.push((ENCODER_INTEGRATOR_BIAS.into(), vec![co_c]));
        out.push((DECODER_INTEGRATOR_WEIGHT.into(), vec![co_c, kh, kw]));
        out.push((DECODER_INTEGRATOR_BIAS.into(), vec![1]));
        for ks in KERNEL_SIZES {
            out.push((decoder_textcnn_weight(ks), vec![co_t, ks, d]));
            out.push((decoder_textcnn_bias(ks), vec![d]));
        }
        out
    }
}

/// All learnable tensors, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl ModelParams {
    /// Embedding table from `init_table`; convolution kernels
    /// uniform in ±1/√fan_in; biases zero.
    pub fn init<R: Rng + ?Sized>(
        dims: ModelDims,
        vocab: &Vocab,
        init_scale: f64,
        rng: &mut R,
        pretrained: Option<&Path>,
    ) -> Result<Self, EmbeddingError> {
        dims.validate()?;
        let table = init_table(vocab, dims.dim, init_scale, rng, pretrained)?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in dims.layout() {
            let tensor = if name == EMBEDDING {
                table.weights.clone()
            } else if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
                Tensor::new(shape, data).expect("layout shape")
            };
            tensors.insert(name, tensor);
        }
        Ok(Self { tensors })
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor<f32>>) -> TensorResult<Self> {
        let params = Self { tensors };
        let dims = params.dims()?;
        for (name, shape) in dims.layout() {
            match params.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(TensorError::ShapeMismatch {
                        op: "model-params",
                        lhs: shape,
                        rhs: t.shape().to_vec(),
                    })
                }
                None => {
                    return Err(TensorError::InvalidShape {
                        op: "model-params",
                        shape,
                        reason: format!("missing tensor {name}"),
                    })
                }
            }
        }
        Ok(params)
    }

    pub fn dims(&self) -> TensorResult<ModelDims> {
        let missing = |name: &str| TensorError::InvalidShape {
            op: "model-params",
            shape: vec![],
            reason: format!("missing tensor {name}"),
        };
        let emb = self.tensors.get(EMBEDDING).ok_or_else(|| missing(EMBEDDING))?;
        let w3 = self.tensors.get(&textcnn_weight(3)).ok_or_else(|| missing("encoder.textcnn3.weight"))?;
        let wi = self
            .tensors
            .get(ENCODER_INTEGRATOR_WEIGHT)
            .ok_or_else(|| missing(ENCODER_INTEGRATOR_WEIGHT))?;
        let dims = ModelDims {
            vocab_size: emb.shape()[0],
            dim: emb.shape()[1],
            co_t: w3.shape()[0],
            co_c: wi.shape()[0],
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every tensor as a leaf of `g`. Tensors for which `trainable`
    /// returns false become constants.
    pub fn register<T: Real>(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.cast::<T>(), trainable(name))))
            .collect();
        ParamVars { vars }
    }
}

/// Graph handles for the model parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn from_pairs<I: IntoIterator<Item = (String, Var)>>(pairs: I) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> TensorResult<Var> {
        self.vars.get(name).copied().ok_or_else(|| TensorError::InvalidShape {
            op: "model",
            shape: vec![],
            reason: format!("parameter {name} not registered"),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// What the decoder needs from the encoder for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeState {
    /// Argmax rows per kernel size, in `KERNEL_SIZES` order.
    pub indices: Vec<Vec<usize>>,
    /// Real tokens in the sentence.
    pub tokens: usize,
    /// Rows of the encoded input (tokens plus any padding passed in).
    pub rows: usize,
}

/// Pooling windows that start inside the real tokens; at least one.
fn valid_windows(tokens: usize, ks: usize) -> usize {
    if tokens >= ks {
        tokens - ks + 1
    } else {
        1
    }
}

/// Encodes one sentence. `x` is `rows × d` with `rows >= 5`; rows at or
/// beyond `tokens` are padding and never win a pooling window.
pub fn encode<T: Real>(g: &mut Graph<T>, x: Var, tokens: usize, p: &ParamVars) -> TensorResult<(Var, EncodeState)> {
    let rows = g.shape(x)[0];
    if rows < MIN_BATCH_LEN {
        return Err(TensorError::SequenceTooShort {
            op: "encode",
            len: rows,
            kernel: MIN_BATCH_LEN,
        });
    }
    if tokens == 0 || tokens > rows {
        return Err(TensorError::IndexOutOfRange {
            op: "encode",
            index: tokens,
            bound: rows,
        });
    }
    let mut pooled = Vec::with_capacity(KERNEL_SIZES.len());
    let mut indices = Vec::with_capacity(KERNEL_SIZES.len());
    for ks in KERNEL_SIZES {
        let w = p.get(&textcnn_weight(ks))?;
        let b = p.get(&textcnn_bias(ks))?;
        let features = g.conv1d_valid(x, w, b)?;
        let (h, idx) = g.max_pool_time(features, valid_windows(tokens, ks))?;
        let co_t = g.shape(h)[0];
        pooled.push(g.reshape(h, &[1, co_t])?);
        indices.push(idx);
    }
    let plane = g.concat(&pooled, 0)?;
    let w = p.get(ENCODER_INTEGRATOR_WEIGHT)?;
    let b = p.get(ENCODER_INTEGRATOR_BIAS)?;
    let z = g.conv2d_valid(plane, w, b)?;
    let len = g.value(z).numel();
    let z = g.reshape(z, &[len])?;
    Ok((z, EncodeState { indices, tokens, rows }))
}

/// Reconstructs `rows × d` token representations from `z`.
pub fn decode<T: Real>(g: &mut Graph<T>, z: Var, state: &EncodeState, p: &ParamVars) -> TensorResult<Var> {
    let wd = p.get(DECODER_INTEGRATOR_WEIGHT)?;
    let bd = p.get(DECODER_INTEGRATOR_BIAS)?;
    let co_c = g.shape(wd)[0];
    let len = g.value(z).numel();
    if !len.is_multiple_of(co_c) || state.indices.len() != KERNEL_SIZES.len() {
        return Err(TensorError::ShapeMismatch {
            op: "decode",
            lhs: vec![len],
            rhs: vec![co_c, state.indices.len()],
        });
    }
    let z3 = g.reshape(z, &[co_c, 1, len / co_c])?;
    let plane = g.transposed_conv2d(z3, wd, bd)?;
    let mut branches = Vec::with_capacity(KERNEL_SIZES.len());
    for (r, ks) in KERNEL_SIZES.into_iter().enumerate() {
        let h = g.select(plane, r)?;
        let positions = state.rows + 1 - ks;
        let unpooled = g.max_unpool_time(h, &state.indices[r], positions)?;
        let w = p.get(&decoder_textcnn_weight(ks))?;
        let b = p.get(&decoder_textcnn_bias(ks))?;
        branches.push(g.transposed_conv1d(unpooled, w, b)?);
    }
    let s = g.add(branches[0], branches[1])?;
    let s = g.add(s, branches[2])?;
    Ok(g.scale(s, T::from_f64(1.0 / 3.0)))
}

/// Per-sentence nodes of one view.
#[derive(Debug, Clone)]
pub struct SentenceView {
    /// Token representations, `rows × d`.
    pub x: Var,
    /// Reconstruction, present when the decoder ran.
    pub reconstruction: Option<Var>,
    pub state: EncodeState,
}

#[derive(Debug, Clone)]
pub struct PairForward {
    /// `B × |z|` embeddings of the first view.
    pub z: Var,
    /// `B × |z|` embeddings of the dropout-augmented view.
    pub z_pos: Var,
    pub anchor: Vec<SentenceView>,
    pub positive: Vec<SentenceView>,
}

/// Encodes (and optionally decodes) every sentence of one embedded view.
/// `cube` is the `B × L × d` output of `embed`.
pub fn forward_view<T: Real>(
    g: &mut Graph<T>,
    batch: &SentenceBatch,
    cube: Var,
    p: &ParamVars,
    with_decoder: bool,
) -> TensorResult<(Var, Vec<SentenceView>)> {
    let mut rows = Vec::with_capacity(batch.size());
    let mut views = Vec::with_capacity(batch.size());
    for i in 0..batch.size() {
        let full = g.select(cube, i)?;
        let x = g.slice_rows(full, 0, batch.model_rows(i))?;
        let (z, state) = encode(g, x, batch.lengths[i], p)?;
        let reconstruction = if with_decoder {
            Some(decode(g, z, &state, p)?)
        } else {
            None
        };
        let len = g.value(z).numel();
        rows.push(g.reshape(z, &[1, len])?);
        views.push(SentenceView {
            x,
            reconstruction,
            state,
        });
    }
    Ok((g.concat(&rows, 0)?, views))
}

/// Two dropout passes over the same batch with shared parameters.
pub fn forward_pair<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    batch: &SentenceBatch,
    p: &ParamVars,
    dropout_rate: f64,
    rng: &mut R,
    with_decoder: bool,
) -> TensorResult<PairForward> {
    let table = p.get(EMBEDDING)?;
    let cube = embed(g, batch, table, dropout_rate, rng)?;
    let cube_pos = embed(g, batch, table, dropout_rate, rng)?;
    let (z, anchor) = forward_view(g, batch, cube, p, with_decoder)?;
    let (z_pos, positive) = forward_view(g, batch, cube_pos, p, with_decoder)?;
    Ok(PairForward {
        z,
        z_pos,
        anchor,
        positive,
    })
}

/// Inference embeddings (no dropout) as plain vectors.
pub fn embed_sentences(params: &ModelParams, batch: &SentenceBatch) -> TensorResult<Vec<Vec<f32>>> {
    let mut g = Graph::<f32>::new();
    let p = params.register(&mut g, |_| false);
    let table = p.get(EMBEDDING)?;
    let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
    let cube = embed(&mut g, batch, table, 0.0, &mut no_rng)?;
    let (z, _) = forward_view(&mut g, batch, cube, &p, false)?;
    let width = g.shape(z)[1];
    Ok(g.value(z).data().chunks(width).map(<[f32]>::to_vec).collect())
}
