//! Frequency-weighted reconstruction loss, InfoNCE and the combined
//! objective.

use thiserror::Error;

use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("reconstruction loss over zero real tokens")]
    NoTokens,
    #[error("sentence {index} has a zero-norm embedding")]
    ZeroNormEmbedding { index: usize },
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight floor.
    pub theta: f64,
    /// Frequency slope.
    pub lambda: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Stop gradient through the reconstruction targets.
    pub detach_reconstruction_target: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            theta: 0.1,
            lambda: 50.0,
            tau: 0.05,
            alpha: 1.0,
            beta: 2.5e-4,
            gamma: 2.5e-4,
            detach_reconstruction_target: false,
        }
    }
}

impl LossConfig {
    /// Rejects NaN as well as out-of-range values.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(LossError::Config(format!("theta {} outside [0, 1]", self.theta)));
        }
        if !(self.lambda >= 0.0) {
            return Err(LossError::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.tau > 0.0) {
            return Err(LossError::Config(format!("tau {} must be > 0", self.tau)));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) {
                return Err(LossError::Config(format!("{name} {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// `max(θ, 1 − λ·freq)`.
pub fn token_weight(freq: f64, theta: f64, lambda: f64) -> f64 {
    theta.max(1.0 - lambda * freq)
}

/// `(1/N) Σ_{i: mask_i} w_i · ‖x_i − x′_i‖² / d` with `N` the number of
/// masked-in rows. `x` and `x_rec` are `rows × d`.
pub fn reconstruction_loss<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    x_rec: Var,
    weights: &[f64],
    mask: &[bool],
    detach_target: bool,
) -> Result<Var, LossError> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || weights.len() != shape[0] || mask.len() != shape[0] {
        return Err(TensorError::ShapeMismatch {
            op: "reconstruction-loss",
            lhs: shape,
            rhs: vec![weights.len(), mask.len()],
        }
        .into());
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(LossError::NoTokens);
    }
    let d = shape[1];
    let norm = 1.0 / (n as f64 * d as f64);
    let factors: Vec<T> = weights
        .iter()
        .zip(mask)
        .flat_map(|(&w, &m)| {
            let f = if m { T::from_f64(w * norm) } else { T::zero() };
            std::iter::repeat_n(f, d)
        })
        .collect();
    let target = if detach_target { g.detach(x) } else { x };
    let diff = g.sub(target, x_rec)?;
    let sq = g.mul(diff, diff)?;
    let factors = g.constant(Tensor::new(shape, factors)?);
    let weighted = g.mul(sq, factors)?;
    Ok(g.sum_all(weighted))
}

/// Mean over anchors `i` of `−log softmax_j(cos(z_i, z⁺_j)/τ)[i]`.
/// `z` and `z_pos` are `B × |z|`.
pub fn info_nce<T: Real>(g: &mut Graph<T>, z: Var, z_pos: Var, tau: f64) -> Result<Var, LossError> {
    let cos = g.cosine_similarity(z, z_pos).map_err(|e| match e {
        TensorError::ZeroNorm { index, .. } => LossError::ZeroNormEmbedding { index },
        other => other.into(),
    })?;
    let b = g.shape(z)[0];
    let logits = g.scale(cos, T::from_f64(1.0 / tau));
    let log_probs = g.log_softmax(logits, 1)?;
    let mut eye = Tensor::zeros(vec![b, b]);
    for i in 0..b {
        eye.data_mut()[i * b + i] = T::one();
    }
    let eye = g.constant(eye);
    let diag = g.mul(log_probs, eye)?;
    let s = g.sum_all(diag);
    Ok(g.scale(s, T::from_f64(-1.0 / b as f64)))
}

/// `α·L_I + β·L_R + γ·L_R⁺`. Absent reconstruction terms count as zero.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    infonce: Var,
    recon: Option<Var>,
    recon_pos: Option<Var>,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    let mut total = g.scale(infonce, T::from_f64(cfg.alpha));
    for (term, w) in [(recon, cfg.beta), (recon_pos, cfg.gamma)] {
        if let Some(term) = term {
            let scaled = g.scale(term, T::from_f64(w));
            total = g.add(total, scaled)?;
        }
    }
    Ok(total)
}
