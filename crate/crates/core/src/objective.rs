//! The per-batch training objective, including the ablation switches.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::corpus::{FrequencyTable, SentenceBatch};
use crate::losses::{info_nce, reconstruction_loss, token_weight, total_loss, LossConfig, LossError};
use crate::model::{forward_pair, ParamVars, SentenceView};
use crate::tensor::{Graph, Real, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AblationMode {
    Full,
    /// Every token weight forced to 1.
    NoSal,
    /// No decoder and no reconstruction terms.
    NoSalNoDecoder,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [AblationMode::Full, AblationMode::NoSal, AblationMode::NoSalNoDecoder];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoSal => "no_sal",
            AblationMode::NoSalNoDecoder => "no_sal_no_decoder",
        }
    }

    pub fn uses_decoder(self) -> bool {
        self != AblationMode::NoSalNoDecoder
    }

    pub fn adaptive_weights(self) -> bool {
        self == AblationMode::Full
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown ablation mode '{s}' (expected full, no_sal or no_sal_no_decoder)"))
    }
}

/// Graph nodes and scalar summaries of one batch's loss.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    pub infonce: Var,
    pub recon: Option<Var>,
    pub recon_pos: Option<Var>,
    /// Mean token weight over the real tokens of the batch.
    pub mean_weight: f64,
}

/// Scalar values of a `LossTerms`, with absent reconstruction terms as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub infonce: f64,
    pub recon: f64,
    pub recon_pos: f64,
    pub mean_weight: f64,
}

impl LossTerms {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> LossValues {
        let get = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0].as_f64());
        LossValues {
            total: get(Some(self.total)),
            infonce: get(Some(self.infonce)),
            recon: get(self.recon),
            recon_pos: get(self.recon_pos),
            mean_weight: self.mean_weight,
        }
    }
}

/// Per-row weights and mask for one sentence of `batch`, covering the
/// `model_rows(i)` rows the encoder sees.
pub fn sentence_weights(
    batch: &SentenceBatch,
    i: usize,
    freq: &FrequencyTable,
    cfg: &LossConfig,
    mode: AblationMode,
) -> (Vec<f64>, Vec<bool>) {
    let rows = batch.model_rows(i);
    let mut weights = Vec::with_capacity(rows);
    let mut mask = Vec::with_capacity(rows);
    for r in 0..rows {
        let real = batch.mask[i][r];
        mask.push(real);
        weights.push(if !real {
            0.0
        } else if mode.adaptive_weights() {
            token_weight(freq.freq(batch.ids[i][r]), cfg.theta, cfg.lambda)
        } else {
            1.0
        });
    }
    (weights, mask)
}

fn view_reconstruction<T: Real>(
    g: &mut Graph<T>,
    views: &[SentenceView],
    weights: &[(Vec<f64>, Vec<bool>)],
    detach: bool,
) -> Result<Var, LossError> {
    let mut sum: Option<Var> = None;
    for (view, (w, m)) in views.iter().zip(weights) {
        let rec = view.reconstruction.expect("decoder output");
        let l = reconstruction_loss(g, view.x, rec, w, m, detach)?;
        sum = Some(match sum {
            Some(s) => g.add(s, l)?,
            None => l,
        });
    }
    let sum = sum.expect("non-empty batch");
    Ok(g.scale(sum, T::from_f64(1.0 / views.len() as f64)))
}

/// Builds the full objective for one batch: two dropout views, InfoNCE on
/// their embeddings and, unless disabled, the weighted reconstruction of
/// both views.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    batch: &SentenceBatch,
    params: &ParamVars,
    freq: &FrequencyTable,
    cfg: &LossConfig,
    mode: AblationMode,
    dropout_rate: f64,
    rng: &mut R,
) -> Result<LossTerms, LossError> {
    let with_decoder = mode.uses_decoder();
    let fwd = forward_pair(g, batch, params, dropout_rate, rng, with_decoder)?;
    let infonce = info_nce(g, fwd.z, fwd.z_pos, cfg.tau)?;

    let weights: Vec<(Vec<f64>, Vec<bool>)> = (0..batch.size())
        .map(|i| sentence_weights(batch, i, freq, cfg, mode))
        .collect();
    let (wsum, wn) = weights.iter().fold((0.0, 0usize), |(s, n), (w, m)| {
        let real = w.iter().zip(m).filter(|(_, &m)| m).map(|(&w, _)| w);
        (s + real.clone().sum::<f64>(), n + real.count())
    });
    let mean_weight = if wn == 0 { 0.0 } else { wsum / wn as f64 };

    let (recon, recon_pos) = if with_decoder {
        let detach = cfg.detach_reconstruction_target;
        (
            Some(view_reconstruction(g, &fwd.anchor, &weights, detach)?),
            Some(view_reconstruction(g, &fwd.positive, &weights, detach)?),
        )
    } else {
        (None, None)
    };
    let total = total_loss(g, infonce, recon, recon_pos, cfg)?;
    Ok(LossTerms {
        total,
        infonce,
        recon,
        recon_pos,
        mean_weight,
    })
}
