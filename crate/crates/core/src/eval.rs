//! STS evaluation: Spearman correlation, alignment, uniformity and the
//! per-rating-group similarity density.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::corpus::{make_batch, tokenize, CorpusError, FrequencyTable, ScoredPair, Vocab, MIN_BATCH_LEN};
use crate::losses::token_weight;
use crate::model::{decode, encode, ModelParams, EMBEDDING};
use crate::tensor::{Graph, TensorError};

/// Sentences embedded per graph.
const EMBED_CHUNK: usize = 64;

pub const GROUP_LABELS: [&str; 5] = ["0-1", "1-2", "2-3", "3-4", "4-5"];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("correlation undefined: {0}")]
    Undefined(String),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("{0}")]
    Empty(String),
    #[error("embedding {index} has zero norm")]
    ZeroNorm { index: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// 1-based ranks with ties sharing the average of their positions.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::Length(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(EvalError::Undefined("fewer than two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::Undefined("constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::Length(x.len(), y.len()));
    }
    pearson(&fractional_ranks(x), &fractional_ranks(y))
}

fn normalized(v: &[f64], index: usize) -> Result<Vec<f64>, EvalError> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(EvalError::ZeroNorm { index });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    let a = normalized(a, 0)?;
    let b = normalized(b, 1)?;
    Ok(a.iter().zip(&b).map(|(x, y)| x * y).sum())
}

/// Mean squared distance between the L2-normalized members of each pair.
pub fn alignment(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty("alignment needs at least one pair".into()));
    }
    let mut sum = 0.0;
    for (i, (a, b)) in pairs.iter().enumerate() {
        sum += sq_dist(&normalized(a, 2 * i)?, &normalized(b, 2 * i + 1)?);
    }
    Ok(sum / pairs.len() as f64)
}

/// Log of the mean of `exp(−2‖a − b‖²)` over all unordered pairs of
/// L2-normalized embeddings.
pub fn uniformity(embeddings: &[Vec<f64>]) -> Result<f64, EvalError> {
    if embeddings.len() < 2 {
        return Err(EvalError::Empty("uniformity needs at least two embeddings".into()));
    }
    let unit = embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| normalized(e, i))
        .collect::<Result<Vec<_>, _>>()?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..unit.len() {
        for j in i + 1..unit.len() {
            sum += (-2.0 * sq_dist(&unit[i], &unit[j])).exp();
            count += 1;
        }
    }
    Ok((sum / count as f64).ln())
}

/// Index into `GROUP_LABELS`; 5.0 joins the top group.
pub fn rating_group(score: f64) -> usize {
    (score.floor().max(0.0) as usize).min(GROUP_LABELS.len() - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub label: &'static str,
    pub cosines: Vec<f64>,
    /// `None` for an empty group.
    pub mean: Option<f64>,
    /// Population variance, `None` for an empty group.
    pub variance: Option<f64>,
}

pub fn similarity_density(golds: &[f64], cosines: &[f64]) -> Vec<GroupStats> {
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); GROUP_LABELS.len()];
    for (&g, &c) in golds.iter().zip(cosines) {
        groups[rating_group(g)].push(c);
    }
    groups
        .into_iter()
        .zip(GROUP_LABELS)
        .map(|(cosines, label)| {
            let (mean, variance) = if cosines.is_empty() {
                (None, None)
            } else {
                let n = cosines.len() as f64;
                let mean = cosines.iter().sum::<f64>() / n;
                let var = cosines.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
                (Some(mean), Some(var))
            };
            GroupStats {
                label,
                cosines,
                mean,
                variance,
            }
        })
        .collect()
}

/// Inference embeddings of `sentences` in chunks.
pub fn embed_texts<S: AsRef<str>>(
    params: &ModelParams,
    vocab: &Vocab,
    sentences: &[S],
) -> Result<Vec<Vec<f64>>, EvalError> {
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(EMBED_CHUNK) {
        let batch = make_batch(chunk, vocab, MIN_BATCH_LEN)?;
        let z = crate::model::embed_sentences(params, &batch)?;
        out.extend(z.into_iter().map(|v| v.into_iter().map(f64::from).collect::<Vec<f64>>()));
    }
    Ok(out)
}

/// Embeddings of the left and right sentences.
type PairEmbeddings = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn pair_embeddings(
    params: &ModelParams,
    vocab: &Vocab,
    pairs: &[ScoredPair],
) -> Result<PairEmbeddings, EvalError> {
    let a: Vec<&str> = pairs.iter().map(|p| p.sentence_a.as_str()).collect();
    let b: Vec<&str> = pairs.iter().map(|p| p.sentence_b.as_str()).collect();
    Ok((embed_texts(params, vocab, &a)?, embed_texts(params, vocab, &b)?))
}

fn pair_cosines(za: &[Vec<f64>], zb: &[Vec<f64>]) -> Result<Vec<f64>, EvalError> {
    za.iter()
        .zip(zb)
        .enumerate()
        .map(|(i, (x, y))| cosine(x, y).map_err(|_| EvalError::ZeroNorm { index: i }))
        .collect()
}

/// Cosine similarity of every pair under the model.
pub fn predict_similarities(params: &ModelParams, vocab: &Vocab, pairs: &[ScoredPair]) -> Result<Vec<f64>, EvalError> {
    let (za, zb) = pair_embeddings(params, vocab, pairs)?;
    pair_cosines(&za, &zb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `None` when the correlation is undefined.
    pub spearman: Option<f64>,
    /// `None` when no pair reaches the positive threshold.
    pub alignment: Option<f64>,
    pub uniformity: Option<f64>,
    pub groups: Vec<GroupStats>,
    pub pair_count: usize,
    pub positive_pairs: usize,
    pub pos_threshold: f64,
}

fn fmt_opt(v: Option<f64>, missing: &str) -> String {
    v.map_or_else(|| missing.to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "spearman,{}", fmt_opt(self.spearman, "undefined"));
        let _ = writeln!(s, "alignment,{}", fmt_opt(self.alignment, "n/a"));
        let _ = writeln!(s, "uniformity,{}", fmt_opt(self.uniformity, "n/a"));
        let _ = writeln!(s, "pair_count,{}", self.pair_count);
        let _ = writeln!(s, "positive_pairs,{}", self.positive_pairs);
        s
    }

    pub fn density_csv(&self) -> String {
        let mut s = String::from("group,cosine\n");
        for g in &self.groups {
            for c in &g.cosines {
                let _ = writeln!(s, "{},{c:.6}", g.label);
            }
        }
        s
    }

    pub fn density_summary_csv(&self) -> String {
        let mut s = String::from("group,count,mean,variance\n");
        for g in &self.groups {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                g.label,
                g.cosines.len(),
                fmt_opt(g.mean, "n/a"),
                fmt_opt(g.variance, "n/a")
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "pairs:          {}", self.pair_count);
        let _ = writeln!(s, "spearman:       {}", fmt_opt(self.spearman, "undefined"));
        let _ = writeln!(
            s,
            "alignment:      {} ({} pairs with gold >= {})",
            fmt_opt(self.alignment, "n/a"),
            self.positive_pairs,
            self.pos_threshold
        );
        let _ = writeln!(s, "uniformity:     {}", fmt_opt(self.uniformity, "n/a"));
        for g in &self.groups {
            let _ = writeln!(
                s,
                "group {}:      n={} mean={} var={}",
                g.label,
                g.cosines.len(),
                fmt_opt(g.mean, "n/a"),
                fmt_opt(g.variance, "n/a")
            );
        }
        s
    }

    /// Writes `metrics.csv`, `density.csv`, `density_summary.csv` and
    /// `summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        for (name, body) in [
            ("metrics.csv", self.metrics_csv()),
            ("density.csv", self.density_csv()),
            ("density_summary.csv", self.density_summary_csv()),
            ("summary.txt", self.summary()),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|source| EvalError::Io { path, source })?;
        }
        Ok(())
    }
}

/// Scores every pair with dropout disabled and computes all metrics.
pub fn evaluate(checkpoint: &Checkpoint, pairs: &[ScoredPair], pos_threshold: f64) -> Result<EvalReport, EvalError> {
    let (params, vocab) = (&checkpoint.params, &checkpoint.vocab);
    let (za, zb) = pair_embeddings(params, vocab, pairs)?;
    let cosines = pair_cosines(&za, &zb)?;
    let golds: Vec<f64> = pairs.iter().map(|p| p.gold).collect();

    let spearman = match spearman(&cosines, &golds) {
        Ok(r) => Some(r),
        Err(EvalError::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    let positives: Vec<(Vec<f64>, Vec<f64>)> = pairs
        .iter()
        .zip(za.iter().zip(&zb))
        .filter(|(p, _)| p.gold >= pos_threshold)
        .map(|(_, (x, y))| (x.clone(), y.clone()))
        .collect();
    let alignment = if positives.is_empty() {
        None
    } else {
        Some(alignment(&positives)?)
    };
    let all: Vec<Vec<f64>> = za.iter().chain(&zb).cloned().collect();
    let uniformity = if all.len() < 2 { None } else { Some(uniformity(&all)?) };
    Ok(EvalReport {
        spearman,
        alignment,
        uniformity,
        groups: similarity_density(&golds, &cosines),
        pair_count: pairs.len(),
        positive_pairs: positives.len(),
        pos_threshold,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenImportance {
    pub token: String,
    pub id: usize,
    pub freq: f64,
    pub weight: f64,
    pub occurrences: usize,
    /// Mean unweighted per-token reconstruction error.
    pub mean_mse: f64,
    /// `weight × mean_mse`.
    pub weighted_loss: f64,
}

/// Per-token reconstruction error over `sentences`, sorted by token id.
pub fn token_report<S: AsRef<str>>(
    checkpoint: &Checkpoint,
    sentences: &[S],
    freq: &FrequencyTable,
) -> Result<Vec<TokenImportance>, EvalError> {
    let cfg = checkpoint.config.train_config().map_err(|e| EvalError::Empty(e.to_string()))?;
    let vocab = &checkpoint.vocab;
    let mut acc: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for s in sentences {
        let tokens = tokenize(s.as_ref());
        if tokens.is_empty() {
            continue;
        }
        let ids = vocab.encode(&tokens);
        let mut g = Graph::<f32>::new();
        let p = checkpoint.params.register(&mut g, |_| false);
        let table = p.get(EMBEDDING)?;
        let rows = ids.len().max(MIN_BATCH_LEN);
        let mut padded = ids.clone();
        padded.resize(rows, crate::corpus::PAD);
        let x = g.gather_rows(table, &padded, Some(crate::corpus::PAD))?;
        let (z, state) = encode(&mut g, x, ids.len(), &p)?;
        let rec = decode(&mut g, z, &state, &p)?;
        let d = g.shape(x)[1];
        let xv = g.value(x).data().to_vec();
        let rv = g.value(rec).data().to_vec();
        for (r, &id) in ids.iter().enumerate() {
            let mse = (0..d)
                .map(|k| {
                    let diff = f64::from(xv[r * d + k]) - f64::from(rv[r * d + k]);
                    diff * diff
                })
                .sum::<f64>()
                / d as f64;
            let e = acc.entry(id).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += mse;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(id, (n, total))| {
            let f = freq.freq(id);
            let weight = token_weight(f, cfg.loss.theta, cfg.loss.lambda);
            let mean_mse = total / n as f64;
            TokenImportance {
                token: vocab.token(id).unwrap_or("<unk>").to_string(),
                id,
                freq: f,
                weight,
                occurrences: n,
                mean_mse,
                weighted_loss: weight * mean_mse,
            }
        })
        .collect())
}

pub fn token_report_csv(rows: &[TokenImportance]) -> String {
    let mut s = String::from("token,id,freq,weight,occurrences,mean_mse,weighted_loss\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.8},{:.6},{},{:.8},{:.8}",
            r.token, r.id, r.freq, r.weight, r.occurrences, r.mean_mse, r.weighted_loss
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_ranks(x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|a| {
                let below = x.iter().filter(|b| *b < a).count() as f64;
                let equal = x.iter().filter(|b| *b == a).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]).unwrap() + 1.0).abs() < 1e-12);
        let x = [1.0, 2.0, 2.0, 3.0];
        let y = [1.0, 3.0, 2.0, 4.0];
        assert_eq!(fractional_ranks(&x), vec![1.0, 2.5, 2.5, 4.0]);
        let oracle = {
            let (rx, ry) = (brute_ranks(&x), brute_ranks(&y));
            let n = 4.0;
            let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
            let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
            let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
            let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
            cov / (vx * vy).sqrt()
        };
        assert!((spearman(&x, &y).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn constant_input_is_undefined() {
        assert!(matches!(
            spearman(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]),
            Err(EvalError::Undefined(_))
        ));
        assert!(matches!(spearman(&[1.0], &[2.0]), Err(EvalError::Undefined(_))));
    }

    #[test]
    fn alignment_and_uniformity_examples() {
        let e = vec![0.6, 0.8];
        assert_eq!(alignment(&[(e.clone(), e.clone())]).unwrap(), 0.0);
        assert_eq!(uniformity(&[e.clone(), e.clone(), e]).unwrap(), 0.0);
        assert!((alignment(&[(vec![1.0, 0.0], vec![0.0, 1.0])]).unwrap() - 2.0).abs() < 1e-15);
        assert!((uniformity(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap() + 8.0).abs() < 1e-10);
        assert!(uniformity(&[vec![1.0]]).is_err());
        assert!(alignment(&[]).is_err());
    }

    #[test]
    fn groups_follow_boundary_rule() {
        assert_eq!(GROUP_LABELS[rating_group(0.5)], "0-1");
        assert_eq!(GROUP_LABELS[rating_group(1.0)], "1-2");
        assert_eq!(GROUP_LABELS[rating_group(4.0)], "4-5");
        assert_eq!(GROUP_LABELS[rating_group(5.0)], "4-5");
    }

    #[test]
    fn density_variance_matches_pairwise_formula() {
        let golds = [0.2, 0.7, 0.9, 3.1, 5.0, 4.5];
        let cos = [0.1, 0.4, -0.2, 0.5, 0.9, 0.7];
        let groups = similarity_density(&golds, &cos);
        assert_eq!(groups.len(), 5);
        assert_eq!(groups[0].cosines, vec![0.1, 0.4, -0.2]);
        assert_eq!(groups[1].mean, None);
        for g in groups.iter().filter(|g| !g.cosines.is_empty()) {
            let c = &g.cosines;
            let n = c.len() as f64;
            let mut s = 0.0;
            for a in c {
                for b in c {
                    s += (a - b) * (a - b);
                }
            }
            let oracle = s / (2.0 * n * n);
            assert!((g.variance.unwrap() - oracle).abs() < 1e-12);
        }
    }
}
