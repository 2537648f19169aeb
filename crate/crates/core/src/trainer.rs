//! Training loop: seeded shuffling, two-view forward/backward, AdamW and
//! dev-set model selection.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::config::{ConfigError, RunConfig, TrainConfig};
use crate::corpus::{tokenize, CorpusError, FrequencyTable, ScoredPair, SentenceBatch, Vocab, MIN_BATCH_LEN};
use crate::embedding::EmbeddingError;
use crate::eval::{predict_similarities, spearman, EvalError};
use crate::losses::LossError;
use crate::model::{ModelParams, EMBEDDING};
use crate::objective::{batch_objective, LossValues};
use crate::optim::{adamw_step, OptimError, OptimizerState};
use crate::tensor::{Graph, Tensor};

const SHUFFLE_STREAM: u64 = 1 << 32;
const DROPOUT_STREAM: u64 = 2 << 32;

const META_EPOCH: &str = "next_epoch";
const META_BATCH: &str = "next_batch";
const META_BEST: &str = "best_dev_spearman";
const META_BEST_STEP: &str = "best_step";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("dev set gold scores are constant; Spearman correlation is undefined")]
    ConstantDev,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl TrainError {
    /// Whether the failure comes from the numbers rather than the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteLoss { .. }
                | TrainError::Optim(OptimError::NonFinite(_))
                | TrainError::Loss(LossError::ZeroNormEmbedding { .. })
                | TrainError::Eval(EvalError::ZeroNorm { .. })
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub losses: LossValues,
    pub dev_spearman: Option<f64>,
}

pub const LOG_HEADER: &str = "step,l_i,l_r,l_r_plus,total,mean_weight,dev_spearman";

impl LogRow {
    pub fn csv_line(&self) -> String {
        let l = &self.losses;
        let dev = self.dev_spearman.map_or_else(String::new, |r| format!("{r:.6}"));
        format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.6},{dev}",
            self.step, l.infonce, l.recon, l.recon_pos, l.total, l.mean_weight
        )
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint at the best dev Spearman reached in this run; `None` when
    /// no evaluation in this run beat the incoming best.
    pub best: Option<Checkpoint>,
    pub last: Checkpoint,
    pub log: Vec<LogRow>,
    pub best_dev_spearman: Option<f64>,
}

/// A freshly initialised checkpoint for `config`.
pub fn initial_checkpoint(config: &RunConfig, vocab: Vocab, freq: FrequencyTable) -> Result<Checkpoint, TrainError> {
    let cfg = config.train_config()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::init(
        cfg.dims(vocab.len()),
        &vocab,
        cfg.init_scale,
        &mut rng,
        cfg.pretrained_vectors.as_deref(),
    )?;
    Ok(Checkpoint {
        config: config.clone(),
        params,
        optimizer: OptimizerState::default(),
        vocab,
        freq,
        meta: BTreeMap::new(),
    })
}

fn encode_corpus(sentences: &[String], vocab: &Vocab) -> Result<Vec<Vec<usize>>, TrainError> {
    if sentences.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    sentences
        .iter()
        .enumerate()
        .map(|(index, s)| {
            let ids = vocab.encode(&tokenize(s));
            if ids.is_empty() {
                Err(CorpusError::EmptySentence { index }.into())
            } else {
                Ok(ids)
            }
        })
        .collect()
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, SHUFFLE_STREAM | epoch as u64));
    order
}

fn meta_usize(ck: &Checkpoint, key: &str) -> usize {
    ck.meta.get(key).and_then(|v| v.parse().ok()).unwrap_or(0)
}

fn dev_score(ck: &Checkpoint, dev: &[ScoredPair]) -> Result<Option<f64>, TrainError> {
    let cos = predict_similarities(&ck.params, &ck.vocab, dev)?;
    let golds: Vec<f64> = dev.iter().map(|p| p.gold).collect();
    match spearman(&cos, &golds) {
        Ok(r) => Ok(Some(r)),
        Err(EvalError::Undefined(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// One optimisation step on `batch`; returns the loss values.
pub fn train_step(ck: &mut Checkpoint, cfg: &TrainConfig, batch: &SentenceBatch) -> Result<LossValues, TrainError> {
    let step = ck.optimizer.step + 1;
    let loss_cfg = cfg.effective_loss();
    let mut g = Graph::<f32>::new();
    let freeze = cfg.freeze_embeddings;
    let p = ck.params.register(&mut g, |name| !(freeze && name == EMBEDDING));
    let mut rng = stream_rng(cfg.seed, DROPOUT_STREAM | step);
    let terms = batch_objective(
        &mut g,
        batch,
        &p,
        &ck.freq,
        &loss_cfg,
        cfg.ablation,
        cfg.dropout_rate,
        &mut rng,
    )?;
    let values = terms.values(&g);
    if !values.total.is_finite() {
        return Err(TrainError::NonFiniteLoss { step });
    }
    let grads = g.backward(terms.total).map_err(LossError::from)?;
    let mut named: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for (name, var) in p.iter() {
        if let Some(grad) = grads.get(*var) {
            named.insert(name.clone(), grad.clone());
        }
    }
    adamw_step(&mut ck.params, &named, &mut ck.optimizer, &cfg.adam)?;
    Ok(values)
}

/// Trains from `start` (fresh or resumed) over `sentences`, scoring on
/// `dev` every `eval_every_steps` steps and at the last step. `on_row` sees
/// every log row as it is produced.
pub fn train(
    start: Checkpoint,
    sentences: &[String],
    dev: &[ScoredPair],
    mut on_row: impl FnMut(&LogRow),
) -> Result<TrainOutcome, TrainError> {
    let cfg = start.config.train_config()?;
    let data = encode_corpus(sentences, &start.vocab)?;
    if dev.len() >= 2 && dev.iter().all(|p| p.gold == dev[0].gold) {
        return Err(TrainError::ConstantDev);
    }
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = {
        let full = (cfg.epochs * batches_per_epoch) as u64;
        if cfg.max_steps > 0 {
            full.min(cfg.max_steps as u64)
        } else {
            full
        }
    };

    let mut ck = start;
    let mut best_score: Option<f64> = ck.meta.get(META_BEST).and_then(|v| v.parse().ok());
    let mut best: Option<Checkpoint> = None;
    let mut log = Vec::new();
    let mut epoch = meta_usize(&ck, META_EPOCH);
    let mut next_batch = meta_usize(&ck, META_BATCH);

    while ck.optimizer.step < total_steps && epoch < cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, data.len());
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        while next_batch < batches.len() && ck.optimizer.step < total_steps {
            let seqs: Vec<Vec<usize>> = batches[next_batch].iter().map(|&i| data[i].clone()).collect();
            let batch = SentenceBatch::from_ids(&seqs, MIN_BATCH_LEN)?;
            let losses = train_step(&mut ck, &cfg, &batch)?;
            next_batch += 1;
            let step = ck.optimizer.step;
            let (e, b) = if next_batch == batches.len() {
                (epoch + 1, 0)
            } else {
                (epoch, next_batch)
            };
            ck.meta.insert(META_EPOCH.into(), e.to_string());
            ck.meta.insert(META_BATCH.into(), b.to_string());

            let due = step.is_multiple_of(cfg.eval_every_steps as u64) || step == total_steps;
            let dev_spearman = if due && dev.len() >= 2 { dev_score(&ck, dev)? } else { None };
            if let Some(r) = dev_spearman {
                log::info!("step {step}: loss {:.6}, dev spearman {r:.4}", losses.total);
                if best_score.is_none_or(|b| r > b) {
                    best_score = Some(r);
                    ck.meta.insert(META_BEST.into(), r.to_string());
                    ck.meta.insert(META_BEST_STEP.into(), step.to_string());
                    best = Some(ck.clone());
                }
            }
            let row = LogRow {
                step,
                losses,
                dev_spearman,
            };
            on_row(&row);
            log.push(row);
        }
        if next_batch >= batches.len() {
            epoch += 1;
            next_batch = 0;
        }
    }
    Ok(TrainOutcome {
        best,
        last: ck,
        log,
        best_dev_spearman: best_score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Vec<String> {
        [
            "a man is playing a guitar",
            "a woman is slicing an onion",
            "the cat sits on the mat",
            "two dogs run in the park",
            "a child reads a book",
            "the sun rises over the hills",
            "a man rides a horse",
            "people are dancing at a party",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }

    fn dev() -> Vec<ScoredPair> {
        [
            (4.5, "a man plays a guitar", "a man is playing a guitar"),
            (0.5, "the cat sits on the mat", "two dogs run in the park"),
            (2.0, "a woman is slicing an onion", "a child reads a book"),
            (3.5, "a man rides a horse", "a man is riding a horse"),
        ]
        .iter()
        .map(|&(g, a, b)| ScoredPair {
            gold: g,
            sentence_a: a.into(),
            sentence_b: b.into(),
        })
        .collect()
    }

    fn start(overrides: &[&str]) -> Checkpoint {
        let sentences = corpus();
        let vocab = Vocab::from_sentences(sentences.iter().map(String::as_str), 1).unwrap();
        let freq = FrequencyTable::from_sentences(sentences.iter().map(String::as_str), &vocab);
        let mut cfg = RunConfig::default();
        for o in ["dim=8", "co_t=6", "co_c=2", "batch_size=3", "eval_every_steps=2", "epochs=2"] {
            cfg.apply_override(o).unwrap();
        }
        for o in overrides {
            cfg.apply_override(o).unwrap();
        }
        initial_checkpoint(&cfg, vocab, freq).unwrap()
    }

    #[test]
    fn same_seed_is_bitwise_reproducible() {
        let a = train(start(&[]), &corpus(), &dev(), |_| {}).unwrap();
        let b = train(start(&[]), &corpus(), &dev(), |_| {}).unwrap();
        assert_eq!(a.last.to_bytes(), b.last.to_bytes());
        assert_eq!(log_csv(&a.log), log_csv(&b.log));
        assert_eq!(a.log.len(), 6);
        assert_eq!(a.last.optimizer.step, 6);
    }

    #[test]
    fn different_seed_differs() {
        let a = train(start(&[]), &corpus(), &dev(), |_| {}).unwrap();
        let b = train(start(&["seed=7"]), &corpus(), &dev(), |_| {}).unwrap();
        assert_ne!(a.last.params, b.last.params);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let full = train(start(&[]), &corpus(), &dev(), |_| {}).unwrap();
        let mut first = start(&[]);
        first.config.set("max_steps", "4").unwrap();
        let mut half = train(first, &corpus(), &dev(), |_| {}).unwrap().last;
        half = Checkpoint::from_bytes(&half.to_bytes()).unwrap();
        half.config.set("max_steps", "0").unwrap();
        let rest = train(half, &corpus(), &dev(), |_| {}).unwrap();
        assert_eq!(rest.last.params, full.last.params);
        assert_eq!(rest.log.len(), 2);
        assert_eq!(rest.log.last().unwrap(), full.log.last().unwrap());
    }

    #[test]
    fn best_score_never_decreases() {
        let out = train(start(&["eval_every_steps=1"]), &corpus(), &dev(), |_| {}).unwrap();
        let mut best = f64::NEG_INFINITY;
        for r in out.log.iter().filter_map(|r| r.dev_spearman) {
            best = best.max(r);
        }
        assert_eq!(out.best_dev_spearman, Some(best));
        let stored: f64 = out.best.unwrap().meta[META_BEST].parse().unwrap();
        assert_eq!(stored, best);
    }

    #[test]
    fn ablation_modes_show_in_log() {
        let out = train(start(&["ablation=no_sal"]), &corpus(), &dev(), |_| {}).unwrap();
        assert!(out.log.iter().all(|r| r.losses.mean_weight == 1.0));
        let out = train(start(&["ablation=no_sal_no_decoder"]), &corpus(), &dev(), |_| {}).unwrap();
        assert!(out.log.iter().all(|r| r.losses.recon == 0.0 && r.losses.recon_pos == 0.0));
    }

    #[test]
    fn resumed_no_sal_keeps_mode() {
        let mut first = start(&["ablation=no_sal", "max_steps=2"]);
        first.config.set("max_steps", "2").unwrap();
        let half = train(first, &corpus(), &dev(), |_| {}).unwrap().last;
        let mut back = Checkpoint::from_bytes(&half.to_bytes()).unwrap();
        back.config.set("max_steps", "0").unwrap();
        let rest = train(back, &corpus(), &dev(), |_| {}).unwrap();
        assert!(!rest.log.is_empty());
        assert!(rest.log.iter().all(|r| r.losses.mean_weight == 1.0));
    }

    #[test]
    fn frozen_embeddings_stay_fixed() {
        let s = start(&["freeze_embeddings=true"]);
        let table = s.params.get(EMBEDDING).unwrap().clone();
        let out = train(s, &corpus(), &dev(), |_| {}).unwrap();
        assert_eq!(out.last.params.get(EMBEDDING).unwrap(), &table);
    }

    #[test]
    fn input_errors() {
        assert!(matches!(
            train(start(&[]), &[], &dev(), |_| {}),
            Err(TrainError::EmptyCorpus)
        ));
        let mut flat = dev();
        flat.iter_mut().for_each(|p| p.gold = 3.0);
        assert!(matches!(
            train(start(&[]), &corpus(), &flat, |_| {}),
            Err(TrainError::ConstantDev)
        ));
        let bad = vec!["fine sentence".to_string(), "  ".to_string()];
        assert!(matches!(
            train(start(&[]), &bad, &dev(), |_| {}),
            Err(TrainError::Corpus(CorpusError::EmptySentence { index: 1 }))
        ));
    }
}
