//! Subcommand implementations behind the `sarcse` binary.
//!
//! Every command writes `resolved_config.txt` and `inputs.txt` (input
//! paths with their CRC-64) into its output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sarcse_core::checkpoint::{Checkpoint, CheckpointError};
use sarcse_core::config::{ConfigError, RunConfig};
use sarcse_core::corpus::{
    build_vocab, file_checksum, load_corpus, load_sts_pairs, token_frequency, tokenize, CorpusError, ScoredPair,
};
use sarcse_core::eval::{embed_texts, evaluate, token_report, token_report_csv, EvalError, EvalReport};
use sarcse_core::objective::AblationMode;
use sarcse_core::trainer::{initial_checkpoint, log_csv, train, TrainError, TrainOutcome};
use thiserror::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// θ grid used by `sweep-theta` when no values are given.
pub const DEFAULT_THETAS: [f64; 7] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Io { .. } | CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::MinCount => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::ZeroNorm { .. } => CliError::Numeric(e.to_string()),
            EvalError::Corpus(c) => c.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            return CliError::Numeric(e.to_string());
        }
        match e {
            TrainError::Config(c) => CliError::Config(c),
            TrainError::Corpus(c) => c.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Config file (or defaults), then `--set` overrides, then `--seed`.
pub fn resolve_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, overrides, seed)?;
    Ok(cfg)
}

/// The config stored in `checkpoint` with `--set`/`--seed` applied, so a
/// resumed run keeps its ablation mode and hyperparameters by default.
pub fn resume_config(checkpoint: &Path, overrides: &[String], seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = Checkpoint::load(checkpoint)?.config;
    apply_overrides(&mut cfg, overrides, seed)?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, overrides: &[String], seed: Option<u64>) -> CliResult<()> {
    for o in overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(())
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, body).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn prepare_dir(dir: &Path, cfg: &RunConfig, inputs: &[&Path]) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write(&dir.join("resolved_config.txt"), cfg.to_file_string())?;
    let mut s = String::from("path\tcrc64\n");
    for p in inputs {
        let _ = writeln!(s, "{}\t{:016x}", p.display(), file_checksum(p)?);
    }
    write(&dir.join("inputs.txt"), s)
}

fn load_pairs(path: &Path) -> CliResult<Vec<ScoredPair>> {
    Ok(load_sts_pairs(path)?)
}

/// Writes `vocab.txt` and `freq.tsv` built from `corpus`.
pub fn cmd_build_vocab(cfg: &RunConfig, corpus: &Path, out: &Path) -> CliResult<()> {
    let tc = cfg.train_config()?;
    let vocab = build_vocab(corpus, tc.min_count)?;
    let (freq, _) = token_frequency(corpus, &vocab, None)?;
    prepare_dir(out, cfg, &[corpus])?;
    write(&out.join("vocab.txt"), vocab.to_file_string())?;
    write(&out.join("freq.tsv"), freq.to_tsv(&vocab))?;
    log::info!("{} tokens in vocabulary", vocab.len());
    Ok(())
}

/// Trains from scratch (or resumes) and writes `best.ckpt`, `final.ckpt`
/// and `train_log.csv`.
pub fn cmd_train(
    cfg: &RunConfig,
    corpus: &Path,
    dev: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> CliResult<TrainOutcome> {
    let dev_pairs = load_pairs(dev)?;
    let sentences = load_corpus(corpus)?;
    let start = match resume {
        Some(path) => {
            let mut ck = Checkpoint::load(path)?;
            ck.config = cfg.clone();
            ck
        }
        None => {
            let tc = cfg.train_config()?;
            let vocab = build_vocab(corpus, tc.min_count)?;
            let (freq, _) = token_frequency(corpus, &vocab, None)?;
            initial_checkpoint(cfg, vocab, freq)?
        }
    };
    let mut inputs = vec![corpus, dev];
    if let Some(r) = resume {
        inputs.push(r);
    }
    prepare_dir(out, cfg, &inputs)?;
    write(&out.join("vocab.txt"), start.vocab.to_file_string())?;
    write(&out.join("freq.tsv"), start.freq.to_tsv(&start.vocab))?;
    let outcome = train(start, &sentences, &dev_pairs, |row| {
        log::debug!("{}", row.csv_line());
    })?;
    outcome.last.save(&out.join("final.ckpt"))?;
    match &outcome.best {
        Some(best) => best.save(&out.join("best.ckpt"))?,
        None if resume.is_none() => outcome.last.save(&out.join("best.ckpt"))?,
        None => {}
    }
    write(&out.join("train_log.csv"), log_csv(&outcome.log))?;
    Ok(outcome)
}

/// Writes the evaluation report files, plus `token_report.csv` when
/// asked.
pub fn cmd_eval(
    overrides: &[String],
    checkpoint: &Path,
    pairs: &Path,
    out: &Path,
    with_token_report: bool,
) -> CliResult<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let pairs_data = load_pairs(pairs)?;
    let mut cfg = ck.config.clone();
    apply_overrides(&mut cfg, overrides, None)?;
    let tc = cfg.train_config()?;
    let report = evaluate(&ck, &pairs_data, tc.pos_threshold)?;
    prepare_dir(out, &cfg, &[checkpoint, pairs])?;
    report.write(out)?;
    if with_token_report {
        let sentences: Vec<&str> = pairs_data
            .iter()
            .flat_map(|p| [p.sentence_a.as_str(), p.sentence_b.as_str()])
            .collect();
        let rows = token_report(&ck, &sentences, &ck.freq)?;
        write(&out.join("token_report.csv"), token_report_csv(&rows))?;
    }
    Ok(report)
}

/// Writes `embeddings.tsv`: one tab-separated vector per input line.
pub fn cmd_embed(checkpoint: &Path, sentences: &Path, out: &Path) -> CliResult<usize> {
    let ck = Checkpoint::load(checkpoint)?;
    let text = fs::read_to_string(sentences).map_err(|source| CliError::Io {
        path: sentences.to_path_buf(),
        source,
    })?;
    let lines: Vec<&str> = text.lines().collect();
    if let Some(i) = lines.iter().position(|l| tokenize(l).is_empty()) {
        return Err(CliError::Data(format!(
            "{}:{}: empty sentence cannot be embedded",
            sentences.display(),
            i + 1
        )));
    }
    let z = embed_texts(&ck.params, &ck.vocab, &lines)?;
    prepare_dir(out, &ck.config, &[checkpoint, sentences])?;
    let mut s = String::new();
    for v in &z {
        let row: Vec<String> = v.iter().map(|x| format!("{x:.8}")).collect();
        let _ = writeln!(s, "{}", row.join("\t"));
    }
    write(&out.join("embeddings.tsv"), s)?;
    Ok(z.len())
}

/// One row of an ablation or sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantRow {
    pub label: String,
    pub seed: u64,
    pub dev_spearman: Option<f64>,
    pub test_spearman: Option<f64>,
    /// Reconstruction losses at the last training step.
    pub final_recon: f64,
    pub final_recon_pos: f64,
}

fn fmt_score(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |r| format!("{r:.4}"))
}

pub fn variant_table(key: &str, rows: &[VariantRow]) -> String {
    let mut s = format!("{key},seed,dev_spearman,test_spearman,final_l_r,final_l_r_plus\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.8},{:.8}",
            r.label,
            r.seed,
            fmt_score(r.dev_spearman),
            fmt_score(r.test_spearman),
            r.final_recon,
            r.final_recon_pos
        );
    }
    s
}

fn run_variant(
    label: String,
    cfg: &RunConfig,
    corpus: &Path,
    dev: &Path,
    test: &Path,
    out: &Path,
) -> CliResult<VariantRow> {
    let outcome = cmd_train(cfg, corpus, dev, out, None)?;
    let best = outcome.best.as_ref().unwrap_or(&outcome.last);
    let report = evaluate(best, &load_pairs(test)?, cfg.train_config()?.pos_threshold)?;
    let last = outcome.log.last().map(|r| r.losses);
    Ok(VariantRow {
        label,
        seed: cfg.train_config()?.seed,
        dev_spearman: outcome.best_dev_spearman,
        test_spearman: report.spearman,
        final_recon: last.map_or(0.0, |l| l.recon),
        final_recon_pos: last.map_or(0.0, |l| l.recon_pos),
    })
}

/// Trains every ablation mode with the same seed and writes
/// `ablation.csv`.
pub fn cmd_ablate(cfg: &RunConfig, corpus: &Path, dev: &Path, test: &Path, out: &Path) -> CliResult<Vec<VariantRow>> {
    prepare_dir(out, cfg, &[corpus, dev, test])?;
    let mut rows = Vec::new();
    for mode in AblationMode::ALL {
        let mut c = cfg.clone();
        c.set("ablation", mode.as_str())?;
        log::info!("training variant {mode}");
        rows.push(run_variant(
            mode.to_string(),
            &c,
            corpus,
            dev,
            test,
            &out.join(mode.as_str()),
        )?);
    }
    write(&out.join("ablation.csv"), variant_table("variant", &rows))?;
    Ok(rows)
}

/// Trains once per θ and writes `theta_sweep.csv`.
pub fn cmd_sweep_theta(
    cfg: &RunConfig,
    thetas: &[f64],
    corpus: &Path,
    dev: &Path,
    test: &Path,
    out: &Path,
) -> CliResult<Vec<VariantRow>> {
    if thetas.is_empty() {
        return Err(CliError::Usage("no theta values given".into()));
    }
    prepare_dir(out, cfg, &[corpus, dev, test])?;
    let mut rows = Vec::new();
    for &theta in thetas {
        let mut c = cfg.clone();
        c.set("theta", &theta.to_string())?;
        log::info!("training theta = {theta}");
        rows.push(run_variant(
            theta.to_string(),
            &c,
            corpus,
            dev,
            test,
            &out.join(format!("theta_{theta}")),
        )?);
    }
    write(&out.join("theta_sweep.csv"), variant_table("theta", &rows))?;
    Ok(rows)
}

/// Parses `0,0.1,0.2`.
pub fn parse_thetas(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad theta value '{v}'")))
        })
        .collect()
}
