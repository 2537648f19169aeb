//! Tokenization, vocabulary and token-frequency tables, dataset readers and
//! padded batching.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crc::{Crc, CRC_64_ECMA_182};
use thiserror::Error;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
/// Number of reserved ids at the front of every vocabulary.
pub const RESERVED: usize = 2;
/// Largest TextCNN kernel; batches are never shorter than this.
pub const MIN_BATCH_LEN: usize = 5;

pub const CHECKSUM: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: corpus contains no tokens")]
    EmptyCorpus { path: PathBuf },
    #[error("empty vocabulary (no token reaches min_count {min_count})")]
    EmptyVocabulary { min_count: usize },
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("sentence {index} is empty after tokenization")]
    EmptySentence { index: usize },
    #[error("min_count must be at least 1")]
    MinCount,
}

pub type CorpusResult<T> = Result<T, CorpusError>;

fn read(path: &Path) -> CorpusResult<String> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// CRC-64 of a file's bytes.
pub fn file_checksum(path: &Path) -> CorpusResult<u64> {
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(CHECKSUM.checksum(&bytes))
}

/// Lowercases, splits on whitespace, and peels leading and trailing
/// punctuation off every piece as one-character tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for piece in text.split_whitespace() {
        let piece = piece.to_lowercase();
        let chars: Vec<char> = piece.chars().collect();
        let start = chars.iter().position(|c| !c.is_ascii_punctuation());
        let Some(start) = start else {
            tokens.extend(chars.iter().map(|c| c.to_string()));
            continue;
        };
        let end = chars.iter().rposition(|c| !c.is_ascii_punctuation()).unwrap() + 1;
        tokens.extend(chars[..start].iter().map(|c| c.to_string()));
        tokens.push(chars[start..end].iter().collect());
        tokens.extend(chars[end..].iter().map(|c| c.to_string()));
    }
    tokens
}

/// Token/id mapping. Ids 0 and 1 are PAD and UNK; the rest follow
/// descending corpus count, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from an ordered list of non-reserved tokens.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(tokens.into_iter().map(Into::into));
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens: all, index }
    }

    /// Counts tokens over `sentences` and keeps those seen `min_count` times.
    pub fn from_sentences<'a, I>(sentences: I, min_count: usize) -> CorpusResult<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if min_count == 0 {
            return Err(CorpusError::MinCount);
        }
        let counts = count_tokens(sentences);
        let mut kept: Vec<(&String, &u64)> = counts.iter().filter(|(_, &c)| c >= min_count as u64).collect();
        if kept.is_empty() {
            return Err(CorpusError::EmptyVocabulary { min_count });
        }
        kept.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        Ok(Self::from_tokens(kept.into_iter().map(|(t, _)| t.clone())))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens[RESERVED..]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn checksum(&self) -> u64 {
        CHECKSUM.checksum(self.tokens().join("\n").as_bytes())
    }

    /// One token per line; line `n` (1-based) holds id `n - 1 + RESERVED`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in self.tokens() {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> CorpusResult<()> {
        fs::write(path, self.to_file_string()).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> CorpusResult<Self> {
        Self::from_file_string(&read(path)?, path)
    }

    /// Parses the output of `to_file_string`; `path` is only used in errors.
    pub fn from_file_string(text: &str, path: &Path) -> CorpusResult<Self> {
        let tokens: Vec<&str> = text.lines().collect();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(CorpusError::Malformed {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: "vocabulary entries must be single non-empty tokens".into(),
                });
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}

fn count_tokens<'a, I>(sentences: I) -> HashMap<String, u64>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts = HashMap::new();
    for s in sentences {
        for t in tokenize(s) {
            *counts.entry(t).or_insert(0u64) += 1;
        }
    }
    counts
}

/// Reads the corpus at `path` and builds a vocabulary from it.
pub fn build_vocab(corpus_path: &Path, min_count: usize) -> CorpusResult<Vocab> {
    let sentences = load_corpus(corpus_path)?;
    if sentences.iter().all(|s| tokenize(s).is_empty()) {
        return Err(CorpusError::EmptyCorpus {
            path: corpus_path.to_path_buf(),
        });
    }
    Vocab::from_sentences(sentences.iter().map(String::as_str), min_count)
}

/// Normalized corpus frequency per vocabulary id. Out-of-vocabulary
/// occurrences are credited to UNK; PAD is always 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    counts: Vec<u64>,
    freq: Vec<f64>,
}

impl FrequencyTable {
    pub fn from_sentences<'a, I>(sentences: I, vocab: &Vocab) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts = vec![0u64; vocab.len()];
        for s in sentences {
            for t in tokenize(s) {
                counts[vocab.id(&t)] += 1;
            }
        }
        Self::from_counts(counts)
    }

    pub fn from_counts(mut counts: Vec<u64>) -> Self {
        if let Some(pad) = counts.get_mut(PAD) {
            *pad = 0;
        }
        let total: u64 = counts.iter().sum();
        let freq = counts
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect();
        Self { counts, freq }
    }

    /// Rebuilds a table from stored frequencies (counts are not retained).
    pub fn from_frequencies(freq: Vec<f64>) -> Self {
        Self {
            counts: vec![0; freq.len()],
            freq,
        }
    }

    /// Restores a table saved as counts plus frequencies.
    pub fn from_parts(counts: Vec<u64>, freq: Vec<f64>) -> Self {
        Self { counts, freq }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.freq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freq.is_empty()
    }

    pub fn freq(&self, id: usize) -> f64 {
        self.freq.get(id).copied().unwrap_or(self.freq[UNK])
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts.get(id).copied().unwrap_or(0)
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.freq
    }

    /// `token\tcount\tfreq` lines for every id except PAD.
    pub fn to_tsv(&self, vocab: &Vocab) -> String {
        let mut s = String::from("token\tcount\tfreq\n");
        for id in 1..self.freq.len() {
            let tok = vocab.token(id).unwrap_or(UNK_TOKEN);
            s.push_str(&format!("{tok}\t{}\t{}\n", self.counts[id], self.freq[id]));
        }
        s
    }
}

/// Frequency table of the corpus at `corpus_path` under `vocab`.
///
/// `expected_checksum` is the corpus checksum recorded when the vocabulary
/// was built; a mismatch is logged and reported but does not fail.
pub fn token_frequency(
    corpus_path: &Path,
    vocab: &Vocab,
    expected_checksum: Option<u64>,
) -> CorpusResult<(FrequencyTable, bool)> {
    let text = read(corpus_path)?;
    let actual = CHECKSUM.checksum(text.as_bytes());
    let mismatch = expected_checksum.is_some_and(|c| c != actual);
    if mismatch {
        log::warn!(
            "{}: corpus checksum {actual:016x} differs from the one recorded with the vocabulary",
            corpus_path.display()
        );
    }
    Ok((FrequencyTable::from_sentences(text.lines(), vocab), mismatch))
}

/// One line per sentence; blank lines are skipped.
pub fn load_corpus(path: &Path) -> CorpusResult<Vec<String>> {
    let text = read(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub gold: f64,
    pub sentence_a: String,
    pub sentence_b: String,
}

impl ScoredPair {
    pub fn tokens_a(&self) -> Vec<String> {
        tokenize(&self.sentence_a)
    }

    pub fn tokens_b(&self) -> Vec<String> {
        tokenize(&self.sentence_b)
    }
}

/// Reads `score<TAB>sentence_a<TAB>sentence_b` lines. Blank lines are skipped.
pub fn load_sts_pairs(path: &Path) -> CorpusResult<Vec<ScoredPair>> {
    let text = read(path)?;
    parse_sts_pairs(&text, path)
}

pub fn parse_sts_pairs(text: &str, path: &Path) -> CorpusResult<Vec<ScoredPair>> {
    let malformed = |line: usize, reason: String| CorpusError::Malformed {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(malformed(lineno, format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let gold: f64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| malformed(lineno, format!("invalid score {:?}", fields[0])))?;
        if !(0.0..=5.0).contains(&gold) {
            return Err(malformed(lineno, format!("score {gold} outside [0, 5]")));
        }
        pairs.push(ScoredPair {
            gold,
            sentence_a: fields[1].to_string(),
            sentence_b: fields[2].to_string(),
        });
    }
    Ok(pairs)
}

/// PAD-filled id matrix with its validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceBatch {
    pub ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
}

impl SentenceBatch {
    pub fn size(&self) -> usize {
        self.ids.len()
    }

    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    /// Rows a sentence occupies in the model: its length, or the minimum
    /// kernel-compatible length for short sentences.
    pub fn model_rows(&self, i: usize) -> usize {
        self.lengths[i].max(MIN_BATCH_LEN)
    }

    /// Token ids with padding stripped.
    pub fn unpadded(&self) -> Vec<Vec<usize>> {
        self.ids
            .iter()
            .zip(&self.lengths)
            .map(|(row, &n)| row[..n].to_vec())
            .collect()
    }

    /// Builds a batch from id sequences, padding to
    /// `max(min_len, longest)`.
    pub fn from_ids(sequences: &[Vec<usize>], min_len: usize) -> CorpusResult<Self> {
        if let Some(index) = sequences.iter().position(Vec::is_empty) {
            return Err(CorpusError::EmptySentence { index });
        }
        let width = sequences.iter().map(Vec::len).max().unwrap_or(0).max(min_len);
        let mut ids = Vec::with_capacity(sequences.len());
        let mut mask = Vec::with_capacity(sequences.len());
        for seq in sequences {
            let mut row = seq.clone();
            row.resize(width, PAD);
            let mut m = vec![true; seq.len()];
            m.resize(width, false);
            ids.push(row);
            mask.push(m);
        }
        Ok(Self {
            ids,
            mask,
            lengths: sequences.iter().map(Vec::len).collect(),
        })
    }
}

/// Tokenizes and pads `sentences` into one batch.
pub fn make_batch<S: AsRef<str>>(sentences: &[S], vocab: &Vocab, min_len: usize) -> CorpusResult<SentenceBatch> {
    let seqs: Vec<Vec<usize>> = sentences
        .iter()
        .map(|s| vocab.encode(&tokenize(s.as_ref())))
        .collect();
    SentenceBatch::from_ids(&seqs, min_len)
}
