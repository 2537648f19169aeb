//! Versioned binary checkpoint.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SARC" | version u16 | total length u64
//! header:  u32 length, UTF-8 `key=value` lines
//! vocab:   u32 length, one token per line
//! tensors: u32 count, then per tensor
//!          u16 name length, name, u8 dtype, u8 rank, u64 dims[rank],
//!          u64 payload offset, u64 byte length
//! payload
//! CRC-64 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::corpus::{FrequencyTable, Vocab, CHECKSUM};
use crate::model::ModelParams;
use crate::optim::OptimizerState;
use crate::tensor::{DType, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"SARC";
pub const VERSION: u16 = 1;
const PREAMBLE: usize = 4 + 2 + 8;
const TRAILER: usize = 8;

const PARAM_PREFIX: &str = "param/";
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";
const FREQ_COUNTS: &str = "freq.counts";
const FREQ_VALUES: &str = "freq.values";
const CONFIG_PREFIX: &str = "config.";
const META_PREFIX: &str = "meta.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads version {VERSION})")]
    UnsupportedVersion { found: u16 },
    #[error("checkpoint truncated: {actual} of {expected} bytes present")]
    Truncated { expected: u64, actual: u64 },
    #[error("checkpoint checksum mismatch (stored {stored:016x}, computed {computed:016x})")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error("checkpoint tensors: {0}")]
    Tensor(#[from] TensorError),
}

/// Everything needed to embed sentences or resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub vocab: Vocab,
    pub freq: FrequencyTable,
    /// Free-form training progress (epoch, best dev score, ...).
    pub meta: BTreeMap<String, String>,
}

enum Payload<'a> {
    F32(&'a [f32]),
    F64(Vec<f64>),
}

struct Entry<'a> {
    name: String,
    shape: Vec<usize>,
    data: Payload<'a>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        for line in self.config.to_file_string().lines() {
            let (k, v) = line.split_once(" = ").expect("config echo format");
            header.push_str(&format!("{CONFIG_PREFIX}{k}={v}\n"));
        }
        header.push_str(&format!("vocab_checksum={:016x}\n", self.vocab.checksum()));
        header.push_str(&format!("opt_step={}\n", self.optimizer.step));
        for (k, v) in &self.meta {
            header.push_str(&format!("{META_PREFIX}{k}={v}\n"));
        }
        let vocab = self.vocab.to_file_string();

        let mut entries = Vec::new();
        for (name, t) in self.params.iter() {
            entries.push(Entry {
                name: format!("{PARAM_PREFIX}{name}"),
                shape: t.shape().to_vec(),
                data: Payload::F32(t.data()),
            });
        }
        for (prefix, moments) in [(M_PREFIX, &self.optimizer.m), (V_PREFIX, &self.optimizer.v)] {
            for (name, values) in moments {
                entries.push(Entry {
                    name: format!("{prefix}{name}"),
                    shape: vec![values.len()],
                    data: Payload::F32(values),
                });
            }
        }
        let n = self.freq.len();
        entries.push(Entry {
            name: FREQ_COUNTS.into(),
            shape: vec![n],
            data: Payload::F64(self.freq.counts().iter().map(|&c| c as f64).collect()),
        });
        entries.push(Entry {
            name: FREQ_VALUES.into(),
            shape: vec![n],
            data: Payload::F64(self.freq.frequencies().to_vec()),
        });

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u64.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(vocab.len() as u32).to_le_bytes());
        out.extend_from_slice(vocab.as_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for e in &entries {
            let (dtype, bytes) = match &e.data {
                Payload::F32(d) => (DType::F32, d.len() * 4),
                Payload::F64(d) => (DType::F64, d.len() * 8),
            };
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(dtype.code());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(bytes as u64).to_le_bytes());
            offset += bytes as u64;
        }
        for e in &entries {
            match &e.data {
                Payload::F32(d) => d.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Payload::F64(d) => d.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        let total = (out.len() + TRAILER) as u64;
        out[6..14].copy_from_slice(&total.to_le_bytes());
        let crc = CHECKSUM.checksum(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
            return Err(if MAGIC.starts_with(bytes) {
                CheckpointError::Truncated {
                    expected: PREAMBLE as u64,
                    actual: bytes.len() as u64,
                }
            } else {
                CheckpointError::BadMagic
            });
        }
        if bytes.len() < PREAMBLE {
            return Err(CheckpointError::Truncated {
                expected: PREAMBLE as u64,
                actual: bytes.len() as u64,
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }
        let total = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes"));
        let actual = bytes.len() as u64;
        if actual < total {
            return Err(CheckpointError::Truncated { expected: total, actual });
        }
        if actual > total || total < (PREAMBLE + TRAILER) as u64 {
            return Err(CheckpointError::Malformed(format!(
                "declared length {total} but file has {actual} bytes"
            )));
        }
        let body = &bytes[..bytes.len() - TRAILER];
        let stored = u64::from_le_bytes(bytes[bytes.len() - TRAILER..].try_into().expect("8 bytes"));
        let computed = CHECKSUM.checksum(body);
        if stored != computed {
            return Err(CheckpointError::ChecksumMismatch { stored, computed });
        }
        parse_body(&body[PREAMBLE..])
    }

    /// Writes via a temporary file and rename so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Malformed(format!("section overruns the file at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self, n: usize) -> Result<&'a str, CheckpointError> {
        std::str::from_utf8(self.take(n)?).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
}

struct DirEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn parse_body(body: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes: body, at: 0 };
    let n = r.u32()? as usize;
    let header = r.text(n)?;
    let n = r.u32()? as usize;
    let vocab_text = r.text(n)?;
    let count = r.u32()? as usize;
    let mut dir = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = r.text(n)?.to_string();
        let code = r.u8()?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor '{name}' has unknown dtype {code}")))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let offset = r.u64()? as usize;
        let len = r.u64()? as usize;
        dir.push(DirEntry {
            name,
            dtype,
            shape,
            offset,
            len,
        });
    }
    let payload = &body[r.at..];

    let mut config = RunConfig::default();
    let mut meta = BTreeMap::new();
    let mut vocab_checksum = None;
    let mut opt_step = 0u64;
    for line in header.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Malformed(format!("header line '{line}'")))?;
        if let Some(key) = k.strip_prefix(CONFIG_PREFIX) {
            config.set(key, v)?;
        } else if let Some(key) = k.strip_prefix(META_PREFIX) {
            meta.insert(key.to_string(), v.to_string());
        } else if k == "vocab_checksum" {
            vocab_checksum = u64::from_str_radix(v, 16).ok();
        } else if k == "opt_step" {
            opt_step = v
                .parse()
                .map_err(|_| CheckpointError::Malformed(format!("opt_step '{v}'")))?;
        } else {
            return Err(CheckpointError::Malformed(format!("unknown header key '{k}'")));
        }
    }
    let vocab = Vocab::from_file_string(vocab_text, Path::new("<checkpoint>"))
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if vocab_checksum != Some(vocab.checksum()) {
        return Err(CheckpointError::Malformed("vocabulary checksum does not match header".into()));
    }

    let mut params = BTreeMap::new();
    let mut optimizer = OptimizerState {
        step: opt_step,
        ..OptimizerState::default()
    };
    let mut counts = None;
    let mut freqs = None;
    for e in dir {
        let bytes = payload
            .get(e.offset..e.offset.saturating_add(e.len))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor '{}' lies outside the payload", e.name)))?;
        let numel: usize = e.shape.iter().product();
        if e.len != numel * e.dtype.size() {
            return Err(CheckpointError::Malformed(format!("tensor '{}' byte length", e.name)));
        }
        match e.dtype {
            DType::F32 => {
                let data: Vec<f32> = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                if let Some(name) = e.name.strip_prefix(PARAM_PREFIX) {
                    params.insert(name.to_string(), Tensor::new(e.shape, data)?);
                } else if let Some(name) = e.name.strip_prefix(M_PREFIX) {
                    optimizer.m.insert(name.to_string(), data);
                } else if let Some(name) = e.name.strip_prefix(V_PREFIX) {
                    optimizer.v.insert(name.to_string(), data);
                } else {
                    return Err(CheckpointError::Malformed(format!("unexpected tensor '{}'", e.name)));
                }
            }
            DType::F64 => {
                let data: Vec<f64> = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                match e.name.as_str() {
                    FREQ_COUNTS => counts = Some(data.into_iter().map(|c| c as u64).collect::<Vec<_>>()),
                    FREQ_VALUES => freqs = Some(data),
                    _ => return Err(CheckpointError::Malformed(format!("unexpected tensor '{}'", e.name))),
                }
            }
        }
    }
    let (Some(counts), Some(freqs)) = (counts, freqs) else {
        return Err(CheckpointError::Malformed("missing frequency table".into()));
    };
    let params = ModelParams::from_tensors(params)?;
    for (name, moments) in optimizer.m.iter().chain(optimizer.v.iter()) {
        let expected = params.get(name).map(Tensor::numel);
        if expected != Some(moments.len()) {
            return Err(CheckpointError::Malformed(format!("optimizer moments for '{name}' do not match")));
        }
    }
    Ok(Checkpoint {
        config,
        params,
        optimizer,
        vocab,
        freq: FrequencyTable::from_parts(counts, freqs),
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, EMBEDDING};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let text = ["a man is playing a guitar", "a woman slices an onion"];
        let vocab = Vocab::from_sentences(text, 1).unwrap();
        let freq = FrequencyTable::from_sentences(text, &vocab);
        let dims = ModelDims {
            vocab_size: vocab.len(),
            dim: 4,
            co_t: 5,
            co_c: 2,
        };
        let params = ModelParams::init(dims, &vocab, 0.1, &mut ChaCha8Rng::seed_from_u64(1), None).unwrap();
        let mut optimizer = OptimizerState {
            step: 7,
            ..OptimizerState::default()
        };
        let n = params.get(EMBEDDING).unwrap().numel();
        optimizer.m.insert(EMBEDDING.into(), (0..n).map(|i| i as f32 * 0.5).collect());
        optimizer.v.insert(EMBEDDING.into(), (0..n).map(|i| i as f32 * 0.25).collect());
        let mut config = RunConfig::default();
        config.set("ablation", "no_sal").unwrap();
        config.set("dim", "4").unwrap();
        Checkpoint {
            config,
            params,
            optimizer,
            vocab,
            freq,
            meta: BTreeMap::from([("epoch".into(), "0".into()), ("best_dev".into(), "0.25".into())]),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.config.get("ablation"), Some("no_sal"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn every_corrupted_byte_is_caught() {
        let bytes = sample().to_bytes();
        for i in (0..bytes.len()).step_by(7) {
            let mut bad = bytes.clone();
            bad[i] ^= 0x5a;
            assert!(Checkpoint::from_bytes(&bad).is_err(), "byte {i}");
        }
        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn failures_are_distinct() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));

        let mut bad = bytes.clone();
        bad[4..6].copy_from_slice(&9u16.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::UnsupportedVersion { found: 9 })
        ));

        for cut in [2, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(CheckpointError::Truncated { .. })
            ));
        }
    }
}
