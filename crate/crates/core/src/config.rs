//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::losses::LossConfig;
use crate::model::ModelDims;
use crate::objective::AblationMode;
use crate::optim::AdamWConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected 'key = value', found '{text}'")]
    Syntax { line: usize, text: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("bad value '{value}' for '{key}': {reason}")]
    Value {
        key: String,
        value: String,
        reason: String,
    },
    #[error("override '{0}' is not of the form key=value")]
    Override(String),
}

/// Every key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "42", "RNG seed for init, shuffling and dropout"),
    ("batch_size", "16", "sentences per batch"),
    ("epochs", "1", "passes over the corpus"),
    ("max_steps", "0", "stop after this many steps (0 = no limit)"),
    ("eval_every_steps", "50", "dev evaluation cadence in steps"),
    ("dropout_rate", "0.1", "dropout on token embeddings"),
    ("dim", "32", "token embedding width"),
    ("co_t", "64", "TextCNN output channels"),
    ("co_c", "3", "integrator output channels"),
    ("init_scale", "0.1", "embedding init range"),
    ("min_count", "1", "vocabulary count cutoff"),
    ("freeze_embeddings", "false", "keep the embedding table fixed"),
    ("pretrained_vectors", "", "optional 'token v1 .. vd' file"),
    ("lr", "0.001", "AdamW learning rate"),
    ("adam_beta1", "0.9", "AdamW first-moment decay"),
    ("adam_beta2", "0.999", "AdamW second-moment decay"),
    ("adam_eps", "1e-8", "AdamW epsilon"),
    ("weight_decay", "0.01", "AdamW decoupled weight decay"),
    ("theta", "0.1", "token weight floor"),
    ("lambda", "50", "token weight frequency slope"),
    ("tau", "0.05", "InfoNCE temperature"),
    ("alpha", "1", "contrastive loss weight"),
    ("beta", "0.00025", "anchor reconstruction weight"),
    ("gamma", "0.00025", "augmented reconstruction weight"),
    ("detach_reconstruction_target", "false", "stop gradient into reconstruction targets"),
    ("ablation", "full", "full | no_sal | no_sal_no_decoder"),
    ("pos_threshold", "4.0", "gold score for positive pairs in alignment"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: usize,
    pub eval_every_steps: usize,
    pub dropout_rate: f64,
    pub dim: usize,
    pub co_t: usize,
    pub co_c: usize,
    pub init_scale: f64,
    pub min_count: usize,
    pub freeze_embeddings: bool,
    pub pretrained_vectors: Option<PathBuf>,
    pub adam: AdamWConfig,
    pub loss: LossConfig,
    pub ablation: AblationMode,
    pub pos_threshold: f64,
}

impl TrainConfig {
    pub fn dims(&self, vocab_size: usize) -> ModelDims {
        ModelDims {
            vocab_size,
            dim: self.dim,
            co_t: self.co_t,
            co_c: self.co_c,
        }
    }

    /// The loss weights actually used under the ablation mode.
    pub fn effective_loss(&self) -> LossConfig {
        match self.ablation {
            AblationMode::NoSalNoDecoder => LossConfig {
                beta: 0.0,
                gamma: 0.0,
                ..self.loss
            },
            _ => self.loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn bad(key: &str, value: &str, reason: impl fmt::Display) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| bad(key, value, e))
}

impl RunConfig {
    /// Defaults overlaid with the `key = value` lines of `text`.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Sets one key, checking the key exists and the value parses.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !self.values.contains_key(key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        let old = self.values.insert(key.to_string(), value.to_string());
        if let Err(e) = self.train_config() {
            if let Some(old) = old {
                self.values.insert(key.to_string(), old);
            }
            return Err(e);
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| ConfigError::Override(spec.to_string()))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// The resolved configuration, one `key = value` line per key in
    /// declaration order.
    pub fn to_file_string(&self) -> String {
        KEYS.iter()
            .map(|(k, _, _)| format!("{k} = {}\n", self.values[*k]))
            .collect()
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let v = |k: &str| self.values[k].as_str();
        let pos_usize = |k: &str| -> Result<usize, ConfigError> {
            let n: usize = parse(k, v(k))?;
            if n == 0 {
                return Err(bad(k, v(k), "must be at least 1"));
            }
            Ok(n)
        };
        let real = |k: &str| -> Result<f64, ConfigError> {
            let x: f64 = parse(k, v(k))?;
            if !x.is_finite() {
                return Err(bad(k, v(k), "must be finite"));
            }
            Ok(x)
        };

        let dropout_rate = real("dropout_rate")?;
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(bad("dropout_rate", v("dropout_rate"), "must be in [0, 1)"));
        }
        let co_t = pos_usize("co_t")?;
        if co_t < 2 {
            return Err(bad("co_t", v("co_t"), "must be at least 2"));
        }
        let init_scale = real("init_scale")?;
        if init_scale < 0.0 {
            return Err(bad("init_scale", v("init_scale"), "must be >= 0"));
        }
        let pretrained = v("pretrained_vectors");
        let adam = AdamWConfig {
            lr: real("lr")?,
            beta1: real("adam_beta1")?,
            beta2: real("adam_beta2")?,
            eps: real("adam_eps")?,
            weight_decay: real("weight_decay")?,
        };
        for (k, x) in [("adam_beta1", adam.beta1), ("adam_beta2", adam.beta2)] {
            if !(0.0..1.0).contains(&x) {
                return Err(bad(k, v(k), "must be in [0, 1)"));
            }
        }
        for (k, x) in [("lr", adam.lr), ("adam_eps", adam.eps), ("weight_decay", adam.weight_decay)] {
            if x < 0.0 {
                return Err(bad(k, v(k), "must be >= 0"));
            }
        }
        let loss = LossConfig {
            theta: real("theta")?,
            lambda: real("lambda")?,
            tau: real("tau")?,
            alpha: real("alpha")?,
            beta: real("beta")?,
            gamma: real("gamma")?,
            detach_reconstruction_target: parse("detach_reconstruction_target", v("detach_reconstruction_target"))?,
        };
        loss.validate().map_err(|e| ConfigError::Value {
            key: "loss".into(),
            value: String::new(),
            reason: e.to_string(),
        })?;
        Ok(TrainConfig {
            seed: parse("seed", v("seed"))?,
            batch_size: pos_usize("batch_size")?,
            epochs: pos_usize("epochs")?,
            max_steps: parse("max_steps", v("max_steps"))?,
            eval_every_steps: pos_usize("eval_every_steps")?,
            dropout_rate,
            dim: pos_usize("dim")?,
            co_t,
            co_c: pos_usize("co_c")?,
            init_scale,
            min_count: pos_usize("min_count")?,
            freeze_embeddings: parse("freeze_embeddings", v("freeze_embeddings"))?,
            pretrained_vectors: (!pretrained.is_empty()).then(|| PathBuf::from(pretrained)),
            adam,
            loss,
            ablation: parse("ablation", v("ablation"))?,
            pos_threshold: real("pos_threshold")?,
        })
    }
}
