//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Every key has a default, an
//! unknown key is an error, and `--set key=value` style overrides go through
//! [`KvConfig::set`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use crate::corpus::{DocJoin, DocMode};
use crate::error::{Error, Result};
use crate::model::{FreezePolicy, ModelConfig, ModelMode};
use crate::noise::{Placement, Regularizer, RegularizerSpec};
use crate::optim::OptimizerKind;
use crate::train::TrainConfig;

/// Byte-level vocabulary of the built-in tokenizer.
pub const VOCAB_SIZE: usize = 256;

/// Documented keys with their defaults.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "global seed; RETROLITE_SEED applies when neither the config nor --seed sets it"),
    ("model.mode", "on", "off | on"),
    ("model.n_layers", "4", "decoder layers"),
    ("model.d_model", "64", "hidden width; also the retrieval embedding width"),
    ("model.n_heads", "4", "attention heads"),
    ("model.d_ff", "256", "feed-forward width"),
    ("model.seq_len", "128", "tokens per training window"),
    ("model.chunk_len", "8", "tokens per retrieval chunk"),
    ("model.k_neighbors", "3", "neighbors per chunk"),
    ("model.cca_layers", "3", "comma-separated 1-based layers with chunked cross-attention"),
    ("model.encoder_layers", "2", "neighbor encoder layers"),
    ("train.steps", "1000", "optimizer steps"),
    ("train.batch_size", "2", "sequences per step"),
    ("train.lr", "0.001", "peak learning rate"),
    ("train.optimizer", "radam", "radam | adamw"),
    ("train.warmup", "0", "linear warmup steps"),
    ("train.lr_decay", "false", "linear decay to zero after warmup"),
    ("train.freeze_policy", "train_all", "train_all | freeze_backbone_train_cca | finetune_ffw_readout"),
    ("train.grad_clip", "1.0", "global gradient-norm clip"),
    ("train.weight_decay", "0.0", "decoupled weight decay (adamw only)"),
    ("train.checkpoint_every", "0", "steps between checkpoints; 0 keeps only the final one"),
    ("train.neighbor_dropout", "0.0", "probability of replacing a sequence's neighbors with its own chunks"),
    ("reg.kind", "none", "train-time embedding noise: none | gaussian | uniform"),
    ("reg.lambda_t", "0.2", "relative std of the gaussian regularizer"),
    ("reg.alpha", "5.0", "magnitude of the uniform regularizer"),
    ("reg.placement", "neighbors", "sequence | neighbors | both"),
    ("infer.lambda_i", "0.0", "relative std of inference-time read noise on neighbors"),
    ("retrieval.nprobe", "0", "cells probed per query; 0 picks from the database size"),
    ("retrieval.filter", "true", "drop neighbors that overlap the query's own continuation"),
    ("embed.seed", "0", "seed of the hashing embedder"),
    ("corpus.join", "raw", "raw | sep:<token id>"),
    ("corpus.mode", "file", "file | lines"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
    /// Keys assigned by a file or an override rather than left at their default.
    explicit: BTreeSet<String>,
}

impl Default for KvConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
            explicit: BTreeSet::new(),
        }
    }
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.set(line).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got '{assignment}'")))?;
        let (k, v) = (k.trim(), v.trim());
        match self.values.get_mut(k) {
            Some(slot) => {
                *slot = v.to_string();
                self.explicit.insert(k.to_string());
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key '{k}'"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("documented key")
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("cannot parse {key} = '{v}'")))
    }

    /// All keys in sorted order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Typed view of a [`KvConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: ModelMode,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub lambda_i: f64,
    /// `None` picks from the database size.
    pub nprobe: Option<usize>,
    pub filter: bool,
    pub embed_seed: u64,
    pub join: DocJoin,
    pub doc_mode: DocMode,
}

impl RunConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let seed: u64 = kv.parsed("seed")?;
        let mode = match kv.get("model.mode") {
            "off" => ModelMode::Off,
            "on" => ModelMode::On,
            m => return Err(Error::Config(format!("model.mode must be off or on, got '{m}'"))),
        };
        let cca_layers = kv
            .get("model.cca_layers")
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad cca layer '{s}'")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let d_model = kv.parsed("model.d_model")?;
        let model = ModelConfig {
            n_layers: kv.parsed("model.n_layers")?,
            d_model,
            n_heads: kv.parsed("model.n_heads")?,
            d_ff: kv.parsed("model.d_ff")?,
            vocab_size: VOCAB_SIZE,
            seq_len: kv.parsed("model.seq_len")?,
            chunk_len: kv.parsed("model.chunk_len")?,
            k_neighbors: kv.parsed("model.k_neighbors")?,
            cca_layers,
            d_emb: d_model,
            neighbor_encoder_layers: kv.parsed("model.encoder_layers")?,
            seed,
        };
        model.validate()?;
        let kind = match kv.get("reg.kind") {
            "none" => Regularizer::None,
            "gaussian" => Regularizer::Gaussian {
                lambda: kv.parsed("reg.lambda_t")?,
            },
            "uniform" => Regularizer::Uniform {
                alpha: kv.parsed("reg.alpha")?,
            },
            k => return Err(Error::Config(format!("unknown reg.kind '{k}'"))),
        };
        let regularizer = RegularizerSpec {
            kind,
            placement: kv.get("reg.placement").parse::<Placement>()?,
        };
        let train = TrainConfig {
            steps: kv.parsed("train.steps")?,
            batch_size: kv.parsed("train.batch_size")?,
            lr: kv.parsed("train.lr")?,
            optimizer: kv.get("train.optimizer").parse::<OptimizerKind>()?,
            warmup: kv.parsed("train.warmup")?,
            lr_decay: kv.parsed("train.lr_decay")?,
            seed,
            freeze_policy: kv.get("train.freeze_policy").parse::<FreezePolicy>()?,
            regularizer,
            grad_clip: kv.parsed("train.grad_clip")?,
            weight_decay: kv.parsed("train.weight_decay")?,
            checkpoint_every: kv.parsed("train.checkpoint_every")?,
            neighbor_dropout: kv.parsed("train.neighbor_dropout")?,
        };
        train.validate()?;
        let lambda_i: f64 = kv.parsed("infer.lambda_i")?;
        if !(lambda_i >= 0.0) {
            return Err(Error::Config(format!("infer.lambda_i must be >= 0, got {lambda_i}")));
        }
        let nprobe: usize = kv.parsed("retrieval.nprobe")?;
        Ok(Self {
            seed,
            mode,
            model,
            train,
            lambda_i,
            nprobe: (nprobe > 0).then_some(nprobe),
            filter: kv.parsed("retrieval.filter")?,
            embed_seed: kv.parsed("embed.seed")?,
            join: kv.get("corpus.join").parse()?,
            doc_mode: kv.get("corpus.mode").parse()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_desk_model() {
        let rc = RunConfig::from_kv(&KvConfig::default()).unwrap();
        assert_eq!(rc.model, ModelConfig::desk(VOCAB_SIZE));
        assert_eq!(rc.train, TrainConfig::default());
        assert!(rc.filter && rc.nprobe.is_none());
    }

    #[test]
    fn parse_and_override() {
        let text = "# tiny\nmodel.n_layers = 2\nmodel.cca_layers = 2 # middle\nreg.kind = gaussian\nseed=7\n";
        let mut kv = KvConfig::parse(text).unwrap();
        kv.set("train.optimizer=adamw").unwrap();
        let rc = RunConfig::from_kv(&kv).unwrap();
        assert_eq!(rc.model.n_layers, 2);
        assert_eq!(rc.model.cca_layers, vec![2]);
        assert_eq!(rc.seed, 7);
        assert_eq!(rc.train.seed, 7);
        assert_eq!(rc.train.optimizer, OptimizerKind::Adamw);
        assert_eq!(rc.train.regularizer, RegularizerSpec::gaussian(0.2, Placement::Neighbors));
        assert_eq!(KvConfig::parse(&kv.to_text()).unwrap().to_text(), kv.to_text());
        assert!(kv.is_explicit("seed") && !kv.is_explicit("train.lr"));
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(KvConfig::parse("model.width = 3").is_err());
        assert!(KvConfig::parse("model.n_layers 3").is_err());
        let kv = KvConfig::parse("train.steps = many").unwrap();
        assert!(RunConfig::from_kv(&kv).is_err());
        let kv = KvConfig::parse("model.cca_layers = 9").unwrap();
        assert!(RunConfig::from_kv(&kv).is_err());
    }
}
