//! `key=value` configuration shared by every CLI stage.
//!
//! Values come from an optional file and are then overridden by flags. Unknown
//! keys are rejected so typos do not pass silently.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::checkpoint::parse_kv;
use crate::compression::{CompressionConfig, CoverageLayers, NoiseConfig};
use crate::error::{Error, Result};
use crate::synth::SyntheticSpec;
use crate::training::TrainConfig;
use crate::transformer::{AttentionScale, ModelConfig};

pub const KEYS: &[&str] = &[
    "seed",
    "d_model",
    "heads",
    "ffn_dim",
    "enc_layers",
    "dec_layers",
    "dropout",
    "attention_scale",
    "gate_layers",
    "independent_encoders",
    "batch_size",
    "warmup_steps",
    "peak_lr",
    "beta1",
    "beta2",
    "eps",
    "max_steps",
    "finetune_steps",
    "label_smoothing",
    "checkpoint_every",
    "sample_fraction",
    "shuffle",
    "alpha",
    "beta",
    "gamma",
    "beam",
    "max_extra_tokens",
    "coverage",
    "nmt_beam",
    "nmt_alpha",
    "nmt_beta",
    "topics",
    "topic_size",
    "fillers",
    "backbone_min",
    "backbone_max",
    "filler_rate",
];

/// Model shape without the vocabulary, which is known only once a
/// vocabulary file is loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelShape {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
    pub attention_scale: AttentionScale,
    pub gate_layers: usize,
    pub independent_encoders: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub model: ModelShape,
    pub train: TrainConfig,
    pub noise: NoiseConfig,
    pub compression: CompressionConfig,
    /// Decoding settings for translation (no γ cap).
    pub translation: CompressionConfig,
    pub synth: SyntheticSpec,
}

impl Default for Settings {
    fn default() -> Self {
        Settings::from_map(&BTreeMap::new()).unwrap()
    }
}

struct Lookup<'a>(&'a BTreeMap<String, String>);

impl Lookup<'_> {
    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.0.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::invalid(format!("bad value for {key}: {raw:?}"))),
        }
    }
}

impl Settings {
    pub fn from_map(kv: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(k) = kv.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::invalid(format!("unknown config key {k:?}")));
        }
        let l = Lookup(kv);
        let seed = l.get("seed", 1u64)?;
        let attention_scale = match l.get("attention_scale", "sqrt_dk".to_string())?.as_str() {
            "sqrt_dk" => AttentionScale::SqrtDk,
            "sqrt_d_model" => AttentionScale::SqrtDModel,
            other => return Err(Error::invalid(format!("bad attention_scale {other:?}"))),
        };
        let model = ModelShape {
            d_model: l.get("d_model", 32)?,
            heads: l.get("heads", 4)?,
            ffn_dim: l.get("ffn_dim", 64)?,
            enc_layers: l.get("enc_layers", 1)?,
            dec_layers: l.get("dec_layers", 1)?,
            dropout: l.get("dropout", 0.0)?,
            attention_scale,
            gate_layers: l.get("gate_layers", 1)?,
            independent_encoders: l.get("independent_encoders", false)?,
        };
        let td = TrainConfig::default();
        let train = TrainConfig {
            regime: td.regime,
            batch_size: l.get("batch_size", td.batch_size)?,
            warmup_steps: l.get("warmup_steps", 100)?,
            peak_lr: l.get("peak_lr", td.peak_lr)?,
            beta1: l.get("beta1", td.beta1)?,
            beta2: l.get("beta2", td.beta2)?,
            eps: l.get("eps", td.eps)?,
            max_steps: l.get("max_steps", 1500)?,
            finetune_steps: l.get("finetune_steps", 300)?,
            label_smoothing: l.get("label_smoothing", 0.0)?,
            seed,
            checkpoint_every: l.get("checkpoint_every", 0)?,
            checkpoint_prefix: None,
        };
        train.validate()?;
        let nd = NoiseConfig::default();
        let noise = NoiseConfig {
            sample_fraction: l.get("sample_fraction", nd.sample_fraction)?,
            shuffle: l.get("shuffle", nd.shuffle)?,
        };
        noise.validate()?;
        let cd = CompressionConfig::default();
        let coverage = match l.get("coverage", "all".to_string())?.as_str() {
            "all" => CoverageLayers::All,
            "last" => CoverageLayers::Last,
            other => return Err(Error::invalid(format!("bad coverage {other:?}"))),
        };
        let compression = CompressionConfig {
            alpha: l.get("alpha", cd.alpha)?,
            beta: l.get("beta", cd.beta)?,
            gamma: l.get("gamma", cd.gamma)?,
            beam: l.get("beam", cd.beam)?,
            max_extra_tokens: l.get("max_extra_tokens", cd.max_extra_tokens)?,
            coverage,
        };
        compression.validate()?;
        let translation = CompressionConfig {
            alpha: l.get("nmt_alpha", cd.alpha)?,
            beta: l.get("nmt_beta", 0.0)?,
            gamma: 1.0,
            beam: l.get("nmt_beam", cd.beam)?,
            ..compression.clone()
        };
        translation.validate()?;
        let sd = SyntheticSpec::default();
        let synth = SyntheticSpec {
            topics: l.get("topics", sd.topics)?,
            topic_size: l.get("topic_size", sd.topic_size)?,
            fillers: l.get("fillers", sd.fillers)?,
            backbone_min: l.get("backbone_min", sd.backbone_min)?,
            backbone_max: l.get("backbone_max", sd.backbone_max)?,
            filler_rate: l.get("filler_rate", sd.filler_rate)?,
            seed,
        };
        synth.validate()?;
        Ok(Settings {
            seed,
            model,
            train,
            noise,
            compression,
            translation,
            synth,
        })
    }

    /// Reads an optional file, then applies `overrides` on top.
    pub fn load(path: Option<&Path>, overrides: &[(&str, String)]) -> Result<Self> {
        let mut kv = match path {
            Some(p) => parse_kv(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => BTreeMap::new(),
        };
        for (k, v) in overrides {
            kv.insert(k.to_string(), v.clone());
        }
        Settings::from_map(&kv)
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let m = &self.model;
        if m.heads == 0 || m.d_model % m.heads != 0 {
            return Err(Error::invalid("d_model must be divisible by heads"));
        }
        let cfg = ModelConfig {
            d_model: m.d_model,
            heads: m.heads,
            d_k: m.d_model / m.heads,
            d_v: m.d_model / m.heads,
            ffn_dim: m.ffn_dim,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            dropout: m.dropout,
            vocab_size,
            attention_scale: m.attention_scale,
            gate_layers: m.gate_layers,
            independent_encoders: m.independent_encoders,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_beat_file_values() {
        let dir = std::env::temp_dir().join(format!("esc-config-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        fs::write(&path, "# desk run\nbeam=3\ngamma = 0.5\nseed=9\n").unwrap();
        let s = Settings::load(Some(&path), &[("beam", "7".into())]).unwrap();
        assert_eq!(s.compression.beam, 7);
        assert_eq!(s.compression.gamma, 0.5);
        assert_eq!(s.train.seed, 9);
        assert_eq!(s.synth.seed, 9);
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut kv = BTreeMap::new();
        kv.insert("gama".to_string(), "0.5".to_string());
        assert!(Settings::from_map(&kv).is_err());
        kv.clear();
        kv.insert("gamma".to_string(), "1.5".to_string());
        assert!(Settings::from_map(&kv).is_err());
        kv.insert("gamma".to_string(), "x".to_string());
        assert!(Settings::from_map(&kv).is_err());
    }

    #[test]
    fn model_config_splits_heads() {
        let s = Settings::default();
        let m = s.model_config(50).unwrap();
        assert_eq!((m.d_k, m.d_v, m.vocab_size), (8, 8, 50));
    }
}
