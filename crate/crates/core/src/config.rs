//! Flat key/value run configuration.
//!
//! Files are UTF-8 JSON objects whose keys are dotted names such as
//! `"train.steps"` or `"loss.gamma"`. Unknown keys and mistyped values are
//! rejected. [`RunConfig::resolved`] lists every key with its final value.

use std::path::Path;

use serde_json::{Map, Value};

use crate::encoder::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::predmae::PretrainConfig;
use crate::retrieval::Scoring;
use crate::similarity::DEFAULT_K;
use crate::simlearn::SimTrainConfig;
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    /// Moving-pattern videos generated for pretraining.
    pub pretrain_videos: usize,
    pub pretrain_video_len: usize,
    pub train: SimTrainConfig,
    /// Unlabelled videos generated for similarity training.
    pub train_videos: usize,
    pub k: usize,
    pub chamfer: bool,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            pretrain: PretrainConfig::default(),
            pretrain_videos: 64,
            pretrain_video_len: 32,
            train: SimTrainConfig::default(),
            train_videos: 400,
            k: DEFAULT_K,
            chamfer: false,
            synth: SynthConfig::default(),
        }
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::Config(format!("`{key}` expects a number, got {v}")))
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::Config(format!("`{key}` expects a non-negative integer, got {v}")))
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| Error::Config(format!("`{key}` expects a non-negative integer, got {v}")))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| Error::Config(format!("`{key}` expects true or false, got {v}")))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str()
        .ok_or_else(|| Error::Config(format!("`{key}` expects a string, got {v}")))
}

impl RunConfig {
    pub fn scoring(&self) -> Scoring {
        if self.chamfer {
            Scoring::Chamfer
        } else {
            Scoring::TopK(self.k)
        }
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "model.variant" => {
                let variant: Variant = as_str(key, v)?.parse()?;
                self.model = match variant {
                    Variant::Toy => ModelConfig::toy(),
                    Variant::Small => ModelConfig::small(),
                    Variant::Base => ModelConfig::base(),
                };
            }
            "model.frames" => self.model.frames = as_usize(key, v)?,
            "model.image_size" => self.model.image_size = as_usize(key, v)?,
            "model.patch" => self.model.patch = as_usize(key, v)?,
            "model.d_model" => self.model.d_model = as_usize(key, v)?,
            "model.heads" => self.model.heads = as_usize(key, v)?,
            "model.depth" => self.model.depth = as_usize(key, v)?,
            "model.embed_dim" => self.model.embed_dim = as_usize(key, v)?,
            "predmae.mask_ratio" => self.pretrain.mask_ratio = as_f64(key, v)?,
            "predmae.steps" => self.pretrain.steps = as_usize(key, v)?,
            "predmae.batch" => self.pretrain.batch = as_usize(key, v)?,
            "predmae.base_lr" => self.pretrain.base_lr = as_f64(key, v)?,
            "predmae.weight_decay" => self.pretrain.weight_decay = as_f64(key, v)?,
            "predmae.seed" => self.pretrain.seed = as_u64(key, v)?,
            "predmae.videos" => self.pretrain_videos = as_usize(key, v)?,
            "predmae.video_len" => self.pretrain_video_len = as_usize(key, v)?,
            "loss.alpha" => self.train.loss.alpha = as_f64(key, v)?,
            "loss.beta" => self.train.loss.beta = as_f64(key, v)?,
            "loss.lambda" => self.train.loss.lambda = as_f64(key, v)?,
            "loss.epsilon" => self.train.loss.epsilon = as_f64(key, v)?,
            "loss.gamma" => self.train.loss.gamma = as_f64(key, v)?,
            "loss.w1" => self.train.loss.w1 = as_f64(key, v)?,
            "loss.w2" => self.train.loss.w2 = as_f64(key, v)?,
            "bank.capacity" => self.train.bank_capacity = as_usize(key, v)?,
            "bank.warmup" => self.train.bank_warmup = as_usize(key, v)?,
            "train.steps" => self.train.steps = as_usize(key, v)?,
            "train.batch" => self.train.batch = as_usize(key, v)?,
            "train.base_lr" => self.train.base_lr = as_f64(key, v)?,
            "train.weight_decay" => self.train.weight_decay = as_f64(key, v)?,
            "train.shotmix_prob" => self.train.shotmix_prob = as_f64(key, v)?,
            "train.augment" => self.train.augment = as_bool(key, v)?,
            "train.seed" => self.train.seed = as_u64(key, v)?,
            "train.videos" => self.train_videos = as_usize(key, v)?,
            "eval.k" => self.k = as_usize(key, v)?,
            "eval.chamfer" => self.chamfer = as_bool(key, v)?,
            "synth.seed" => self.synth.seed = as_u64(key, v)?,
            "synth.videos" => self.synth.videos = as_usize(key, v)?,
            "synth.queries" => self.synth.queries = as_usize(key, v)?,
            "synth.size" => self.synth.size = as_usize(key, v)?,
            "synth.min_len" => self.synth.min_len = as_usize(key, v)?,
            "synth.max_len" => self.synth.max_len = as_usize(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every key of a JSON object on top of the defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let Value::Object(map) = value else {
            return Err(Error::Config("configuration must be a JSON object".into()));
        };
        let mut cfg = Self::default();
        if map.contains_key("model.variant") {
            cfg.set("model.variant", &map["model.variant"])?;
        }
        for (k, v) in map.iter().filter(|(k, _)| k.as_str() != "model.variant") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Overrides every seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.pretrain.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.k == 0 {
            return Err(Error::Config("eval.k must be >= 1".into()));
        }
        Ok(())
    }

    /// Every key with its effective value.
    pub fn resolved(&self) -> Map<String, Value> {
        let mut m = Map::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        let variant = serde_json::to_value(self.model.variant).unwrap_or(Value::Null);
        put("model.variant", variant);
        put("model.frames", self.model.frames.into());
        put("model.image_size", self.model.image_size.into());
        put("model.patch", self.model.patch.into());
        put("model.d_model", self.model.d_model.into());
        put("model.heads", self.model.heads.into());
        put("model.depth", self.model.depth.into());
        put("model.embed_dim", self.model.embed_dim.into());
        put("predmae.mask_ratio", self.pretrain.mask_ratio.into());
        put("predmae.steps", self.pretrain.steps.into());
        put("predmae.batch", self.pretrain.batch.into());
        put("predmae.base_lr", self.pretrain.base_lr.into());
        put("predmae.weight_decay", self.pretrain.weight_decay.into());
        put("predmae.seed", self.pretrain.seed.into());
        put("predmae.videos", self.pretrain_videos.into());
        put("predmae.video_len", self.pretrain_video_len.into());
        let l = &self.train.loss;
        put("loss.alpha", l.alpha.into());
        put("loss.beta", l.beta.into());
        put("loss.lambda", l.lambda.into());
        put("loss.epsilon", l.epsilon.into());
        put("loss.gamma", l.gamma.into());
        put("loss.w1", l.w1.into());
        put("loss.w2", l.w2.into());
        put("bank.capacity", self.train.bank_capacity.into());
        put("bank.warmup", self.train.bank_warmup.into());
        put("train.steps", self.train.steps.into());
        put("train.batch", self.train.batch.into());
        put("train.base_lr", self.train.base_lr.into());
        put("train.weight_decay", self.train.weight_decay.into());
        put("train.shotmix_prob", self.train.shotmix_prob.into());
        put("train.augment", self.train.augment.into());
        put("train.seed", self.train.seed.into());
        put("train.videos", self.train_videos.into());
        put("eval.k", self.k.into());
        put("eval.chamfer", self.chamfer.into());
        put("synth.seed", self.synth.seed.into());
        put("synth.videos", self.synth.videos.into());
        put("synth.queries", self.synth.queries.into());
        put("synth.size", self.synth.size.into());
        put("synth.min_len", self.synth.min_len.into());
        put("synth.max_len", self.synth.max_len.into());
        m
    }

    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(&Value::Object(self.resolved())).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"train.stepz": 3}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"train.steps": "x"}"#), Err(Error::Config(_))));
        assert!(RunConfig::from_json("[1]").is_err());
    }

    #[test]
    fn resolved_roundtrip() {
        let cfg = RunConfig::from_json(r#"{"train.steps": 7, "loss.epsilon": -0.1, "eval.chamfer": true}"#).unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.scoring(), Scoring::Chamfer);
        let again = RunConfig::from_json(&cfg.resolved_json()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn defaults_mirror_published_values() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.frames, 8);
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.pretrain.mask_ratio, 0.9);
        assert_eq!((cfg.train.loss.w1, cfg.train.loss.w2, cfg.train.loss.gamma), (1.0, 0.01, 0.1));
        assert_eq!(cfg.train.base_lr, 5e-4);
        cfg.validate().unwrap();
    }
}
