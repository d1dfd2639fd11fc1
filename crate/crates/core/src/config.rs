//! Run configuration as line-oriented `key = value` text.
//!
//! Every key has a default; a file only needs the keys it changes. Unknown
//! keys and unparsable values are configuration errors. `#` starts a
//! comment. [`TrainConfig::to_text`] writes every key, so a snapshot read
//! back yields the same configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::synth::GenConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Pooling, WeightNorm};
use crate::objectives::LossWeights;
use crate::optim::AdamWConfig;
use crate::swap::SwapConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSchedule {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    /// Joint gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub log_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneSchedule {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub grad_clip: f64,
    /// Also update embedding, encoder and diagonal attention.
    pub train_backbone: bool,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub swap: SwapConfig,
    pub loss: LossWeights,
    pub agg_stop_gradient: bool,
    pub gen: GenConfig,
    pub crop: (f64, f64),
    pub optim: AdamWConfig,
    pub pretrain: PretrainSchedule,
    pub finetune: FinetuneSchedule,
    pub seed: u64,
    /// Seed namespace of generated training pairs.
    pub train_data_seed: u64,
    /// Seed namespace of generated held-out pairs.
    pub test_data_seed: u64,
    /// Number of pairs written by `gen-data`.
    pub gen_count: usize,
    /// Unlabeled pairs for pretraining; generated on the fly when absent.
    pub pretrain_manifest: Option<PathBuf>,
    /// Labeled pairs for fine-tuning; generated when absent.
    pub train_manifest: Option<PathBuf>,
    /// Labeled held-out pairs; generated when absent.
    pub test_manifest: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::smoke();
        Self {
            gen: GenConfig {
                image_size: model.height,
                channels: model.channels,
                patch_size: model.patch_size,
                ..GenConfig::default()
            },
            model,
            swap: SwapConfig { ratio: 0.5, min_block: 4, min_aspect: 0.3 },
            loss: LossWeights::default(),
            agg_stop_gradient: false,
            crop: (0.6, 0.95),
            optim: AdamWConfig::default(),
            pretrain: PretrainSchedule { steps: 500, batch: 8, lr: 1e-3, warmup: 0, grad_clip: 0.0, log_every: 50 },
            finetune: FinetuneSchedule {
                steps: 300,
                batch: 8,
                lr: 1e-3,
                warmup: 0,
                grad_clip: 0.0,
                train_backbone: true,
                train_per_class: 40,
                test_per_class: 40,
            },
            seed: 0,
            train_data_seed: 1,
            test_data_seed: 2,
            gen_count: 200,
            pretrain_manifest: None,
            train_manifest: None,
            test_manifest: None,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("invalid value {value:?} for {key}: {e}")))
}

fn path_opt(value: &str) -> Option<PathBuf> {
    (value != "-" && !value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("-".to_string(), |p| p.display().to_string())
}

impl TrainConfig {
    /// Published hyperparameters on top of the desk-scale defaults.
    pub fn published() -> Self {
        let model = ModelConfig::published();
        let mut c = Self::default();
        c.gen.image_size = model.height;
        c.gen.channels = model.channels;
        c.gen.patch_size = model.patch_size;
        c.model = model;
        c.swap = SwapConfig::default();
        c.pretrain.lr = 1e-4;
        c.pretrain.batch = 64;
        c
    }

    /// Every key with its current value, in schema order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let g = &self.gen;
        vec![
            ("model.height", m.height.to_string()),
            ("model.width", m.width.to_string()),
            ("model.channels", m.channels.to_string()),
            ("model.patch_size", m.patch_size.to_string()),
            ("model.d", m.d.to_string()),
            ("model.enc_layers", m.enc_layers.to_string()),
            ("model.dec_layers", m.dec_layers.to_string()),
            ("model.n_heads", m.n_heads.to_string()),
            ("model.mlp_ratio", m.mlp_ratio.to_string()),
            ("model.attn_scale", m.attn_scale.to_string()),
            ("model.ln_eps", m.ln_eps.to_string()),
            ("model.contextual_token", m.contextual_token.to_string()),
            ("model.use_poi", m.use_poi.to_string()),
            ("model.weight_norm", m.weight_norm.as_str().to_string()),
            ("model.pooling", m.pooling.as_str().to_string()),
            ("model.classes", m.classes.to_string()),
            ("swap.ratio", self.swap.ratio.to_string()),
            ("swap.min_block", self.swap.min_block.to_string()),
            ("swap.min_aspect", self.swap.min_aspect.to_string()),
            ("loss.gamma", self.loss.gamma.to_string()),
            ("loss.beta", self.loss.beta.to_string()),
            ("loss.agg_stop_gradient", self.agg_stop_gradient.to_string()),
            ("gen.subject_min", g.subject_frac.0.to_string()),
            ("gen.subject_max", g.subject_frac.1.to_string()),
            ("gen.amplitude_min", g.amplitude.0.to_string()),
            ("gen.amplitude_max", g.amplitude.1.to_string()),
            ("gen.shift_min", g.shift.0.to_string()),
            ("gen.shift_max", g.shift.1.to_string()),
            ("gen.regions_min", g.regions.0.to_string()),
            ("gen.regions_max", g.regions.1.to_string()),
            ("gen.delta_min", g.delta.0.to_string()),
            ("gen.delta_max", g.delta.1.to_string()),
            ("gen.noise_std", g.noise_std.to_string()),
            ("gen.micro_ceiling", g.micro_ceiling.to_string()),
            ("gen.classes", g.classes.to_string()),
            ("gen.texture_seed", g.texture_seed.to_string()),
            ("gen.count", self.gen_count.to_string()),
            ("crop.min", self.crop.0.to_string()),
            ("crop.max", self.crop.1.to_string()),
            ("optim.beta1", self.optim.beta1.to_string()),
            ("optim.beta2", self.optim.beta2.to_string()),
            ("optim.eps", self.optim.eps.to_string()),
            ("optim.weight_decay", self.optim.weight_decay.to_string()),
            ("pretrain.steps", self.pretrain.steps.to_string()),
            ("pretrain.batch", self.pretrain.batch.to_string()),
            ("pretrain.lr", self.pretrain.lr.to_string()),
            ("pretrain.warmup", self.pretrain.warmup.to_string()),
            ("pretrain.grad_clip", self.pretrain.grad_clip.to_string()),
            ("pretrain.log_every", self.pretrain.log_every.to_string()),
            ("finetune.steps", self.finetune.steps.to_string()),
            ("finetune.batch", self.finetune.batch.to_string()),
            ("finetune.lr", self.finetune.lr.to_string()),
            ("finetune.warmup", self.finetune.warmup.to_string()),
            ("finetune.grad_clip", self.finetune.grad_clip.to_string()),
            ("finetune.train_backbone", self.finetune.train_backbone.to_string()),
            ("finetune.train_per_class", self.finetune.train_per_class.to_string()),
            ("finetune.test_per_class", self.finetune.test_per_class.to_string()),
            ("seed", self.seed.to_string()),
            ("data.train_seed", self.train_data_seed.to_string()),
            ("data.test_seed", self.test_data_seed.to_string()),
            ("data.pretrain_manifest", show_path(&self.pretrain_manifest)),
            ("data.train_manifest", show_path(&self.train_manifest)),
            ("data.test_manifest", show_path(&self.test_manifest)),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        let m = &mut self.model;
        let g = &mut self.gen;
        match key {
            "model.height" => m.height = parse(key, v)?,
            "model.width" => m.width = parse(key, v)?,
            "model.channels" => m.channels = parse(key, v)?,
            "model.patch_size" => m.patch_size = parse(key, v)?,
            "model.d" => m.d = parse(key, v)?,
            "model.enc_layers" => m.enc_layers = parse(key, v)?,
            "model.dec_layers" => m.dec_layers = parse(key, v)?,
            "model.n_heads" => m.n_heads = parse(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "model.attn_scale" => m.attn_scale = parse(key, v)?,
            "model.ln_eps" => m.ln_eps = parse(key, v)?,
            "model.contextual_token" => m.contextual_token = parse(key, v)?,
            "model.use_poi" => m.use_poi = parse(key, v)?,
            "model.weight_norm" => m.weight_norm = WeightNorm::parse(v)?,
            "model.pooling" => m.pooling = Pooling::parse(v)?,
            "model.classes" => m.classes = parse(key, v)?,
            "swap.ratio" => self.swap.ratio = parse(key, v)?,
            "swap.min_block" => self.swap.min_block = parse(key, v)?,
            "swap.min_aspect" => self.swap.min_aspect = parse(key, v)?,
            "loss.gamma" => self.loss.gamma = parse(key, v)?,
            "loss.beta" => self.loss.beta = parse(key, v)?,
            "loss.agg_stop_gradient" => self.agg_stop_gradient = parse(key, v)?,
            "gen.subject_min" => g.subject_frac.0 = parse(key, v)?,
            "gen.subject_max" => g.subject_frac.1 = parse(key, v)?,
            "gen.amplitude_min" => g.amplitude.0 = parse(key, v)?,
            "gen.amplitude_max" => g.amplitude.1 = parse(key, v)?,
            "gen.shift_min" => g.shift.0 = parse(key, v)?,
            "gen.shift_max" => g.shift.1 = parse(key, v)?,
            "gen.regions_min" => g.regions.0 = parse(key, v)?,
            "gen.regions_max" => g.regions.1 = parse(key, v)?,
            "gen.delta_min" => g.delta.0 = parse(key, v)?,
            "gen.delta_max" => g.delta.1 = parse(key, v)?,
            "gen.noise_std" => g.noise_std = parse(key, v)?,
            "gen.micro_ceiling" => g.micro_ceiling = parse(key, v)?,
            "gen.classes" => g.classes = parse(key, v)?,
            "gen.texture_seed" => g.texture_seed = parse(key, v)?,
            "gen.count" => self.gen_count = parse(key, v)?,
            "crop.min" => self.crop.0 = parse(key, v)?,
            "crop.max" => self.crop.1 = parse(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse(key, v)?,
            "optim.eps" => self.optim.eps = parse(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "pretrain.steps" => self.pretrain.steps = parse(key, v)?,
            "pretrain.batch" => self.pretrain.batch = parse(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse(key, v)?,
            "pretrain.warmup" => self.pretrain.warmup = parse(key, v)?,
            "pretrain.grad_clip" => self.pretrain.grad_clip = parse(key, v)?,
            "pretrain.log_every" => self.pretrain.log_every = parse(key, v)?,
            "finetune.steps" => self.finetune.steps = parse(key, v)?,
            "finetune.batch" => self.finetune.batch = parse(key, v)?,
            "finetune.lr" => self.finetune.lr = parse(key, v)?,
            "finetune.warmup" => self.finetune.warmup = parse(key, v)?,
            "finetune.grad_clip" => self.finetune.grad_clip = parse(key, v)?,
            "finetune.train_backbone" => self.finetune.train_backbone = parse(key, v)?,
            "finetune.train_per_class" => self.finetune.train_per_class = parse(key, v)?,
            "finetune.test_per_class" => self.finetune.test_per_class = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "data.train_seed" => self.train_data_seed = parse(key, v)?,
            "data.test_seed" => self.test_data_seed = parse(key, v)?,
            "data.pretrain_manifest" => self.pretrain_manifest = path_opt(v),
            "data.train_manifest" => self.train_manifest = path_opt(v),
            "data.test_manifest" => self.test_manifest = path_opt(v),
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        self.sync_generator();
        Ok(())
    }

    /// The generator renders at the model's geometry.
    fn sync_generator(&mut self) {
        self.gen.image_size = self.model.height;
        self.gen.channels = self.model.channels;
        self.gen.patch_size = self.model.patch_size;
    }

    /// Parses configuration text over the defaults and validates it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got {line:?}", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.pretrain_manifest, &mut cfg.train_manifest, &mut cfg.test_manifest] {
            if let Some(m) = p.as_mut() {
                if m.is_relative() {
                    *m = base.join(&*m);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// SHA-256 of [`to_text`](Self::to_text), hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.swap.validate()?;
        self.loss.validate()?;
        if self.model.height != self.model.width {
            return Err(Error::config("the generator renders square frames: model.height must equal model.width"));
        }
        self.gen.validate()?;
        let (lo, hi) = self.crop;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!("crop range ({lo}, {hi}) must satisfy 0 < min <= max <= 1")));
        }
        if self.pretrain.batch == 0 || self.finetune.batch == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if !(self.pretrain.lr >= 0.0 && self.finetune.lr >= 0.0) {
            return Err(Error::config("learning rates must be nonnegative"));
        }
        if self.optim.beta1 < 0.0 || self.optim.beta1 >= 1.0 || self.optim.beta2 < 0.0 || self.optim.beta2 >= 1.0 {
            return Err(Error::config("optimizer betas must lie in [0, 1)"));
        }
        if self.loss.beta > 0.0 && !self.model.contextual_token {
            return Err(Error::config("the agreement loss needs the contextual token"));
        }
        Ok(())
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.set("model.d", "32").unwrap();
        cfg.set("data.train_manifest", "train/manifest.txt").unwrap();
        let back = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn published_values_are_serialized_verbatim() {
        let cfg = TrainConfig::published();
        let text = cfg.to_text();
        for line in [
            "model.d = 512",
            "model.enc_layers = 4",
            "model.dec_layers = 4",
            "model.patch_size = 8",
            "swap.ratio = 0.5",
            "swap.min_block = 16",
            "gen.delta_min = 5",
            "gen.delta_max = 11",
            "pretrain.lr = 0.0001",
        ] {
            assert!(text.contains(line), "missing {line}");
        }
        assert_eq!(TrainConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn errors() {
        let e = TrainConfig::parse("model.d = 64\nmodel.depth = 3\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert_eq!(e.exit_code(), 2);
        assert!(TrainConfig::parse("model.d = big").is_err());
        assert!(TrainConfig::parse("no equals sign").is_err());
        assert!(TrainConfig::parse("model.n_heads = 3").is_err());
        assert!(TrainConfig::parse("swap.ratio = 2").is_err());
        let ok = TrainConfig::parse("# comment\n\nloss.beta = 0 # ablation\n").unwrap();
        assert_eq!(ok.loss.beta, 0.0);
    }
}
