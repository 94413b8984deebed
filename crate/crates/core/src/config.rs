//! Run configuration as a line-oriented `dotted.key = value` document.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{DatasetProfile, SyntheticConfig};
use crate::dri::{InjectionPlan, ModulatorDesign, ModulatorInit};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::peft::PeftMode;
use crate::vit::PosMode;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    /// Existing dataset directory; `None` means generate synthetically.
    pub root: Option<PathBuf>,
    pub profile: DatasetProfile,
    /// Generator settings; height, width and channels also fix the model input.
    pub synthetic: SyntheticConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub p: usize,
    pub k: usize,
    pub epochs: usize,
    /// Full fine-tuning on one modality that stands in for foundation-model
    /// pre-training. Zero skips it.
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_modality: String,
    /// Identities of a separate single-modality synthetic corpus used for
    /// pre-training; 0 pre-trains on the training split instead.
    pub pretrain_ids: usize,
    /// Images per identity in a pre-training batch.
    pub pretrain_k: usize,
    /// Fraction of steps spent in linear warmup.
    pub warmup: f64,
    /// Evaluate every this many epochs; zero evaluates only at the start and end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.003,
            momentum: 0.9,
            weight_decay: 5e-4,
            p: 8,
            k: 2,
            epochs: 120,
            pretrain_epochs: 15,
            pretrain_lr: 0.01,
            pretrain_modality: "opt".into(),
            pretrain_ids: 1024,
            pretrain_k: 4,
            warmup: 0.05,
            eval_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub protocols: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            protocols: vec!["opt->sar".into(), "sar->opt".into(), "all".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            seed: 42,
            dataset: DatasetConfig {
                root: None,
                profile: DatasetProfile::CmShip,
                synthetic: SyntheticConfig::default(),
            },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        };
        cfg.sync();
        cfg
    }
}

/// Every accepted key, in document order.
pub const KEYS: &[&str] = &[
    "seed",
    "dataset.root",
    "dataset.profile",
    "dataset.num_ids",
    "dataset.test_ids",
    "dataset.distractor_ids",
    "dataset.images_per_id",
    "dataset.height",
    "dataset.width",
    "dataset.channels",
    "model.depth",
    "model.dim",
    "model.heads",
    "model.mlp_ratio",
    "model.patch",
    "model.pos",
    "model.rope_base",
    "model.ln_eps",
    "model.sst",
    "model.peft",
    "lora.rank",
    "lora.alpha",
    "lora.qkv",
    "lora.proj",
    "adapter.hidden",
    "dri.oe_depth",
    "dri.oe_dim",
    "dri.oe_heads",
    "dri.oe_mlp_ratio",
    "dri.oe_patch",
    "dri.plan",
    "dri.design",
    "dri.init",
    "head.margin",
    "head.bn_eps",
    "head.bn_momentum",
    "train.lr",
    "train.momentum",
    "train.weight_decay",
    "train.p",
    "train.k",
    "train.epochs",
    "train.pretrain_epochs",
    "train.pretrain_lr",
    "train.pretrain_modality",
    "train.pretrain_ids",
    "train.pretrain_k",
    "train.warmup",
    "train.eval_every",
    "eval.protocols",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: {v:?} is not a boolean"))),
    }
}

impl RunConfig {
    /// Derived fields: model input size and classifier width from the
    /// dataset, the extra-token count from the ship-size flag.
    pub fn sync(&mut self) {
        let s = &self.dataset.synthetic;
        let b = &mut self.model.backbone;
        b.image_h = s.height;
        b.image_w = s.width;
        b.channels = s.channels;
        b.extra_tokens = usize::from(self.model.head.sst);
        if self.dataset.root.is_none() {
            self.model.head.num_ids = s.num_ids.saturating_sub(s.test_ids).max(1);
        }
        self.dataset.synthetic.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.dataset.root.is_none() {
            self.dataset.synthetic.validate()?;
        }
        let t = &self.train;
        if t.p == 0 || t.k == 0 {
            return Err(Error::Config("train.p and train.k must be positive".into()));
        }
        if t.k < 2 || t.pretrain_k < 2 {
            return Err(Error::Config("train.k and train.pretrain_k must be at least 2 for triplet positives".into()));
        }
        if !(t.lr > 0.0 && t.pretrain_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.warmup) {
            return Err(Error::Config(format!("train.warmup {} is outside [0, 1)", t.warmup)));
        }
        if self.eval.protocols.is_empty() {
            return Err(Error::Config("eval.protocols is empty".into()));
        }
        for p in &self.eval.protocols {
            crate::eval::RetrievalProtocol::parse(p)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = &self.dataset.synthetic;
        let b = &self.model.backbone;
        let p = &self.model.peft;
        let h = &self.model.head;
        let t = &self.train;
        let v = match key {
            "seed" => self.seed.to_string(),
            "dataset.root" => self.dataset.root.as_ref().map(|r| r.display().to_string()).unwrap_or_default(),
            "dataset.profile" => self.dataset.profile.name().into(),
            "dataset.num_ids" => s.num_ids.to_string(),
            "dataset.test_ids" => s.test_ids.to_string(),
            "dataset.distractor_ids" => s.distractor_ids.to_string(),
            "dataset.images_per_id" => s.images_per_id_per_modality.to_string(),
            "dataset.height" => s.height.to_string(),
            "dataset.width" => s.width.to_string(),
            "dataset.channels" => s.channels.to_string(),
            "model.depth" => b.depth.to_string(),
            "model.dim" => b.dim.to_string(),
            "model.heads" => b.heads.to_string(),
            "model.mlp_ratio" => b.mlp_ratio.to_string(),
            "model.patch" => b.patch.to_string(),
            "model.pos" => b.pos_mode.name().into(),
            "model.rope_base" => b.rope_base.to_string(),
            "model.ln_eps" => b.ln_eps.to_string(),
            "model.sst" => h.sst.to_string(),
            "model.peft" => p.mode.name().into(),
            "lora.rank" => p.lora.rank.to_string(),
            "lora.alpha" => p.lora.alpha.to_string(),
            "lora.qkv" => p.lora.target_qkv.to_string(),
            "lora.proj" => p.lora.target_proj.to_string(),
            "adapter.hidden" => p.adapter.hidden.to_string(),
            "dri.oe_depth" => p.dri.oe.depth.to_string(),
            "dri.oe_dim" => p.dri.oe.dim.to_string(),
            "dri.oe_heads" => p.dri.oe.heads.to_string(),
            "dri.oe_mlp_ratio" => p.dri.oe.mlp_ratio.to_string(),
            "dri.oe_patch" => p.dri.oe.patch.map(|v| v.to_string()).unwrap_or_default(),
            "dri.plan" => p.dri.plan.to_string(),
            "dri.design" => p.dri.design.name().into(),
            "dri.init" => p.dri.init.name().into(),
            "head.margin" => h.margin.to_string(),
            "head.bn_eps" => h.bn_eps.to_string(),
            "head.bn_momentum" => h.bn_momentum.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.momentum" => t.momentum.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.p" => t.p.to_string(),
            "train.k" => t.k.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.pretrain_epochs" => t.pretrain_epochs.to_string(),
            "train.pretrain_lr" => t.pretrain_lr.to_string(),
            "train.pretrain_modality" => t.pretrain_modality.clone(),
            "train.pretrain_ids" => t.pretrain_ids.to_string(),
            "train.pretrain_k" => t.pretrain_k.to_string(),
            "train.warmup" => t.warmup.to_string(),
            "train.eval_every" => t.eval_every.to_string(),
            "eval.protocols" => self.eval.protocols.join(","),
            _ => return None,
        };
        Some(v)
    }

    /// Sets one key. Derived fields are refreshed by `sync`.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.dataset.synthetic;
        let b = &mut self.model.backbone;
        let p = &mut self.model.peft;
        let h = &mut self.model.head;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = num(key, v)?,
            "dataset.root" => self.dataset.root = (!v.is_empty()).then(|| PathBuf::from(v)),
            "dataset.profile" => self.dataset.profile = DatasetProfile::parse(v)?,
            "dataset.num_ids" => s.num_ids = num(key, v)?,
            "dataset.test_ids" => s.test_ids = num(key, v)?,
            "dataset.distractor_ids" => s.distractor_ids = num(key, v)?,
            "dataset.images_per_id" => s.images_per_id_per_modality = num(key, v)?,
            "dataset.height" => s.height = num(key, v)?,
            "dataset.width" => s.width = num(key, v)?,
            "dataset.channels" => s.channels = num(key, v)?,
            "model.depth" => b.depth = num(key, v)?,
            "model.dim" => b.dim = num(key, v)?,
            "model.heads" => b.heads = num(key, v)?,
            "model.mlp_ratio" => b.mlp_ratio = num(key, v)?,
            "model.patch" => b.patch = num(key, v)?,
            "model.pos" => b.pos_mode = PosMode::parse(v)?,
            "model.rope_base" => b.rope_base = num(key, v)?,
            "model.ln_eps" => b.ln_eps = num(key, v)?,
            "model.sst" => h.sst = boolean(key, v)?,
            "model.peft" => p.mode = PeftMode::parse(v)?,
            "lora.rank" => p.lora.rank = num(key, v)?,
            "lora.alpha" => p.lora.alpha = num(key, v)?,
            "lora.qkv" => p.lora.target_qkv = boolean(key, v)?,
            "lora.proj" => p.lora.target_proj = boolean(key, v)?,
            "adapter.hidden" => p.adapter.hidden = num(key, v)?,
            "dri.oe_depth" => p.dri.oe.depth = num(key, v)?,
            "dri.oe_dim" => p.dri.oe.dim = num(key, v)?,
            "dri.oe_heads" => p.dri.oe.heads = num(key, v)?,
            "dri.oe_mlp_ratio" => p.dri.oe.mlp_ratio = num(key, v)?,
            "dri.oe_patch" => p.dri.oe.patch = if v.is_empty() { None } else { Some(num(key, v)?) },
            "dri.plan" => p.dri.plan = InjectionPlan::parse(v)?,
            "dri.design" => p.dri.design = ModulatorDesign::parse(v)?,
            "dri.init" => p.dri.init = ModulatorInit::parse(v)?,
            "head.margin" => h.margin = num(key, v)?,
            "head.bn_eps" => h.bn_eps = num(key, v)?,
            "head.bn_momentum" => h.bn_momentum = num(key, v)?,
            "train.lr" => t.lr = num(key, v)?,
            "train.momentum" => t.momentum = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.p" => t.p = num(key, v)?,
            "train.k" => t.k = num(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.pretrain_epochs" => t.pretrain_epochs = num(key, v)?,
            "train.pretrain_lr" => t.pretrain_lr = num(key, v)?,
            "train.pretrain_modality" => t.pretrain_modality = v.to_string(),
            "train.pretrain_ids" => t.pretrain_ids = num(key, v)?,
            "train.pretrain_k" => t.pretrain_k = num(key, v)?,
            "train.warmup" => t.warmup = num(key, v)?,
            "train.eval_every" => t.eval_every = num(key, v)?,
            "eval.protocols" => {
                self.eval.protocols = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
            }
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are ignored; unknown keys are rejected.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(a, _)| a).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("config line {}: {}", n + 1, strip(e))))?;
        }
        self.sync();
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in KEYS {
            writeln!(f, "{k} = {}", self.get(k).expect("listed key"))?;
        }
        Ok(())
    }
}
