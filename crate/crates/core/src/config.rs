//! Run configuration: flat `key=value` text with dotted sections.
//!
//! ```text
//! # comment
//! preset=gpt4like
//! seed=7
//! train.lr=3e-3
//! model.d_model=64
//! fusion.mode=kg-attention-layer
//! data.kg=graph.tsv
//! ```
//!
//! Relative `data.*` paths resolve against the config file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::optim::{OptimOptions, OptimizerKind};
use crate::pipeline::ModelShape;
use crate::synth::SynthSpec;
use crate::trainer::TrainOptions;

pub const MAX_EPOCHS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Batch size 16.
    Gpt4Like,
    /// Batch size 32.
    MistralLike,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gpt4like" => Ok(Preset::Gpt4Like),
            "mistrallike" => Ok(Preset::MistralLike),
            _ => Err(Error::Config(format!("unknown preset `{s}`"))),
        }
    }

    pub fn batch_size(self) -> usize {
        match self {
            Preset::Gpt4Like => 16,
            Preset::MistralLike => 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// `None` selects the per-objective default.
    pub lr: Option<f64>,
    pub batch_size: usize,
    /// `None` selects the per-objective default.
    pub epochs: Option<usize>,
    pub optimizer: OptimizerKind,
    pub model: ModelShape,
    pub fusion_mode: FusionMode,
    pub fusion_layer: Option<usize>,
    pub fusion_radius: usize,
    pub cotrain_kg: bool,
    pub train_base: bool,
    pub synth: SynthSpec,
    /// `data.<name>` entries.
    pub data: BTreeMap<String, PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            lr: None,
            batch_size: Preset::Gpt4Like.batch_size(),
            epochs: None,
            optimizer: OptimizerKind::Adam,
            model: ModelShape::default(),
            fusion_mode: FusionMode::GatedInjection,
            fusion_layer: None,
            fusion_radius: 1,
            cotrain_kg: false,
            train_base: false,
            synth: SynthSpec::default(),
            data: BTreeMap::new(),
            out: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

impl RunConfig {
    /// Parse config text; `base` anchors relative data paths.
    pub fn parse(text: &str, source: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: source.into(),
                line: i + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            entries.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = RunConfig::default();
        // The preset only supplies defaults; explicit keys win wherever they appear.
        if let Some((_, _, v)) = entries.iter().rev().find(|(_, k, _)| k == "preset") {
            cfg.batch_size = Preset::parse(v)?.batch_size();
        }
        for (line, k, v) in &entries {
            cfg.set(k, v, base).map_err(|e| match e {
                Error::Config(msg) => Error::Parse {
                    path: source.into(),
                    line: *line,
                    msg,
                },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, &path.display().to_string(), base)
    }

    pub fn set(&mut self, key: &str, v: &str, base: &Path) -> Result<()> {
        match key {
            "preset" => {
                Preset::parse(v)?;
            }
            "seed" => self.seed = num(key, v)?,
            "train.lr" => self.lr = Some(num(key, v)?),
            "train.batch_size" => self.batch_size = num(key, v)?,
            "train.epochs" => self.epochs = Some(num(key, v)?),
            "train.optimizer" => self.optimizer = OptimizerKind::parse(v)?,
            "model.d_model" => self.model.d_model = num(key, v)?,
            "model.n_layers" => self.model.n_layers = num(key, v)?,
            "model.n_heads" => self.model.n_heads = num(key, v)?,
            "model.d_ff" => self.model.d_ff = num(key, v)?,
            "model.max_seq" => self.model.max_seq = num(key, v)?,
            "model.dropout" => self.model.dropout = num(key, v)?,
            "fusion.mode" => self.fusion_mode = FusionMode::parse(v)?,
            "fusion.layer" => self.fusion_layer = Some(num(key, v)?),
            "fusion.radius" => self.fusion_radius = num(key, v)?,
            "fusion.cotrain_kg" => self.cotrain_kg = flag(key, v)?,
            "fusion.train_base" => self.train_base = flag(key, v)?,
            "synth.entities" => self.synth.entities = num(key, v)?,
            "synth.relations" => self.synth.relations = num(key, v)?,
            "synth.types" => self.synth.types = num(key, v)?,
            "synth.triples_per_entity" => self.synth.triples_per_entity = num(key, v)?,
            "synth.functional" => self.synth.functional = flag(key, v)?,
            "synth.holdout_frac" => self.synth.holdout_frac = num(key, v)?,
            "synth.fusion_frac" => self.synth.fusion_frac = num(key, v)?,
            "out" => self.out = Some(base.join(v)),
            _ => match key.strip_prefix("data.") {
                Some(name) if !name.is_empty() => {
                    self.data.insert(name.to_string(), base.join(v));
                }
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            },
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.epochs {
            if !(1..=MAX_EPOCHS).contains(&e) {
                return Err(Error::Config(format!("train.epochs {e} outside 1..={MAX_EPOCHS}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if let Some(lr) = self.lr {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("train.lr {lr} must be positive")));
            }
        }
        if self.fusion_radius == 0 {
            return Err(Error::Config("fusion.radius must be >= 1".into()));
        }
        Ok(())
    }

    /// Every referenced data path must exist when a run starts.
    pub fn check_paths(&self) -> Result<()> {
        for (name, p) in &self.data {
            if !p.exists() {
                return Err(Error::Config(format!("data.{name}: `{}` does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn data_path(&self, name: &str) -> Result<&Path> {
        self.data
            .get(name)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::Config(format!("missing `data.{name}`")))
    }

    /// Training options with this run's overrides applied to an objective's
    /// defaults.
    pub fn train_options(&self, default_epochs: usize, default_lr: f64, seed_offset: u64) -> TrainOptions {
        let mut optim = OptimOptions::adam(self.lr.unwrap_or(default_lr));
        optim.kind = self.optimizer;
        TrainOptions {
            epochs: self.epochs.unwrap_or(default_epochs),
            batch_size: self.batch_size,
            optim,
            seed: self.seed.wrapping_add(seed_offset),
        }
    }
}
