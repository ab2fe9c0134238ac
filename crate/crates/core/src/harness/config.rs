//! Training configuration read from `key = value` text.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossFlags;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub ema_momentum: f64,
    pub ibox: bool,
    pub cla: bool,
    pub px: bool,
    pub swap_confusion: bool,
    pub decouple: bool,
    pub binarize_teacher: bool,
    /// Perturb the teacher's input; off feeds it the student's image.
    pub perturb_teacher: bool,
    /// Model initialization, epoch shuffling and teacher perturbations.
    pub seed: u64,
    /// Base seed of the synthetic training split.
    pub data_seed: u64,
    /// Base seed of the synthetic held-out split.
    pub eval_seed: u64,
    pub train_count: usize,
    pub eval_count: usize,
    pub image_size: usize,
    pub reduced_channels: usize,
    /// Seeds run by `ablate`; empty means `[seed]`.
    pub ablation_seeds: Vec<u64>,
    /// Datasets on disk; synthetic splits are generated when unset.
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    /// Logs and checkpoints go here; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Save a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Evaluate on the held-out split after every epoch.
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs: 30,
            ema_momentum: 0.99,
            ibox: true,
            cla: true,
            px: true,
            swap_confusion: true,
            decouple: true,
            binarize_teacher: true,
            perturb_teacher: true,
            seed: 0,
            data_seed: 1000,
            eval_seed: 2000,
            train_count: 500,
            eval_count: 100,
            image_size: 64,
            reduced_channels: 8,
            ablation_seeds: Vec::new(),
            train_manifest: None,
            eval_manifest: None,
            out_dir: None,
            checkpoint_every: 0,
            eval_every_epoch: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got `{value}`"))),
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "-").then(|| PathBuf::from(value))
}

impl TrainConfig {
    pub fn flags(&self) -> LossFlags {
        LossFlags {
            ibox: self.ibox,
            cla: self.cla,
            px: self.px,
            decouple: self.decouple,
            swap_confusion: self.swap_confusion,
            binarize_teacher: self.binarize_teacher,
        }
    }

    pub fn set_flags(&mut self, f: LossFlags) {
        self.ibox = f.ibox;
        self.cla = f.cla;
        self.px = f.px;
        self.decouple = f.decouple;
        self.swap_confusion = f.swap_confusion;
        self.binarize_teacher = f.binarize_teacher;
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_size: self.image_size,
            reduced_channels: self.reduced_channels,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }

    /// Sets one field by its name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "ema_momentum" => self.ema_momentum = parse(key, value)?,
            "ibox" => self.ibox = parse_bool(key, value)?,
            "cla" => self.cla = parse_bool(key, value)?,
            "px" => self.px = parse_bool(key, value)?,
            "swap_confusion" => self.swap_confusion = parse_bool(key, value)?,
            "decouple" => self.decouple = parse_bool(key, value)?,
            "binarize_teacher" => self.binarize_teacher = parse_bool(key, value)?,
            "perturb_teacher" => self.perturb_teacher = parse_bool(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "eval_seed" => self.eval_seed = parse(key, value)?,
            "train_count" => self.train_count = parse(key, value)?,
            "eval_count" => self.eval_count = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "reduced_channels" => self.reduced_channels = parse(key, value)?,
            "ablation_seeds" => {
                self.ablation_seeds = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "train_manifest" => self.train_manifest = parse_path(value),
            "eval_manifest" => self.eval_manifest = parse_path(value),
            "out_dir" => self.out_dir = parse_path(value),
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "eval_every_epoch" => self.eval_every_epoch = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    /// Relative paths are kept as written.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.train_manifest, &mut cfg.eval_manifest, &mut cfg.out_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!("ema_momentum must lie in [0, 1), got {}", self.ema_momentum)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.train_manifest.is_none() && self.train_count == 0 {
            return Err(Error::Config("train_count must be positive".into()));
        }
        self.model_config().validate()
    }

    /// `key = value` text that parses back to this config.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("-".to_string(), |p| p.display().to_string());
        let seeds: Vec<String> = self.ablation_seeds.iter().map(u64::to_string).collect();
        [
            format!("learning_rate = {:e}", self.learning_rate),
            format!("weight_decay = {:e}", self.weight_decay),
            format!("batch_size = {}", self.batch_size),
            format!("epochs = {}", self.epochs),
            format!("ema_momentum = {}", self.ema_momentum),
            format!("ibox = {}", self.ibox),
            format!("cla = {}", self.cla),
            format!("px = {}", self.px),
            format!("swap_confusion = {}", self.swap_confusion),
            format!("decouple = {}", self.decouple),
            format!("binarize_teacher = {}", self.binarize_teacher),
            format!("perturb_teacher = {}", self.perturb_teacher),
            format!("seed = {}", self.seed),
            format!("data_seed = {}", self.data_seed),
            format!("eval_seed = {}", self.eval_seed),
            format!("train_count = {}", self.train_count),
            format!("eval_count = {}", self.eval_count),
            format!("image_size = {}", self.image_size),
            format!("reduced_channels = {}", self.reduced_channels),
            format!("ablation_seeds = {}", seeds.join(",")),
            format!("train_manifest = {}", path(&self.train_manifest)),
            format!("eval_manifest = {}", path(&self.eval_manifest)),
            format!("out_dir = {}", path(&self.out_dir)),
            format!("checkpoint_every = {}", self.checkpoint_every),
            format!("eval_every_epoch = {}", self.eval_every_epoch),
        ]
        .join("\n")
            + "\n"
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Parses an ablation preset: `baseline`, `ibox`, `full`, or a `+`-joined
/// list of terms (`ibox`, `cla`, `px`) optionally followed by `nodecouple`,
/// `noswap` or `soft_teacher`.
pub fn parse_preset(spec: &str) -> Result<LossFlags> {
    match spec.trim() {
        "baseline" => return Ok(LossFlags::BASELINE),
        "ibox" => return Ok(LossFlags::IBOX_ONLY),
        "full" => return Ok(LossFlags::FULL),
        _ => {}
    }
    let mut f = LossFlags {
        ibox: false,
        cla: false,
        px: false,
        ..LossFlags::FULL
    };
    for term in spec.split('+').map(str::trim) {
        match term {
            "ibox" => f.ibox = true,
            "cla" => f.cla = true,
            "px" => f.px = true,
            "nodecouple" => f.decouple = false,
            "noswap" => f.swap_confusion = false,
            "soft_teacher" => f.binarize_teacher = false,
            _ => return Err(Error::Config(format!("unknown ablation term `{term}` in `{spec}`"))),
        }
    }
    if !(f.ibox || f.cla || f.px) {
        return Err(Error::Config(format!("ablation `{spec}` enables no loss term")));
    }
    Ok(f)
}
