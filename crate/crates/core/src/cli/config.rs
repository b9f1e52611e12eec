//! Flat `section.key = value` experiment configuration.

use crate::data::ContextMode;
use crate::error::{Error, Result};
use crate::model::{ArchConfig, ClassifierKind};
use crate::pipeline::{DataSettings, PretrainSettings};
use crate::training::{TrainConfig, TrainMode};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSettings,
    pub arch: ArchConfig,
    pub pretrain: PretrainSettings,
    pub train: TrainConfig,
    pub epsilons: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub source: ClassifierKind,
    /// ε used by the single-strength `attack` stage.
    pub attack_epsilon: f32,
    pub pca_sigma: f64,
    pub alphas: Vec<f32>,
    pub warm_start: bool,
    pub retrain_enabled: bool,
    pub retrain_epsilon: f32,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSettings::default(),
            arch: ArchConfig::default(),
            pretrain: PretrainSettings::default(),
            train: TrainConfig { mode: TrainMode::HeadOnly, ..TrainConfig::default() },
            epsilons: vec![0.0, 0.05, 0.1, 0.2, 0.3, 0.5],
            sigmas: vec![0.0, 1.0, 2.0, 5.0, 10.0, 45.0],
            source: ClassifierKind::Foreground,
            attack_epsilon: 0.3,
            pca_sigma: 5.0,
            alphas: vec![0.1, 1.0, 10.0],
            warm_start: false,
            retrain_enabled: true,
            retrain_epsilon: 0.3,
            output: PathBuf::from("fusionbench-out"),
        }
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| scalar(key, p)).collect()
}

fn scalar<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::config(format!("{key}: cannot parse '{}'", v.trim())))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::config(format!("{key}: expected true or false, got '{other}'"))),
    }
}

fn kind(key: &str, v: &str) -> Result<ClassifierKind> {
    match v.trim() {
        "foreground" | "fg" => Ok(ClassifierKind::Foreground),
        "background" | "bg" => Ok(ClassifierKind::Background),
        "joint" => Ok(ClassifierKind::Joint),
        other => Err(Error::config(format!("{key}: unknown model '{other}'"))),
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn train_key(t: &mut TrainConfig, key: &str, field: &str, v: &str) -> Result<bool> {
    match field {
        "lr" => t.lr = scalar(key, v)?,
        "momentum" => t.momentum = scalar(key, v)?,
        "epochs" => t.epochs = scalar(key, v)?,
        "batch_size" => t.batch_size = scalar(key, v)?,
        "seed" => t.seed = scalar(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl ExperimentConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let known = match key.split_once('.') {
            Some(("data", f)) => {
                let d = &mut self.data;
                match f {
                    "mode" => d.mode = v.trim().parse::<ContextMode>()?,
                    "classes" => d.classes = scalar(key, v)?,
                    "supercategories" => d.supercategories = scalar(key, v)?,
                    "image_size" => d.image_size = scalar(key, v)?,
                    "n_per_class" => d.n_per_class = scalar(key, v)?,
                    "seed" => d.seed = scalar(key, v)?,
                    "train_fraction" => d.train_fraction = scalar(key, v)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            Some(("model", f)) => {
                match f {
                    "widths" => self.arch.widths = list(key, v)?,
                    "output_dim" => self.arch.output_dim = scalar(key, v)?,
                    "kernel" => self.arch.kernel = scalar(key, v)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            Some(("pretrain", f)) => match f {
                "n_per_class" => {
                    self.pretrain.n_per_class = scalar(key, v)?;
                    true
                }
                "corpus_seed" => {
                    self.pretrain.seed = scalar(key, v)?;
                    true
                }
                _ => train_key(&mut self.pretrain.train, key, f, v)?,
            },
            Some(("train", f)) => train_key(&mut self.train, key, f, v)?,
            Some(("attack", f)) => {
                match f {
                    "epsilons" => self.epsilons = list(key, v)?,
                    "sigmas" => self.sigmas = list(key, v)?,
                    "source" => self.source = kind(key, v)?,
                    "epsilon" => self.attack_epsilon = scalar(key, v)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            Some(("analysis", "pca_sigma")) => {
                self.pca_sigma = scalar(key, v)?;
                true
            }
            Some(("regularization", f)) => {
                match f {
                    "alphas" => self.alphas = list(key, v)?,
                    "warm_start" => self.warm_start = boolean(key, v)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            Some(("retrain", f)) => {
                match f {
                    "enabled" => self.retrain_enabled = boolean(key, v)?,
                    "epsilon" => self.retrain_epsilon = scalar(key, v)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            Some(("output", "dir")) => {
                self.output = PathBuf::from(v.trim());
                true
            }
            _ => false,
        };
        if known {
            Ok(())
        } else {
            Err(unknown(key))
        }
    }

    /// Parses config text on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value, got '{line}'", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        self.pretrain.train.validate()?;
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::config(format!("data.train_fraction {} must lie in (0, 1)", self.data.train_fraction)));
        }
        if self.data.n_per_class == 0 || self.pretrain.n_per_class == 0 {
            return Err(Error::config("n_per_class must be positive"));
        }
        if self.alphas.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::config("regularization.alphas must be non-negative"));
        }
        if !(self.attack_epsilon >= 0.0) || !(self.retrain_epsilon >= 0.0) {
            return Err(Error::config("attack strengths must be non-negative"));
        }
        for (name, grid) in [("attack.epsilons", &self.epsilons), ("attack.sigmas", &self.sigmas)] {
            if grid.is_empty() || grid.iter().any(|v| !(*v >= 0.0)) || grid.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::config(format!("{name} must be non-empty, non-negative and strictly increasing")));
            }
        }
        Ok(())
    }

    /// Every setting in a fixed order; the basis of the config hash.
    pub fn canonical(&self) -> String {
        let d = &self.data;
        let p = &self.pretrain;
        let t = &self.train;
        let lines = [
            format!("data.mode={}", d.mode.name()),
            format!("data.classes={}", d.classes),
            format!("data.supercategories={}", d.supercategories),
            format!("data.image_size={}", d.image_size),
            format!("data.n_per_class={}", d.n_per_class),
            format!("data.seed={}", d.seed),
            format!("data.train_fraction={}", d.train_fraction),
            format!("model.widths={}", join(&self.arch.widths)),
            format!("model.output_dim={}", self.arch.output_dim),
            format!("model.kernel={}", self.arch.kernel),
            format!("pretrain.n_per_class={}", p.n_per_class),
            format!("pretrain.corpus_seed={}", p.seed),
            format!("pretrain.lr={}", p.train.lr),
            format!("pretrain.momentum={}", p.train.momentum),
            format!("pretrain.epochs={}", p.train.epochs),
            format!("pretrain.batch_size={}", p.train.batch_size),
            format!("pretrain.seed={}", p.train.seed),
            format!("train.lr={}", t.lr),
            format!("train.momentum={}", t.momentum),
            format!("train.epochs={}", t.epochs),
            format!("train.batch_size={}", t.batch_size),
            format!("train.seed={}", t.seed),
            format!("attack.epsilons={}", join(&self.epsilons)),
            format!("attack.sigmas={}", join(&self.sigmas)),
            format!("attack.source={}", self.source.name()),
            format!("attack.epsilon={}", self.attack_epsilon),
            format!("analysis.pca_sigma={}", self.pca_sigma),
            format!("regularization.alphas={}", join(&self.alphas)),
            format!("regularization.warm_start={}", self.warm_start),
            format!("retrain.enabled={}", self.retrain_enabled),
            format!("retrain.epsilon={}", self.retrain_epsilon),
        ];
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// First 16 hex digits of the SHA-256 of [`canonical`](Self::canonical).
    /// The output directory is not part of the hash.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn unknown(key: &str) -> Error {
    Error::config(format!("unknown config key '{key}'"))
}
