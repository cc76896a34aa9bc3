//! Run configuration: profiles, `key = value` files and command-line overrides.
//!
//! Precedence, lowest first: built-in defaults, the selected profile, the
//! config file, explicit overrides.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Enhancement, ModelConfig};
use crate::optim::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// 64×64 input, c = 64: minutes on one CPU.
    Desk,
    /// 256×256 input, c = 128.
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Config(format!("unknown profile {s:?} (expected desk or paper)"))),
        }
    }
}

impl FromStr for Enhancement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "progressive" => Ok(Enhancement::Progressive),
            "non-progressive" => Ok(Enhancement::NonProgressive),
            "none" => Ok(Enhancement::None),
            _ => Err(Error::Config(format!(
                "unknown enhancement {s:?} (expected progressive, non-progressive or none)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub input_size: usize,
    pub channels: usize,
    pub fusion_blocks: usize,
    pub heads: usize,
    pub enhancement: Enhancement,
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Directory with `train/` and `test/` sample folders; synthesised in memory when unset.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Write an intermediate checkpoint every this many iterations (0: final only).
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Write final saliency maps as PGM during evaluation.
    pub dump_maps: bool,
    /// Seeds per ablation variant, starting at `seed`.
    pub ablate_seeds: usize,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let desk = Self {
            profile,
            input_size: 64,
            channels: 64,
            fusion_blocks: 4,
            heads: 4,
            enhancement: Enhancement::Progressive,
            lr: 1e-4,
            batch_size: 6,
            iterations: 2000,
            seed: 7,
            train_samples: 128,
            test_samples: 32,
            data_dir: None,
            out_dir: PathBuf::from("runs"),
            checkpoint_every: 0,
            log_every: 100,
            dump_maps: false,
            ablate_seeds: 1,
        };
        match profile {
            Profile::Desk => desk,
            Profile::Paper => Self {
                input_size: 256,
                channels: 128,
                ..desk
            },
        }
    }

    /// Apply `key = value` lines. Blank lines and `#` comments are ignored;
    /// unknown keys are errors. A `profile` key is applied before the others.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut entries = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", no + 1)))?;
            entries.push((no + 1, k.trim().to_string(), v.trim().to_string()));
        }
        if let Some((_, _, v)) = entries.iter().rev().find(|(_, k, _)| k == "profile") {
            let keep = (self.out_dir.clone(), self.data_dir.clone());
            *self = Self::profile(v.parse()?);
            (self.out_dir, self.data_dir) = keep;
        }
        for (no, k, v) in entries.iter().filter(|(_, k, _)| k != "profile") {
            self.set(k, v).map_err(|e| e.context(format!("line {no}")))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text).map_err(|e| e.context(path.display()))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
            }
        }
        match key {
            "input_size" => self.input_size = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "t" => self.fusion_blocks = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "enhancement" => self.enhancement = value.parse()?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "iters" => self.iterations = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "train_samples" => self.train_samples = num(key, value)?,
            "test_samples" => self.test_samples = num(key, value)?,
            "data" => self.data_dir = Some(PathBuf::from(value)),
            "out" => self.out_dir = PathBuf::from(value),
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            "dump_maps" => self.dump_maps = flag(key, value)?,
            "ablate_seeds" => self.ablate_seeds = num(key, value)?,
            "profile" => *self = Self::profile(value.parse()?),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.train_samples == 0 || self.test_samples == 0 {
            return Err(Error::Config("train_samples and test_samples must be positive".into()));
        }
        if self.ablate_seeds == 0 {
            return Err(Error::Config("ablate_seeds must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            fusion_blocks: self.fusion_blocks,
            heads: self.heads,
            height: self.input_size,
            width: self.input_size,
            enhancement: self.enhancement,
            seed: self.seed,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    /// Switch to the plain-fusion baseline.
    pub fn into_baseline(mut self) -> Self {
        self.enhancement = Enhancement::None;
        self.fusion_blocks = 0;
        self
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::profile(Profile::Desk)
    }
}
