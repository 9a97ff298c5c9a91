//! Run configuration in a line-oriented `key = value` format.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub q_order: usize,
    pub input_size: usize,
    pub encoder_channels: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    pub gamma: f64,
    pub alpha: f64,
    pub threshold: f64,
    pub data_index: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let loss = LossConfig::default();
        RunConfig {
            q_order: model.q_order,
            input_size: model.input_size,
            encoder_channels: model.encoder_channels,
            lr: 1e-4,
            epochs: 50,
            batch_size: 4,
            seed: 0,
            augment: true,
            gamma: loss.gamma,
            alpha: loss.alpha,
            threshold: 0.5,
            data_index: PathBuf::from("index.tsv"),
            out_dir: PathBuf::from("run"),
        }
    }
}

pub const KEYS: [&str; 13] = [
    "q_order",
    "input_size",
    "encoder_channels",
    "lr",
    "epochs",
    "batch_size",
    "seed",
    "augment",
    "gamma",
    "alpha",
    "threshold",
    "data_index",
    "out_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}`: expected a boolean, got `{value}`"
        ))),
    }
}

impl RunConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "q_order" => self.q_order = parse(key, value)?,
            "input_size" => self.input_size = parse(key, value)?,
            "encoder_channels" => {
                self.encoder_channels = value
                    .trim_start_matches('[')
                    .trim_end_matches(']')
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "lr" => self.lr = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "data_index" => self.data_index = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored.
    pub fn merge_str(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.merge_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every field, one per line, in [`KEYS`] order. Parsing the output
    /// yields an equal config.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let channels: Vec<String> = self
            .encoder_channels
            .iter()
            .map(|c| c.to_string())
            .collect();
        let _ = writeln!(s, "q_order = {}", self.q_order);
        let _ = writeln!(s, "input_size = {}", self.input_size);
        let _ = writeln!(s, "encoder_channels = {}", channels.join(","));
        let _ = writeln!(s, "lr = {:?}", self.lr);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "augment = {}", self.augment);
        let _ = writeln!(s, "gamma = {:?}", self.gamma);
        let _ = writeln!(s, "alpha = {:?}", self.alpha);
        let _ = writeln!(s, "threshold = {:?}", self.threshold);
        let _ = writeln!(s, "data_index = {}", self.data_index.display());
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        s
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            q_order: self.q_order,
            input_size: self.input_size,
            encoder_channels: self.encoder_channels.clone(),
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            gamma: self.gamma,
            alpha: self.alpha,
            ..LossConfig::default()
        }
    }

    pub fn augmentation(&self) -> AugmentConfig {
        AugmentConfig {
            enabled: self.augment,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.loss().validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(
                "lr",
                format!("{} must be positive", self.lr),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(
                "threshold",
                format!("{} outside (0, 1)", self.threshold),
            ));
        }
        Ok(())
    }
}
