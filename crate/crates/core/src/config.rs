//! Flat `key=value` run configuration.
//!
//! One assignment per line, `#` starts a comment, keys are prefixed by
//! section (`data.`, `model.`, `train.`). Unknown and repeated keys are
//! rejected. [`RunConfig::render`] prints every key so the output parses back
//! to an identical config.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::model::{Inference, ModelConfig};
use crate::train::TrainConfig;

pub const CONFIG_ECHO_FILE: &str = "config.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: GeneratorConfig,
    /// Fraction of eyes held out for testing.
    pub test_fraction: f64,
    pub split_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = GeneratorConfig::default();
        let model = ModelConfig {
            input_size: data.image_size,
            seq_len: data.seq_len,
            ..ModelConfig::default()
        };
        Self {
            data,
            test_fraction: 0.5,
            split_seed: 0,
            model,
            train: TrainConfig::default(),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

fn parse_range(key: &str, value: &str) -> Result<(f64, f64)> {
    match parse_list::<f64>(key, value)?[..] {
        [lo, hi] => Ok((lo, hi)),
        _ => Err(Error::Config(format!("{key}: expected `lo,hi`, got `{value}`"))),
    }
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

const RANGE_KEYS: [&str; 3] = ["data.range_open", "data.range_narrow", "data.range_synechiae"];

impl RunConfig {
    /// Every accepted key, in render order.
    pub const KEYS: [&'static str; 35] = [
        "data.seed",
        "data.num_eyes",
        "data.sequences_per_eye",
        "data.seq_len",
        "data.image_size",
        "data.noise_sigma",
        "data.range_open",
        "data.range_narrow",
        "data.range_synechiae",
        "data.class_proportions",
        "data.dominant_bias",
        "data.max_drift",
        "data.test_fraction",
        "data.split_seed",
        "model.num_classes",
        "model.stage_channels",
        "model.se_reduction",
        "model.lstm_hidden",
        "model.lstm_kernel",
        "model.lstm_layers",
        "model.we_conv_channels",
        "model.we_kernel",
        "model.inference",
        "train.learning_rate",
        "train.lr_decay",
        "train.lambda",
        "train.epochs",
        "train.batch_size",
        "train.seed",
        "train.adam_beta1",
        "train.adam_beta2",
        "train.adam_eps",
        "train.bn_momentum",
        "train.jitter",
        "train.eval_every",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data.seed" => self.data.seed = parse_num(key, v)?,
            "data.num_eyes" => self.data.num_eyes = parse_num(key, v)?,
            "data.sequences_per_eye" => self.data.sequences_per_eye = parse_num(key, v)?,
            "data.seq_len" => {
                self.data.seq_len = parse_num(key, v)?;
                self.model.seq_len = self.data.seq_len;
            }
            "data.image_size" => {
                self.data.image_size = parse_num(key, v)?;
                self.model.input_size = self.data.image_size;
            }
            "data.noise_sigma" => self.data.noise_sigma = parse_num(key, v)?,
            k if RANGE_KEYS.contains(&k) => {
                let i = RANGE_KEYS.iter().position(|&r| r == k).expect("matched");
                self.data.class_ranges[i] = parse_range(key, v)?;
            }
            "data.class_proportions" => {
                self.data.class_proportions = parse_list::<f64>(key, v)?
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected three values, got `{v}`")))?;
            }
            "data.dominant_bias" => self.data.dominant_bias = parse_num(key, v)?,
            "data.max_drift" => self.data.max_drift = parse_num(key, v)?,
            "data.test_fraction" => self.test_fraction = parse_num(key, v)?,
            "data.split_seed" => self.split_seed = parse_num(key, v)?,
            "model.num_classes" => self.model.num_classes = parse_num(key, v)?,
            "model.stage_channels" => self.model.stage_channels = parse_list(key, v)?,
            "model.se_reduction" => self.model.se_reduction = parse_num(key, v)?,
            "model.lstm_hidden" => self.model.lstm_hidden = parse_num(key, v)?,
            "model.lstm_kernel" => self.model.lstm_kernel = parse_num(key, v)?,
            "model.lstm_layers" => self.model.lstm_layers = parse_num(key, v)?,
            "model.we_conv_channels" => self.model.we_conv_channels = parse_num(key, v)?,
            "model.we_kernel" => self.model.we_kernel = parse_num(key, v)?,
            "model.inference" => {
                self.model.inference = Inference::parse(v)
                    .ok_or_else(|| Error::Config(format!("{key}: expected `ensemble` or `slice_vote`, got `{v}`")))?
            }
            "train.learning_rate" => self.train.learning_rate = parse_num(key, v)?,
            "train.lr_decay" => self.train.lr_decay = parse_num(key, v)?,
            "train.lambda" => self.train.lambda = parse_num(key, v)?,
            "train.epochs" => self.train.epochs = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.seed" => self.train.seed = parse_num(key, v)?,
            "train.adam_beta1" => self.train.adam.beta1 = parse_num(key, v)?,
            "train.adam_beta2" => self.train.adam.beta2 = parse_num(key, v)?,
            "train.adam_eps" => self.train.adam.eps = parse_num(key, v)?,
            "train.bn_momentum" => self.train.bn_momentum = parse_num(key, v)?,
            "train.jitter" => self.train.jitter = parse_num(key, v)?,
            "train.eval_every" => self.train.eval_every = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        Some(match key {
            "data.seed" => d.seed.to_string(),
            "data.num_eyes" => d.num_eyes.to_string(),
            "data.sequences_per_eye" => d.sequences_per_eye.to_string(),
            "data.seq_len" => d.seq_len.to_string(),
            "data.image_size" => d.image_size.to_string(),
            "data.noise_sigma" => d.noise_sigma.to_string(),
            k if RANGE_KEYS.contains(&k) => {
                let (lo, hi) = d.class_ranges[RANGE_KEYS.iter().position(|&r| r == k).expect("matched")];
                format!("{lo},{hi}")
            }
            "data.class_proportions" => join(&d.class_proportions),
            "data.dominant_bias" => d.dominant_bias.to_string(),
            "data.max_drift" => d.max_drift.to_string(),
            "data.test_fraction" => self.test_fraction.to_string(),
            "data.split_seed" => self.split_seed.to_string(),
            "model.num_classes" => m.num_classes.to_string(),
            "model.stage_channels" => join(&m.stage_channels),
            "model.se_reduction" => m.se_reduction.to_string(),
            "model.lstm_hidden" => m.lstm_hidden.to_string(),
            "model.lstm_kernel" => m.lstm_kernel.to_string(),
            "model.lstm_layers" => m.lstm_layers.to_string(),
            "model.we_conv_channels" => m.we_conv_channels.to_string(),
            "model.we_kernel" => m.we_kernel.to_string(),
            "model.inference" => m.inference.name().to_string(),
            "train.learning_rate" => t.learning_rate.to_string(),
            "train.lr_decay" => t.lr_decay.to_string(),
            "train.lambda" => t.lambda.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.adam_beta1" => t.adam.beta1.to_string(),
            "train.adam_beta2" => t.adam.beta2.to_string(),
            "train.adam_eps" => t.adam.eps.to_string(),
            "train.bn_momentum" => t.bn_momentum.to_string(),
            "train.jitter" => t.jitter.to_string(),
            "train.eval_every" => t.eval_every.to_string(),
            _ => return None,
        })
    }

    /// Applies `text` on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        config.apply(text)?;
        Ok(config)
    }

    /// Applies the assignments in `text` on top of `self`.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: key `{key}` set twice", i + 1)));
            }
            self.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("data.test_fraction must lie in (0,1), got {}", self.test_fraction)));
        }
        Ok(())
    }

    /// Every key with its effective value.
    pub fn render(&self) -> String {
        render_keys(self, &Self::KEYS)
    }
}

fn render_keys(config: &RunConfig, keys: &[&str]) -> String {
    let mut out = String::new();
    for key in keys {
        let value = config.get(key).expect("listed keys are known");
        writeln!(out, "{key}={value}").expect("writing to a String");
    }
    out
}

/// The `data.*` generator keys of a run config holding `data`.
pub fn render_generator(data: &GeneratorConfig) -> String {
    let config = RunConfig {
        data: data.clone(),
        ..RunConfig::default()
    };
    let keys: Vec<&str> = RunConfig::KEYS
        .iter()
        .copied()
        .filter(|k| k.starts_with("data.") && *k != "data.test_fraction" && *k != "data.split_seed")
        .collect();
    render_keys(&config, &keys)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_roundtrip() {
        let mut c = RunConfig::default();
        c.set("train.learning_rate", "0.00025").unwrap();
        c.set("model.stage_channels", "8, 16").unwrap();
        c.set("data.range_narrow", "20,30").unwrap();
        c.set("model.inference", "slice_vote").unwrap();
        let text = c.render();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        assert_eq!(text.lines().count(), RunConfig::KEYS.len());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = RunConfig::parse("# header\n\ntrain.epochs = 3 # short\ndata.seq_len=7\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.model.seq_len, 7);
        assert_eq!(c.data.seq_len, 7);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        for text in ["train.epoch=3", "train.epochs=3\ntrain.epochs=4", "train.epochs", "train.epochs=x", "data.range_open=1"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn every_key_is_gettable() {
        let c = RunConfig::default();
        for key in RunConfig::KEYS {
            assert!(c.get(key).is_some(), "{key}");
        }
        assert!(c.validate().is_ok());
    }
}
