//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments
//! override earlier ones, which is how command-line flags take precedence
//! over a file.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::Format;
use crate::model::ModelConfig;
use crate::training::{FactorMode, LossConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value:?} ({reason})")]
    BadValue { key: String, value: String, reason: String },
    #[error("{0}")]
    Invalid(String),
}

/// Splits `text` into `(key, value)` pairs in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            reason: "expected key = value".into(),
        })?;
        let key = key.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(ConfigError::Syntax {
                line: i + 1,
                reason: format!("invalid key {key:?}"),
            });
        }
        pairs.push((key.to_owned(), value.trim().to_owned()));
    }
    Ok(pairs)
}

/// Known dataset settings that preset the loss exponent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetPreset {
    RetailRocket,
    Tmall,
}

impl DatasetPreset {
    pub fn gamma(self) -> f64 {
        match self {
            DatasetPreset::RetailRocket => 6.0,
            DatasetPreset::Tmall => 2.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetPreset::RetailRocket => "retailrocket",
            DatasetPreset::Tmall => "tmall",
        }
    }
}

impl FromStr for DatasetPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "retailrocket" => Ok(DatasetPreset::RetailRocket),
            "tmall" => Ok(DatasetPreset::Tmall),
            other => Err(format!("unknown dataset preset {other:?}; expected retailrocket or tmall")),
        }
    }
}

/// Everything a training run needs apart from the catalog size, which comes
/// from the data.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub score_temperature: f64,
    pub train: TrainConfig,
    pub gamma: Option<f64>,
    pub factor: FactorMode,
    pub dataset: Option<DatasetPreset>,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub format: Format,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::new(1);
        Self {
            embed_dim: model.embed_dim,
            ffn_dim: model.ffn_dim,
            max_len: model.max_len,
            dropout_rate: model.dropout_rate,
            score_temperature: model.score_temperature,
            train: TrainConfig::default(),
            gamma: None,
            factor: FactorMode::Detached,
            dataset: None,
            train_path: None,
            test_path: None,
            out_dir: None,
            format: Format::Native,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_owned(),
        value: value.to_owned(),
        reason: e.to_string(),
    })
}

impl RunConfig {
    pub const KEYS: [&'static str; 20] = [
        "embed_dim",
        "ffn_dim",
        "max_len",
        "dropout_rate",
        "score_temperature",
        "learning_rate",
        "epochs",
        "batch_size",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "seed",
        "gamma",
        "factor",
        "dataset",
        "train",
        "test",
        "out_dir",
        "format",
        "num_items",
    ];

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "ffn_dim" => self.ffn_dim = parse_value(key, value)?,
            "max_len" => self.max_len = parse_value(key, value)?,
            "dropout_rate" => self.dropout_rate = parse_value(key, value)?,
            "score_temperature" => self.score_temperature = parse_value(key, value)?,
            "learning_rate" => self.train.learning_rate = parse_value(key, value)?,
            "epochs" => self.train.epochs = parse_value(key, value)?,
            "batch_size" => self.train.batch_size = parse_value(key, value)?,
            "adam_beta1" => self.train.adam_beta1 = parse_value(key, value)?,
            "adam_beta2" => self.train.adam_beta2 = parse_value(key, value)?,
            "adam_eps" => self.train.adam_eps = parse_value(key, value)?,
            "seed" => self.train.seed = parse_value(key, value)?,
            "gamma" => self.gamma = Some(parse_value(key, value)?),
            "factor" => {
                self.factor = match value {
                    "detached" => FactorMode::Detached,
                    "differentiable" => FactorMode::Differentiable,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            reason: "expected detached or differentiable".into(),
                        })
                    }
                }
            }
            "dataset" => self.dataset = Some(parse_value(key, value)?),
            "train" => self.train_path = Some(PathBuf::from(value)),
            "test" => self.test_path = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "format" => self.format = parse_value(key, value)?,
            "num_items" => {
                return Err(ConfigError::Invalid(
                    "num_items is derived from the data and cannot be set".into(),
                ))
            }
            other => return Err(ConfigError::UnknownKey(other.to_owned())),
        }
        Ok(())
    }

    /// Explicit gamma, else the dataset preset, else plain cross-entropy.
    pub fn effective_gamma(&self) -> f64 {
        self.gamma.or(self.dataset.map(DatasetPreset::gamma)).unwrap_or(0.0)
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            gamma: self.effective_gamma(),
            factor: self.factor,
        }
    }

    pub fn model(&self, num_items: usize) -> ModelConfig {
        ModelConfig {
            num_items,
            embed_dim: self.embed_dim,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
            dropout_rate: self.dropout_rate,
            score_temperature: self.score_temperature,
        }
    }

    /// Checks every value that does not depend on the data.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.model(1).validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        self.loss().validate().map_err(|e| invalid(&e))?;
        Ok(())
    }

    /// Config-file text that reproduces this configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line("embed_dim", self.embed_dim.to_string());
        line("ffn_dim", self.ffn_dim.to_string());
        line("max_len", self.max_len.to_string());
        line("dropout_rate", self.dropout_rate.to_string());
        line("score_temperature", self.score_temperature.to_string());
        line("learning_rate", self.train.learning_rate.to_string());
        line("epochs", self.train.epochs.to_string());
        line("batch_size", self.train.batch_size.to_string());
        line("adam_beta1", self.train.adam_beta1.to_string());
        line("adam_beta2", self.train.adam_beta2.to_string());
        line("adam_eps", self.train.adam_eps.to_string());
        line("seed", self.train.seed.to_string());
        line("gamma", self.effective_gamma().to_string());
        let factor = match self.factor {
            FactorMode::Detached => "detached",
            FactorMode::Differentiable => "differentiable",
        };
        line("factor", factor.into());
        if let Some(d) = self.dataset {
            line("dataset", d.name().into());
        }
        for (k, p) in [
            ("train", &self.train_path),
            ("test", &self.test_path),
            ("out_dir", &self.out_dir),
        ] {
            if let Some(p) = p {
                line(k, p.display().to_string());
            }
        }
        line("format", self.format.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn parses_pairs_with_comments() {
        let pairs = parse_pairs("# run\n\nepochs = 5\n gamma=2 \n").unwrap();
        assert_eq!(pairs, vec![("epochs".into(), "5".into()), ("gamma".into(), "2".into())]);
        assert_eq!(
            parse_pairs("epochs 5").unwrap_err(),
            ConfigError::Syntax {
                line: 1,
                reason: "expected key = value".into()
            }
        );
    }

    #[test]
    fn later_values_win_and_presets_defer_to_explicit_gamma() {
        let cfg = RunConfig::from_text("dataset = retailrocket\nepochs = 3\nepochs = 4").unwrap();
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.effective_gamma(), 6.0);
        let cfg = RunConfig::from_text("gamma = 1.5\ndataset = tmall").unwrap();
        assert_eq!(cfg.effective_gamma(), 1.5);
        assert_eq!(RunConfig::from_text("dataset = tmall").unwrap().effective_gamma(), 2.0);
        assert_eq!(RunConfig::default().effective_gamma(), 0.0);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert_eq!(
            RunConfig::from_text("colour = red").unwrap_err(),
            ConfigError::UnknownKey("colour".into())
        );
        assert!(matches!(
            RunConfig::from_text("epochs = -1"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            RunConfig::from_text("dataset = movielens"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(RunConfig::from_text("gamma = -2").unwrap().validate().is_err());
        assert!(RunConfig::from_text("dropout_rate = 1").unwrap().validate().is_err());
    }

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig::from_text(
            "embed_dim = 8\nlearning_rate = 0.0125\ngamma = 4\ntrain = a.txt\nformat = pickle\nfactor = differentiable",
        )
        .unwrap();
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    proptest! {
        #[test]
        fn parse_pairs_never_panics(text in "\\PC*") {
            let _ = parse_pairs(&text);
        }
    }
}
