//! Flat `key = value` configuration files. Keys are the field names of the
//! training and decoding configurations; `#` starts a comment.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use vistory_core::decoding::{DecodeConfig, Strategy};
use vistory_core::mapping::ContextMode;
use vistory_core::training::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("key `{key}`: cannot parse `{value}`")]
    Value { key: String, value: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
}

/// Parsed entries in file order of keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.into() })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1, text: raw.into() });
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(ConfigError::Duplicate { line: i + 1, key: k.into() });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Fails on the first key that neither configuration knows.
    pub fn check_keys(&self) -> Result<(), ConfigError> {
        match self.entries.keys().find(|k| !TRAIN_KEYS.contains(&k.as_str()) && !DECODE_KEYS.contains(&k.as_str())) {
            Some(k) => Err(ConfigError::UnknownKey(k.clone())),
            None => Ok(()),
        }
    }

    fn value<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| ConfigError::Value { key: key.into(), value: v.into() }),
        }
    }

    fn set<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<(), ConfigError> {
        if let Some(v) = self.value(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn set_with<T>(&self, key: &str, slot: &mut T, parse: impl Fn(&str) -> Option<T>) -> Result<(), ConfigError> {
        if let Some(v) = self.get(key) {
            *slot = parse(v).ok_or_else(|| ConfigError::Value { key: key.into(), value: v.into() })?;
        }
        Ok(())
    }

    pub fn apply_train(&self, c: &mut TrainConfig) -> Result<(), ConfigError> {
        self.set("batch_size", &mut c.batch_size)?;
        self.set("epochs", &mut c.epochs)?;
        self.set("n_nll", &mut c.n_nll)?;
        self.set("lambda", &mut c.lambda)?;
        self.set("tau", &mut c.tau)?;
        self.set("include_positive_in_denominator", &mut c.include_positive_in_denominator)?;
        self.set("lr", &mut c.lr)?;
        self.set("weight_decay", &mut c.weight_decay)?;
        self.set("warmup_steps", &mut c.warmup_steps)?;
        self.set_with("context_mode", &mut c.context_mode, ContextMode::parse)?;
        self.set("context_sentences", &mut c.context_sentences)?;
        self.set("curriculum", &mut c.curriculum)?;
        self.set("patience", &mut c.patience)?;
        self.set("min_delta", &mut c.min_delta)?;
        self.set("max_len", &mut c.max_len)?;
        self.set("seed", &mut c.seed)
    }

    pub fn apply_decode(&self, c: &mut DecodeConfig) -> Result<(), ConfigError> {
        self.set_with("strategy", &mut c.strategy, Strategy::parse)?;
        self.set("max_len", &mut c.max_len)?;
        self.set("num_beams", &mut c.num_beams)?;
        self.set("k", &mut c.k)?;
        self.set("p", &mut c.p)?;
        self.set("simctg_k", &mut c.simctg_k)?;
        self.set("alpha", &mut c.alpha)?;
        self.set("temperature", &mut c.temperature)?;
        self.set("seed", &mut c.seed)?;
        self.set("length_normalize", &mut c.length_normalize)
    }
}

const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "epochs",
    "n_nll",
    "lambda",
    "tau",
    "include_positive_in_denominator",
    "lr",
    "weight_decay",
    "warmup_steps",
    "context_mode",
    "context_sentences",
    "curriculum",
    "patience",
    "min_delta",
    "max_len",
    "seed",
];

const DECODE_KEYS: &[&str] = &[
    "strategy",
    "max_len",
    "num_beams",
    "k",
    "p",
    "simctg_k",
    "alpha",
    "temperature",
    "seed",
    "length_normalize",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_applies_both_configurations() {
        let f = ConfigFile::parse("# toy run\nepochs = 3\nlambda=0.5  # weight\ncontext_mode = after\n\nstrategy = simctg\nalpha = 0.6\nseed = 9\n").unwrap();
        f.check_keys().unwrap();
        let mut t = TrainConfig::default();
        f.apply_train(&mut t).unwrap();
        assert_eq!((t.epochs, t.lambda, t.context_mode, t.seed), (3, 0.5, ContextMode::After, 9));
        assert_eq!(t.batch_size, TrainConfig::default().batch_size);
        let mut d = DecodeConfig::default();
        f.apply_decode(&mut d).unwrap();
        assert_eq!((d.strategy, d.alpha, d.seed), (Strategy::Simctg, 0.6, 9));
    }

    #[test]
    fn reports_errors() {
        assert!(matches!(ConfigFile::parse("a = 1\nnonsense\n"), Err(ConfigError::Syntax { line: 2, .. })));
        assert!(matches!(ConfigFile::parse("a = 1\na = 2\n"), Err(ConfigError::Duplicate { line: 2, .. })));
        assert!(matches!(ConfigFile::parse("bogus = 1").unwrap().check_keys(), Err(ConfigError::UnknownKey(_))));
        let f = ConfigFile::parse("epochs = many").unwrap();
        assert!(matches!(f.apply_train(&mut TrainConfig::default()), Err(ConfigError::Value { .. })));
        let f = ConfigFile::parse("strategy = greedyish").unwrap();
        assert!(f.apply_decode(&mut DecodeConfig::default()).is_err());
    }
}
