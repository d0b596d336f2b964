use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{Arch, ModelConfig};
use crate::tasks::TaskId;

/// Named default sets. `paper` is the full-scale setting; `desk` shrinks
/// width, batch and budget to fit a single core.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Config(format!("unknown profile '{s}'; expected desk or paper"))),
        }
    }
}

/// Keys accepted in config files and as command-line overrides.
pub const CONFIG_KEYS: [&str; 15] = [
    "task",
    "arch",
    "hidden",
    "N",
    "M",
    "batch",
    "steps",
    "lr",
    "seed",
    "pos_enc",
    "n_tapes",
    "comp_tokens",
    "autoregressive",
    "eval_k",
    "profile",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: TaskId,
    pub model: ModelConfig,
    pub profile: Profile,
    /// Longest training length `N`.
    pub train_max_len: usize,
    /// Longest test length `M`; evaluation covers `N+1..=M`.
    pub test_max_len: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub seed: u64,
    /// Samples per evaluated length.
    pub eval_k: usize,
    /// Steps between progress records.
    pub log_every: u64,
}

impl TrainConfig {
    pub fn new(task: TaskId, arch: Arch, profile: Profile) -> Self {
        let mut config = TrainConfig {
            task,
            model: ModelConfig::new(arch),
            profile,
            train_max_len: 40,
            test_max_len: 500,
            batch_size: 128,
            steps: 1_000_000,
            lr: 3e-4,
            seed: 0,
            eval_k: 32,
            log_every: 1000,
        };
        config.apply_profile(profile);
        config
    }

    fn apply_profile(&mut self, profile: Profile) {
        self.profile = profile;
        let (hidden, batch, steps) = match profile {
            Profile::Desk => (64, 64, 50_000),
            Profile::Paper => (256, 128, 1_000_000),
        };
        self.model.hidden = hidden;
        self.batch_size = batch;
        self.steps = steps;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.train_max_len == 0 || self.train_max_len >= self.test_max_len {
            return bad(format!("need 1 <= N < M, got N={} M={}", self.train_max_len, self.test_max_len));
        }
        if self.batch_size == 0 || self.eval_k == 0 {
            return bad("batch and eval_k must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.model.autoregressive && self.model.comp_tokens != crate::models::CompTokens::Zero {
            return bad("autoregressive mode does not use computation tokens".into());
        }
        self.model.validate()
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
        }
        match key {
            "task" => self.task = value.parse()?,
            "arch" => self.model.arch = value.parse()?,
            "hidden" => self.model.hidden = num(key, value)?,
            "N" => self.train_max_len = num(key, value)?,
            "M" => self.test_max_len = num(key, value)?,
            "batch" => self.batch_size = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "pos_enc" => self.model.pos_enc = value.parse()?,
            "n_tapes" => self.model.n_tapes = num(key, value)?,
            "comp_tokens" => self.model.comp_tokens = value.parse()?,
            "autoregressive" => self.model.autoregressive = num(key, value)?,
            "eval_k" => self.eval_k = num(key, value)?,
            "profile" => self.apply_profile(value.parse()?),
            _ => {
                return Err(Error::Config(format!("unknown key '{key}'; valid keys: {}", CONFIG_KEYS.join(", "))));
            }
        }
        Ok(())
    }

    /// Builds a config from `key = value` pairs, later pairs overriding
    /// earlier ones. `task` is required; the profile (default desk) is
    /// applied before every other key.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        if let Some((key, _)) = pairs.iter().find(|(k, _)| !CONFIG_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown key '{key}'; valid keys: {}", CONFIG_KEYS.join(", "))));
        }
        let last = |name: &str| pairs.iter().rev().find(|(k, _)| k == name).map(|(_, v)| v.as_str());
        let task: TaskId = last("task").ok_or_else(|| Error::Config("missing key 'task'".into()))?.parse()?;
        let arch: Arch = last("arch").unwrap_or("rnn").parse()?;
        let profile: Profile = last("profile").unwrap_or("desk").parse()?;
        let mut config = TrainConfig::new(task, arch, profile);
        for (key, value) in pairs.iter().filter(|(k, _)| k != "profile") {
            config.set(key, value)?;
        }
        if config.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        config.validate()?;
        Ok(config)
    }

    /// Short stable digest of the full configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Parses flat `key = value` text. Blank lines and `#` comments are
/// skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) =
            line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config(format!("line {}: empty key or value", i + 1)));
        }
        out.push((key.to_string(), value.to_string()));
    }
    Ok(out)
}
