//! `key = value` run configuration files. Unknown keys are rejected;
//! commands report every missing required key at once.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use reformulator::training::{Algorithm, TrainConfig};

pub const KNOWN_KEYS: [&str; 24] = [
    "seed",
    "vocab_size",
    "embed_dim",
    "hidden_dim",
    "max_len",
    "batch_size",
    "learning_rate",
    "critic_learning_rate",
    "epochs",
    "patience",
    "val_fraction",
    "entropy_weight",
    "unlikelihood_alpha",
    "fluency_weight",
    "mixed_pg_weight",
    "mixed_sc_weight",
    "temperature",
    "prefix",
    "grad_clip",
    "algorithm",
    "sft_data",
    "sft_epochs",
    "rl_data",
    "wf_data",
];

/// Parsed configuration document plus its location (relative paths inside
/// the file resolve against its directory).
pub struct ConfigFile {
    values: BTreeMap<String, String>,
    dir: PathBuf,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<ConfigFile> {
        let body = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut values = BTreeMap::new();
        for (i, raw) in body.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected `key = value`", path.display(), i + 1))?;
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                bail!(
                    "{}:{}: unknown config key `{key}` (known keys: {})",
                    path.display(),
                    i + 1,
                    KNOWN_KEYS.join(", ")
                );
            }
            values.insert(key, value.trim().to_string());
        }
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(ConfigFile { values, dir })
    }

    /// Fails listing every missing key, not just the first.
    pub fn require(&self, keys: &[&str]) -> Result<()> {
        let missing: Vec<&str> = keys
            .iter()
            .filter(|k| !self.values.contains_key(**k))
            .copied()
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            bail!("config is missing required keys: {}", missing.join(", "))
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn get_or(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    pub fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| anyhow!("config key `{key}`: cannot parse value {raw:?}")),
        }
    }

    /// A path value resolved against the config file's directory.
    pub fn path(&self, key: &str) -> Result<PathBuf> {
        let raw = self
            .get(key)
            .ok_or_else(|| anyhow!("config is missing required keys: {key}"))?;
        Ok(self.resolve(raw))
    }

    pub fn resolve(&self, raw: &str) -> PathBuf {
        let p = PathBuf::from(raw);
        if p.is_absolute() {
            p
        } else {
            self.dir.join(p)
        }
    }

    /// Comma-separated path list.
    pub fn path_list(&self, key: &str) -> Result<Vec<PathBuf>> {
        let raw = self
            .get(key)
            .ok_or_else(|| anyhow!("config is missing required keys: {key}"))?;
        Ok(raw.split(',').map(|s| self.resolve(s.trim())).collect())
    }

    /// The shared trainer hyperparameters, starting from `base` defaults.
    pub fn train_config(
        &self,
        base: TrainConfig,
        algo_flag: Option<&str>,
        seed_flag: Option<u64>,
    ) -> Result<TrainConfig> {
        let algorithm = match algo_flag.or_else(|| self.get("algorithm")) {
            None => base.algorithm,
            Some(name) => Algorithm::parse(name)?,
        };
        // the mixed objective adds the fluency metric as an extra reward
        // unless the config says otherwise
        let default_fluency = if algorithm == Algorithm::Mixed {
            reformulator::rewards::DEFAULT_FLUENCY_WEIGHT
        } else {
            base.fluency_weight
        };
        let config = TrainConfig {
            batch_size: self.parse_or("batch_size", base.batch_size)?,
            learning_rate: self.parse_or("learning_rate", base.learning_rate)?,
            critic_learning_rate: self
                .parse_or("critic_learning_rate", base.critic_learning_rate)?,
            max_len: self.parse_or("max_len", base.max_len)?,
            algorithm,
            entropy_weight: self.parse_or("entropy_weight", base.entropy_weight)?,
            unlikelihood_alpha: self.parse_or("unlikelihood_alpha", base.unlikelihood_alpha)?,
            fluency_weight: self.parse_or("fluency_weight", default_fluency)?,
            mixed_pg_weight: self.parse_or("mixed_pg_weight", base.mixed_pg_weight)?,
            mixed_sc_weight: self.parse_or("mixed_sc_weight", base.mixed_sc_weight)?,
            epochs: self.parse_or("epochs", base.epochs)?,
            patience: self.parse_or("patience", base.patience)?,
            seed: match seed_flag {
                Some(s) => s,
                None => self.parse_or("seed", base.seed)?,
            },
            prefix: self.get_or("prefix", &base.prefix),
            temperature: self.parse_or("temperature", base.temperature)?,
            val_fraction: self.parse_or("val_fraction", base.val_fraction)?,
            grad_clip: self.parse_or("grad_clip", base.grad_clip)?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn vocab_size(&self) -> Result<usize> {
        self.parse_or("vocab_size", reformulator::text::DEFAULT_VOCAB_SIZE)
    }

    pub fn embed_dim(&self) -> Result<usize> {
        self.parse_or("embed_dim", 64)
    }

    pub fn hidden_dim(&self) -> Result<usize> {
        self.parse_or("hidden_dim", 128)
    }
}
