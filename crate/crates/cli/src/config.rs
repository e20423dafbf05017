//! Run configuration: defaults, then a key-value file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use refback::experiments::{SweepConfig, DEFAULT_PROBE_PAIRS};
use refback::model::ModelConfig;
use refback::task::SplitSizes;
use refback::trainer::{Hyperparameters, Profile, PROFILE_D_MODEL, PROFILE_INIT_STD};
use refback::{Error, Result, TaskConfig};
use serde::{Deserialize, Serialize};

pub const TOOL_VERSION: &str = concat!("refback ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub tool_version: String,
    pub seed: u64,
    pub profile: Profile,
    pub task: TaskConfig,
    pub sizes: SplitSizes,
    pub d_model: usize,
    pub scale_attention: bool,
    pub init_std: f32,
    pub hyper: Hyperparameters,
    pub n_seeds: usize,
    /// 0 means every eligible pair.
    pub probe_pairs: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let profile = Profile::Desk;
        Self {
            tool_version: TOOL_VERSION.to_string(),
            seed: 0,
            profile,
            task: TaskConfig::default(),
            sizes: SplitSizes {
                train: profile.train_size(),
                ..SplitSizes::PAPER
            },
            d_model: PROFILE_D_MODEL,
            scale_attention: true,
            init_std: PROFILE_INIT_STD,
            hyper: profile.hyperparameters(),
            n_seeds: 10,
            probe_pairs: DEFAULT_PROBE_PAIRS,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Keys accepted in config files and as `--set key=value`.
pub const KEYS: &[&str] = &[
    "seed",
    "profile",
    "num_symbols",
    "scored_tuples",
    "p_match",
    "train_size",
    "dev_size",
    "test_size",
    "d_model",
    "scale_attention",
    "init_std",
    "epochs",
    "batch_size",
    "learning_rate",
    "checkpoint_every",
    "keep_best_dev",
    "n_seeds",
    "probe_pairs",
    "data_dir",
    "out_dir",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("`{key}`: cannot parse `{value}`")))
}

impl RunConfig {
    /// Sets one key. A profile resets the training size, epoch count, and
    /// learning rate.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "profile" => {
                self.profile = Profile::parse(value)?;
                self.sizes.train = self.profile.train_size();
                let tuned = self.profile.hyperparameters();
                self.hyper.epochs = tuned.epochs;
                self.hyper.learning_rate = tuned.learning_rate;
            }
            "num_symbols" => self.task.num_symbols = parse(key, value)?,
            "scored_tuples" => self.task.scored_tuples = parse(key, value)?,
            "p_match" => self.task.p_match = parse(key, value)?,
            "train_size" => self.sizes.train = parse(key, value)?,
            "dev_size" => self.sizes.dev = parse(key, value)?,
            "test_size" => self.sizes.test = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "scale_attention" => self.scale_attention = parse(key, value)?,
            "init_std" => self.init_std = parse(key, value)?,
            "epochs" => self.hyper.epochs = parse(key, value)?,
            "batch_size" => self.hyper.batch_size = parse(key, value)?,
            "learning_rate" => self.hyper.learning_rate = parse(key, value)?,
            "checkpoint_every" => self.hyper.checkpoint_every = parse(key, value)?,
            "keep_best_dev" => self.hyper.keep_best_dev = parse(key, value)?,
            "n_seeds" => self.n_seeds = parse(key, value)?,
            "probe_pairs" => self.probe_pairs = parse(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::InvalidConfig(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies pairs with `profile` first, so explicit sizes win over it.
    pub fn apply_all(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let (profile, rest): (Vec<_>, Vec<_>) = pairs.iter().partition(|(k, _)| k == "profile");
        for (k, v) in profile.into_iter().chain(rest) {
            self.apply(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.hyper.validate()?;
        self.model().validate()?;
        if self.n_seeds == 0 {
            return Err(Error::InvalidConfig("n_seeds must be >= 1".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            scale_attention: self.scale_attention,
            init_std: self.init_std,
            ..ModelConfig::new(
                self.d_model,
                self.task.vocabulary().len(),
                self.task.sequence_len(),
            )
        }
    }

    pub fn sweep(&self) -> SweepConfig {
        SweepConfig {
            task: self.task.clone(),
            model: self.model(),
            hyper: self.hyper.clone(),
            master_seed: self.seed,
            n_seeds: self.n_seeds,
            probe_pairs: (self.probe_pairs > 0).then_some(self.probe_pairs),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("line {}: expected `key = value`", n + 1))
        })?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(Error::InvalidConfig(format!("line {}: unknown key `{k}`", n + 1)));
        }
        pairs.push((k.to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// `default` names the built-in configuration.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    if path.as_os_str() == "default" {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_config_text(&text)
}

/// Config-file text reproducing `cfg`.
pub fn render_config(cfg: &RunConfig) -> String {
    let mut out = String::new();
    let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
    put("seed", cfg.seed.to_string());
    put(
        "profile",
        match cfg.profile {
            Profile::Full => "full".into(),
            Profile::Desk => "desk".into(),
        },
    );
    put("num_symbols", cfg.task.num_symbols.to_string());
    put("scored_tuples", cfg.task.scored_tuples.to_string());
    put("p_match", cfg.task.p_match.to_string());
    put("train_size", cfg.sizes.train.to_string());
    put("dev_size", cfg.sizes.dev.to_string());
    put("test_size", cfg.sizes.test.to_string());
    put("d_model", cfg.d_model.to_string());
    put("scale_attention", cfg.scale_attention.to_string());
    put("init_std", cfg.init_std.to_string());
    put("epochs", cfg.hyper.epochs.to_string());
    put("batch_size", cfg.hyper.batch_size.to_string());
    put("learning_rate", cfg.hyper.learning_rate.to_string());
    put("checkpoint_every", cfg.hyper.checkpoint_every.to_string());
    put("keep_best_dev", cfg.hyper.keep_best_dev.to_string());
    put("n_seeds", cfg.n_seeds.to_string());
    put("probe_pairs", cfg.probe_pairs.to_string());
    put("data_dir", cfg.data_dir.display().to_string());
    put("out_dir", cfg.out_dir.display().to_string());
    out
}
