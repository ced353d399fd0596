use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decode::Strategy;
use crate::error::{Error, Result};
use crate::rl::{Method, PretrainConfig, TrainConfig};
use crate::tasks::TaskSpec;

/// Decoding used for test-split evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub decode: Strategy,
    pub max_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            decode: Strategy::Greedy,
            max_len: 32,
        }
    }
}

/// Grids for `sweep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub c_grid: Vec<f64>,
    pub n_train: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            c_grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            n_train: vec![4, 8, 16],
        }
    }
}

/// One experiment: a task, a frozen base LM, a training method and the
/// seeds to average over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub task: TaskSpec,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("stg-out"),
            seeds: vec![1, 2, 3],
            task: TaskSpec::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| cfg_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| cfg_err(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| cfg_err(e.to_string()))
    }

    /// Applies `key=value` overrides; keys are dotted paths such as
    /// `train.updates` and values are TOML literals (bare words are taken as
    /// strings).
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| cfg_err(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("override `{o}` is not of the form key=value")))?;
            set_path(&mut root, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(cfg_err(
                "seeds is empty; list at least one seed, e.g. seeds = [1, 2, 3]",
            ));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(cfg_err(format!(
                "seeds contain duplicates: {:?}",
                self.seeds
            )));
        }
        self.task
            .validate()
            .map_err(|e| cfg_err(format!("task: {e}")))?;
        let vocab = self.task.vocab()?.len();
        if self.pretrain.dims.vocab != vocab {
            return Err(cfg_err(format!(
                "pretrain.dims.vocab is {} but the task vocabulary has {vocab} symbols",
                self.pretrain.dims.vocab
            )));
        }
        self.pretrain.dims.validate()?;
        self.pretrain.optimizer.validate()?;
        self.train
            .validate()
            .map_err(|e| cfg_err(format!("train: {e}")))?;
        self.eval.decode.validate()?;
        if self.eval.max_len == 0 {
            return Err(cfg_err("eval.max_len must be >= 1"));
        }
        for &c in &self.sweep.c_grid {
            crate::policy::fixed_selector(c).map_err(|e| cfg_err(format!("sweep.c_grid: {e}")))?;
        }
        if let Some(&n) = self
            .sweep
            .n_train
            .iter()
            .find(|&&n| n == 0 || n > self.task.train_pool)
        {
            return Err(cfg_err(format!(
                "sweep.n_train value {n} must be between 1 and the train pool {}",
                self.task.train_pool
            )));
        }
        Ok(())
    }

    /// Hash of everything that determines the frozen base LM.
    pub fn base_hash(&self) -> String {
        let mut task = self.task.clone();
        task.train_pool = 0;
        task.n_train = 0;
        task.n_valid = 0;
        task.n_test = 0;
        let mut pretrain = self.pretrain.clone();
        pretrain.workers = 0;
        digest(&("base", &task, &pretrain))
    }

    /// Hash of everything that determines the run for `seed`.
    pub fn run_hash(&self, seed: u64) -> String {
        let mut train = self.seed_train(seed);
        train.workers = 0;
        digest(&("run", self.base_hash(), &self.task, &train))
    }

    /// Hash of the whole experiment, independent of where outputs go and of
    /// the worker count.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.pretrain.workers = 0;
        c.train.workers = 0;
        digest(&c)
    }

    /// Training config for one seed.
    pub fn seed_train(&self, seed: u64) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = seed;
        t
    }

    /// Directory name of the configured method, e.g. `stg` or `fixed-c-0.25`.
    pub fn label(&self) -> String {
        match (self.train.method, self.train.c) {
            (Method::FixedC, Some(c)) => format!("fixed-c-{c}"),
            (m, _) => m.name().to_string(),
        }
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.output_dir.join("base.ckpt")
    }

    pub fn data_dir(&self, seed: u64) -> PathBuf {
        self.output_dir
            .join("data")
            .join(format!("n{}", self.task.n_train))
            .join(format!("seed-{seed}"))
    }

    /// Run directory relative to the output directory.
    pub fn run_rel(&self, seed: u64) -> PathBuf {
        PathBuf::from("runs")
            .join(format!("n{}", self.task.n_train))
            .join(self.label())
            .join(format!("seed-{seed}"))
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(self.run_rel(seed))
    }

    pub fn report_rel(&self) -> PathBuf {
        PathBuf::from("reports").join(format!("n{}-{}", self.task.n_train, self.label()))
    }

    /// Writes the resolved config to `path`.
    pub fn persist(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let text = format!("# config hash {}\n{}", self.config_hash(), self.to_toml()?);
        super::report::write_file(path, &text)
    }
}

pub(crate) fn digest<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    if key.is_empty() {
        return Err(cfg_err("empty override key"));
    }
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| {
            cfg_err(format!(
                "override `{key}`: `{}` is not a table",
                parts[..i].join(".")
            ))
        })?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    unreachable!("non-empty key")
}
