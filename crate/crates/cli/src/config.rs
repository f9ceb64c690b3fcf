//! Experiment configuration.
//!
//! Resolution order: built-in defaults, then the TOML file, then flags.
//! Every section seed is driven by the single top-level `seed`.

use std::fs;
use std::path::{Path, PathBuf};

use hart_core::checkpoint::DType;
use hart_core::corpus::{DocumentTaskConfig, SplitFractions, SyntheticConfig, UserTaskConfig};
use hart_core::finetune::{FinetuneConfig, TaskSplit};
use hart_core::hart::{ForwardMode, StateInit};
use hart_core::model::ModelConfig;
use hart_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub checkpoint_dtype: DType,
    pub paths: Paths,
    pub data: DataConfig,
    pub split: SplitFractions,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            checkpoint_dtype: DType::F64,
            paths: Paths::default(),
            data: DataConfig::default(),
            split: SplitFractions::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Input files. Each command requires only the entries it reads.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Unlabeled corpus for language modeling.
    Lm,
    /// Corpus plus one labeled message per user.
    Document,
    /// Corpus plus one regression target per user.
    User,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    pub corpus: SyntheticConfig,
    pub labeled_bias: f64,
    pub labeled_tokens_min: usize,
    pub labeled_tokens_max: usize,
    pub train_fraction: f64,
    pub dev_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let doc = DocumentTaskConfig::default();
        Self {
            kind: DataKind::Lm,
            corpus: SyntheticConfig::default(),
            labeled_bias: doc.labeled_bias,
            labeled_tokens_min: doc.labeled_tokens_min,
            labeled_tokens_max: doc.labeled_tokens_max,
            train_fraction: doc.train_fraction,
            dev_fraction: doc.dev_fraction,
        }
    }
}

impl DataConfig {
    pub fn document_task(&self) -> DocumentTaskConfig {
        DocumentTaskConfig {
            corpus: self.corpus.clone(),
            labeled_bias: self.labeled_bias,
            labeled_tokens_min: self.labeled_tokens_min,
            labeled_tokens_max: self.labeled_tokens_max,
            train_fraction: self.train_fraction,
            dev_fraction: self.dev_fraction,
        }
    }

    pub fn user_task(&self) -> UserTaskConfig {
        UserTaskConfig {
            corpus: self.corpus.clone(),
            train_fraction: self.train_fraction,
            dev_fraction: self.dev_fraction,
        }
    }
}

/// Architecture without the vocabulary size, which comes from the vocab file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub block_size: usize,
    /// Defaults follow `ModelConfig::new` when unset.
    pub insert_layer: Option<usize>,
    pub extract_layer: Option<usize>,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub state_init: StateInit,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 3,
            n_heads: 8,
            block_size: 8,
            insert_layer: None,
            extract_layer: None,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
            state_init: StateInit::Zeros,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vocab_size: usize, max_blocks: usize) -> ModelConfig {
        let mut c = ModelConfig::new(
            vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.block_size,
        );
        if let Some(l) = self.insert_layer {
            c.insert_layer = l;
        }
        if let Some(l) = self.extract_layer {
            c.extract_layer = l;
        }
        c.dropout = self.dropout;
        c.layer_norm_eps = self.layer_norm_eps;
        c.max_blocks = max_blocks;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Blocks of context per scored block, the scored block included.
    pub history_blocks: usize,
    pub mode: ForwardMode,
    /// Block cap when segmenting evaluation users.
    pub max_blocks: usize,
    pub sweep_blocks: Vec<usize>,
    pub n_resamples: usize,
    /// Target reliability for the disattenuated correlation.
    pub reliability: f64,
    pub task_split: TaskSplit,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            history_blocks: 4,
            mode: ForwardMode::Full,
            max_blocks: 16,
            sweep_blocks: vec![1, 2, 4],
            n_resamples: 10_000,
            reliability: 1.0,
            task_split: TaskSplit::Test,
        }
    }
}

const SECTION_SEEDS: [&[&str]; 3] = [
    &["data", "corpus", "seed"],
    &["train", "seed"],
    &["finetune", "seed"],
];

fn lookup<'a>(t: &'a Table, path: &[&str]) -> Option<&'a Value> {
    let (first, rest) = path.split_first()?;
    let v = t.get(*first)?;
    if rest.is_empty() {
        return Some(v);
    }
    lookup(v.as_table()?, rest)
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c = value` as a nested table.
fn nested(key: &str, value: Value) -> Result<Table, CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::user(format!("override key `{key}` is malformed")));
    }
    let mut v = value;
    for p in parts.iter().rev() {
        let mut t = Table::new();
        t.insert(p.to_string(), v);
        v = Value::Table(t);
    }
    match v {
        Value::Table(t) => Ok(t),
        _ => unreachable!("at least one key part"),
    }
}

/// TOML literal when it parses as one, otherwise a bare string.
fn parse_scalar(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Parses `key=value` overrides into one table.
pub fn overrides_table(pairs: &[String]) -> Result<Table, CliError> {
    let mut out = Table::new();
    for pair in pairs {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::user(format!("override `{pair}` is not KEY=VALUE")))?;
        merge(&mut out, nested(k.trim(), parse_scalar(v.trim()))?);
    }
    Ok(out)
}

pub fn path_override(key: &str, path: &Path) -> Result<Table, CliError> {
    nested(key, Value::String(path.to_string_lossy().into_owned()))
}

impl ExperimentConfig {
    /// Defaults, then `file`, then each override table in order.
    pub fn resolve(file: Option<&Path>, overrides: Vec<Table>) -> Result<Self, CliError> {
        let mut layers = Vec::new();
        if let Some(p) = file {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::user(format!("cannot read config {}: {e}", p.display())))?;
            let t: Table = toml::from_str(&text)
                .map_err(|e| CliError::user(format!("config {}: {e}", p.display())))?;
            layers.push(t);
        }
        layers.extend(overrides);
        let mut merged = Table::try_from(Self::default()).map_err(CliError::internal)?;
        for layer in layers {
            for path in SECTION_SEEDS {
                if lookup(&layer, path).is_some() {
                    return Err(CliError::user(format!(
                        "{} cannot be set; use the top-level `seed`",
                        path.join(".")
                    )));
                }
            }
            merge(&mut merged, layer);
        }
        let mut cfg: Self = merged
            .try_into()
            .map_err(|e| CliError::user(format!("invalid config: {e}")))?;
        cfg.data.corpus.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.finetune.seed = cfg.seed;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// The path stored under `paths.<field>`, which must exist.
    pub fn input(&self, field: &str) -> Result<&Path, CliError> {
        let p = match field {
            "corpus" => &self.paths.corpus,
            "vocab" => &self.paths.vocab,
            "train" => &self.paths.train,
            "dev" => &self.paths.dev,
            "eval" => &self.paths.eval,
            "labels" => &self.paths.labels,
            "checkpoint" => &self.paths.checkpoint,
            _ => unreachable!("unknown path field {field}"),
        };
        let p = p
            .as_deref()
            .ok_or_else(|| CliError::user(format!("paths.{field} is required for this command")))?;
        if !p.exists() {
            return Err(CliError::user(format!(
                "paths.{field}: {} does not exist",
                p.display()
            )));
        }
        Ok(p)
    }

    /// Like [`Self::input`] but `None` when the field is unset.
    pub fn optional_input(&self, field: &str) -> Result<Option<&Path>, CliError> {
        let set = match field {
            "dev" => self.paths.dev.is_some(),
            "vocab" => self.paths.vocab.is_some(),
            _ => unreachable!("field {field} is never optional"),
        };
        if set {
            self.input(field).map(Some)
        } else {
            Ok(None)
        }
    }
}
