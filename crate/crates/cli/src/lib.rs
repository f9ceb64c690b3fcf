//! `hart` command-line driver.
//!
//! Every subcommand reads one experiment config (TOML, overridable by
//! flags), writes all of its outputs under the output directory, and holds
//! a lock file there while it runs. Exit codes: 0 success, 1 user error,
//! 2 internal error.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use config::{overrides_table, path_override, ExperimentConfig};

pub const CODE_VERSION: &str = concat!("hart ", env!("CARGO_PKG_VERSION"));
pub const LOCK_FILE: &str = ".hart.lock";

#[derive(Debug)]
pub enum CliError {
    /// Bad input: config, flags, or files. Exit code 1.
    User(String),
    /// Anything else. Exit code 2.
    Internal(anyhow::Error),
}

impl CliError {
    pub fn user(msg: impl Into<String>) -> Self {
        CliError::User(msg.into())
    }

    pub fn internal(e: impl Into<anyhow::Error>) -> Self {
        CliError::Internal(e.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::User(m) => write!(f, "{m}"),
            CliError::Internal(e) => write!(f, "internal error: {e:#}"),
        }
    }
}

/// Adds a user-facing context to an error from reading input.
pub(crate) trait UserContext<T> {
    fn user_ctx(self, what: impl FnOnce() -> String) -> Result<T, CliError>;
}

impl<T, E: fmt::Display> UserContext<T> for Result<T, E> {
    fn user_ctx(self, what: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|e| CliError::User(format!("{}: {e}", what())))
    }
}

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)
            .user_ctx(|| format!("cannot create output_dir {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    CliError::user(format!(
                        "output_dir {} is locked by another run ({} exists)",
                        dir.display(),
                        path.display()
                    ))
                } else {
                    CliError::user(format!("cannot create lock {}: {e}", path.display()))
                }
            })?;
        writeln!(f, "{}", std::process::id()).map_err(CliError::internal)?;
        Ok(Self { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Provenance fields shared by every report.
#[derive(Serialize)]
pub struct Report<'a, T: Serialize> {
    pub command: &'a str,
    pub code_version: &'a str,
    pub seed: u64,
    pub config_hash: String,
    #[serde(flatten)]
    pub body: T,
}

pub(crate) fn write_report<T: Serialize>(
    cfg: &ExperimentConfig,
    command: &str,
    name: &str,
    body: T,
) -> Result<PathBuf, CliError> {
    let r = Report {
        command,
        code_version: CODE_VERSION,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        body,
    };
    let path = cfg.output_dir.join(name);
    let mut text = serde_json::to_string_pretty(&r).map_err(CliError::internal)?;
    text.push('\n');
    fs::write(&path, text).user_ctx(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

pub(crate) fn create_file(path: &Path) -> Result<File, CliError> {
    File::create(path).user_ctx(|| format!("cannot create {}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "hart", version, about = "Human language modeling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment config file (TOML).
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `paths.checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides `paths.corpus`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Overrides `paths.vocab`.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Overrides `paths.eval`.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Overrides `paths.labels`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Any config key, e.g. `--set train.epochs=3`. Applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Common {
    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut layers = Vec::new();
        let mut flags = toml::Table::new();
        if let Some(o) = &self.out {
            flags.insert(
                "output_dir".into(),
                toml::Value::String(o.to_string_lossy().into_owned()),
            );
        }
        if let Some(s) = self.seed {
            let s = i64::try_from(s)
                .map_err(|_| CliError::user("--seed must fit in a signed 64-bit integer"))?;
            flags.insert("seed".into(), toml::Value::Integer(s));
        }
        layers.push(flags);
        for (key, p) in [
            ("paths.checkpoint", &self.checkpoint),
            ("paths.corpus", &self.corpus),
            ("paths.vocab", &self.vocab),
            ("paths.eval", &self.eval),
            ("paths.labels", &self.labels),
        ] {
            if let Some(p) = p {
                layers.push(path_override(key, p)?);
            }
        }
        layers.push(overrides_table(&self.set)?);
        ExperimentConfig::resolve(self.config.as_deref(), layers)
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Retrain with blocks that never update the user state.
    NoRecurrence,
    /// Score a freshly initialized model.
    NotPretrained,
    /// Score each block with no earlier blocks.
    NoHistory,
    /// Score with the user state held at `U0`.
    Frozen,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoRecurrence => "no_recurrence",
            Ablation::NotPretrained => "not_pretrained",
            Ablation::NoHistory => "no_history",
            Ablation::Frozen => "frozen",
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (and task labels) from `[data]`.
    GenData(Common),
    /// Split `paths.corpus` into train, unseen and seen-heldout users; build the vocabulary.
    Split(Common),
    /// Pre-train on `paths.train`, early-stopping on `paths.dev`.
    Pretrain(Common),
    /// Perplexity of `paths.checkpoint` on `paths.eval`.
    EvalPpl(Common),
    /// Perplexity for each history size in `eval.sweep_blocks`.
    HistorySweep(Common),
    /// Fine-tune a document classifier on `paths.labels`.
    FinetuneDoc(Common),
    /// Fine-tune a user-level regressor on `paths.labels`.
    FinetuneUser(Common),
    /// Score a fine-tuned checkpoint on `eval.task_split`.
    EvalTask(Common),
    /// Compare the checkpoint against an ablated variant.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        variant: Ablation,
    },
    /// Paired significance tests between two reports.
    Significance {
        #[command(flatten)]
        common: Common,
        /// Report holding system A's per-instance scores.
        #[arg(long)]
        a: PathBuf,
        /// Report holding system B's per-instance scores.
        #[arg(long)]
        b: PathBuf,
        /// Metric name to compare; defaults to the first with per-instance scores.
        #[arg(long)]
        metric: Option<String>,
    },
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    let (common, name) = match &cmd {
        Command::GenData(c) => (c, "gen-data"),
        Command::Split(c) => (c, "split"),
        Command::Pretrain(c) => (c, "pretrain"),
        Command::EvalPpl(c) => (c, "eval-ppl"),
        Command::HistorySweep(c) => (c, "history-sweep"),
        Command::FinetuneDoc(c) => (c, "finetune-doc"),
        Command::FinetuneUser(c) => (c, "finetune-user"),
        Command::EvalTask(c) => (c, "eval-task"),
        Command::Ablate { common, .. } => (common, "ablate"),
        Command::Significance { common, .. } => (common, "significance"),
    };
    let cfg = common.resolve()?;
    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    log::info!(
        "{name}: output_dir {} config {}",
        cfg.output_dir.display(),
        cfg.hash()
    );
    match cmd {
        Command::GenData(_) => commands::gen_data(&cfg),
        Command::Split(_) => commands::split(&cfg),
        Command::Pretrain(_) => commands::pretrain(&cfg),
        Command::EvalPpl(_) => commands::eval_ppl(&cfg),
        Command::HistorySweep(_) => commands::history_sweep(&cfg),
        Command::FinetuneDoc(_) => commands::finetune_doc(&cfg),
        Command::FinetuneUser(_) => commands::finetune_user(&cfg),
        Command::EvalTask(_) => commands::eval_task(&cfg),
        Command::Ablate { variant, .. } => commands::ablate(&cfg, variant),
        Command::Significance { a, b, metric, .. } => {
            commands::significance(&cfg, &a, &b, metric.as_deref())
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
