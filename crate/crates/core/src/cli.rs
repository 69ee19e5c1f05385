//! Command-line entry point.
//!
//! One TOML run config describes the backends, the pool, the switcher and
//! all generation, datagen and scoring settings; command-line flags
//! override individual values. Exit code 2 means the configuration or
//! inputs were rejected, 1 means a run failed.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::backends::{
    Backend, HttpBackendOptions, HttpCompletionBackend, MockEmission, MockRule, MockSkillBackend,
    Pattern,
};
use crate::datagen::{self, DatagenConfig};
use crate::domain::{CandidatePool, ConfigError, GenerationConfig, Query};
use crate::engine::{self, GenerationRecord};
use crate::eval::{self, ResponseScorer, Scorer, ScorerSpec};
use crate::jsonl::{self, JsonlWriter};
use crate::rng::SeedStream;
use crate::switcher::{
    FixedSequencePolicy, LmPolicy, OraclePolicy, PolicySpec, RandomPolicy, SwitchContext,
    SwitchDistribution, SwitchError, SwitchPolicy,
};

// ---------------------------------------------------------------------------
// Configuration

fn default_concurrency() -> usize {
    8
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_max_retries() -> u32 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRuleDecl {
    pub when: Pattern,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    /// Rule-table mock; see [`MockSkillBackend`].
    Mock {
        #[serde(default)]
        rules: Vec<MockRule>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        default: Option<MockEmission>,
        #[serde(default)]
        label_rules: Vec<LabelRuleDecl>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label_default: Option<Vec<f64>>,
    },
    /// OpenAI-compatible completions endpoint.
    Http {
        url: String,
        model: String,
        /// Environment variable holding the bearer token.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        auth_env: Option<String>,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
        #[serde(default = "default_max_retries")]
        max_retries: u32,
        #[serde(default = "default_concurrency")]
        concurrency: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDecl {
    pub name: String,
    #[serde(flatten)]
    pub kind: BackendKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    /// Backend names in pool order; the order fixes model indices.
    pub members: Vec<String>,
    pub final_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Scorer per task name; overrides the scorer given in task files.
    pub scorers: BTreeMap<String, ScorerSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IoConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tasks: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// The whole run configuration.
///
/// `seed` and `concurrency` are authoritative: they replace
/// `generation.seed` and `datagen.concurrency` when the run starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub concurrency: usize,
    pub backends: Vec<BackendDecl>,
    pub pool: PoolConfig,
    pub switcher: PolicySpec,
    pub generation: GenerationConfig,
    pub datagen: DatagenConfig,
    pub eval: EvalConfig,
    pub io: IoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            concurrency: default_concurrency(),
            backends: Vec::new(),
            pool: PoolConfig::default(),
            switcher: PolicySpec::default(),
            generation: GenerationConfig::default(),
            datagen: DatagenConfig::default(),
            eval: EvalConfig::default(),
            io: IoConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<jsonl::JsonlError> for CliError {
    fn from(e: jsonl::JsonlError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Generation settings with the master seed applied.
    pub fn effective_generation(&self) -> GenerationConfig {
        GenerationConfig {
            seed: self.seed,
            ..self.generation.clone()
        }
    }

    pub fn effective_datagen(&self) -> DatagenConfig {
        DatagenConfig {
            concurrency: self.concurrency,
            ..self.datagen.clone()
        }
    }

    /// Checks every cross-reference and numeric range.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut names = HashSet::new();
        for b in &self.backends {
            if !names.insert(b.name.as_str()) {
                return Err(CliError::Config(format!(
                    "backends: duplicate name '{}'",
                    b.name
                )));
            }
        }
        for (i, m) in self.pool.members.iter().enumerate() {
            if !names.contains(m.as_str()) {
                return Err(CliError::Config(format!(
                    "pool.members[{i}]: unknown backend '{m}'"
                )));
            }
        }
        if let PolicySpec::Lm { backend } = &self.switcher {
            if !names.contains(backend.as_str()) {
                return Err(CliError::Config(format!(
                    "switcher.backend: unknown backend '{backend}'"
                )));
            }
        }
        if self.concurrency == 0 {
            return Err(CliError::Config("concurrency must be >= 1".into()));
        }
        self.effective_generation().validate()?;
        self.datagen
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    fn build_backend(decl: &BackendDecl) -> Result<Arc<dyn Backend>, CliError> {
        Ok(match &decl.kind {
            BackendKind::Mock {
                rules,
                default,
                label_rules,
                label_default,
            } => {
                let mut b = MockSkillBackend::new(&decl.name).with_rules(rules.iter().cloned());
                if let Some(d) = default {
                    b = b.default_emission(d.clone());
                }
                for r in label_rules {
                    b = b.label_rule(r.when.clone(), r.logits.clone());
                }
                if let Some(l) = label_default {
                    b = b.label_default(l.clone());
                }
                Arc::new(b)
            }
            BackendKind::Http {
                url,
                model,
                auth_env,
                timeout_secs,
                max_retries,
                concurrency,
            } => {
                let token = match auth_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        CliError::Config(format!(
                            "backends.{}.auth_env: environment variable '{var}' is not set",
                            decl.name
                        ))
                    })?),
                    None => None,
                };
                let options = HttpBackendOptions {
                    timeout: Duration::from_secs(*timeout_secs),
                    max_retries: *max_retries,
                    concurrency: *concurrency,
                    ..HttpBackendOptions::default()
                };
                Arc::new(
                    HttpCompletionBackend::new(&decl.name, url, model, token, options)
                        .map_err(|e| CliError::Config(format!("backends.{}: {e}", decl.name)))?,
                )
            }
        })
    }

    fn backend_by_name(&self, name: &str) -> Result<Arc<dyn Backend>, CliError> {
        let decl = self
            .backends
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| CliError::Config(format!("unknown backend '{name}'")))?;
        Self::build_backend(decl)
    }

    pub fn build_pool(&self) -> Result<CandidatePool, CliError> {
        let members = self
            .pool
            .members
            .iter()
            .map(|name| Ok((name.clone(), self.backend_by_name(name)?)))
            .collect::<Result<Vec<_>, CliError>>()?;
        Ok(CandidatePool::from_backends(
            members,
            self.pool.final_index,
        )?)
    }

    /// Scorer for `task`: the config binding, else the task file's.
    pub fn scorer_spec(&self, task: &str, from_file: Option<&ScorerSpec>) -> Option<ScorerSpec> {
        self.eval
            .scorers
            .get(task)
            .cloned()
            .or_else(|| from_file.cloned())
    }
}

// ---------------------------------------------------------------------------
// Task files

/// One line of a task file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    #[serde(flatten)]
    pub query: Query,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<ScorerSpec>,
}

pub fn read_tasks(path: &Path) -> Result<Vec<TaskEntry>, CliError> {
    let entries: Vec<TaskEntry> = jsonl::read_jsonl(path)?;
    let mut seen = HashSet::new();
    for e in &entries {
        e.query.validate()?;
        if !seen.insert(e.query.id.as_str()) {
            return Err(CliError::Config(format!(
                "{}: duplicate query id '{}'",
                path.display(),
                e.query.id
            )));
        }
    }
    Ok(entries)
}

/// Scorer per task, built from config bindings and task-file declarations.
fn task_scorers(
    config: &RunConfig,
    entries: &[TaskEntry],
) -> Result<HashMap<String, Arc<Scorer>>, CliError> {
    let mut out: HashMap<String, Arc<Scorer>> = HashMap::new();
    for e in entries {
        if out.contains_key(&e.query.task) {
            continue;
        }
        let spec = config.scorer_spec(&e.query.task, e.scorer.as_ref()).ok_or_else(|| {
            CliError::Config(format!(
                "no scorer for task '{}': add eval.scorers.{} to the config or a scorer to the task file",
                e.query.task, e.query.task
            ))
        })?;
        let scorer = Scorer::new(spec).map_err(|e| CliError::Config(e.to_string()))?;
        out.insert(e.query.task.clone(), Arc::new(scorer));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Policies

/// Dispatches to a per-task policy; used for the oracle, whose scorer
/// depends on the task.
struct PerTaskPolicy {
    policies: HashMap<String, Box<dyn SwitchPolicy>>,
}

impl SwitchPolicy for PerTaskPolicy {
    fn name(&self) -> &str {
        "oracle"
    }

    fn distribution(&self, ctx: &SwitchContext<'_>) -> Result<SwitchDistribution, SwitchError> {
        self.policies
            .get(&ctx.query.task)
            .ok_or_else(|| SwitchError::Oracle(format!("no scorer for task '{}'", ctx.query.task)))?
            .distribution(ctx)
    }
}

fn build_policy(
    config: &RunConfig,
    entries: &[TaskEntry],
) -> Result<Box<dyn SwitchPolicy>, CliError> {
    Ok(match &config.switcher {
        PolicySpec::Random => Box::new(RandomPolicy),
        PolicySpec::Fixed { sequence } => Box::new(
            FixedSequencePolicy::parse(sequence)
                .map_err(|e| CliError::Config(format!("switcher.sequence: {e}")))?,
        ),
        PolicySpec::Lm { backend } => Box::new(LmPolicy::new(config.backend_by_name(backend)?)),
        PolicySpec::Oracle => {
            let scorers = task_scorers(config, entries)?;
            Box::new(PerTaskPolicy {
                policies: scorers
                    .into_iter()
                    .map(|(task, s)| {
                        let scorer: Arc<dyn ResponseScorer> = s;
                        (
                            task,
                            Box::new(OraclePolicy::new(scorer)) as Box<dyn SwitchPolicy>,
                        )
                    })
                    .collect(),
            })
        }
    })
}

// ---------------------------------------------------------------------------
// Command line

#[derive(Debug, Parser)]
#[command(
    name = "switchgen",
    version,
    about = "Patch-level collaborative decoding over a model pool"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags that override config values.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Run configuration (TOML).
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Tokens per patch.
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Nucleus mass for switch decisions.
    #[arg(long)]
    pub top_p: Option<f64>,
    /// Response token budget.
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Queries in flight at once.
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Rollouts per candidate.
    #[arg(short = 'k', long = "rollouts")]
    pub k: Option<usize>,
    /// Instances per task to collect.
    #[arg(long)]
    pub instances: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig) {
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.patch_size {
            config.generation.patch_size = v;
        }
        if let Some(v) = self.top_p {
            config.generation.top_p = v;
        }
        if let Some(v) = self.max_new_tokens {
            config.generation.max_new_tokens = v;
        }
        if let Some(v) = self.concurrency {
            config.concurrency = v;
        }
        if let Some(v) = self.k {
            config.datagen.k = v;
        }
        if let Some(v) = self.instances {
            config.datagen.instances_per_task = v;
        }
    }

    /// Loads the config (or defaults when none is given) and applies flags.
    pub fn load(&self) -> Result<RunConfig, CliError> {
        let mut config = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.apply(&mut config);
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate one response and print it with per-patch attribution.
    Run {
        #[command(flatten)]
        overrides: Overrides,
        /// Instruction text.
        #[arg(long, conflicts_with = "id")]
        query: Option<String>,
        /// Task file to take the query from (with --id).
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Query id inside --tasks.
        #[arg(long, requires = "tasks")]
        id: Option<String>,
        /// Print the record as JSON only.
        #[arg(long)]
        json: bool,
    },
    /// Generate responses for a task file; resumable.
    Batch {
        #[command(flatten)]
        overrides: Overrides,
        /// Task file (JSONL); defaults to io.tasks.
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Records output (JSONL); defaults to io.out.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stop after this many new records (the run stays resumable).
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Collect switcher training data, one dataset per task.
    Collect {
        #[command(flatten)]
        overrides: Overrides,
        /// Task file (JSONL); defaults to io.tasks.
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Directory for <task>.jsonl datasets; defaults to io.out.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Score records against a task file.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        /// Generation records (JSONL).
        #[arg(long)]
        records: PathBuf,
        /// Task file (JSONL); defaults to io.tasks.
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Scored records.
        #[arg(long)]
        out: PathBuf,
        /// Per-task summaries and per-query scores (JSONL); stdout if absent.
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Sequence, location and switching statistics over scored records.
    Analyze {
        /// Generation records (JSONL).
        #[arg(long)]
        records: PathBuf,
        /// JSONL report.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Sequence statistics as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Pool size; inferred from the records if absent.
        #[arg(long)]
        pool_size: Option<usize>,
        /// Sequences listed in the stdout table.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Instruction/response pairs for distilling into a single model.
    ExportDistill {
        /// Generation records (JSONL).
        #[arg(long)]
        records: PathBuf,
        /// Pairs output (JSONL).
        #[arg(long)]
        out: PathBuf,
        /// Keep records scoring at least this.
        #[arg(long, default_value_t = 0.0)]
        min_score: f64,
    },
    /// Concatenate per-task datasets.
    MergeDatasets {
        /// Per-task dataset files, concatenated in this order.
        #[arg(long, required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Merged dataset; its manifest is written alongside.
        #[arg(long)]
        out: PathBuf,
        /// Shuffle the merged instances with this seed.
        #[arg(long)]
        shuffle_seed: Option<u64>,
    },
}

fn need(
    path: Option<PathBuf>,
    fallback: &Option<PathBuf>,
    what: &str,
) -> Result<PathBuf, CliError> {
    path.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Config(format!("missing {what}: pass --{what} or set io.{what}")))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Failed(format!("{}: {e}", path.display()))
}

/// Parses `args` and runs the command, writing normal output to `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    write!(stdout, "{e}").map_err(failed)
                }
                _ => Err(CliError::Config(e.to_string())),
            };
        }
    };
    match cli.command {
        Command::Run {
            overrides,
            query,
            tasks,
            id,
            json,
        } => cmd_run(&overrides.load()?, query, tasks, id, json, stdout),
        Command::Batch {
            overrides,
            tasks,
            out,
            limit,
        } => {
            let config = overrides.load()?;
            let tasks = need(tasks, &config.io.tasks, "tasks")?;
            let out = need(out, &config.io.out, "out")?;
            let summary = cmd_batch(&config, &tasks, &out, limit)?;
            writeln!(
                stdout,
                "{} records written ({} new, {} failed){}",
                summary.total,
                summary.new,
                summary.failed,
                if summary.complete {
                    ""
                } else {
                    "; run again to resume"
                }
            )
            .map_err(failed)?;
            if summary.failed > 0 {
                return Err(CliError::Failed(format!(
                    "{} generations failed",
                    summary.failed
                )));
            }
            Ok(())
        }
        Command::Collect {
            overrides,
            tasks,
            out_dir,
        } => {
            let config = overrides.load()?;
            let tasks = need(tasks, &config.io.tasks, "tasks")?;
            let out_dir = need(out_dir, &config.io.out, "out_dir")?;
            for (task, path, m) in cmd_collect(&config, &tasks, &out_dir)? {
                writeln!(
                    stdout,
                    "{task}: {} instances in {} ({} attempts, labels {:?})",
                    m.written,
                    path.display(),
                    m.attempts,
                    m.label_histogram
                )
                .map_err(failed)?;
            }
            Ok(())
        }
        Command::Eval {
            overrides,
            records,
            tasks,
            out,
            results,
        } => {
            let config = overrides.load()?;
            let tasks = need(tasks, &config.io.tasks, "tasks")?;
            let summaries = cmd_eval(&config, &records, &tasks, &out)?;
            let rows = result_rows(&summaries);
            match results {
                Some(p) => jsonl::write_jsonl(&p, &rows)?,
                None => {
                    for r in &rows {
                        writeln!(stdout, "{}", serde_json::to_string(r).map_err(failed)?)
                            .map_err(failed)?;
                    }
                }
            }
            Ok(())
        }
        Command::Analyze {
            records,
            out,
            csv,
            pool_size,
            top,
        } => {
            let report = cmd_analyze(&records, pool_size)?;
            if let Some(p) = out {
                report.write_jsonl(&p).map_err(failed)?;
            }
            if let Some(p) = csv {
                let f = File::create(&p).map_err(io_err(&p))?;
                report.write_csv(f).map_err(failed)?;
            }
            write!(stdout, "{}", report.render_table(top)).map_err(failed)
        }
        Command::ExportDistill {
            records,
            out,
            min_score,
        } => {
            let recs: Vec<GenerationRecord> = jsonl::read_jsonl(&records)?;
            let n = analysis::export_distill(&recs, min_score, &out).map_err(|e| match e {
                analysis::AnalysisError::Unscored(_) => CliError::Config(e.to_string()),
                other => failed(other),
            })?;
            writeln!(stdout, "{n} pairs written to {}", out.display()).map_err(failed)
        }
        Command::MergeDatasets {
            inputs,
            out,
            shuffle_seed,
        } => {
            let m = datagen::merge_datasets(&inputs, &out, shuffle_seed)?;
            writeln!(
                stdout,
                "{} instances written to {}",
                m.written,
                out.display()
            )
            .map_err(failed)
        }
    }
}

/// Binary entry point: returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .try_init();
    let mut stdout = std::io::stdout().lock();
    match run(args, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

// ---------------------------------------------------------------------------
// Commands

/// Readable form of a record: one line per patch.
pub fn render_record(record: &GenerationRecord, pool: &CandidatePool) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(s, "query {} ({})", record.query_id, record.instruction);
    for (i, seg) in record.trace.segments().iter().enumerate() {
        let how = match record.decisions.get(i) {
            Some(Some(d)) => format!("p={:.3}", d.distribution.probs()[seg.model_index]),
            _ => "forced".to_owned(),
        };
        let name = pool
            .members()
            .get(seg.model_index)
            .map_or("?", |m| m.name.as_str());
        let _ = writeln!(
            s,
            "[{i:>2}] model {} {name} ({how}, {} tokens): {:?}",
            seg.model_index, seg.token_count, seg.text
        );
    }
    let _ = writeln!(s, "response: {}", record.final_text);
    if let Some(f) = &record.failure {
        let _ = writeln!(s, "FAILED: {f}");
    }
    s
}

pub fn cmd_run(
    config: &RunConfig,
    query: Option<String>,
    tasks: Option<PathBuf>,
    id: Option<String>,
    json: bool,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let pool = config.build_pool()?;
    let entries = match (&query, &tasks, &id) {
        (Some(text), _, _) => vec![TaskEntry {
            query: Query::new("cli", text.clone()),
            scorer: None,
        }],
        (None, Some(path), Some(id)) => {
            let all = read_tasks(path)?;
            vec![all.into_iter().find(|e| &e.query.id == id).ok_or_else(|| {
                CliError::Config(format!("{}: no query with id '{id}'", path.display()))
            })?]
        }
        _ => {
            return Err(CliError::Config(
                "pass --query TEXT or --tasks FILE --id ID".into(),
            ))
        }
    };
    let policy = build_policy(config, &entries)?;
    let gen = config.effective_generation();
    let q = &entries[0].query;
    let record = engine::switch_generate(
        q,
        &pool,
        policy.as_ref(),
        &gen,
        &SeedStream::for_query(gen.seed, &q.id),
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let text = if json {
        serde_json::to_string_pretty(&record).map_err(failed)? + "\n"
    } else {
        render_record(&record, &pool)
    };
    stdout.write_all(text.as_bytes()).map_err(failed)?;
    match &record.failure {
        Some(f) => Err(CliError::Failed(format!("generation failed: {f}"))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSummary {
    pub total: usize,
    pub new: usize,
    pub failed: usize,
    pub complete: bool,
}

/// Sidecar listing the ids already written to `out`, one per line.
pub fn checkpoint_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".checkpoint");
    out.with_file_name(name)
}

/// Restores `out` to the state recorded by its checkpoint and returns the
/// completed ids in order. Without a checkpoint the run starts fresh and
/// `out` is emptied.
fn resume_state(out: &Path, ckpt: &Path) -> Result<Vec<String>, CliError> {
    if !ckpt.exists() {
        if out.exists() {
            File::create(out).map_err(io_err(out))?;
        }
        return Ok(Vec::new());
    }
    let done: Vec<String> = BufReader::new(File::open(ckpt).map_err(io_err(ckpt))?)
        .lines()
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err(ckpt))?
        .into_iter()
        .filter(|l| !l.is_empty())
        .collect();
    // Keep exactly the checkpointed lines; anything after them is a torn write.
    let text = if out.exists() {
        std::fs::read(out).map_err(io_err(out))?
    } else {
        Vec::new()
    };
    let mut keep = 0;
    let mut lines = 0;
    for (i, b) in text.iter().enumerate() {
        if lines == done.len() {
            break;
        }
        if *b == b'\n' {
            lines += 1;
            keep = i + 1;
        }
    }
    if lines < done.len() {
        return Err(CliError::Failed(format!(
            "{}: checkpoint lists {} records but the output holds {lines}; delete both to restart",
            out.display(),
            done.len()
        )));
    }
    let f = OpenOptions::new()
        .write(true)
        .open(out)
        .map_err(io_err(out))?;
    f.set_len(keep as u64).map_err(io_err(out))?;
    Ok(done)
}

pub fn cmd_batch(
    config: &RunConfig,
    tasks: &Path,
    out: &Path,
    limit: Option<usize>,
) -> Result<BatchSummary, CliError> {
    let entries = read_tasks(tasks)?;
    let pool = config.build_pool()?;
    let policy = build_policy(config, &entries)?;
    let gen = config.effective_generation();
    let ckpt = checkpoint_path(out);
    let done = resume_state(out, &ckpt)?;

    for (i, id) in done.iter().enumerate() {
        if entries.get(i).map(|e| &e.query.id) != Some(id) {
            return Err(CliError::Failed(format!(
                "{}: checkpoint does not match {}; delete it to restart",
                ckpt.display(),
                tasks.display()
            )));
        }
    }
    let pending: Vec<Query> = entries[done.len()..]
        .iter()
        .map(|e| e.query.clone())
        .collect();
    let todo = limit.map_or(pending.len(), |l| l.min(pending.len()));

    let out_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(out)
        .map_err(io_err(out))?;
    let mut writer = JsonlWriter::new(std::io::BufWriter::new(out_file));
    let mut ckpt_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&ckpt)
        .map_err(io_err(&ckpt))?;
    let mut new = 0;
    let mut failed_count = 0;
    engine::batch_generate_each(
        &pending[..todo],
        &pool,
        policy.as_ref(),
        &gen,
        config.concurrency,
        |r| {
            let io = |e: jsonl::JsonlError| {
                engine::EngineError::Config(ConfigError::Invalid(format!(
                    "writing {}: {e}",
                    out.display()
                )))
            };
            writer.write(&r).map_err(io)?;
            writer.flush().map_err(io)?;
            writeln!(ckpt_file, "{}", r.query_id)
                .and_then(|_| ckpt_file.flush())
                .map_err(|e| engine::EngineError::Config(ConfigError::Invalid(e.to_string())))?;
            new += 1;
            failed_count += usize::from(r.failed());
            Ok(())
        },
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    drop(writer);

    let total = done.len() + new;
    let complete = total == entries.len();
    if complete {
        std::fs::remove_file(&ckpt).map_err(io_err(&ckpt))?;
    }
    Ok(BatchSummary {
        total,
        new,
        failed: failed_count,
        complete,
    })
}

fn file_stem_for(task: &str) -> String {
    let s: String = task
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    if s.is_empty() {
        "default".to_owned()
    } else {
        s
    }
}

/// Collects one dataset per task into `out_dir/<task>.jsonl`.
pub fn cmd_collect(
    config: &RunConfig,
    tasks: &Path,
    out_dir: &Path,
) -> Result<Vec<(String, PathBuf, datagen::DatasetManifest)>, CliError> {
    let entries = read_tasks(tasks)?;
    let scorers = task_scorers(config, &entries)?;
    let pool = config.build_pool()?;
    let gen = config.effective_generation();
    let dg = config.effective_datagen();
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let mut by_task: BTreeMap<String, Vec<Query>> = BTreeMap::new();
    for e in entries {
        by_task
            .entry(e.query.task.clone())
            .or_default()
            .push(e.query);
    }
    let mut out = Vec::new();
    for (task, queries) in by_task {
        let dataset =
            datagen::collect_sft_dataset(&queries, &pool, scorers[&task].as_ref(), &gen, &dg)
                .map_err(|e| match e {
                    datagen::DatagenError::Config(_) => CliError::Config(e.to_string()),
                    other => CliError::Failed(format!("task '{task}': {other}")),
                })?;
        let path = out_dir.join(format!("{}.jsonl", file_stem_for(&task)));
        dataset.write(&path)?;
        out.push((task, path, dataset.manifest));
    }
    Ok(out)
}

/// Scores `records` with the scorers of `tasks`, writes the scored records
/// to `out` and returns one summary per task.
pub fn cmd_eval(
    config: &RunConfig,
    records: &Path,
    tasks: &Path,
    out: &Path,
) -> Result<Vec<eval::TaskResult>, CliError> {
    let entries = read_tasks(tasks)?;
    let scorers = task_scorers(config, &entries)?;
    let golds: HashMap<String, serde_json::Value> = entries
        .iter()
        .map(|e| (e.query.id.clone(), e.query.gold.clone()))
        .collect();
    let mut recs: Vec<GenerationRecord> = jsonl::read_jsonl(records)?;

    let mut task_order: Vec<String> = Vec::new();
    for r in &recs {
        if !task_order.contains(&r.task) {
            task_order.push(r.task.clone());
        }
    }
    let mut summaries = Vec::new();
    for task in task_order {
        let scorer = scorers
            .get(&task)
            .ok_or_else(|| CliError::Config(format!("no scorer for task '{task}'")))?;
        let mut group: Vec<GenerationRecord> =
            recs.iter().filter(|r| r.task == task).cloned().collect();
        let result =
            eval::evaluate(&task, &mut group, scorer.as_ref(), &golds).map_err(|e| match e {
                eval::EvalError::MissingGold(_) => CliError::Config(e.to_string()),
                other => failed(other),
            })?;
        let mut scored = group.into_iter();
        for r in recs.iter_mut().filter(|r| r.task == task) {
            *r = scored.next().expect("same group");
        }
        summaries.push(result);
    }
    jsonl::write_jsonl(out, &recs)?;
    Ok(summaries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResultRow {
    Task {
        task: String,
        mean_score: f64,
        n: usize,
        failed: usize,
    },
    Query {
        task: String,
        query_id: String,
        score: f64,
        failed: bool,
    },
}

pub fn result_rows(summaries: &[eval::TaskResult]) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for s in summaries {
        rows.push(ResultRow::Task {
            task: s.task.clone(),
            mean_score: s.mean_score,
            n: s.n,
            failed: s.failed,
        });
        for q in &s.per_query {
            rows.push(ResultRow::Query {
                task: s.task.clone(),
                query_id: q.query_id.clone(),
                score: q.score,
                failed: q.failed,
            });
        }
    }
    rows
}

pub fn cmd_analyze(
    records: &Path,
    pool_size: Option<usize>,
) -> Result<analysis::AnalysisReport, CliError> {
    let recs: Vec<GenerationRecord> = jsonl::read_jsonl(records)?;
    analysis::analyze(&recs, pool_size).map_err(|e| match e {
        analysis::AnalysisError::Unscored(_) | analysis::AnalysisError::Empty => {
            CliError::Config(e.to_string())
        }
        other => failed(other),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 7
concurrency = 4

[[backends]]
name = "a"
kind = "mock"
default = { text = "alpha ", tokens = 10 }
rules = [{ when = { contains = "stop" }, text = "done", tokens = 2, finished = true }]

[[backends]]
name = "b"
kind = "mock"
default = { text = "beta ", tokens = 10 }

[[backends]]
name = "remote"
kind = "http"
url = "http://127.0.0.1:9/v1"
model = "m"

[pool]
members = ["a", "b"]
final_index = 1

[switcher]
kind = "fixed"
sequence = "01"

[generation]
patch_size = 10
max_new_tokens = 40

[eval.scorers.arith]
kind = "numeric_last"
"#;

    #[test]
    fn sample_parses_with_defaults() {
        let c = RunConfig::from_toml(SAMPLE).unwrap();
        c.validate().unwrap();
        assert_eq!(c.pool.members, vec!["a", "b"]);
        assert_eq!(c.generation.top_p, 0.7);
        assert_eq!(c.datagen.k, 32);
        assert_eq!(c.datagen.instances_per_task, 10_000);
        assert_eq!((c.datagen.cap_min, c.datagen.cap_max), (0.1, 0.9));
        assert_eq!(c.effective_generation().seed, 7);
        assert_eq!(c.effective_datagen().concurrency, 4);
        let BackendKind::Http {
            timeout_secs,
            max_retries,
            ..
        } = &c.backends[2].kind
        else {
            panic!("expected http")
        };
        assert_eq!((*timeout_secs, *max_retries), (120, 3));
    }

    #[test]
    fn defaults_follow_published_settings() {
        let c = RunConfig::default();
        assert_eq!(c.generation.patch_size, 50);
        assert_eq!(c.generation.top_p, 0.7);
        assert_eq!(c.generation.max_new_tokens, 512);
        assert_eq!(c.datagen.k, 32);
    }

    #[test]
    fn round_trip() {
        let c = RunConfig::from_toml(SAMPLE).unwrap();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&d.to_toml().unwrap()).unwrap(), d);
    }

    #[test]
    fn unknown_member_is_named() {
        let bad = SAMPLE.replace("members = [\"a\", \"b\"]", "members = [\"a\", \"zeta\"]");
        let err = RunConfig::from_toml(&bad).unwrap().validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("pool.members[1]"));
        assert!(err.to_string().contains("zeta"));
    }

    #[test]
    fn flags_win() {
        let mut c = RunConfig::from_toml(SAMPLE).unwrap();
        Overrides {
            seed: Some(3),
            top_p: Some(0.9),
            k: Some(4),
            ..Overrides::default()
        }
        .apply(&mut c);
        assert_eq!((c.seed, c.generation.top_p, c.datagen.k), (3, 0.9, 4));
    }

    #[test]
    fn checkpoint_naming() {
        assert_eq!(
            checkpoint_path(Path::new("/x/out.jsonl")),
            PathBuf::from("/x/out.jsonl.checkpoint")
        );
        assert_eq!(file_stem_for("gsm 8k/x"), "gsm_8k_x");
        assert_eq!(file_stem_for(""), "default");
    }

    #[test]
    fn run_prints_attribution_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        std::fs::write(&cfg, SAMPLE).unwrap();
        let args = [
            "switchgen",
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--query",
            "hello",
        ];
        let mut a = Vec::new();
        run(args, &mut a).unwrap();
        let mut b = Vec::new();
        run(args, &mut b).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(
            text.contains("[ 0] model 1 b (forced, 10 tokens)"),
            "{text}"
        );
        assert!(text.contains("response: beta beta alpha beta "), "{text}");
    }

    #[test]
    fn help_succeeds_and_usage_errors_are_config_errors() {
        let mut out = Vec::new();
        run(["switchgen", "--help"], &mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().contains("merge-datasets"));
        let err = run(["switchgen", "batch", "--bogus"], &mut Vec::new()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
