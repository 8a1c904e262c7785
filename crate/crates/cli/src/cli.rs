//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use clinex_client::{CacheMode, MockServer, RemoteEmbedder, Script};
use clinex_core::config::{load_task_config, ModelRegistry};
use clinex_core::embedding::MemoEmbedder;
use clinex_core::metrics::{DEFAULT_LEVEL, DEFAULT_RESAMPLES};
use clinex_core::ranking::{AnnealSchedule, KemenyOptions, DEFAULT_EXHAUSTIVE_N};
use clinex_core::{Embedder, HashedNgramEmbedder, ModelSpec, StrategyKind, StrategySpec, TaskSpec};
use serde_json::json;

use crate::corpus::Corpus;
use crate::records::{read_json, read_jsonl, write_atomic, write_json, ResultRow, TraceRow, RESULTS_FILE};
use crate::report::{
    agreement, agreement_csv, group_means_csv, heatmap_csv, rank_all, size_class_means, throughput_csv,
    throughput_rows, variance_csv, variance_of, AgreementReport, RankOptions, DEFAULT_RANK_RESAMPLES,
};
use crate::run::{run, RunOptions, DEFAULT_WORKERS};
use crate::score::{score, scores_csv, summary_csv, ScoreOptions, ScoreTable};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "clinex", version, about = "Clinical information-extraction benchmark runner")]
pub struct Cli {
    /// Seed for example selection, bootstrap resampling and annealing.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Response cache: off, on, or replay (cache only, no network).
    #[arg(long, global = true, default_value = "on")]
    pub cache: CacheMode,
    /// Cache directory; defaults to <out>/cache.
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Worker threads, and a cap on in-flight requests per model.
    #[arg(long, global = true, default_value_t = DEFAULT_WORKERS)]
    pub max_inflight: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check task, model and corpus files without running anything.
    Validate {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Mock server script to check.
        #[arg(long)]
        script: Option<PathBuf>,
    },
    /// Run every report x model x strategy cell; resumes an existing output directory.
    Run {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Restrict to these model ids (repeatable); default is every registered model.
        #[arg(long = "model")]
        model_ids: Vec<String>,
        /// Restrict to these strategies (repeatable); default is all six.
        #[arg(long = "strategy")]
        strategies: Vec<String>,
        /// Samples per self-consistency run.
        #[arg(long, default_value_t = clinex_core::prompt::DEFAULT_K_SAMPLES)]
        k_samples: usize,
        /// Temperature spread of self-consistency samples.
        #[arg(long, default_value_t = clinex_core::prompt::DEFAULT_TEMPERATURE_DELTA)]
        temperature_delta: f64,
        #[command(flatten)]
        embed: EmbedArgs,
    },
    /// Score results against consensus annotations.
    Score {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Defaults to <out>/results.jsonl.
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
        resamples: usize,
        #[arg(long, default_value_t = DEFAULT_LEVEL)]
        level: f64,
        #[command(flatten)]
        embed: EmbedArgs,
    },
    /// Inter-rater agreement of a corpus's annotations.
    Agreement {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        embed: EmbedArgs,
    },
    /// Consensus rankings per use case, and across use cases when several are given.
    Rank {
        #[arg(long = "scores", required = true)]
        scores: Vec<PathBuf>,
        #[command(flatten)]
        rank: RankArgs,
    },
    /// Variance of macro-averages explained by model and strategy.
    Variance {
        #[arg(long = "scores", required = true)]
        scores: Vec<PathBuf>,
    },
    /// Emit every report artifact for one or more scored use cases.
    Report {
        #[arg(long = "scores", required = true)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        models: PathBuf,
        /// Run traces for the throughput table (repeatable).
        #[arg(long = "trace")]
        traces: Vec<PathBuf>,
        /// Agreement files written by `agreement` (repeatable).
        #[arg(long = "agreement")]
        agreements: Vec<PathBuf>,
        #[command(flatten)]
        rank: RankArgs,
    },
    /// Serve a scripted OpenAI-compatible endpoint until killed.
    MockServe {
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value_t = 8089)]
        port: u16,
    },
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// OpenAI-compatible embedding endpoint; the built-in n-gram embedder is used otherwise.
    #[arg(long, requires = "embed_model")]
    pub embed_endpoint: Option<String>,
    #[arg(long)]
    pub embed_model: Option<String>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    /// Bootstrap re-rankings for rank intervals (0 disables them).
    #[arg(long, default_value_t = DEFAULT_RANK_RESAMPLES)]
    pub rank_resamples: usize,
    /// Largest candidate count searched exhaustively.
    #[arg(long, default_value_t = DEFAULT_EXHAUSTIVE_N)]
    pub exhaustive_max_n: usize,
    /// Annealing iterations per restart.
    #[arg(long, default_value_t = AnnealSchedule::default().max_iter)]
    pub anneal_iters: u64,
    /// Global ranking votes per variable instead of per use case.
    #[arg(long)]
    pub per_variable: bool,
}

impl RankArgs {
    fn options(&self, seed: u64) -> RankOptions {
        RankOptions {
            kemeny: KemenyOptions {
                exhaustive_max_n: self.exhaustive_max_n,
                schedule: AnnealSchedule { max_iter: self.anneal_iters, seed, ..AnnealSchedule::default() },
            },
            resamples: self.rank_resamples,
            level: DEFAULT_LEVEL,
            seed,
            per_variable: self.per_variable,
        }
    }
}

impl EmbedArgs {
    fn build(&self) -> Arc<dyn Embedder> {
        match (&self.embed_endpoint, &self.embed_model) {
            (Some(url), Some(model)) => Arc::new(MemoEmbedder::new(RemoteEmbedder::new(url.clone(), model.clone()))),
            _ => Arc::new(MemoEmbedder::new(HashedNgramEmbedder::default())),
        }
    }
}

fn load_models(path: &Path) -> Result<ModelRegistry, CliError> {
    Ok(ModelRegistry::load(path)?)
}

fn load_task(path: &Path) -> Result<TaskSpec, CliError> {
    Ok(load_task_config(path)?)
}

fn load_tables(paths: &[PathBuf]) -> Result<Vec<ScoreTable>, CliError> {
    paths.iter().map(|p| read_json(p)).collect()
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// File-name-safe form of a use-case id.
pub fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn parse_strategies(names: &[String], k: usize, delta: f64) -> Result<Vec<StrategySpec>, CliError> {
    let kinds: Vec<StrategyKind> = if names.is_empty() {
        StrategyKind::ALL.to_vec()
    } else {
        names
            .iter()
            .flat_map(|n| n.split(','))
            .map(|n| StrategyKind::parse(n.trim()).ok_or_else(|| CliError::Config(format!("unknown strategy `{n}`"))))
            .collect::<Result<_, _>>()?
    };
    Ok(kinds
        .into_iter()
        .map(|kind| StrategySpec { k_samples: k, temperature_delta: delta, ..StrategySpec::new(kind) })
        .collect())
}

fn select_models(registry: &ModelRegistry, ids: &[String]) -> Result<Vec<ModelSpec>, CliError> {
    if ids.is_empty() {
        return Ok(registry.models.clone());
    }
    ids.iter()
        .flat_map(|i| i.split(','))
        .map(|id| registry.get(id.trim()).cloned().ok_or_else(|| CliError::Config(format!("unknown model `{id}`"))))
        .collect()
}

/// Runs the parsed command and returns the process exit code.
pub fn execute(cli: Cli) -> Result<i32, CliError> {
    let out = cli.out.clone();
    match cli.command {
        Command::Validate { task, models, corpus, script } => {
            let t = load_task(&task)?;
            println!("task `{}`: {} fields, {} examples", t.task_id, t.fields.len(), t.examples.len());
            if let Some(m) = models {
                let reg = load_models(&m)?;
                println!("models: {}", reg.models.iter().map(|m| m.id.as_str()).collect::<Vec<_>>().join(", "));
            }
            if let Some(c) = corpus {
                let c = Corpus::load(&c)?;
                t.check_disjoint(c.report_ids())?;
                println!("corpus `{}`: {} reports, {} annotation sets", c.id, c.reports.len(), c.annotations.len());
            }
            if let Some(s) = script {
                Script::load(&s).map_err(|e| CliError::Config(e.to_string()))?;
                println!("mock script ok");
            }
            Ok(0)
        }
        Command::Run { task, models, corpus, model_ids, strategies, k_samples, temperature_delta, embed } => {
            let task = load_task(&task)?;
            let registry = load_models(&models)?;
            let models = select_models(&registry, &model_ids)?;
            let corpus = Corpus::load(&corpus)?;
            let opts = RunOptions {
                out_dir: out,
                seed: cli.seed,
                cache_mode: cli.cache,
                cache_dir: cli.cache_dir,
                max_inflight: cli.max_inflight,
                strategies: parse_strategies(&strategies, k_samples, temperature_delta)?,
            };
            let summary = run(&task, &models, &corpus, &opts, embed.build())?;
            let m = &summary.manifest;
            println!(
                "run {}: {} rows ({} resumed, {} executed, {} failed), {} network requests",
                m.run_id,
                summary.rows,
                m.cells_resumed,
                m.cells_executed,
                m.failures.len(),
                m.network_requests
            );
            for f in &m.failures {
                eprintln!("failed: {} / {} / {}: {}", f.model_id, f.strategy, f.report_id, f.error);
            }
            Ok(summary.exit_code())
        }
        Command::Score { task, corpus, results, resamples, level, embed } => {
            let task = load_task(&task)?;
            let corpus = Corpus::load(&corpus)?;
            let rows: Vec<ResultRow> = read_jsonl(&results.unwrap_or_else(|| out.join(RESULTS_FILE)))?;
            let opts = ScoreOptions { resamples, level, seed: cli.seed };
            let table = score(&task, &rows, &corpus, embed.build().as_ref(), &opts)?;
            ensure_dir(&out)?;
            write_json(&out.join("scores.json"), &table)?;
            write_text(&out, "scores.csv", &scores_csv(&table))?;
            write_text(&out, "scores_summary.csv", &summary_csv(&table))?;
            println!("scored {} model/strategy pairs over {} reports", table.rows.len(), table.report_ids.len());
            Ok(0)
        }
        Command::Agreement { task, corpus, embed } => {
            let task = load_task(&task)?;
            let corpus = Corpus::load(&corpus)?;
            let report = agreement(&task, &corpus, embed.build().as_ref())?;
            ensure_dir(&out)?;
            write_json(&out.join("agreement.json"), &report)?;
            write_text(&out, "agreement.csv", &agreement_csv(std::slice::from_ref(&report)))?;
            println!("agreement macro-average {:.4}", report.summary.macro_average);
            Ok(0)
        }
        Command::Rank { scores, rank } => {
            let tables = load_tables(&scores)?;
            let report = rank_all(&tables, &rank.options(cli.seed))?;
            ensure_dir(&out)?;
            write_json(&out.join("consensus.json"), &report)?;
            for uc in &report.use_cases {
                println!("{}: {}", uc.use_case, uc.consensus.order.first().map_or("", String::as_str));
            }
            Ok(0)
        }
        Command::Variance { scores } => {
            let tables = load_tables(&scores)?;
            ensure_dir(&out)?;
            write_text(&out, "variance.csv", &variance_csv(&tables)?)?;
            Ok(0)
        }
        Command::Report { scores, models, traces, agreements, rank } => {
            let tables = load_tables(&scores)?;
            let registry = load_models(&models)?;
            ensure_dir(&out)?;
            let ranking = rank_all(&tables, &rank.options(cli.seed))?;
            write_json(&out.join("consensus.json"), &ranking)?;
            for (t, r) in tables.iter().zip(&ranking.use_cases) {
                write_text(&out, &format!("heatmap_{}.csv", slug(&t.task_id)), &heatmap_csv(t, r))?;
            }
            let analysable: Vec<ScoreTable> = tables
                .iter()
                .filter(|t| match variance_of(t) {
                    Ok(_) => true,
                    Err(e) => {
                        eprintln!("variance skipped for {}: {e}", t.task_id);
                        false
                    }
                })
                .cloned()
                .collect();
            write_text(&out, "variance.csv", &variance_csv(&analysable)?)?;
            if !agreements.is_empty() {
                let reports: Vec<AgreementReport> = agreements.iter().map(|p| read_json(p)).collect::<Result<_, _>>()?;
                write_text(&out, "agreement.csv", &agreement_csv(&reports))?;
            }
            if !traces.is_empty() {
                let mut rows: Vec<TraceRow> = Vec::new();
                for p in &traces {
                    rows.extend(read_jsonl::<TraceRow>(p)?);
                }
                let tp = throughput_rows(&tables, &rows, &registry.models)?;
                write_text(&out, "throughput.csv", &throughput_csv(&tp))?;
            }
            let means = size_class_means(&tables, &registry.models, DEFAULT_RESAMPLES, DEFAULT_LEVEL, cli.seed)?;
            write_text(&out, "group_means.csv", &group_means_csv(&means))?;
            write_json(
                &out.join("report_manifest.json"),
                &json!({
                    "run_ids": tables.iter().map(|t| &t.run_id).collect::<Vec<_>>(),
                    "use_cases": tables.iter().map(|t| &t.task_id).collect::<Vec<_>>(),
                    "seed": cli.seed,
                }),
            )?;
            println!("report written to {}", out.display());
            Ok(0)
        }
        Command::MockServe { script, port } => {
            let script = Script::load(&script).map_err(|e| CliError::Config(e.to_string()))?;
            let server = MockServer::start(script, port).map_err(|e| CliError::Config(e.to_string()))?;
            println!("mock endpoint listening on {}", server.url());
            server.serve_forever()
        }
    }
}

/// Entry point shared by the binary and in-process tests.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
