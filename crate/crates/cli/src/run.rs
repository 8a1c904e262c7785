//! The experiment runner: every report × model × strategy cell, executed by
//! a bounded worker pool, appended to `results.jsonl` as it finishes, and
//! rewritten in sorted order at the end.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fs::{self, OpenOptions};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Instant;

use chrono::{SecondsFormat, Utc};
use clinex_client::{CacheMode, ChatClient, ResponseCache, Semaphore};
use clinex_core::chat::sha256_hex;
use clinex_core::config::{select_examples, ExampleSpec};
use clinex_core::parser::{ExtractionRecord, ParsedRecord};
use clinex_core::prompt::run_strategy;
use clinex_core::{ChatBackend, Embedder, ModelSpec, StrategyKind, StrategySpec, TaskSpec};
use indexmap::IndexMap;
use serde_json::json;

use crate::corpus::Corpus;
use crate::records::{
    append_line, read_jsonl, write_json, write_jsonl, FailureEntry, ResultRow, RunManifest, StrategyTiming, TraceRow,
    MANIFEST_FILE, RESULTS_FILE, RESULTS_SCHEMA_VERSION, TRACE_FILE,
};
use crate::CliError;

pub const DEFAULT_WORKERS: usize = 4;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub cache_mode: CacheMode,
    /// Defaults to `<out_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
    /// Worker threads, and an upper bound on each model's in-flight requests.
    pub max_inflight: usize,
    pub strategies: Vec<StrategySpec>,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            out_dir: out_dir.into(),
            seed: 0,
            cache_mode: CacheMode::ReadWrite,
            cache_dir: None,
            max_inflight: DEFAULT_WORKERS,
            strategies: StrategyKind::ALL.iter().map(|&k| StrategySpec::new(k)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub rows: usize,
}

impl RunSummary {
    pub fn exit_code(&self) -> i32 {
        if self.manifest.failures.is_empty() {
            0
        } else {
            2
        }
    }
}

fn strategy_index(kind: StrategyKind) -> usize {
    StrategyKind::ALL.iter().position(|&k| k == kind).expect("kind is listed")
}

fn sort_key(row: &ResultRow) -> (String, usize, String) {
    (row.record.model_id.clone(), strategy_index(row.record.strategy), row.record.report_id.clone())
}

fn trace_key(row: &TraceRow) -> (String, usize, String, usize) {
    (row.model_id.clone(), strategy_index(row.strategy), row.report_id.clone(), row.turn)
}

/// Seed of the example draw for one strategy.
pub fn example_seed(seed: u64, kind: StrategyKind) -> u64 {
    seed.wrapping_mul(31).wrapping_add(strategy_index(kind) as u64)
}

pub fn content_hash(value: &serde_json::Value) -> String {
    sha256_hex(value.to_string().as_bytes())
}

struct Cell {
    report: usize,
    model: usize,
    strategy: usize,
}

struct Outcome {
    row: ResultRow,
    trace: Vec<TraceRow>,
    kind: StrategyKind,
    seconds: f64,
}

/// Runs the cross-product of `corpus` reports, `models` and the configured
/// strategies. Cells already present in `results.jsonl` for the same run id
/// are kept; failed cells are retried.
pub fn run(
    task: &TaskSpec,
    models: &[ModelSpec],
    corpus: &Corpus,
    opts: &RunOptions,
    embedder: Arc<dyn Embedder>,
) -> Result<RunSummary, CliError> {
    task.validate()?;
    task.check_disjoint(corpus.report_ids())?;
    if models.is_empty() {
        return Err(CliError::Config("no models selected".into()));
    }
    if opts.strategies.is_empty() {
        return Err(CliError::Config("no strategies selected".into()));
    }
    for s in &opts.strategies {
        s.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if s.kind == StrategyKind::PromptGraph && task.graph.is_none() {
            return Err(CliError::Config(format!("task `{}` has no graph for prompt_graph", task.task_id)));
        }
    }
    let mut examples: Vec<Vec<ExampleSpec>> = Vec::new();
    let mut example_ids = IndexMap::new();
    for s in &opts.strategies {
        let drawn = select_examples(task, s.n_examples, example_seed(opts.seed, s.kind))?;
        example_ids.insert(s.kind.to_string(), drawn.iter().map(|e| e.id.clone()).collect());
        examples.push(drawn);
    }

    let task_hash = content_hash(&serde_json::to_value(task).expect("task serializes"));
    let models_hash = content_hash(&serde_json::to_value(models).expect("models serialize"));
    let run_id = content_hash(&json!({
        "task": task_hash,
        "models": models_hash,
        "corpus": corpus.id,
        "seed": opts.seed,
        "strategies": opts.strategies,
    }))[..16]
        .to_string();

    fs::create_dir_all(&opts.out_dir).map_err(|e| CliError::io(&opts.out_dir, e))?;
    let results_path = opts.out_dir.join(RESULTS_FILE);
    let trace_path = opts.out_dir.join(TRACE_FILE);

    let existing: Vec<ResultRow> = read_jsonl(&results_path)?;
    let model_ids: HashSet<&str> = models.iter().map(|m| m.id.as_str()).collect();
    let kinds: HashSet<StrategyKind> = opts.strategies.iter().map(|s| s.kind).collect();
    let report_ids: HashSet<&str> = corpus.report_ids().collect();
    let kept: Vec<ResultRow> = existing
        .into_iter()
        .filter(|r| {
            r.run_id == run_id
                && r.error.is_none()
                && model_ids.contains(r.record.model_id.as_str())
                && kinds.contains(&r.record.strategy)
                && report_ids.contains(r.record.report_id.as_str())
        })
        .collect();
    let done: HashSet<_> = kept.iter().map(ResultRow::key).collect();
    let kept_trace: Vec<TraceRow> = read_jsonl::<TraceRow>(&trace_path)?
        .into_iter()
        .filter(|t| {
            t.run_id == run_id && done.contains(&(t.model_id.clone(), t.strategy, t.report_id.clone()))
        })
        .collect();

    let mut queue = VecDeque::new();
    for (mi, m) in models.iter().enumerate() {
        for (si, s) in opts.strategies.iter().enumerate() {
            for (ri, r) in corpus.reports.iter().enumerate() {
                if !done.contains(&(m.id.clone(), s.kind, r.id.clone())) {
                    queue.push_back(Cell { report: ri, model: mi, strategy: si });
                }
            }
        }
    }
    let cells_total = models.len() * opts.strategies.len() * corpus.reports.len();

    let mut manifest = RunManifest {
        schema_version: RESULTS_SCHEMA_VERSION,
        run_id: run_id.clone(),
        task_id: task.task_id.clone(),
        task_hash,
        models_hash,
        corpus_id: corpus.id.clone(),
        seed: opts.seed,
        models: models.iter().map(|m| m.id.clone()).collect(),
        strategies: opts.strategies.clone(),
        examples: example_ids,
        cache_mode: opts.cache_mode.to_string(),
        started_at: Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true),
        finished_at: None,
        cells_total,
        cells_resumed: kept.len(),
        cells_executed: queue.len(),
        network_requests: 0,
        failures: Vec::new(),
        timings: IndexMap::new(),
    };
    let manifest_path = opts.out_dir.join(MANIFEST_FILE);
    write_json(&manifest_path, &manifest)?;

    // Start from the kept rows so an interrupted run leaves a consistent file.
    write_jsonl(&results_path, &kept)?;
    write_jsonl(&trace_path, &kept_trace)?;

    let workers = opts.max_inflight.max(1);
    let cache_dir = opts.cache_dir.clone().unwrap_or_else(|| opts.out_dir.join("cache"));
    let clients: Vec<ChatClient> = models
        .iter()
        .map(|m| -> Result<ChatClient, CliError> {
            let slots = Arc::new(Semaphore::new(m.limits.max_inflight.min(workers).max(1)));
            let mut client = ChatClient::new(m.clone()).with_semaphore(slots);
            if opts.cache_mode != CacheMode::Off {
                let cache = ResponseCache::new(&cache_dir).map_err(|e| CliError::io(&cache_dir, e))?;
                client = client.with_cache(cache, opts.cache_mode);
            }
            Ok(client)
        })
        .collect::<Result<_, _>>()?;

    let open_append = |p: &PathBuf| OpenOptions::new().append(true).open(p).map_err(|e| CliError::io(p, e));
    let sinks = Mutex::new((open_append(&results_path)?, open_append(&trace_path)?));
    let queue = Mutex::new(queue);
    let outcomes: Mutex<Vec<Outcome>> = Mutex::new(Vec::new());
    let write_error: Mutex<Option<CliError>> = Mutex::new(None);

    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let Some(cell) = queue.lock().expect("queue poisoned").pop_front() else { break };
                let outcome = execute_cell(
                    task,
                    &run_id,
                    &corpus.reports[cell.report],
                    &clients[cell.model],
                    &models[cell.model],
                    &opts.strategies[cell.strategy],
                    &examples[cell.strategy],
                    embedder.as_ref(),
                );
                {
                    let mut guard = sinks.lock().expect("sink poisoned");
                    let (results, trace) = &mut *guard;
                    let mut res = append_line(results, &outcome.row);
                    for t in &outcome.trace {
                        res = res.and_then(|_| append_line(trace, t));
                    }
                    if let Err(e) = res {
                        write_error.lock().expect("error slot poisoned").get_or_insert(CliError::io(&results_path, e));
                    }
                }
                outcomes.lock().expect("outcomes poisoned").push(outcome);
            });
        }
    });
    if let Some(e) = write_error.into_inner().expect("error slot poisoned") {
        return Err(e);
    }

    let outcomes = outcomes.into_inner().expect("outcomes poisoned");
    let mut rows = kept;
    let mut trace = kept_trace;
    let mut timing: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for o in outcomes {
        if let Some(err) = &o.row.error {
            manifest.failures.push(FailureEntry {
                report_id: o.row.record.report_id.clone(),
                model_id: o.row.record.model_id.clone(),
                strategy: o.kind,
                error: err.clone(),
            });
        }
        let t = timing.entry(strategy_index(o.kind)).or_default();
        t.0 += 1;
        t.1 += o.seconds;
        rows.push(o.row);
        trace.extend(o.trace);
    }
    rows.sort_by_key(sort_key);
    trace.sort_by_key(trace_key);
    manifest.failures.sort_by_key(|f| (f.model_id.clone(), strategy_index(f.strategy), f.report_id.clone()));
    manifest.timings = timing
        .into_iter()
        .map(|(i, (n, secs))| (StrategyKind::ALL[i].to_string(), StrategyTiming { cells: n, mean_seconds: secs / n as f64 }))
        .collect();
    manifest.network_requests = clients.iter().map(ChatClient::network_requests).sum();
    manifest.finished_at = Some(Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true));

    write_jsonl(&results_path, &rows)?;
    write_jsonl(&trace_path, &trace)?;
    write_json(&manifest_path, &manifest)?;
    Ok(RunSummary { rows: rows.len(), manifest })
}

#[allow(clippy::too_many_arguments)]
fn execute_cell(
    task: &TaskSpec,
    run_id: &str,
    report: &clinex_core::Report,
    client: &dyn ChatBackend,
    model: &ModelSpec,
    strategy: &StrategySpec,
    examples: &[ExampleSpec],
    embedder: &dyn Embedder,
) -> Outcome {
    let start = Instant::now();
    let result = run_strategy(task, strategy, report, examples, client, &model.sampling, embedder);
    let seconds = start.elapsed().as_secs_f64();
    let (parsed, turns, error) = match result {
        Ok(out) => (out.record, out.turns, None),
        Err(e) => (ParsedRecord::defaults(&task.fields, false), Vec::new(), Some(e.to_string())),
    };
    let trace = turns
        .into_iter()
        .enumerate()
        .map(|(i, turn)| {
            let c = turn.completion.as_ref();
            TraceRow {
                run_id: run_id.to_string(),
                report_id: report.id.clone(),
                model_id: model.id.clone(),
                strategy: strategy.kind,
                turn: i,
                node: turn.node,
                sample: turn.sample,
                temperature: turn.temperature,
                messages: turn.sent.len(),
                request_hash: c.map(|c| c.request_hash.clone()),
                response_hash: c.map(|c| sha256_hex(c.text.as_bytes())),
                prompt_tokens: c.map_or(0, |c| c.prompt_tokens),
                completion_tokens: c.map_or(0, |c| c.completion_tokens),
                latency_s: c.map_or(0.0, |c| c.latency_s),
                retries: c.map_or(0, |c| c.retries),
                skip_reason: turn.skip_reason,
            }
        })
        .collect();
    let row = ResultRow {
        schema_version: RESULTS_SCHEMA_VERSION,
        run_id: run_id.to_string(),
        record: ExtractionRecord::new(report.id.clone(), model.id.clone(), strategy.kind, parsed),
        error,
    };
    Outcome { row, trace, kind: strategy.kind, seconds }
}
