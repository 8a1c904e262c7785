//! Report artifacts: consensus rankings, heatmap matrices, variance shares,
//! inter-rater agreement, throughput scatter data and size-class means.

use std::collections::{BTreeMap, BTreeSet};

use clinex_client::throughput;
use clinex_core::analysis::{variance_partition, PerformanceCell, VarianceShares};
use clinex_core::config::SizeClass;
use clinex_core::metrics::{bootstrap_indices, inter_rater_agreement, running_mean, AgreementSummary, DEFAULT_LEVEL};
use clinex_core::ranking::{
    attach_rank_intervals, best_positions, group_means, kemeny_consensus, rank_candidates, Consensus, GroupMean,
    KemenyOptions, RankInterval, ScoreMatrix, ScoreVoter, VoterProfile,
};
use clinex_core::{CompletionResult, Embedder, ModelSpec, StrategyKind, TaskSpec};
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::records::TraceRow;
use crate::score::{candidate_id, candidate_model, into_string, ScoreTable};
use crate::CliError;

pub const DEFAULT_RANK_RESAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankOptions {
    pub kemeny: KemenyOptions,
    /// Bootstrap re-rankings for the rank intervals; 0 disables them.
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
    /// Global ranking votes per variable instead of per use case.
    pub per_variable: bool,
}

impl Default for RankOptions {
    fn default() -> Self {
        RankOptions {
            kemeny: KemenyOptions::default(),
            resamples: DEFAULT_RANK_RESAMPLES,
            level: DEFAULT_LEVEL,
            seed: 0,
            per_variable: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UseCaseRanking {
    pub use_case: String,
    pub run_id: String,
    pub consensus: Consensus,
    pub ties: Vec<String>,
    pub intervals: Vec<RankInterval>,
    /// Best consensus position of each model over its strategies.
    pub model_positions: Vec<(String, usize)>,
}

impl UseCaseRanking {
    pub fn rank_of(&self, model: &str, strategy: StrategyKind) -> Option<usize> {
        self.consensus.rank_of(&candidate_id(model, strategy))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalRanking {
    pub run_ids: Vec<String>,
    pub per_variable: bool,
    pub consensus: Consensus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub use_cases: Vec<UseCaseRanking>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global: Option<GlobalRanking>,
}

fn err(e: impl std::fmt::Display) -> CliError {
    CliError::Analysis(e.to_string())
}

/// Candidates are model/strategy pairs; each variable is one voter.
pub fn score_matrix(table: &ScoreTable) -> ScoreMatrix {
    score_matrix_with(table, |row_idx, var_idx| table.rows[row_idx].scores[var_idx].value)
}

fn score_matrix_with(table: &ScoreTable, value: impl Fn(usize, usize) -> f64) -> ScoreMatrix {
    ScoreMatrix {
        candidates: table.rows.iter().map(|r| r.candidate_id()).collect(),
        voters: table
            .variables
            .iter()
            .enumerate()
            .map(|(v, meta)| ScoreVoter {
                name: meta.name.clone(),
                scores: (0..table.rows.len()).map(|r| value(r, v)).collect(),
            })
            .collect(),
    }
}

pub fn rank_use_case(table: &ScoreTable, opts: &RankOptions) -> Result<UseCaseRanking, CliError> {
    let matrix = score_matrix(table);
    let mut ranked = rank_candidates(&matrix, &opts.kemeny).map_err(err)?;
    if opts.resamples > 0 {
        let draws = bootstrap_indices(table.report_ids.len(), opts.resamples, opts.seed);
        let rescored: Vec<Vec<Vec<f64>>> =
            draws.iter().map(|idx| table.rows.iter().map(|r| r.rescore(idx).0).collect()).collect();
        let matrices = rescored.iter().map(|per_row| score_matrix_with(table, |r, v| per_row[r][v]));
        attach_rank_intervals(&mut ranked, matrices, &opts.kemeny, opts.level).map_err(err)?;
    }
    let model_positions = best_positions(&ranked.consensus.order, candidate_model).into_iter().collect();
    Ok(UseCaseRanking {
        use_case: table.task_id.clone(),
        run_id: table.run_id.clone(),
        consensus: ranked.consensus,
        ties: ranked.ties,
        intervals: ranked.intervals,
        model_positions,
    })
}

/// Ranks models across use cases. By default each use case votes with its
/// models ordered by best consensus position; with `per_variable` every
/// variable of every use case votes with models ordered by their best
/// strategy score on it.
pub fn rank_global(
    tables: &[ScoreTable],
    rankings: &[UseCaseRanking],
    opts: &RankOptions,
) -> Result<GlobalRanking, CliError> {
    let mut voters: Vec<Vec<String>> = Vec::new();
    if opts.per_variable {
        for table in tables {
            for v in 0..table.variables.len() {
                let mut best: BTreeMap<&str, f64> = BTreeMap::new();
                for row in &table.rows {
                    let s = row.scores[v].value;
                    let e = best.entry(row.model.as_str()).or_insert(s);
                    *e = e.max(s);
                }
                let mut models: Vec<(&str, f64)> = best.into_iter().collect();
                models.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
                voters.push(models.into_iter().map(|(m, _)| m.to_string()).collect());
            }
        }
    } else {
        for r in rankings {
            let mut models = r.model_positions.clone();
            models.sort_by_key(|(m, pos)| (*pos, m.clone()));
            voters.push(models.into_iter().map(|(m, _)| m).collect());
        }
    }
    let profile = VoterProfile::new(&voters).map_err(err)?;
    let consensus = kemeny_consensus(&profile, &opts.kemeny).map_err(err)?;
    Ok(GlobalRanking {
        run_ids: tables.iter().map(|t| t.run_id.clone()).collect(),
        per_variable: opts.per_variable,
        consensus,
    })
}

pub fn rank_all(tables: &[ScoreTable], opts: &RankOptions) -> Result<RankingReport, CliError> {
    let use_cases: Vec<UseCaseRanking> = tables.iter().map(|t| rank_use_case(t, opts)).collect::<Result<_, _>>()?;
    let global = if tables.len() > 1 { Some(rank_global(tables, &use_cases, opts)?) } else { None };
    Ok(RankingReport { use_cases, global })
}

/// Heatmap matrix: one line per model/strategy, one column per variable,
/// then the macro-average and the consensus rank.
pub fn heatmap_csv(table: &ScoreTable, ranking: &UseCaseRanking) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["run_id".to_string(), "model".into(), "strategy".into()];
    header.extend(table.variables.iter().map(|v| v.name.clone()));
    header.push("macro_average".into());
    header.push("rank".into());
    w.write_record(&header).expect("in-memory write");
    let mut rows: Vec<_> = table.rows.iter().collect();
    rows.sort_by_key(|r| (ranking.rank_of(&r.model, r.strategy).unwrap_or(usize::MAX), r.candidate_id()));
    for row in rows {
        let mut line = vec![table.run_id.clone(), row.model.clone(), row.strategy.to_string()];
        line.extend(row.scores.iter().map(|s| s.value.to_string()));
        line.push(row.macro_average.to_string());
        line.push(ranking.rank_of(&row.model, row.strategy).map_or(String::new(), |r| r.to_string()));
        w.write_record(&line).expect("in-memory write");
    }
    into_string(w)
}

/// Variance shares of the macro-average grid of one use case.
pub fn variance_of(table: &ScoreTable) -> Result<VarianceShares, CliError> {
    let cells: Vec<PerformanceCell> =
        table.rows.iter().map(|r| PerformanceCell::new(r.model.clone(), r.strategy.to_string(), r.macro_average)).collect();
    variance_partition(&cells).map_err(err)
}

pub fn variance_csv(tables: &[ScoreTable]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "run_id",
        "use_case",
        "llm_pct",
        "strategy_pct",
        "residual_pct",
        "llm_var",
        "strategy_var",
        "residual_var",
    ])
    .expect("in-memory write");
    for t in tables {
        let v = variance_of(t)?;
        w.write_record([
            t.run_id.clone(),
            t.task_id.clone(),
            v.model_pct.to_string(),
            v.strategy_pct.to_string(),
            v.residual_pct.to_string(),
            v.model_var.to_string(),
            v.strategy_var.to_string(),
            v.residual_var.to_string(),
        ])
        .expect("in-memory write");
    }
    Ok(into_string(w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub use_case: String,
    pub corpus_id: String,
    pub summary: AgreementSummary,
}

pub fn agreement(task: &TaskSpec, corpus: &Corpus, embedder: &dyn Embedder) -> Result<AgreementReport, CliError> {
    let summary = inter_rater_agreement(&corpus.annotations, &task.fields, embedder).map_err(err)?;
    Ok(AgreementReport { use_case: task.task_id.clone(), corpus_id: corpus.id.clone(), summary })
}

pub fn agreement_csv(reports: &[AgreementReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["corpus_id", "use_case", "variable", "metric", "agreement"]).expect("in-memory write");
    for r in reports {
        for v in &r.summary.variables {
            w.write_record([&r.corpus_id, &r.use_case, &v.variable, v.metric.as_str(), &v.value.to_string()])
                .expect("in-memory write");
        }
        w.write_record([&r.corpus_id, &r.use_case, "macro_average", "macro_average", &r.summary.macro_average.to_string()])
            .expect("in-memory write");
    }
    into_string(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub model: String,
    pub tokens_per_sec_per_gpu: f64,
    pub mean_macro: f64,
    pub param_count: Option<f64>,
    pub size_class: SizeClass,
}

/// Few-shot macro-average of `model` in `table`, or its mean over strategies
/// when few-shot was not run.
fn model_macro(table: &ScoreTable, model: &str) -> Option<f64> {
    if let Some(row) = table.row(model, StrategyKind::FewShot) {
        return Some(row.macro_average);
    }
    running_mean(table.rows.iter().filter(|r| r.model == model).map(|r| r.macro_average))
}

/// Throughput against performance, one line per model present in `traces`.
pub fn throughput_rows(
    tables: &[ScoreTable],
    traces: &[TraceRow],
    models: &[ModelSpec],
) -> Result<Vec<ThroughputRow>, CliError> {
    let mut by_model: BTreeMap<&str, Vec<CompletionResult>> = BTreeMap::new();
    for t in traces.iter().filter(|t| t.request_hash.is_some()) {
        by_model.entry(t.model_id.as_str()).or_default().push(CompletionResult {
            text: String::new(),
            prompt_tokens: t.prompt_tokens,
            completion_tokens: t.completion_tokens,
            latency_s: t.latency_s,
            model_id: t.model_id.clone(),
            request_hash: t.request_hash.clone().unwrap_or_default(),
            retries: t.retries,
            from_cache: false,
        });
    }
    let mut rows = Vec::new();
    for (model, results) in by_model {
        let spec = models
            .iter()
            .find(|m| m.id == model)
            .ok_or_else(|| CliError::Config(format!("model `{model}` is not in the registry")))?;
        let tps = throughput(&results, spec.gpu_count).map_err(err)?;
        let macros: Vec<f64> = tables.iter().filter_map(|t| model_macro(t, model)).collect();
        let Some(mean_macro) = running_mean(macros) else { continue };
        rows.push(ThroughputRow {
            model: model.to_string(),
            tokens_per_sec_per_gpu: tps,
            mean_macro,
            param_count: spec.params_b,
            size_class: spec.size_class,
        });
    }
    Ok(rows)
}

pub fn throughput_csv(rows: &[ThroughputRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "tokens_per_sec_per_gpu", "mean_macro", "param_count", "size_class"])
        .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.tokens_per_sec_per_gpu.to_string(),
            r.mean_macro.to_string(),
            r.param_count.map_or(String::new(), |p| p.to_string()),
            r.size_class.as_str().to_string(),
        ])
        .expect("in-memory write");
    }
    into_string(w)
}

/// Mean best-strategy macro-average per size class. Each model contributes
/// its best strategy per use case, averaged over use cases.
pub fn size_class_means(
    tables: &[ScoreTable],
    models: &[ModelSpec],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<Vec<GroupMean>, CliError> {
    let mut per_model: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for t in tables {
        let mut best: BTreeMap<&str, f64> = BTreeMap::new();
        for r in &t.rows {
            let e = best.entry(r.model.as_str()).or_insert(r.macro_average);
            *e = e.max(r.macro_average);
        }
        for (m, v) in best {
            per_model.entry(m.to_string()).or_default().push(v);
        }
    }
    let mut entries = Vec::new();
    for (model, values) in per_model {
        let spec = models
            .iter()
            .find(|m| m.id == model)
            .ok_or_else(|| CliError::Config(format!("model `{model}` is not in the registry")))?;
        entries.push((model, spec.size_class, running_mean(values).expect("model has a score")));
    }
    let classes: Vec<SizeClass> = entries.iter().map(|e| e.1).collect::<BTreeSet<_>>().into_iter().collect();
    group_means(&entries, &classes, resamples, level, seed).map_err(err)
}

pub fn group_means_csv(means: &[GroupMean]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["size_class", "n_models", "mean_macro", "ci_lo", "ci_hi"]).expect("in-memory write");
    for g in means {
        w.write_record([
            g.size_class.as_str().to_string(),
            g.n_models.to_string(),
            g.mean.to_string(),
            g.ci_lo.to_string(),
            g.ci_hi.to_string(),
        ])
        .expect("in-memory write");
    }
    into_string(w)
}
