//! Scoring result rows against consensus annotations.

use std::collections::{BTreeMap, BTreeSet};

use clinex_core::metrics::{bootstrap_ci, macro_average, FieldEvidence, VariableScore, DEFAULT_LEVEL, DEFAULT_RESAMPLES};
use clinex_core::{Embedder, FieldValue, MetricKind, StrategyKind, TaskSpec};
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::records::ResultRow;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions { resamples: DEFAULT_RESAMPLES, level: DEFAULT_LEVEL, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableMeta {
    pub name: String,
    pub metric: MetricKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub model: String,
    pub strategy: StrategyKind,
    pub n_reports: usize,
    pub scores: Vec<VariableScore>,
    pub macro_average: f64,
    pub macro_ci_lo: f64,
    pub macro_ci_hi: f64,
    /// Share of reports whose answer could not be parsed at all.
    pub parse_failure_rate: f64,
    /// Share of reports whose cell failed outright (scored as defaults).
    pub failure_rate: f64,
    /// Per-variable, per-report evidence in `ScoreTable::report_ids` order;
    /// lets rankings re-score bootstrap resamples.
    pub evidence: Vec<FieldEvidence>,
}

impl ScoreRow {
    pub fn candidate_id(&self) -> String {
        candidate_id(&self.model, self.strategy)
    }

    pub fn score_of(&self, variable: &str) -> Option<f64> {
        self.scores.iter().find(|s| s.variable == variable).map(|s| s.value)
    }

    /// Per-variable scores and their macro-average over a resample of reports.
    pub fn rescore(&self, idx: &[usize]) -> (Vec<f64>, f64) {
        let per: Vec<f64> = self.evidence.iter().map(|e| e.score_on(idx)).collect();
        let m = macro_average(&per).unwrap_or(0.0);
        (per, m)
    }
}

/// Candidate id of a model/strategy pair in use-case rankings.
pub fn candidate_id(model: &str, strategy: StrategyKind) -> String {
    format!("{model}/{strategy}")
}

/// Model part of a candidate id.
pub fn candidate_model(id: &str) -> String {
    id.rsplit_once('/').map_or(id, |(m, _)| m).to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub schema_version: u32,
    pub run_id: String,
    pub task_id: String,
    pub corpus_id: String,
    pub options: ScoreOptions,
    pub variables: Vec<VariableMeta>,
    /// Reports shared by every row, sorted.
    pub report_ids: Vec<String>,
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn row(&self, model: &str, strategy: StrategyKind) -> Option<&ScoreRow> {
        self.rows.iter().find(|r| r.model == model && r.strategy == strategy)
    }

    pub fn models(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.rows.iter().map(|r| r.model.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }
}

/// Scores every (model, strategy) group of `rows` on every task field, with
/// report-level bootstrap intervals. All groups must cover the same reports.
pub fn score(
    task: &TaskSpec,
    rows: &[ResultRow],
    corpus: &Corpus,
    embedder: &dyn Embedder,
    opts: &ScoreOptions,
) -> Result<ScoreTable, CliError> {
    let first = rows.first().ok_or_else(|| CliError::Config("no result rows to score".into()))?;
    if let Some(other) = rows.iter().find(|r| r.run_id != first.run_id) {
        return Err(CliError::Config(format!("results mix runs `{}` and `{}`", first.run_id, other.run_id)));
    }
    let mut groups: BTreeMap<(String, usize, StrategyKind), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let s = StrategyKind::ALL.iter().position(|&k| k == r.record.strategy).unwrap_or(0);
        groups.entry((r.record.model_id.clone(), s, r.record.strategy)).or_default().push(r);
    }
    let mut report_ids: Vec<String> = Vec::new();
    for (key, group) in groups.iter_mut() {
        group.sort_by(|a, b| a.record.report_id.cmp(&b.record.report_id));
        let ids: Vec<String> = group.iter().map(|r| r.record.report_id.clone()).collect();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Config(format!("duplicate result rows for {}/{}", key.0, key.2)));
        }
        if report_ids.is_empty() {
            report_ids = ids;
        } else if ids != report_ids {
            return Err(CliError::Config(format!(
                "{}/{} covers {} reports, other groups {}; rerun to complete the table",
                key.0,
                key.2,
                ids.len(),
                report_ids.len()
            )));
        }
    }
    let consensus: Vec<_> = report_ids
        .iter()
        .map(|id| corpus.annotation(id).map(|a| &a.consensus).ok_or_else(|| CliError::MissingAnnotation(id.clone())))
        .collect::<Result<_, _>>()?;

    let n = report_ids.len();
    let mut out = Vec::new();
    for ((model, _, strategy), group) in &groups {
        let mut evidence = Vec::new();
        for field in &task.fields {
            let pairs: Vec<(&FieldValue, &FieldValue)> = group
                .iter()
                .zip(&consensus)
                .map(|(row, gold)| {
                    (
                        gold.get(&field.name).unwrap_or(&field.default),
                        row.record.values.get(&field.name).unwrap_or(&field.default),
                    )
                })
                .collect();
            evidence.push(
                FieldEvidence::gather(field, &pairs, embedder).map_err(|e| CliError::Analysis(e.to_string()))?,
            );
        }
        let ci = |stat: &dyn Fn(&[usize]) -> f64, point: f64| -> Result<(f64, f64), CliError> {
            let (lo, hi) = bootstrap_ci(n, stat, opts.resamples, opts.level, opts.seed)
                .map_err(|e| CliError::Analysis(e.to_string()))?;
            Ok((lo.min(point), hi.max(point)))
        };
        let mut scores = Vec::new();
        for (field, ev) in task.fields.iter().zip(&evidence) {
            let value = ev.score();
            let (ci_lo, ci_hi) = ci(&|idx| ev.score_on(idx), value)?;
            scores.push(VariableScore { variable: field.name.clone(), metric: field.metric(), value, ci_lo, ci_hi, n });
        }
        let values: Vec<f64> = scores.iter().map(|s| s.value).collect();
        let macro_avg = macro_average(&values).map_err(|e| CliError::Analysis(e.to_string()))?;
        let macro_stat = |idx: &[usize]| {
            let per: Vec<f64> = evidence.iter().map(|e| e.score_on(idx)).collect();
            macro_average(&per).unwrap_or(0.0)
        };
        let (macro_ci_lo, macro_ci_hi) = ci(&macro_stat, macro_avg)?;
        let rate = |pred: &dyn Fn(&ResultRow) -> bool| group.iter().filter(|r| pred(r)).count() as f64 / n as f64;
        out.push(ScoreRow {
            model: model.clone(),
            strategy: *strategy,
            n_reports: n,
            scores,
            macro_average: macro_avg,
            macro_ci_lo,
            macro_ci_hi,
            parse_failure_rate: rate(&|r| r.record.flags.parse_failed),
            failure_rate: rate(&|r| r.error.is_some()),
            evidence,
        });
    }
    Ok(ScoreTable {
        schema_version: 1,
        run_id: first.run_id.clone(),
        task_id: task.task_id.clone(),
        corpus_id: corpus.id.clone(),
        options: *opts,
        variables: task.fields.iter().map(|f| VariableMeta { name: f.name.clone(), metric: f.metric() }).collect(),
        report_ids,
        rows: out,
    })
}

/// Long-format CSV: one line per (model, strategy, variable), plus a
/// `macro_average` line per (model, strategy).
pub fn scores_csv(table: &ScoreTable) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run_id", "model", "strategy", "variable", "metric", "value", "ci_lo", "ci_hi", "n"])
        .expect("in-memory write");
    for row in &table.rows {
        for s in &row.scores {
            w.write_record([
                table.run_id.as_str(),
                &row.model,
                row.strategy.as_str(),
                &s.variable,
                s.metric.as_str(),
                &s.value.to_string(),
                &s.ci_lo.to_string(),
                &s.ci_hi.to_string(),
                &s.n.to_string(),
            ])
            .expect("in-memory write");
        }
        w.write_record([
            table.run_id.as_str(),
            &row.model,
            row.strategy.as_str(),
            "macro_average",
            "macro_average",
            &row.macro_average.to_string(),
            &row.macro_ci_lo.to_string(),
            &row.macro_ci_hi.to_string(),
            &row.n_reports.to_string(),
        ])
        .expect("in-memory write");
    }
    into_string(w)
}

/// One line per (model, strategy) with the macro-average and failure rates.
pub fn summary_csv(table: &ScoreTable) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "run_id",
        "model",
        "strategy",
        "n_reports",
        "macro_average",
        "ci_lo",
        "ci_hi",
        "parse_failure_rate",
        "failure_rate",
    ])
    .expect("in-memory write");
    for row in &table.rows {
        w.write_record([
            table.run_id.as_str(),
            &row.model,
            row.strategy.as_str(),
            &row.n_reports.to_string(),
            &row.macro_average.to_string(),
            &row.macro_ci_lo.to_string(),
            &row.macro_ci_hi.to_string(),
            &row.parse_failure_rate.to_string(),
            &row.failure_rate.to_string(),
        ])
        .expect("in-memory write");
    }
    into_string(w)
}

pub(crate) fn into_string(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}
