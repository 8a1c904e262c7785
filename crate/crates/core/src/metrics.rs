//! Per-variable metrics, macro-averaging, inter-rater agreement and bootstrap CIs.

use std::collections::{BTreeMap, BTreeSet};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{FieldKind, FieldSpec, FieldValue, MetricKind};
use crate::embedding::{cosine, EmbedError, Embedder};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MetricError {
    #[error("metric needs at least one value")]
    EmptyInput,
    #[error("embedding unavailable: {0}")]
    EmbeddingUnavailable(String),
    #[error("inter-rater agreement needs two raters on at least one report")]
    FewerThanTwoRaters,
}

impl From<EmbedError> for MetricError {
    fn from(e: EmbedError) -> Self {
        MetricError::EmbeddingUnavailable(e.to_string())
    }
}

/// Sum of the values in ascending order, so the result does not depend on input order.
pub fn sorted_sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Running mean; exact for constant input.
pub fn running_mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut m = 0.0;
    let mut n = 0usize;
    for x in values {
        n += 1;
        m += (x - m) / n as f64;
    }
    (n > 0).then_some(m)
}

fn mean(values: &[f64]) -> Result<f64, MetricError> {
    running_mean(values.iter().copied()).ok_or(MetricError::EmptyInput)
}

/// Per-category true positives and false negatives, keyed by reference label.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfusionTally {
    pub counts: BTreeMap<String, (u64, u64)>,
}

impl ConfusionTally {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut counts: BTreeMap<String, (u64, u64)> = BTreeMap::new();
        for (reference, predicted) in pairs {
            let slot = counts.entry(reference.to_string()).or_default();
            if reference == predicted {
                slot.0 += 1;
            } else {
                slot.1 += 1;
            }
        }
        ConfusionTally { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().map(|(tp, fn_)| tp + fn_).sum()
    }

    /// Mean recall over the categories seen in the reference.
    pub fn balanced_accuracy(&self) -> Result<f64, MetricError> {
        if self.counts.is_empty() {
            return Err(MetricError::EmptyInput);
        }
        let recalls: Vec<f64> = self.counts.values().map(|&(tp, fn_)| tp as f64 / (tp + fn_) as f64).collect();
        Ok(sorted_sum(&recalls) / recalls.len() as f64)
    }
}

/// Balanced accuracy of `(reference, prediction)` label pairs.
pub fn balanced_accuracy<S: AsRef<str>>(pairs: &[(S, S)]) -> Result<f64, MetricError> {
    ConfusionTally::from_pairs(pairs.iter().map(|(r, p)| (r.as_ref(), p.as_ref()))).balanced_accuracy()
}

/// Equality after normalisation: numbers compare by value, everything else as trimmed text.
pub fn values_match(reference: &FieldValue, predicted: &FieldValue, kind: FieldKind) -> bool {
    if kind != FieldKind::ExactString {
        if let (Some(a), Some(b)) = (reference.as_number(), predicted.as_number()) {
            return a == b;
        }
    }
    match (reference, predicted) {
        (FieldValue::List(a), FieldValue::List(b)) => a == b,
        _ => reference.to_string().trim() == predicted.to_string().trim(),
    }
}

pub fn exact_accuracy(pairs: &[(&FieldValue, &FieldValue)], kind: FieldKind) -> Result<f64, MetricError> {
    let hits: Vec<f64> = pairs.iter().map(|(r, p)| f64::from(u8::from(values_match(r, p, kind)))).collect();
    mean(&hits)
}

/// Cosine similarity of two texts, with the empty-text conventions applied.
pub fn text_pair_similarity(a: &str, b: &str, embedder: &dyn Embedder) -> Result<f64, MetricError> {
    let (a, b) = (a.trim(), b.trim());
    match (a.is_empty(), b.is_empty()) {
        (true, true) => Ok(1.0),
        (true, false) | (false, true) => Ok(0.0),
        _ if a == b => Ok(1.0),
        _ => {
            let v = embedder.embed(&[a, b])?;
            Ok(cosine(&v[0], &v[1]).clamp(0.0, 1.0))
        }
    }
}

pub fn text_similarity<S: AsRef<str>>(pairs: &[(S, S)], embedder: &dyn Embedder) -> Result<f64, MetricError> {
    let sims = pairs
        .iter()
        .map(|(r, p)| text_pair_similarity(r.as_ref(), p.as_ref(), embedder))
        .collect::<Result<Vec<_>, _>>()?;
    mean(&sims)
}

/// Bidirectional best-match similarity between two item lists: the mean of
/// reference coverage and prediction precision. Blank items are ignored.
pub fn list_pair_similarity(reference: &[String], predicted: &[String], embedder: &dyn Embedder) -> Result<f64, MetricError> {
    let keep = |xs: &[String]| -> Vec<String> { xs.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect() };
    let (g, p) = (keep(reference), keep(predicted));
    match (g.is_empty(), p.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let texts: Vec<&str> = g.iter().chain(&p).map(String::as_str).collect();
    let vecs = embedder.embed(&texts)?;
    let (gv, pv) = vecs.split_at(g.len());
    let sim = |a: &[f64], b: &[f64]| cosine(a, b).clamp(0.0, 1.0);
    let best = |from: &[Vec<f64>], to: &[Vec<f64>]| -> f64 {
        let maxima: Vec<f64> = from.iter().map(|x| to.iter().map(|y| sim(x, y)).fold(0.0, f64::max)).collect();
        maxima.iter().sum::<f64>() / maxima.len() as f64
    };
    Ok(0.5 * (best(gv, pv) + best(pv, gv)))
}

pub fn list_symmetric_similarity(pairs: &[(Vec<String>, Vec<String>)], embedder: &dyn Embedder) -> Result<f64, MetricError> {
    let sims = pairs
        .iter()
        .map(|(g, p)| list_pair_similarity(g, p, embedder))
        .collect::<Result<Vec<_>, _>>()?;
    mean(&sims)
}

/// Unweighted mean of per-variable scores.
pub fn macro_average(scores: &[f64]) -> Result<f64, MetricError> {
    if scores.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    Ok(sorted_sum(scores) / scores.len() as f64)
}

/// A value viewed as a list of items (scalars become singletons, empty text an empty list).
pub fn as_items(value: &FieldValue) -> Vec<String> {
    match value {
        FieldValue::List(items) => items.clone(),
        other => {
            let s = other.to_string();
            if s.trim().is_empty() {
                Vec::new()
            } else {
                vec![s]
            }
        }
    }
}

/// Similarity of two values of one field, in [0, 1]; used to pick the most
/// representative self-consistency sample.
pub fn value_similarity(field: &FieldSpec, a: &FieldValue, b: &FieldValue, embedder: &dyn Embedder) -> Result<f64, MetricError> {
    match field.kind {
        FieldKind::List => list_pair_similarity(&as_items(a), &as_items(b), embedder),
        _ => text_pair_similarity(&a.to_string(), &b.to_string(), embedder),
    }
}

/// What a variable's score is computed from; kept so bootstrap resamples can
/// recompute the statistic over any multiset of reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldEvidence {
    Labels(Vec<(String, String)>),
    PerPair(Vec<f64>),
}

impl FieldEvidence {
    pub fn gather(
        field: &FieldSpec,
        pairs: &[(&FieldValue, &FieldValue)],
        embedder: &dyn Embedder,
    ) -> Result<FieldEvidence, MetricError> {
        if pairs.is_empty() {
            return Err(MetricError::EmptyInput);
        }
        Ok(match field.metric() {
            MetricKind::BalancedAccuracy => {
                FieldEvidence::Labels(pairs.iter().map(|(r, p)| (r.to_string(), p.to_string())).collect())
            }
            MetricKind::Accuracy | MetricKind::ExactMatch => FieldEvidence::PerPair(
                pairs.iter().map(|(r, p)| f64::from(u8::from(values_match(r, p, field.kind)))).collect(),
            ),
            MetricKind::CosineSimilarity => FieldEvidence::PerPair(
                pairs
                    .iter()
                    .map(|(r, p)| text_pair_similarity(&r.to_string(), &p.to_string(), embedder))
                    .collect::<Result<_, _>>()?,
            ),
            MetricKind::SymmetricSimilarity => FieldEvidence::PerPair(
                pairs
                    .iter()
                    .map(|(r, p)| list_pair_similarity(&as_items(r), &as_items(p), embedder))
                    .collect::<Result<_, _>>()?,
            ),
        })
    }

    pub fn len(&self) -> usize {
        match self {
            FieldEvidence::Labels(v) => v.len(),
            FieldEvidence::PerPair(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The metric over all pairs.
    pub fn score(&self) -> f64 {
        let all: Vec<usize> = (0..self.len()).collect();
        self.score_on(&all)
    }

    /// The metric over the pairs at `idx` (repeats allowed).
    pub fn score_on(&self, idx: &[usize]) -> f64 {
        match self {
            FieldEvidence::Labels(v) => {
                ConfusionTally::from_pairs(idx.iter().map(|&i| (v[i].0.as_str(), v[i].1.as_str())))
                    .balanced_accuracy()
                    .unwrap_or(0.0)
            }
            FieldEvidence::PerPair(v) => running_mean(idx.iter().map(|&i| v[i])).unwrap_or(0.0),
        }
    }
}

/// Scores one field. Lists are compared item-wise, other fields on their display text.
pub fn score_field(field: &FieldSpec, pairs: &[(&FieldValue, &FieldValue)], embedder: &dyn Embedder) -> Result<f64, MetricError> {
    Ok(FieldEvidence::gather(field, pairs, embedder)?.score())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableScore {
    pub variable: String,
    pub metric: MetricKind,
    pub value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n: usize,
}

/// Percentile at `q` of sorted data, interpolating linearly between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.95;

/// Index sets for `n_resamples` bootstrap draws over `n_units` units.
pub fn bootstrap_indices(n_units: usize, n_resamples: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_resamples)
        .map(|_| (0..n_units).map(|_| rng.gen_range(0..n_units)).collect())
        .collect()
}

/// Percentile bootstrap interval of `statistic`, which receives the unit
/// indices of each resample.
pub fn bootstrap_ci(
    n_units: usize,
    statistic: impl Fn(&[usize]) -> f64,
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64), MetricError> {
    if n_units == 0 || n_resamples == 0 {
        return Err(MetricError::EmptyInput);
    }
    let mut stats: Vec<f64> = bootstrap_indices(n_units, n_resamples, seed).iter().map(|idx| statistic(idx)).collect();
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((percentile(&stats, tail), percentile(&stats, 1.0 - tail)))
}

/// Bootstrap CI of a sample mean.
pub fn bootstrap_mean_ci(data: &[f64], n_resamples: usize, level: f64, seed: u64) -> Result<(f64, f64), MetricError> {
    bootstrap_ci(data.len(), |idx| running_mean(idx.iter().map(|&i| data[i])).unwrap_or(0.0), n_resamples, level, seed)
}

/// Raters' and consensus annotations for one report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub report_id: String,
    #[serde(default)]
    pub raters: IndexMap<String, IndexMap<String, FieldValue>>,
    pub consensus: IndexMap<String, FieldValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementScore {
    pub variable: String,
    pub metric: MetricKind,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementSummary {
    pub rater_pairs: Vec<(String, String)>,
    pub variables: Vec<AgreementScore>,
    pub macro_average: f64,
}

/// Pairwise inter-rater agreement, averaged over rater pairs. Asymmetric
/// metrics are computed in both directions and averaged.
pub fn inter_rater_agreement(sets: &[AnnotationSet], fields: &[FieldSpec], embedder: &dyn Embedder) -> Result<AgreementSummary, MetricError> {
    let raters: BTreeSet<&str> = sets.iter().flat_map(|s| s.raters.keys().map(String::as_str)).collect();
    let raters: Vec<&str> = raters.into_iter().collect();
    let mut pairs = Vec::new();
    for (i, a) in raters.iter().enumerate() {
        for b in &raters[i + 1..] {
            let shared: Vec<&AnnotationSet> =
                sets.iter().filter(|s| s.raters.contains_key(*a) && s.raters.contains_key(*b)).collect();
            if !shared.is_empty() {
                pairs.push((*a, *b, shared));
            }
        }
    }
    if pairs.is_empty() {
        return Err(MetricError::FewerThanTwoRaters);
    }
    let value_of = |set: &AnnotationSet, rater: &str, field: &FieldSpec| -> FieldValue {
        set.raters[rater].get(&field.name).cloned().unwrap_or_else(|| field.default.clone())
    };
    let mut variables = Vec::with_capacity(fields.len());
    for field in fields {
        let mut per_pair = Vec::with_capacity(pairs.len());
        for (a, b, shared) in &pairs {
            let va: Vec<FieldValue> = shared.iter().map(|s| value_of(s, a, field)).collect();
            let vb: Vec<FieldValue> = shared.iter().map(|s| value_of(s, b, field)).collect();
            let ab: Vec<(&FieldValue, &FieldValue)> = va.iter().zip(&vb).collect();
            let mut score = score_field(field, &ab, embedder)?;
            if field.metric().is_asymmetric() {
                let ba: Vec<(&FieldValue, &FieldValue)> = vb.iter().zip(&va).collect();
                score = 0.5 * (score + score_field(field, &ba, embedder)?);
            }
            per_pair.push(score);
        }
        variables.push(AgreementScore {
            variable: field.name.clone(),
            metric: field.metric(),
            value: mean(&per_pair)?,
        });
    }
    let macro_avg = macro_average(&variables.iter().map(|v| v.value).collect::<Vec<_>>())?;
    Ok(AgreementSummary {
        rater_pairs: pairs.iter().map(|(a, b, _)| (a.to_string(), b.to_string())).collect(),
        variables,
        macro_average: macro_avg,
    })
}
