//! Variance partitioning of macro-average performance into model, strategy
//! and residual components.
//!
//! The estimator is Henderson's Method I for a two-way crossed random-effects
//! layout without interaction, which handles incomplete grids. With row
//! factor `A` (model) and column factor `B` (strategy):
//!
//! ```text
//! E[T_A - T_mu] = (N - k1) s_a + (k3 - k2) s_b + (r - 1) s_e
//! E[T_B - T_mu] = (k4 - k1) s_a + (N - k2) s_b + (c - 1) s_e
//! E[T_0 - T_mu] = (N - k1) s_a + (N - k2) s_b + (N - 1) s_e
//! ```
//!
//! All sums are taken over sorted terms so that swapping the roles of the
//! two factors swaps the estimates bit-for-bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::sorted_sum;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AnalysisError {
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceCell {
    pub model: String,
    pub strategy: String,
    pub value: f64,
}

impl PerformanceCell {
    pub fn new(model: impl Into<String>, strategy: impl Into<String>, value: f64) -> Self {
        PerformanceCell { model: model.into(), strategy: strategy.into(), value }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceShares {
    pub model_pct: f64,
    pub strategy_pct: f64,
    pub residual_pct: f64,
    pub model_var: f64,
    pub strategy_var: f64,
    pub residual_var: f64,
}

fn product(mut xs: [f64; 3]) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[0] * xs[1] * xs[2]
}

/// Determinant as a sorted sum of the six signed permutation products.
fn det3(m: &[[f64; 3]; 3]) -> f64 {
    let terms = [
        product([m[0][0], m[1][1], m[2][2]]),
        product([m[0][1], m[1][2], m[2][0]]),
        product([m[0][2], m[1][0], m[2][1]]),
        -product([m[0][2], m[1][1], m[2][0]]),
        -product([m[0][0], m[1][2], m[2][1]]),
        -product([m[0][1], m[1][0], m[2][2]]),
    ];
    sorted_sum(&terms)
}

fn solve3(m: [[f64; 3]; 3], rhs: [f64; 3]) -> Option<[f64; 3]> {
    let d = det3(&m);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    let mut out = [0.0; 3];
    for (col, slot) in out.iter_mut().enumerate() {
        let mut mc = m;
        for row in 0..3 {
            mc[row][col] = rhs[row];
        }
        *slot = det3(&mc) / d;
    }
    Some(out)
}

/// Cell values grouped by one factor's level.
fn groups<'a>(cells: &'a [PerformanceCell], key: impl Fn(&'a PerformanceCell) -> &'a str) -> BTreeMap<&'a str, Vec<usize>> {
    let mut g: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in cells.iter().enumerate() {
        g.entry(key(c)).or_default().push(i);
    }
    g
}

/// Sum over the levels of one factor of `(sum_j n_ij^2) / n_i`, where `n_ij`
/// counts cells shared with each level of the other factor.
fn cross_term<'a>(outer: &BTreeMap<&'a str, Vec<usize>>, inner_key: impl Fn(usize) -> &'a str) -> f64 {
    let terms: Vec<f64> = outer
        .values()
        .map(|idx| {
            let mut counts: BTreeMap<&str, f64> = BTreeMap::new();
            for &i in idx {
                *counts.entry(inner_key(i)).or_default() += 1.0;
            }
            let sq: Vec<f64> = counts.values().map(|c| c * c).collect();
            sorted_sum(&sq) / idx.len() as f64
        })
        .collect();
    sorted_sum(&terms)
}

/// Estimates the three variance components and their percentage shares.
/// Negative estimates are set to zero; an all-zero result is reported as
/// 0 / 0 / 100.
pub fn variance_partition(cells: &[PerformanceCell]) -> Result<VarianceShares, AnalysisError> {
    let rows = groups(cells, |c| c.model.as_str());
    let cols = groups(cells, |c| c.strategy.as_str());
    if rows.len() < 2 || cols.len() < 2 {
        return Err(AnalysisError::DegenerateDesign(format!(
            "need at least 2 models and 2 strategies, got {} and {}",
            rows.len(),
            cols.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for c in cells {
        if !seen.insert((c.model.as_str(), c.strategy.as_str())) {
            return Err(AnalysisError::DegenerateDesign(format!("duplicate cell ({}, {})", c.model, c.strategy)));
        }
        if !c.value.is_finite() {
            return Err(AnalysisError::DegenerateDesign(format!("non-finite value at ({}, {})", c.model, c.strategy)));
        }
    }

    let raw: Vec<f64> = cells.iter().map(|c| c.value).collect();
    let n = raw.len() as f64;
    let grand = sorted_sum(&raw) / n;
    let y: Vec<f64> = raw.iter().map(|v| v - grand).collect();

    let factor_terms = |g: &BTreeMap<&str, Vec<usize>>| -> (f64, f64) {
        let mut t = Vec::with_capacity(g.len());
        let mut k = Vec::with_capacity(g.len());
        for idx in g.values() {
            let s = sorted_sum(&idx.iter().map(|&i| y[i]).collect::<Vec<_>>());
            let ni = idx.len() as f64;
            t.push(s * s / ni);
            k.push(ni * ni / n);
        }
        (sorted_sum(&t), sorted_sum(&k))
    };
    let (t_a, k1) = factor_terms(&rows);
    let (t_b, k2) = factor_terms(&cols);
    let t_0 = sorted_sum(&y.iter().map(|v| v * v).collect::<Vec<_>>());
    let total = sorted_sum(&y);
    let t_mu = total * total / n;

    let k3 = cross_term(&rows, |i| cells[i].strategy.as_str());
    let k4 = cross_term(&cols, |i| cells[i].model.as_str());

    let (r, c) = (rows.len() as f64, cols.len() as f64);
    let m = [
        [n - k1, k3 - k2, r - 1.0],
        [k4 - k1, n - k2, c - 1.0],
        [n - k1, n - k2, n - 1.0],
    ];
    let rhs = [t_a - t_mu, t_b - t_mu, t_0 - t_mu];
    let [sa, sb, se] = solve3(m, rhs)
        .ok_or_else(|| AnalysisError::DegenerateDesign("variance-component equations are singular".into()))?;
    let (sa, sb, se) = (sa.max(0.0), sb.max(0.0), se.max(0.0));
    let sum = sorted_sum(&[sa, sb, se]);
    if sum <= 0.0 {
        return Ok(VarianceShares {
            model_pct: 0.0,
            strategy_pct: 0.0,
            residual_pct: 100.0,
            model_var: 0.0,
            strategy_var: 0.0,
            residual_var: 0.0,
        });
    }
    Ok(VarianceShares {
        model_pct: 100.0 * sa / sum,
        strategy_pct: 100.0 * sb / sum,
        residual_pct: 100.0 * se / sum,
        model_var: sa,
        strategy_var: sb,
        residual_var: se,
    })
}
