//! Kemeny-Young consensus ranking.
//!
//! Candidates are held by index; a ranking lists indices best first. Every
//! scorer works from the pairwise preference matrix `w[a][b]`, the number of
//! voters placing `a` above `b`, so the cost of a ranking is the sum of
//! `w[later][earlier]` over all ordered pairs.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::SizeClass;
use crate::metrics::{bootstrap_mean_ci, percentile, running_mean, MetricError};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RankingError {
    #[error("no voters")]
    NoVoters,
    #[error("rankings do not cover the same candidates: {0}")]
    CandidateMismatch(String),
    #[error("score table incomplete: {0}")]
    IncompleteTable(String),
    #[error("size class `{0}` has no models")]
    EmptyClass(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Voter rankings over a shared candidate set. Candidate ids are kept sorted,
/// so index order is lexicographic id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoterProfile {
    candidates: Vec<String>,
    voters: Vec<Vec<usize>>,
}

impl VoterProfile {
    pub fn new(voters: &[Vec<String>]) -> Result<Self, RankingError> {
        let first = voters.first().ok_or(RankingError::NoVoters)?;
        let set: BTreeSet<&String> = first.iter().collect();
        if set.len() != first.len() {
            return Err(RankingError::CandidateMismatch("voter 0 lists a candidate twice".into()));
        }
        let candidates: Vec<String> = set.into_iter().cloned().collect();
        let index = |id: &String| candidates.binary_search(id).ok();
        let mut orders = Vec::with_capacity(voters.len());
        for (v, ranking) in voters.iter().enumerate() {
            let order: Option<Vec<usize>> = ranking.iter().map(index).collect();
            match order {
                Some(o) if is_permutation(&o, candidates.len()) => orders.push(o),
                _ => return Err(RankingError::CandidateMismatch(format!("voter {v} differs from voter 0"))),
            }
        }
        Ok(VoterProfile { candidates, voters: orders })
    }

    /// Profile over candidates `0..n`, named by zero-padded index.
    pub fn from_indices(n: usize, voters: Vec<Vec<usize>>) -> Result<Self, RankingError> {
        if voters.is_empty() {
            return Err(RankingError::NoVoters);
        }
        if let Some(v) = voters.iter().position(|o| !is_permutation(o, n)) {
            return Err(RankingError::CandidateMismatch(format!("voter {v} is not a permutation of 0..{n}")));
        }
        let width = n.saturating_sub(1).to_string().len();
        let candidates = (0..n).map(|i| format!("{i:0width$}")).collect();
        Ok(VoterProfile { candidates, voters })
    }

    pub fn candidates(&self) -> &[String] {
        &self.candidates
    }

    pub fn voters(&self) -> &[Vec<usize>] {
        &self.voters
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// `w[a][b]` = number of voters ranking `a` above `b`.
    pub fn pairwise(&self) -> Vec<Vec<u64>> {
        let n = self.len();
        let mut w = vec![vec![0u64; n]; n];
        for order in &self.voters {
            for (i, &a) in order.iter().enumerate() {
                for &b in &order[i + 1..] {
                    w[a][b] += 1;
                }
            }
        }
        w
    }

    pub fn ids(&self, order: &[usize]) -> Vec<String> {
        order.iter().map(|&i| self.candidates[i].clone()).collect()
    }
}

fn is_permutation(order: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    order.len() == n && order.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
}

fn cost(order: &[usize], w: &[Vec<u64>]) -> u64 {
    let mut total = 0;
    for (i, &a) in order.iter().enumerate() {
        for &b in &order[i + 1..] {
            total += w[b][a];
        }
    }
    total
}

/// Number of (voter, candidate pair) combinations ordered differently by `pi` and the voter.
pub fn disagreement(pi: &[usize], profile: &VoterProfile) -> Result<u64, RankingError> {
    if !is_permutation(pi, profile.len()) {
        return Err(RankingError::CandidateMismatch("ranking is not a permutation of the candidates".into()));
    }
    Ok(cost(pi, &profile.pairwise()))
}

struct Search<'a> {
    w: &'a [Vec<u64>],
    prefix: Vec<usize>,
    used: Vec<bool>,
    best_cost: u64,
    best: Vec<Vec<usize>>,
    collect_all: bool,
}

impl Search<'_> {
    fn remaining_bound(&self) -> u64 {
        let free: Vec<usize> = (0..self.w.len()).filter(|&i| !self.used[i]).collect();
        let mut lb = 0;
        for (i, &a) in free.iter().enumerate() {
            for &b in &free[i + 1..] {
                lb += self.w[a][b].min(self.w[b][a]);
            }
        }
        lb
    }

    fn pruned(&self, bound: u64) -> bool {
        if self.collect_all {
            bound > self.best_cost
        } else {
            bound >= self.best_cost
        }
    }

    fn dfs(&mut self, partial: u64) {
        let n = self.w.len();
        if self.prefix.len() == n {
            if partial < self.best_cost {
                self.best_cost = partial;
                self.best.clear();
            }
            self.best.push(self.prefix.clone());
            return;
        }
        for c in 0..n {
            if self.used[c] {
                continue;
            }
            // `c` goes before every other unplaced candidate.
            let added: u64 = (0..n).filter(|&u| !self.used[u] && u != c).map(|u| self.w[u][c]).sum();
            self.used[c] = true;
            let next = partial + added;
            if !self.pruned(next + self.remaining_bound()) {
                self.prefix.push(c);
                self.dfs(next);
                self.prefix.pop();
            }
            self.used[c] = false;
        }
    }
}

fn best_voter(profile: &VoterProfile, w: &[Vec<u64>]) -> (Vec<usize>, u64) {
    profile
        .voters
        .iter()
        .map(|v| (v.clone(), cost(v, w)))
        .min_by_key(|(_, c)| *c)
        .expect("profile has voters")
}

/// Exact minimiser by branch-and-bound in lexicographic order; among equal
/// minima the lexicographically smallest ranking is returned.
pub fn brute_force(profile: &VoterProfile) -> (Vec<usize>, u64) {
    let w = profile.pairwise();
    let (_, upper) = best_voter(profile, &w);
    let mut s = Search {
        w: &w,
        prefix: Vec::new(),
        used: vec![false; w.len()],
        best_cost: upper + 1,
        best: Vec::new(),
        collect_all: false,
    };
    s.dfs(0);
    let best = s.best.swap_remove(0);
    (best, s.best_cost)
}

/// Every minimising ranking, in lexicographic order.
pub fn all_minimizers(profile: &VoterProfile) -> (Vec<Vec<usize>>, u64) {
    let w = profile.pairwise();
    let (_, min) = brute_force(profile);
    let mut s = Search {
        w: &w,
        prefix: Vec::new(),
        used: vec![false; w.len()],
        best_cost: min,
        best: Vec::new(),
        collect_all: true,
    };
    s.dfs(0);
    (s.best, min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub max_iter: u64,
    pub initial_temp: f64,
    pub cooling_rate: f64,
    pub seed: u64,
    /// Independent runs; the first starts from the best voter, the rest from shuffles.
    pub restarts: usize,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule { max_iter: 50_000, initial_temp: 100_000.0, cooling_rate: 0.99, seed: 0, restarts: 4 }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<(), RankingError> {
        let ok = self.max_iter > 0
            && self.initial_temp > 0.0
            && self.cooling_rate > 0.0
            && self.cooling_rate < 1.0
            && self.restarts > 0;
        if ok {
            Ok(())
        } else {
            Err(RankingError::IncompleteTable("invalid annealing schedule".into()))
        }
    }
}

/// Cost change from reversing `order[i..=j]`: every pair inside the segment flips.
fn reversal_delta(order: &[usize], i: usize, j: usize, w: &[Vec<u64>]) -> i64 {
    let mut delta = 0i64;
    for a in i..j {
        for b in a + 1..=j {
            let (x, y) = (order[a], order[b]);
            delta += w[x][y] as i64 - w[y][x] as i64;
        }
    }
    delta
}

fn anneal_run(w: &[Vec<u64>], start: Vec<usize>, schedule: &AnnealSchedule, seed: u64) -> (Vec<usize>, u64) {
    let n = start.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = start;
    let mut current_cost = cost(&current, w);
    let mut best = (current.clone(), current_cost);
    let mut temp = schedule.initial_temp;
    if n < 2 {
        return best;
    }
    for _ in 0..schedule.max_iter {
        if best.1 == 0 {
            break;
        }
        let mut i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        if i > j {
            std::mem::swap(&mut i, &mut j);
        }
        let delta = reversal_delta(&current, i, j, w);
        let accept = delta <= 0 || rng.gen::<f64>() < (-(delta as f64) / temp).exp();
        if accept {
            current[i..=j].reverse();
            current_cost = (current_cost as i64 + delta) as u64;
            if current_cost < best.1 {
                best = (current.clone(), current_cost);
            }
        }
        temp *= schedule.cooling_rate;
    }
    best
}

/// Simulated annealing with random segment reversals and geometric cooling.
/// Restarts run concurrently; the lowest score wins, earliest restart on ties.
pub fn anneal(profile: &VoterProfile, schedule: &AnnealSchedule) -> (Vec<usize>, u64) {
    let w = profile.pairwise();
    let (start, _) = best_voter(profile, &w);
    let runs: Vec<(Vec<usize>, u64)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..schedule.restarts)
            .map(|r| {
                let w = &w;
                let mut init = start.clone();
                let seed = schedule.seed.wrapping_add(r as u64);
                scope.spawn(move || {
                    if r > 0 {
                        init.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15));
                    }
                    anneal_run(w, init, schedule, seed)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("annealing thread panicked")).collect()
    });
    runs.into_iter().min_by_key(|(_, c)| *c).expect("at least one restart")
}

/// Largest `n` with `n!` not above `limit`.
pub fn max_n_for_factorial(limit: f64) -> usize {
    let (mut n, mut f) = (1usize, 1.0f64);
    while f * (n + 1) as f64 <= limit {
        n += 1;
        f *= n as f64;
    }
    n
}

pub const DEFAULT_EXHAUSTIVE_N: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KemenyOptions {
    /// Exhaustive search is used up to this many candidates.
    pub exhaustive_max_n: usize,
    pub schedule: AnnealSchedule,
}

impl Default for KemenyOptions {
    fn default() -> Self {
        KemenyOptions { exhaustive_max_n: DEFAULT_EXHAUSTIVE_N, schedule: AnnealSchedule::default() }
    }
}

impl KemenyOptions {
    /// Exhaustive whenever `n!` is at most one billion.
    pub fn factorial_bound() -> Self {
        KemenyOptions { exhaustive_max_n: max_n_for_factorial(1e9), ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Brute,
    Anneal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Consensus {
    pub order: Vec<String>,
    pub score: u64,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Consensus {
    /// 1-based position of `id`.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.order.iter().position(|c| c == id).map(|p| p + 1)
    }
}

pub fn kemeny_consensus(profile: &VoterProfile, opts: &KemenyOptions) -> Result<Consensus, RankingError> {
    if profile.voters.is_empty() {
        return Err(RankingError::NoVoters);
    }
    if profile.len() <= opts.exhaustive_max_n {
        let (order, score) = brute_force(profile);
        Ok(Consensus { order: profile.ids(&order), score, method: Method::Brute, seed: None })
    } else {
        opts.schedule.validate()?;
        let (order, score) = anneal(profile, &opts.schedule);
        Ok(Consensus { order: profile.ids(&order), score, method: Method::Anneal, seed: Some(opts.schedule.seed) })
    }
}

/// Scores (higher is better) for every candidate under one voter dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVoter {
    pub name: String,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub candidates: Vec<String>,
    pub voters: Vec<ScoreVoter>,
}

impl ScoreMatrix {
    pub fn validate(&self) -> Result<(), RankingError> {
        if self.voters.is_empty() {
            return Err(RankingError::NoVoters);
        }
        if self.candidates.is_empty() {
            return Err(RankingError::IncompleteTable("no candidates".into()));
        }
        for v in &self.voters {
            if v.scores.len() != self.candidates.len() || v.scores.iter().any(|s| !s.is_finite()) {
                return Err(RankingError::IncompleteTable(format!("voter `{}` lacks a finite score for every candidate", v.name)));
            }
        }
        Ok(())
    }

    /// Each voter's ranking by descending score; equal scores are ordered by
    /// candidate id and reported.
    pub fn rankings(&self) -> (Vec<Vec<String>>, Vec<String>) {
        let mut ties = Vec::new();
        let rankings = self
            .voters
            .iter()
            .map(|v| {
                let mut idx: Vec<usize> = (0..self.candidates.len()).collect();
                idx.sort_by(|&a, &b| {
                    v.scores[b].total_cmp(&v.scores[a]).then_with(|| self.candidates[a].cmp(&self.candidates[b]))
                });
                for pair in idx.windows(2) {
                    if v.scores[pair[0]] == v.scores[pair[1]] {
                        ties.push(format!("{}: {} = {}", v.name, self.candidates[pair[0]], self.candidates[pair[1]]));
                    }
                }
                idx.iter().map(|&i| self.candidates[i].clone()).collect()
            })
            .collect();
        (rankings, ties)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankInterval {
    pub candidate: String,
    pub rank: usize,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidates {
    pub consensus: Consensus,
    /// Score ties broken by id before voting.
    pub ties: Vec<String>,
    #[serde(default)]
    pub intervals: Vec<RankInterval>,
}

pub fn rank_candidates(matrix: &ScoreMatrix, opts: &KemenyOptions) -> Result<RankedCandidates, RankingError> {
    matrix.validate()?;
    let (rankings, ties) = matrix.rankings();
    let consensus = kemeny_consensus(&VoterProfile::new(&rankings)?, opts)?;
    Ok(RankedCandidates { consensus, ties, intervals: Vec::new() })
}

/// Attaches percentile rank intervals computed from re-ranked bootstrap tables.
/// Each interval is widened to include the point rank.
pub fn attach_rank_intervals(
    ranked: &mut RankedCandidates,
    resamples: impl IntoIterator<Item = ScoreMatrix>,
    opts: &KemenyOptions,
    level: f64,
) -> Result<(), RankingError> {
    let mut positions: IndexMap<String, Vec<f64>> =
        ranked.consensus.order.iter().map(|c| (c.clone(), Vec::new())).collect();
    for matrix in resamples {
        let c = rank_candidates(&matrix, opts)?.consensus;
        for (id, ranks) in positions.iter_mut() {
            let r = c.rank_of(id).ok_or_else(|| RankingError::CandidateMismatch(format!("`{id}` missing in resample")))?;
            ranks.push(r as f64);
        }
    }
    let tail = (1.0 - level) / 2.0;
    ranked.intervals = positions
        .into_iter()
        .enumerate()
        .map(|(i, (candidate, mut ranks))| {
            let rank = i + 1;
            let (lo, hi) = if ranks.is_empty() {
                (rank as f64, rank as f64)
            } else {
                ranks.sort_by(f64::total_cmp);
                (percentile(&ranks, tail), percentile(&ranks, 1.0 - tail))
            };
            RankInterval { candidate, rank, ci_lo: lo.min(rank as f64), ci_hi: hi.max(rank as f64) }
        })
        .collect();
    Ok(())
}

/// Best (smallest) 1-based position of each group in a consensus order, with
/// `group_of` mapping candidate ids to group ids (e.g. model of a model/strategy pair).
pub fn best_positions(order: &[String], group_of: impl Fn(&str) -> String) -> IndexMap<String, usize> {
    let mut best: IndexMap<String, usize> = IndexMap::new();
    for (pos, id) in order.iter().enumerate() {
        best.entry(group_of(id)).or_insert(pos + 1);
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMean {
    pub size_class: SizeClass,
    pub n_models: usize,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Mean best-strategy macro-average per size class, bootstrapped over the class's models.
pub fn group_means(
    models: &[(String, SizeClass, f64)],
    classes: &[SizeClass],
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<Vec<GroupMean>, RankingError> {
    classes
        .iter()
        .map(|&class| {
            let values: Vec<f64> = models.iter().filter(|m| m.1 == class).map(|m| m.2).collect();
            if values.is_empty() {
                return Err(RankingError::EmptyClass(class.as_str().into()));
            }
            let mean = running_mean(values.iter().copied()).expect("class is non-empty");
            let (lo, hi) = bootstrap_mean_ci(&values, n_resamples, level, seed)?;
            Ok(GroupMean { size_class: class, n_models: values.len(), mean, ci_lo: lo.min(mean), ci_hi: hi.max(mean) })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Pair-by-pair count straight from the definition.
    fn oracle(pi: &[usize], voters: &[Vec<usize>]) -> u64 {
        let pos = |o: &[usize], c: usize| o.iter().position(|&x| x == c).unwrap();
        let n = pi.len();
        let mut total = 0;
        for v in voters {
            for i in 0..n {
                for j in i + 1..n {
                    if (pos(pi, i) < pos(pi, j)) != (pos(v, i) < pos(v, j)) {
                        total += 1;
                    }
                }
            }
        }
        total
    }

    #[test]
    fn disagreement_basics() {
        let p = VoterProfile::from_indices(4, vec![vec![0, 1, 2, 3]]).unwrap();
        assert_eq!(disagreement(&[0, 1, 2, 3], &p).unwrap(), 0);
        assert_eq!(disagreement(&[3, 2, 1, 0], &p).unwrap(), 6);
        assert!(disagreement(&[0, 1, 1, 3], &p).is_err());
    }

    #[test]
    fn disagreement_matches_pair_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let voters: Vec<Vec<usize>> = (0..3)
                .map(|_| {
                    let mut v = vec![0, 1, 2];
                    v.shuffle(&mut rng);
                    v
                })
                .collect();
            let p = VoterProfile::from_indices(3, voters.clone()).unwrap();
            let mut pi = vec![0, 1, 2];
            pi.shuffle(&mut rng);
            assert_eq!(disagreement(&pi, &p).unwrap(), oracle(&pi, &voters));
        }
    }

    #[test]
    fn identical_voters_give_zero() {
        let v = ids(&["b", "c", "a"]);
        let p = VoterProfile::new(&[v.clone(), v.clone()]).unwrap();
        let c = kemeny_consensus(&p, &KemenyOptions::default()).unwrap();
        assert_eq!(c.order, v);
        assert_eq!(c.score, 0);
        let (order, score) = anneal(&p, &AnnealSchedule::default());
        assert_eq!((p.ids(&order), score), (v, 0));
    }

    #[test]
    fn mismatched_candidates() {
        assert!(matches!(
            VoterProfile::new(&[ids(&["a", "b"]), ids(&["a", "c"])]),
            Err(RankingError::CandidateMismatch(_))
        ));
        assert_eq!(VoterProfile::new(&[]), Err(RankingError::NoVoters));
    }

    #[test]
    fn brute_force_picks_lexicographic_minimiser() {
        // Two opposite voters: every ranking of two candidates costs 1.
        let p = VoterProfile::new(&[ids(&["b", "a"]), ids(&["a", "b"])]).unwrap();
        let c = kemeny_consensus(&p, &KemenyOptions::default()).unwrap();
        assert_eq!(c.order, ids(&["a", "b"]));
        assert_eq!(c.score, 1);
    }

    #[test]
    fn factorial_bound() {
        assert_eq!(max_n_for_factorial(1e9), 12);
        assert_eq!(max_n_for_factorial(40320.0), 8);
    }

    #[test]
    fn dominant_candidate_wins() {
        let m = ScoreMatrix {
            candidates: ids(&["m1", "m2", "m3"]),
            voters: vec![
                ScoreVoter { name: "v1".into(), scores: vec![0.5, 0.9, 0.1] },
                ScoreVoter { name: "v2".into(), scores: vec![0.2, 0.8, 0.6] },
                ScoreVoter { name: "v3".into(), scores: vec![0.7, 0.75, 0.7] },
            ],
        };
        let r = rank_candidates(&m, &KemenyOptions::default()).unwrap();
        assert_eq!(r.consensus.order[0], "m2");
        assert_eq!(r.ties, ["v3: m1 = m3"]);
    }

    #[test]
    fn incomplete_table() {
        let m = ScoreMatrix {
            candidates: ids(&["m1", "m2"]),
            voters: vec![ScoreVoter { name: "v".into(), scores: vec![0.5] }],
        };
        assert!(matches!(rank_candidates(&m, &KemenyOptions::default()), Err(RankingError::IncompleteTable(_))));
    }

    #[test]
    fn best_position_per_group() {
        let order = ids(&["m2/few_shot", "m1/zero_shot", "m2/zero_shot", "m1/few_shot"]);
        let pos = best_positions(&order, |id| id.split('/').next().unwrap().to_string());
        assert_eq!(pos["m2"], 1);
        assert_eq!(pos["m1"], 2);
    }

    #[test]
    fn group_means_per_class() {
        let models = vec![
            ("a".to_string(), SizeClass::Large, 0.8),
            ("b".to_string(), SizeClass::Large, 0.76),
            ("c".to_string(), SizeClass::Tiny, 0.57),
        ];
        let g = group_means(&models, &[SizeClass::Large, SizeClass::Tiny], 200, 0.95, 1).unwrap();
        assert!((g[0].mean - 0.78).abs() < 1e-12);
        assert_eq!(g[1].mean, 0.57);
        assert_eq!((g[1].ci_lo, g[1].ci_hi), (0.57, 0.57));
        assert_eq!(
            group_means(&models, &[SizeClass::Medium], 10, 0.95, 1),
            Err(RankingError::EmptyClass("medium".into()))
        );
    }
}
