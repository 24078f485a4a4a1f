//! Top-N ranking over all candidate items and the usual relevance metrics.

use std::cmp::Ordering;
use std::fmt;

use ndarray::Array2;
use rayon::prelude::*;

use crate::data::InteractionLog;
use crate::error::{input, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    General,
    ColdStart,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::General => "general",
            EvalMode::ColdStart => "cold_start",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub precision_at_n: f64,
    pub recall_at_n: f64,
    pub ndcg_at_n: f64,
    pub n: usize,
    pub user_count: usize,
    pub mode: EvalMode,
}

/// Something that scores every item for a user.
pub trait Scorer: Sync {
    fn n_items(&self) -> usize;
    fn n_users(&self) -> usize;
    /// Writes the score of every item into `out` (length `n_items`).
    fn score_into(&self, user: usize, out: &mut [f64]);
}

/// Inner products of user and item embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingScorer {
    pub users: Array2<f64>,
    pub items: Array2<f64>,
}

impl Scorer for EmbeddingScorer {
    fn n_items(&self) -> usize {
        self.items.nrows()
    }

    fn n_users(&self) -> usize {
        self.users.nrows()
    }

    fn score_into(&self, user: usize, out: &mut [f64]) {
        let u = self.users.row(user);
        for (o, item) in out.iter_mut().zip(self.items.rows()) {
            *o = u.dot(&item);
        }
    }
}

/// A precomputed `m x n` score table.
#[derive(Debug, Clone)]
pub struct DenseScorer {
    pub scores: Array2<f64>,
}

impl Scorer for DenseScorer {
    fn n_items(&self) -> usize {
        self.scores.ncols()
    }

    fn n_users(&self) -> usize {
        self.scores.nrows()
    }

    fn score_into(&self, user: usize, out: &mut [f64]) {
        out.copy_from_slice(self.scores.row(user).as_slice().expect("row-major"));
    }
}

fn by_score_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    let key = |i: usize| if scores[i].is_nan() { f64::NEG_INFINITY } else { scores[i] };
    move |&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b))
}

/// The `n` best items from precomputed scores, skipping `exclude` (sorted).
pub fn top_n_from_scores(scores: &[f64], exclude: &[usize], n: usize) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..scores.len())
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    let cmp = by_score_then_index(scores);
    if candidates.len() > n && n > 0 {
        candidates.select_nth_unstable_by(n - 1, &cmp);
        candidates.truncate(n);
    }
    candidates.sort_unstable_by(&cmp);
    candidates.truncate(n);
    candidates
}

/// Top `n` items for `user` by descending score, ties by ascending item id.
pub fn rank_top_n(scorer: &dyn Scorer, user: usize, exclude: &[usize], n: usize) -> Vec<usize> {
    let mut scores = vec![0.0; scorer.n_items()];
    scorer.score_into(user, &mut scores);
    top_n_from_scores(&scores, exclude, n)
}

/// Precision, recall and NDCG at `n` with binary gains.
///
/// Returns `None` when `relevant` is empty. `relevant` must be sorted.
pub fn ranking_metrics(recommended: &[usize], relevant: &[usize], n: usize) -> Option<(f64, f64, f64)> {
    if relevant.is_empty() || n == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (rank, item) in recommended.iter().take(n).enumerate() {
        if relevant.binary_search(item).is_ok() {
            hits += 1;
            dcg += 1.0 / ((rank + 2) as f64).log2();
        }
    }
    let ideal: f64 = (0..relevant.len().min(n))
        .map(|r| 1.0 / ((r + 2) as f64).log2())
        .sum();
    Some((
        hits as f64 / n as f64,
        hits as f64 / relevant.len() as f64,
        dcg / ideal,
    ))
}

/// Averages the metrics over every user with at least one test item.
///
/// Items the user has in `train` are never recommended.
pub fn evaluate(
    scorer: &dyn Scorer,
    train: &InteractionLog,
    test: &InteractionLog,
    n: usize,
    mode: EvalMode,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return input("evaluation: empty test set");
    }
    let users: Vec<usize> = (0..test.n_users())
        .filter(|&u| !test.items_of(u).is_empty())
        .collect();
    evaluate_users(scorer, train, test, &users, n, mode)
}

/// [`evaluate`] restricted to the listed users.
pub fn evaluate_users(
    scorer: &dyn Scorer,
    train: &InteractionLog,
    test: &InteractionLog,
    users: &[usize],
    n: usize,
    mode: EvalMode,
) -> Result<MetricsReport> {
    if n == 0 {
        return input("evaluation: cutoff must be at least 1");
    }
    let per_user: Vec<Option<(f64, f64, f64)>> = users
        .par_iter()
        .map_init(
            || vec![0.0; scorer.n_items()],
            |scores, &u| {
                let relevant = test.items_of(u);
                if relevant.is_empty() {
                    return None;
                }
                scorer.score_into(u, scores);
                let top = top_n_from_scores(scores, train.items_of(u), n);
                ranking_metrics(&top, relevant, n)
            },
        )
        .collect();
    let mut totals = (0.0, 0.0, 0.0);
    let mut count = 0usize;
    for (p, r, g) in per_user.into_iter().flatten() {
        totals.0 += p;
        totals.1 += r;
        totals.2 += g;
        count += 1;
    }
    if count == 0 {
        return input("evaluation: no user has a test item");
    }
    let c = count as f64;
    Ok(MetricsReport {
        precision_at_n: totals.0 / c,
        recall_at_n: totals.1 / c,
        ndcg_at_n: totals.2 / c,
        n,
        user_count: count,
        mode,
    })
}
