//! Ranking metrics over each user's candidate items: the items the user
//! neither clicked nor purchased during training. Relevant items are the
//! user's held-out purchases that fall among those candidates.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interactions::Dataset;
use crate::latent_model::{score_all, ModelParams};

/// Default ranking cutoff for precision and recall.
pub const DEFAULT_CUTOFF: usize = 5;

/// A user's candidates ordered by descending score, ties broken by
/// ascending item index.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateRanking {
    user: u32,
    items: Vec<u32>,
    scores: Vec<f64>,
    hits: Vec<bool>,
    relevant_count: usize,
}

impl CandidateRanking {
    /// Sorts `(item, score)` candidates; `relevant` items outside the
    /// candidate list are ignored.
    pub fn new(user: u32, mut candidates: Vec<(u32, f64)>, relevant: &[u32]) -> Self {
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        candidates.dedup_by_key(|c| c.0);
        let mut rel: Vec<u32> = relevant.to_vec();
        rel.sort_unstable();
        let hits: Vec<bool> = candidates.iter().map(|c| rel.binary_search(&c.0).is_ok()).collect();
        let relevant_count = hits.iter().filter(|&&h| h).count();
        CandidateRanking {
            user,
            items: candidates.iter().map(|c| c.0).collect(),
            scores: candidates.iter().map(|c| c.1).collect(),
            hits,
            relevant_count,
        }
    }

    pub fn user(&self) -> u32 {
        self.user
    }

    pub fn items(&self) -> &[u32] {
        &self.items
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Per-position relevance flags.
    pub fn hits(&self) -> &[bool] {
        &self.hits
    }

    /// Relevant candidates, ascending.
    pub fn relevant(&self) -> Vec<u32> {
        let mut rel: Vec<u32> = self
            .items
            .iter()
            .zip(&self.hits)
            .filter(|(_, &h)| h)
            .map(|(&i, _)| i)
            .collect();
        rel.sort_unstable();
        rel
    }

    pub fn relevant_count(&self) -> usize {
        self.relevant_count
    }

    fn require_relevant(&self) -> Result<()> {
        if self.relevant_count == 0 {
            return Err(Error::NoRelevant);
        }
        Ok(())
    }

    fn hits_in_top(&self, k: usize) -> usize {
        self.hits.iter().take(k).filter(|&&h| h).count()
    }
}

fn check_cutoff(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("cutoff must be at least 1".into()));
    }
    Ok(())
}

/// Candidates of user `u`, ranked by the model.
pub fn build_candidates(dataset: &Dataset, params: &ModelParams, u: usize) -> Result<CandidateRanking> {
    let part = crate::interactions::partition(dataset, u)?;
    let scores = score_all(params, u)?;
    let candidates: Vec<(u32, f64)> = part.non_clicked().map(|i| (i, scores[i as usize])).collect();
    Ok(CandidateRanking::new(u as u32, candidates, dataset.test_purchases(u)))
}

/// Ranks items by a score vector shared by every user (MostPop style).
pub fn build_candidates_from_scores(dataset: &Dataset, scores: &[f64], u: usize) -> Result<CandidateRanking> {
    let part = crate::interactions::partition(dataset, u)?;
    let candidates: Vec<(u32, f64)> = part.non_clicked().map(|i| (i, scores[i as usize])).collect();
    Ok(CandidateRanking::new(u as u32, candidates, dataset.test_purchases(u)))
}

/// Relevant hits in the top `k`, over `k` (even when fewer than `k` candidates exist).
pub fn precision_at_k(r: &CandidateRanking, k: usize) -> Result<f64> {
    check_cutoff(k)?;
    r.require_relevant()?;
    Ok(r.hits_in_top(k) as f64 / k as f64)
}

pub fn recall_at_k(r: &CandidateRanking, k: usize) -> Result<f64> {
    check_cutoff(k)?;
    r.require_relevant()?;
    Ok(r.hits_in_top(k) as f64 / r.relevant_count as f64)
}

pub fn average_precision(r: &CandidateRanking) -> Result<f64> {
    r.require_relevant()?;
    let mut found = 0usize;
    let mut sum = 0.0;
    for (pos, _) in r.hits.iter().enumerate().filter(|(_, &h)| h) {
        found += 1;
        sum += found as f64 / (pos + 1) as f64;
    }
    Ok(sum / r.relevant_count as f64)
}

pub fn reciprocal_rank(r: &CandidateRanking) -> Result<f64> {
    r.require_relevant()?;
    let first = r.hits.iter().position(|&h| h).expect("has relevant");
    Ok(1.0 / (first + 1) as f64)
}

/// Whole-list NDCG with binary gains and a `log2(rank + 1)` discount.
pub fn ndcg(r: &CandidateRanking) -> Result<f64> {
    r.require_relevant()?;
    let dcg: f64 = r
        .hits
        .iter()
        .enumerate()
        .filter(|(_, &h)| h)
        .map(|(pos, _)| 1.0 / ((pos + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..r.relevant_count).map(|pos| 1.0 / ((pos + 2) as f64).log2()).sum();
    Ok(dcg / idcg)
}

/// Fraction of (relevant, non-relevant) pairs ranked correctly, with
/// score ties counting one half.
pub fn auc_user(r: &CandidateRanking) -> Result<f64> {
    r.require_relevant()?;
    let negatives = r.items.len() - r.relevant_count;
    if negatives == 0 {
        return Err(Error::UndefinedAuc);
    }
    // Walk tie groups from the lowest score upward, counting negatives
    // strictly below each group.
    let mut below = 0usize;
    let mut correct = 0.0;
    let mut end = r.scores.len();
    while end > 0 {
        let score = r.scores[end - 1];
        let mut start = end - 1;
        while start > 0 && r.scores[start - 1] == score {
            start -= 1;
        }
        let rel = r.hits[start..end].iter().filter(|&&h| h).count();
        let non = (end - start) - rel;
        correct += rel as f64 * below as f64 + 0.5 * rel as f64 * non as f64;
        below += non;
        end = start;
    }
    Ok(correct / (r.relevant_count as f64 * negatives as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub precision: f64,
    pub recall: f64,
    pub ap: f64,
    pub rr: f64,
    pub ndcg: f64,
    /// Absent when every candidate is relevant.
    pub auc: Option<f64>,
}

/// The six averaged metrics, in reporting order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub precision: f64,
    pub recall: f64,
    pub map: f64,
    pub mrr: f64,
    pub ndcg: f64,
    pub auc: f64,
}

pub const METRIC_KEYS: [&str; 6] = ["precision", "recall", "map", "mrr", "ndcg", "auc"];

impl MetricMeans {
    pub fn to_array(&self) -> [f64; 6] {
        [self.precision, self.recall, self.map, self.mrr, self.ndcg, self.auc]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        MetricMeans {
            precision: v[0],
            recall: v[1],
            map: v[2],
            mrr: v[3],
            ndcg: v[4],
            auc: v[5],
        }
    }

    /// Row labels, e.g. `Prec@5`.
    pub fn labels(k: usize) -> [String; 6] {
        [
            format!("Prec@{k}"),
            format!("Recall@{k}"),
            "MAP".to_owned(),
            "MRR".to_owned(),
            "NDCG".to_owned(),
            "AUC".to_owned(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub evaluated_users: usize,
    /// Users with no held-out purchase among their candidates.
    pub skipped_users: usize,
    /// Evaluated users with a defined AUC.
    pub auc_users: usize,
    pub means: MetricMeans,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_user: Option<BTreeMap<String, UserMetrics>>,
}

impl EvalReport {
    pub fn without_per_user(mut self) -> Self {
        self.per_user = None;
        self
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn user_metrics(r: &CandidateRanking, k: usize) -> Result<UserMetrics> {
    Ok(UserMetrics {
        precision: precision_at_k(r, k)?,
        recall: recall_at_k(r, k)?,
        ap: average_precision(r)?,
        rr: reciprocal_rank(r)?,
        ndcg: ndcg(r)?,
        auc: match auc_user(r) {
            Ok(v) => Some(v),
            Err(Error::UndefinedAuc) => None,
            Err(e) => return Err(e),
        },
    })
}

/// Averages per-user metrics. Users without a defined AUC are left out of
/// the AUC mean only.
pub fn aggregate(k: usize, per_user: BTreeMap<String, UserMetrics>, skipped_users: usize) -> Result<EvalReport> {
    if per_user.is_empty() {
        return Err(Error::NoEvaluableUsers);
    }
    let count = per_user.len() as f64;
    let mut sums = [0.0; 5];
    let mut auc_sum = 0.0;
    let mut auc_users = 0usize;
    for m in per_user.values() {
        for (s, v) in sums.iter_mut().zip([m.precision, m.recall, m.ap, m.rr, m.ndcg]) {
            *s += v;
        }
        if let Some(a) = m.auc {
            auc_sum += a;
            auc_users += 1;
        }
    }
    if auc_users == 0 {
        return Err(Error::UndefinedAuc);
    }
    Ok(EvalReport {
        k,
        evaluated_users: per_user.len(),
        skipped_users,
        auc_users,
        means: MetricMeans {
            precision: sums[0] / count,
            recall: sums[1] / count,
            map: sums[2] / count,
            mrr: sums[3] / count,
            ndcg: sums[4] / count,
            auc: auc_sum / auc_users as f64,
        },
        per_user: Some(per_user),
    })
}

fn evaluate_with<F>(dataset: &Dataset, k: usize, rank: F) -> Result<EvalReport>
where
    F: Fn(usize) -> Result<CandidateRanking> + Sync,
{
    check_cutoff(k)?;
    let rows: Vec<Option<(String, UserMetrics)>> = (0..dataset.n())
        .into_par_iter()
        .map(|u| {
            let r = rank(u)?;
            if r.relevant_count() == 0 {
                return Ok(None);
            }
            let name = dataset.train().users().id(u as u32).to_owned();
            Ok(Some((name, user_metrics(&r, k)?)))
        })
        .collect::<Result<_>>()?;
    let skipped = rows.iter().filter(|r| r.is_none()).count();
    aggregate(k, rows.into_iter().flatten().collect(), skipped)
}

/// Six ranking metrics for every user with at least one held-out purchase
/// among their candidates.
pub fn evaluate(dataset: &Dataset, params: &ModelParams, k: usize) -> Result<EvalReport> {
    if params.n() != dataset.n() || params.m() != dataset.m() {
        return Err(Error::Config(format!(
            "model is {}x{} but dataset is {}x{}",
            params.n(),
            params.m(),
            dataset.n(),
            dataset.m()
        )));
    }
    evaluate_with(dataset, k, |u| build_candidates(dataset, params, u))
}

/// Like [`evaluate`] for a score vector shared by all users.
pub fn evaluate_global_scores(dataset: &Dataset, scores: &[f64], k: usize) -> Result<EvalReport> {
    if scores.len() != dataset.m() {
        return Err(Error::Config(format!(
            "score vector has {} entries, dataset has {} items",
            scores.len(),
            dataset.m()
        )));
    }
    evaluate_with(dataset, k, |u| build_candidates_from_scores(dataset, scores, u))
}

/// Aligned text table with one row per metric and one column per labelled
/// result.
pub fn format_table(k: usize, columns: &[(String, MetricMeans)]) -> String {
    let labels = MetricMeans::labels(k);
    let label_width = labels.iter().map(String::len).max().unwrap_or(0);
    let widths: Vec<usize> = columns.iter().map(|(name, _)| name.len().max(8)).collect();
    let mut out = String::new();
    let _ = write!(out, "{:label_width$}", "");
    for ((name, _), w) in columns.iter().zip(&widths) {
        let _ = write!(out, "  {name:>w$}");
    }
    out.push('\n');
    for (row, label) in labels.iter().enumerate() {
        let _ = write!(out, "{label:label_width$}");
        for ((_, means), w) in columns.iter().zip(&widths) {
            let _ = write!(out, "  {:>w$.4}", means.to_array()[row]);
        }
        out.push('\n');
    }
    out
}
