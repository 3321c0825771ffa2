//! Full-ranking top-k evaluation (Recall@k, NDCG@k) and the softmax-style
//! margin surrogate that lower-bounds NDCG.
//!
//! Rankings exclude the user's training items and break score ties by
//! ascending item index, so every metric here is deterministic.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::InteractionLog;
use crate::error::{Error, Result};
use crate::model::{dot, EmbeddingModel, EmbeddingView};

pub const DEFAULT_KS: [usize; 2] = [20, 30];

/// Descending score, then ascending item index.
fn rank_order(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

fn candidates(scores: &[f64], exclude: &[u32]) -> Vec<(f64, u32)> {
    let excluded: HashSet<u32> = exclude.iter().copied().collect();
    scores
        .iter()
        .enumerate()
        .filter(|(i, _)| !excluded.contains(&(*i as u32)))
        // + 0.0 folds -0.0 into 0.0 so equal scores tie under total_cmp
        .map(|(i, &s)| (s + 0.0, i as u32))
        .collect()
}

/// Every non-excluded item, best first.
pub fn rank_items(model: &EmbeddingModel, u: u32, exclude: &[u32]) -> Result<Vec<u32>> {
    let mut cands = candidates(&model.score_all(u)?, exclude);
    cands.sort_unstable_by(rank_order);
    Ok(cands.into_iter().map(|(_, i)| i).collect())
}

/// The first `k` entries of the full ranking, without sorting the tail.
pub fn top_k(scores: &[f64], exclude: &[u32], k: usize) -> Vec<u32> {
    let mut cands = candidates(scores, exclude);
    if k < cands.len() {
        cands.select_nth_unstable_by(k, rank_order);
        cands.truncate(k);
    }
    cands.sort_unstable_by(rank_order);
    cands.into_iter().map(|(_, i)| i).collect()
}

pub fn recall_at_k(ranked: &[u32], positives: &HashSet<u32>, k: usize) -> f64 {
    if positives.is_empty() {
        return 0.0;
    }
    let hits = ranked.iter().take(k).filter(|i| positives.contains(i)).count();
    hits as f64 / positives.len() as f64
}

/// `Σ_{i=1}^{min(k, n)} 1 / log2(i + 1)`.
pub fn ideal_dcg(k: usize, num_positives: usize) -> f64 {
    (1..=k.min(num_positives)).map(|i| 1.0 / ((i + 1) as f64).log2()).fold(0.0, |a, x| a + x)
}

fn dcg_at_k(ranked: &[u32], positives: &HashSet<u32>, k: usize) -> f64 {
    ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| positives.contains(i))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .fold(0.0, |a, x| a + x)
}

pub fn ndcg_at_k(ranked: &[u32], positives: &HashSet<u32>, k: usize) -> f64 {
    let idcg = ideal_dcg(k, positives.len());
    if idcg == 0.0 {
        return 0.0;
    }
    dcg_at_k(ranked, positives, k) / idcg
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserRecord {
    pub user: u32,
    pub num_positives: usize,
    /// Per requested k, in the report's k order.
    pub hits: Vec<usize>,
    pub dcg: Vec<f64>,
    pub idcg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub metrics: BTreeMap<usize, Metrics>,
    pub users_evaluated: usize,
    pub per_user: Vec<UserRecord>,
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Option<Metrics> {
        self.metrics.get(&k).copied()
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.at(k).map_or(0.0, |m| m.recall)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.at(k).map_or(0.0, |m| m.ndcg)
    }

    /// `{"<k>": {"recall", "ndcg"}, "users_evaluated", "per_user"?}`.
    pub fn to_json(&self, include_per_user: bool) -> serde_json::Value {
        let mut doc = serde_json::Map::new();
        for (k, m) in &self.metrics {
            doc.insert(k.to_string(), serde_json::json!({ "recall": m.recall, "ndcg": m.ndcg }));
        }
        doc.insert("users_evaluated".into(), self.users_evaluated.into());
        if include_per_user {
            doc.insert("per_user".into(), serde_json::to_value(&self.per_user).unwrap_or_default());
        }
        serde_json::Value::Object(doc)
    }

    /// `k,recall,ndcg,users_evaluated` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "k,recall,ndcg,users_evaluated")?;
        for (k, m) in &self.metrics {
            writeln!(out, "{k},{},{},{}", m.recall, m.ndcg, self.users_evaluated)?;
        }
        Ok(())
    }
}

/// Scores each user with a non-empty target set against all items, ranks
/// after excluding `exclude`'s items for that user, and averages per-user
/// Recall@k / NDCG@k over those users in user order.
pub fn evaluate(model: &EmbeddingModel, exclude: &InteractionLog, target: &InteractionLog, ks: &[usize]) -> Result<EvalReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::invalid("ks must be non-empty and positive"));
    }
    let num_users = model.num_users();
    let mut positives: Vec<Vec<u32>> = vec![Vec::new(); num_users];
    for it in target.interactions() {
        positives
            .get_mut(it.user as usize)
            .ok_or(Error::IndexOutOfRange { kind: "user", index: it.user as usize, size: num_users })?
            .push(it.item);
    }
    let excluded = exclude.items_by_user();
    let max_k = *ks.iter().max().expect("non-empty");
    let view = model.view();

    let users: Vec<u32> = (0..num_users as u32).filter(|&u| !positives[u as usize].is_empty()).collect();
    let per_user: Vec<UserRecord> = users
        .par_iter()
        .map(|&u| {
            let scores = user_scores(&view, u);
            let ex = excluded.get(u as usize).map_or(&[][..], Vec::as_slice);
            let ranked = top_k(&scores, ex, max_k);
            let pos: HashSet<u32> = positives[u as usize].iter().copied().collect();
            user_record(u, &ranked, &pos, ks)
        })
        .collect();

    let mut metrics = BTreeMap::new();
    for (ki, &k) in ks.iter().enumerate() {
        let (mut r, mut n) = (0.0, 0.0);
        for rec in &per_user {
            r += rec.hits[ki] as f64 / rec.num_positives as f64;
            n += rec.dcg[ki] / rec.idcg[ki];
        }
        let count = per_user.len().max(1) as f64;
        metrics.insert(k, Metrics { recall: r / count, ndcg: n / count });
    }
    Ok(EvalReport {
        ks: ks.to_vec(),
        metrics,
        users_evaluated: per_user.len(),
        per_user,
    })
}

fn user_scores(view: &EmbeddingView<'_>, u: u32) -> Vec<f64> {
    let eu = view.user(u);
    view.items.chunks(view.dim).map(|row| dot(eu, row)).collect()
}

fn user_record(u: u32, ranked: &[u32], positives: &HashSet<u32>, ks: &[usize]) -> UserRecord {
    UserRecord {
        user: u,
        num_positives: positives.len(),
        hits: ks.iter().map(|&k| ranked.iter().take(k).filter(|i| positives.contains(i)).count()).collect(),
        dcg: ks.iter().map(|&k| dcg_at_k(ranked, positives, k)).collect(),
        idcg: ks.iter().map(|&k| ideal_dcg(k, positives.len())).collect(),
    }
}

/// `1 / (1 + Σ_{q≠p} exp(s_uq - s_up))` over all items, with every exponent
/// shifted by the largest one so nothing overflows.
pub fn margin_surrogate(model: &EmbeddingModel, u: u32, p: u32) -> Result<f64> {
    let scores = model.score_all(u)?;
    if p as usize >= scores.len() {
        return Err(Error::IndexOutOfRange { kind: "item", index: p as usize, size: scores.len() });
    }
    Ok(surrogate_from_scores(&scores, p))
}

pub(crate) fn surrogate_from_scores(scores: &[f64], p: u32) -> f64 {
    let sp = scores[p as usize];
    let diffs = scores
        .iter()
        .enumerate()
        .filter(|&(q, _)| q != p as usize)
        .map(|(_, &s)| s - sp);
    let max = diffs.clone().fold(0.0f64, f64::max);
    // sum >= 1 because the largest term is exp(0)
    let sum: f64 = (-max).exp() + diffs.map(|d| (d - max).exp()).sum::<f64>();
    (-max).exp() / sum
}
