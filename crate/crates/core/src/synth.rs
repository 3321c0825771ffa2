//! Synthetic interaction logs with a controlled preference drift.
//!
//! Items are partitioned into equal clusters with a Zipf-like popularity
//! inside each cluster. Every user owns two distinct clusters A and B.
//! Before `drift_time` a user draws from A; afterwards from B with
//! probability `drift_strength` and from A otherwise. Timestamps are uniform
//! over `[0, span_seconds)`.

use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Interaction, InteractionLog, Vocabulary};
use crate::error::{Error, Result};

/// Redraws allowed when a user hits an item they already have.
const DUPLICATE_TRIES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    /// Interactions drawn per user, before duplicate removal.
    pub base_interactions: usize,
    /// Seconds since the start of the log at which preferences switch.
    pub drift_time: i64,
    pub drift_strength: f64,
    pub seed: u64,
    pub clusters: usize,
    pub span_seconds: i64,
    /// Exponent of the within-cluster popularity law, weight ∝ 1/(rank+1)^s.
    pub popularity_skew: f64,
}

const DAY: i64 = 86_400;

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            users: 500,
            items: 1000,
            base_interactions: 40,
            drift_time: 240 * DAY,
            drift_strength: 0.9,
            seed: 1,
            clusters: 20,
            span_seconds: 400 * DAY,
            popularity_skew: 1.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items == 0 || self.base_interactions == 0 {
            return Err(Error::invalid("users, items and base_interactions must be positive"));
        }
        if self.clusters < 2 || self.clusters > self.items {
            return Err(Error::invalid("clusters must be in 2..=items"));
        }
        if !(0.0..=1.0).contains(&self.drift_strength) {
            return Err(Error::invalid("drift_strength must be in [0, 1]"));
        }
        if self.span_seconds <= 0 || !(0..=self.span_seconds).contains(&self.drift_time) {
            return Err(Error::invalid("drift_time must lie within a positive span"));
        }
        if !(self.popularity_skew >= 0.0 && self.popularity_skew.is_finite()) {
            return Err(Error::invalid("popularity_skew must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub log: InteractionLog,
    /// Cluster of every item.
    pub item_cluster: Vec<u32>,
    /// Pre-drift cluster of every user.
    pub user_cluster_a: Vec<u32>,
    /// Post-drift cluster of every user.
    pub user_cluster_b: Vec<u32>,
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.clusters;

    // contiguous clusters; the first `items % c` get one extra item
    let item_cluster: Vec<u32> = (0..spec.items).map(|i| (i * c / spec.items) as u32).collect();
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); c];
    for (i, &k) in item_cluster.iter().enumerate() {
        members[k as usize].push(i as u32);
    }
    let pickers: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| {
            let w: Vec<f64> = (0..m.len()).map(|r| ((r + 1) as f64).powf(-spec.popularity_skew)).collect();
            WeightedIndex::new(w).map_err(|e| Error::invalid(e.to_string()))
        })
        .collect::<Result<_>>()?;

    let mut user_a = Vec::with_capacity(spec.users);
    let mut user_b = Vec::with_capacity(spec.users);
    let mut rows = Vec::with_capacity(spec.users * spec.base_interactions);
    for u in 0..spec.users {
        let a = rng.random_range(0..c);
        let b = (a + rng.random_range(1..c)) % c;
        user_a.push(a as u32);
        user_b.push(b as u32);
        let mut seen = Vec::new();
        for _ in 0..spec.base_interactions {
            let t = rng.random_range(0..spec.span_seconds);
            let cluster = if t >= spec.drift_time && rng.random_bool(spec.drift_strength) { b } else { a };
            let mut item = None;
            for _ in 0..DUPLICATE_TRIES {
                let cand = members[cluster][pickers[cluster].sample(&mut rng)];
                if !seen.contains(&cand) {
                    item = Some(cand);
                    break;
                }
            }
            if let Some(item) = item {
                seen.push(item);
                rows.push(Interaction::new(u as u32, item, t));
            }
        }
    }
    let log = InteractionLog::from_interactions(
        rows,
        Arc::new(Vocabulary::numbered(spec.users)),
        Arc::new(Vocabulary::numbered(spec.items)),
    )?;
    Ok(SyntheticData {
        log,
        item_cluster,
        user_cluster_a: user_a,
        user_cluster_b: user_b,
    })
}
