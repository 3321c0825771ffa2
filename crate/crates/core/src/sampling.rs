//! Select-style negative samplers: uniform (RNS), popularity (PNS), dynamic
//! hard negatives (DNS) and the rank-window variant DNS(M, N).
//!
//! Every sampler only ever returns items outside the user's training set.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::Serialize;

use crate::dataset::InteractionLog;
use crate::error::{Error, Result};
use crate::model::EmbeddingView;

/// Rejection attempts before falling back to enumerating the complement.
pub const MAX_REJECTIONS: usize = 100;
pub const DEFAULT_POOL: usize = 10;
pub const DEFAULT_PNS_ALPHA: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Rns,
    Pns { alpha: f64 },
    Dns { pool: usize },
    /// Uniform pick among score ranks `m..=n` of `n` uniform candidates.
    DnsMn { m: usize, n: usize },
}

impl SamplerKind {
    /// Builds a sampler kind from its CLI name and sub-parameters.
    pub fn from_name(name: &str, pool: usize, alpha: f64, m: usize, n: usize) -> Result<Self> {
        let kind = match name {
            "rns" => SamplerKind::Rns,
            "pns" => SamplerKind::Pns { alpha },
            "dns" => SamplerKind::Dns { pool },
            "dns-mn" | "dns_mn" => SamplerKind::DnsMn { m, n },
            other => return Err(Error::invalid(format!("unknown sampler {other:?}"))),
        };
        kind.validate()?;
        Ok(kind)
    }

    pub fn name(&self) -> &'static str {
        match self {
            SamplerKind::Rns => "rns",
            SamplerKind::Pns { .. } => "pns",
            SamplerKind::Dns { .. } => "dns",
            SamplerKind::DnsMn { .. } => "dns-mn",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SamplerKind::Rns => Ok(()),
            SamplerKind::Pns { alpha } if alpha >= 0.0 && alpha.is_finite() => Ok(()),
            SamplerKind::Pns { .. } => Err(Error::invalid("pns alpha must be finite and >= 0")),
            SamplerKind::Dns { pool } if pool >= 1 => Ok(()),
            SamplerKind::Dns { .. } => Err(Error::invalid("dns pool must be >= 1")),
            SamplerKind::DnsMn { m, n } if 1 <= m && m <= n => Ok(()),
            SamplerKind::DnsMn { .. } => Err(Error::invalid("dns(M, N) requires 1 <= M <= N")),
        }
    }

    /// Whether sampling reads model scores.
    pub fn needs_scores(&self) -> bool {
        matches!(self, SamplerKind::Dns { .. } | SamplerKind::DnsMn { .. })
    }
}

#[derive(Debug, Clone)]
pub struct NegativeSampler {
    kind: SamplerKind,
    num_items: usize,
    user_items: Vec<Vec<u32>>,
    popularity: Option<(Vec<f64>, Option<WeightedIndex<f64>>)>,
}

impl NegativeSampler {
    pub fn new(kind: SamplerKind, train: &InteractionLog) -> Result<Self> {
        Self::from_user_items(kind, train.num_items(), train.items_by_user())
    }

    /// `user_items[u]` must be sorted ascending.
    pub fn from_user_items(kind: SamplerKind, num_items: usize, user_items: Vec<Vec<u32>>) -> Result<Self> {
        kind.validate()?;
        if num_items == 0 {
            return Err(Error::invalid("sampler needs at least one item"));
        }
        let popularity = match kind {
            SamplerKind::Pns { alpha } => {
                let mut degree = vec![0usize; num_items];
                for items in &user_items {
                    for &i in items {
                        degree[i as usize] += 1;
                    }
                }
                let weights: Vec<f64> = degree.iter().map(|&d| (d as f64).powf(alpha)).collect();
                // all-zero weights cannot build an index; sampling degrades to uniform
                let index = WeightedIndex::new(&weights).ok();
                Some((weights, index))
            }
            _ => None,
        };
        Ok(Self {
            kind,
            num_items,
            user_items,
            popularity,
        })
    }

    pub fn kind(&self) -> SamplerKind {
        self.kind
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// Training items of `u`, sorted.
    pub fn user_items(&self, u: u32) -> &[u32] {
        self.user_items.get(u as usize).map_or(&[], Vec::as_slice)
    }

    fn interacted(&self, u: u32, item: u32) -> bool {
        self.user_items(u).binary_search(&item).is_ok()
    }

    fn complement(&self, u: u32) -> Vec<u32> {
        (0..self.num_items as u32).filter(|&i| !self.interacted(u, i)).collect()
    }

    fn ensure_has_negative(&self, u: u32) -> Result<()> {
        if self.user_items(u).len() >= self.num_items {
            Err(Error::NoNegative { user: u })
        } else {
            Ok(())
        }
    }

    /// Uniform draw over the items `u` has not interacted with.
    pub fn uniform<R: Rng + ?Sized>(&self, u: u32, rng: &mut R) -> Result<u32> {
        self.ensure_has_negative(u)?;
        for _ in 0..MAX_REJECTIONS {
            let item = rng.random_range(0..self.num_items as u32);
            if !self.interacted(u, item) {
                return Ok(item);
            }
        }
        let free = self.complement(u);
        Ok(free[rng.random_range(0..free.len())])
    }

    fn popular<R: Rng + ?Sized>(&self, u: u32, rng: &mut R) -> Result<u32> {
        self.ensure_has_negative(u)?;
        let Some((weights, Some(index))) = &self.popularity else {
            return self.uniform(u, rng);
        };
        for _ in 0..MAX_REJECTIONS {
            let item = index.sample(rng) as u32;
            if !self.interacted(u, item) {
                return Ok(item);
            }
        }
        let free = self.complement(u);
        match WeightedIndex::new(free.iter().map(|&i| weights[i as usize])) {
            Ok(local) => Ok(free[local.sample(rng)]),
            // every remaining item has zero weight
            Err(_) => Ok(free[rng.random_range(0..free.len())]),
        }
    }

    /// Draws one negative for the positive pair `(u, p)` using the current
    /// scores in `view` where the sampler needs them.
    pub fn sample_negative<R: Rng + ?Sized>(&self, u: u32, _p: u32, view: &EmbeddingView<'_>, rng: &mut R) -> Result<u32> {
        match self.kind {
            SamplerKind::Rns => self.uniform(u, rng),
            SamplerKind::Pns { .. } => self.popular(u, rng),
            SamplerKind::Dns { pool } => {
                let mut best: Option<(f64, u32)> = None;
                for _ in 0..pool {
                    let c = self.uniform(u, rng)?;
                    let s = view.score(u, c);
                    best = match best {
                        Some((bs, bc)) if bs > s || (bs == s && bc <= c) => Some((bs, bc)),
                        _ => Some((s, c)),
                    };
                }
                Ok(best.expect("pool >= 1").1)
            }
            SamplerKind::DnsMn { m, n } => {
                let mut cands: Vec<(f64, u32)> = Vec::with_capacity(n);
                for _ in 0..n {
                    let c = self.uniform(u, rng)?;
                    cands.push((view.score(u, c), c));
                }
                cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                let rank = rng.random_range(m - 1..n);
                Ok(cands[rank].1)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn view_of<'a>(users: &'a [f64], items: &'a [f64]) -> EmbeddingView<'a> {
        EmbeddingView { users, items, dim: 1 }
    }

    #[test]
    fn forced_outcome_for_every_kind() {
        let users = [1.0];
        let items = [0.1, 0.2, 0.3];
        let view = view_of(&users, &items);
        let kinds = [
            SamplerKind::Rns,
            SamplerKind::Pns { alpha: 0.75 },
            SamplerKind::Dns { pool: 10 },
            SamplerKind::DnsMn { m: 2, n: 5 },
        ];
        for kind in kinds {
            let s = NegativeSampler::from_user_items(kind, 3, vec![vec![0, 1]]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            for _ in 0..200 {
                assert_eq!(s.sample_negative(0, 0, &view, &mut rng).unwrap(), 2, "{kind:?}");
            }
        }
    }

    #[test]
    fn dns_takes_highest_scoring_candidate() {
        let users = [1.0];
        let items: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let view = view_of(&users, &items);
        let s = NegativeSampler::from_user_items(SamplerKind::Dns { pool: 10 }, 1000, vec![vec![]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut replay = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let got = s.sample_negative(0, 0, &view, &mut rng).unwrap();
            let pool: Vec<u32> = (0..10).map(|_| s.uniform(0, &mut replay).unwrap()).collect();
            assert_eq!(got, *pool.iter().max().unwrap());
        }
    }

    #[test]
    fn dns_ties_prefer_smaller_index() {
        let users = [0.0];
        let items = [1.0; 50];
        let view = view_of(&users, &items);
        let s = NegativeSampler::from_user_items(SamplerKind::Dns { pool: 10 }, 50, vec![vec![]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut replay = ChaCha8Rng::seed_from_u64(2);
        let got = s.sample_negative(0, 0, &view, &mut rng).unwrap();
        let pool: Vec<u32> = (0..10).map(|_| s.uniform(0, &mut replay).unwrap()).collect();
        assert_eq!(got, *pool.iter().min().unwrap());
    }

    #[test]
    fn dns_mn_window_excludes_top_ranks() {
        let users = [1.0];
        let items: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let view = view_of(&users, &items);
        // with 5 candidates over 5 items, ranks 2..=5 never include the max
        let s = NegativeSampler::from_user_items(SamplerKind::DnsMn { m: 2, n: 5 }, 5, vec![vec![]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut replay = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let got = s.sample_negative(0, 0, &view, &mut rng).unwrap();
            let mut cands: Vec<u32> = (0..5).map(|_| s.uniform(0, &mut replay).unwrap()).collect();
            cands.sort_unstable_by(|a, b| b.cmp(a));
            let rank: usize = replay.random_range(1..5);
            assert_eq!(got, cands[rank]);
        }
    }

    #[test]
    fn pns_prefers_popular_items() {
        // item 0 has degree 3, item 1 degree 1, item 2 degree 0
        let user_items = vec![vec![0], vec![0], vec![0, 1], vec![]];
        let s = NegativeSampler::from_user_items(SamplerKind::Pns { alpha: 1.0 }, 3, user_items).unwrap();
        let users = [0.0; 4];
        let items = [0.0; 3];
        let view = view_of(&users, &items);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 3];
        for _ in 0..40_000 {
            counts[s.sample_negative(3, 0, &view, &mut rng).unwrap() as usize] += 1;
        }
        assert_eq!(counts[2], 0);
        let ratio = counts[0] as f64 / counts[1] as f64;
        assert!((ratio - 3.0).abs() < 0.15, "{ratio}");
    }

    #[test]
    fn pns_with_zero_alpha_is_uniform_over_items() {
        let s = NegativeSampler::from_user_items(SamplerKind::Pns { alpha: 0.0 }, 4, vec![vec![0]]).unwrap();
        let users = [0.0];
        let items = [0.0; 4];
        let view = view_of(&users, &items);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut counts = [0usize; 4];
        for _ in 0..30_000 {
            counts[s.sample_negative(0, 0, &view, &mut rng).unwrap() as usize] += 1;
        }
        assert_eq!(counts[0], 0);
        for &c in &counts[1..] {
            assert!((c as f64 / 10_000.0 - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn saturated_user_errors() {
        let s = NegativeSampler::from_user_items(SamplerKind::Rns, 2, vec![vec![0, 1]]).unwrap();
        let users = [0.0];
        let items = [0.0; 2];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            s.sample_negative(0, 0, &view_of(&users, &items), &mut rng),
            Err(Error::NoNegative { user: 0 })
        ));
    }

    #[test]
    fn dense_user_falls_back_to_complement() {
        let items_seen: Vec<u32> = (0..9_999).collect();
        let s = NegativeSampler::from_user_items(SamplerKind::Rns, 10_000, vec![items_seen]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(s.uniform(0, &mut rng).unwrap(), 9_999);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(SamplerKind::from_name("dns", 0, 0.75, 1, 1).is_err());
        assert!(SamplerKind::from_name("dns-mn", 10, 0.75, 3, 2).is_err());
        assert!(SamplerKind::from_name("dns-mn", 10, 0.75, 0, 2).is_err());
        assert!(SamplerKind::from_name("pns", 10, -1.0, 1, 1).is_err());
        assert!(SamplerKind::from_name("mixgcf", 10, 0.75, 1, 1).is_err());
        assert_eq!(SamplerKind::from_name("dns", DEFAULT_POOL, 0.75, 1, 1).unwrap(), SamplerKind::Dns { pool: 10 });
    }

    #[test]
    fn same_seed_same_sequence() {
        let users = [0.3, -0.2];
        let items: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let view = EmbeddingView { users: &users, items: &items, dim: 2 };
        let s = NegativeSampler::from_user_items(SamplerKind::DnsMn { m: 2, n: 6 }, 20, vec![vec![1, 4, 7]]).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..100).map(|_| s.sample_negative(0, 1, &view, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }
}
