//! Embedding backbones: matrix factorization and LightGCN-style propagation.
//!
//! Embeddings are stored row-major in flat `Vec<f64>` buffers. For the
//! propagation backbone the final embeddings are the layer mean
//! `(E0 + ÂE0 + … + Â^L E0) / (L + 1)` over the symmetrically normalized
//! bipartite adjacency `Â = D^-1/2 A D^-1/2`; they are cached lazily and the
//! cache is dropped whenever parameters are borrowed mutably.

use std::io::{BufRead, Write};
use std::sync::{Arc, OnceLock};

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Symmetrically normalized user-item adjacency in CSR form, both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    num_users: usize,
    num_items: usize,
    edges: Vec<(u32, u32)>,
    user_ptr: Vec<usize>,
    user_nbr: Vec<u32>,
    user_coef: Vec<f64>,
    item_ptr: Vec<usize>,
    item_nbr: Vec<u32>,
    item_coef: Vec<f64>,
}

impl Adjacency {
    /// Builds the operator from (deduplicated) interaction pairs.
    pub fn new(num_users: usize, num_items: usize, pairs: impl IntoIterator<Item = (u32, u32)>) -> Result<Self> {
        let mut edges: Vec<(u32, u32)> = pairs.into_iter().collect();
        edges.sort_unstable();
        edges.dedup();
        for &(u, i) in &edges {
            if u as usize >= num_users {
                return Err(Error::IndexOutOfRange { kind: "user", index: u as usize, size: num_users });
            }
            if i as usize >= num_items {
                return Err(Error::IndexOutOfRange { kind: "item", index: i as usize, size: num_items });
            }
        }
        let mut user_deg = vec![0usize; num_users];
        let mut item_deg = vec![0usize; num_items];
        for &(u, i) in &edges {
            user_deg[u as usize] += 1;
            item_deg[i as usize] += 1;
        }
        let coef = |u: u32, i: u32| 1.0 / ((user_deg[u as usize] * item_deg[i as usize]) as f64).sqrt();

        let mut user_ptr = vec![0usize; num_users + 1];
        for u in 0..num_users {
            user_ptr[u + 1] = user_ptr[u] + user_deg[u];
        }
        // edges are sorted by user, so the user side is already in CSR order
        let user_nbr: Vec<u32> = edges.iter().map(|&(_, i)| i).collect();
        let user_coef: Vec<f64> = edges.iter().map(|&(u, i)| coef(u, i)).collect();

        let mut item_ptr = vec![0usize; num_items + 1];
        for i in 0..num_items {
            item_ptr[i + 1] = item_ptr[i] + item_deg[i];
        }
        let mut fill = item_ptr.clone();
        let mut item_nbr = vec![0u32; edges.len()];
        let mut item_coef = vec![0f64; edges.len()];
        for &(u, i) in &edges {
            let slot = &mut fill[i as usize];
            item_nbr[*slot] = u;
            item_coef[*slot] = coef(u, i);
            *slot += 1;
        }
        Ok(Self {
            num_users,
            num_items,
            edges,
            user_ptr,
            user_nbr,
            user_coef,
            item_ptr,
            item_nbr,
            item_coef,
        })
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// One application of `Â`: users gather from items and items from users.
    fn apply(&self, users: &[f64], items: &[f64], dim: usize, users_out: &mut [f64], items_out: &mut [f64]) {
        for u in 0..self.num_users {
            let out = &mut users_out[u * dim..(u + 1) * dim];
            out.fill(0.0);
            for k in self.user_ptr[u]..self.user_ptr[u + 1] {
                let i = self.user_nbr[k] as usize;
                axpy(self.user_coef[k], &items[i * dim..(i + 1) * dim], out);
            }
        }
        for i in 0..self.num_items {
            let out = &mut items_out[i * dim..(i + 1) * dim];
            out.fill(0.0);
            for k in self.item_ptr[i]..self.item_ptr[i + 1] {
                let u = self.item_nbr[k] as usize;
                axpy(self.item_coef[k], &users[u * dim..(u + 1) * dim], out);
            }
        }
    }

    /// Layer mean `(X + ÂX + … + Â^L X) / (L + 1)`.
    ///
    /// `Â` is symmetric, so the same map is its own adjoint and also carries
    /// gradients from final embeddings back to base embeddings.
    pub fn layer_mean(&self, users: &[f64], items: &[f64], dim: usize, layers: usize) -> (Vec<f64>, Vec<f64>) {
        let mut acc_u = users.to_vec();
        let mut acc_i = items.to_vec();
        let mut cur_u = users.to_vec();
        let mut cur_i = items.to_vec();
        let mut next_u = vec![0.0; users.len()];
        let mut next_i = vec![0.0; items.len()];
        for _ in 0..layers {
            self.apply(&cur_u, &cur_i, dim, &mut next_u, &mut next_i);
            std::mem::swap(&mut cur_u, &mut next_u);
            std::mem::swap(&mut cur_i, &mut next_i);
            acc_u.iter_mut().zip(&cur_u).for_each(|(a, c)| *a += c);
            acc_i.iter_mut().zip(&cur_i).for_each(|(a, c)| *a += c);
        }
        let scale = 1.0 / (layers + 1) as f64;
        acc_u.iter_mut().for_each(|a| *a *= scale);
        acc_i.iter_mut().for_each(|a| *a *= scale);
        (acc_u, acc_i)
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backbone {
    Mf,
    LightGcn { layers: usize, adjacency: Arc<Adjacency> },
}

impl Backbone {
    pub fn lightgcn(layers: usize, adjacency: Adjacency) -> Self {
        Backbone::LightGcn {
            layers,
            adjacency: Arc::new(adjacency),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Backbone::Mf => "mf",
            Backbone::LightGcn { .. } => "lightgcn",
        }
    }
}

/// Borrowed view of the embeddings used for scoring.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingView<'a> {
    pub users: &'a [f64],
    pub items: &'a [f64],
    pub dim: usize,
}

impl<'a> EmbeddingView<'a> {
    pub fn user(&self, u: u32) -> &'a [f64] {
        &self.users[u as usize * self.dim..(u as usize + 1) * self.dim]
    }

    pub fn item(&self, i: u32) -> &'a [f64] {
        &self.items[i as usize * self.dim..(i as usize + 1) * self.dim]
    }

    pub fn score(&self, u: u32, i: u32) -> f64 {
        dot(self.user(u), self.item(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Propagated {
    users: Vec<f64>,
    items: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    num_users: usize,
    num_items: usize,
    dim: usize,
    seed: u64,
    user_emb: Vec<f64>,
    item_emb: Vec<f64>,
    backbone: Backbone,
    cache: OnceLock<Propagated>,
}

impl PartialEq for EmbeddingModel {
    fn eq(&self, other: &Self) -> bool {
        self.num_users == other.num_users
            && self.num_items == other.num_items
            && self.dim == other.dim
            && self.seed == other.seed
            && self.backbone == other.backbone
            && self.user_emb == other.user_emb
            && self.item_emb == other.item_emb
    }
}

/// Half-width of the Xavier uniform range for a `dim`-wide embedding row.
pub fn xavier_bound(dim: usize) -> f64 {
    (6.0 / (2 * dim) as f64).sqrt()
}

impl EmbeddingModel {
    /// Xavier-uniform initialization, fully determined by `seed`.
    pub fn init_xavier(num_users: usize, num_items: usize, dim: usize, seed: u64, backbone: Backbone) -> Result<Self> {
        if num_users == 0 || num_items == 0 || dim == 0 {
            return Err(Error::invalid("model sizes must be positive"));
        }
        let a = xavier_bound(dim);
        let dist = Uniform::new_inclusive(-a, a).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let user_emb = (0..num_users * dim).map(|_| dist.sample(&mut rng)).collect();
        let item_emb = (0..num_items * dim).map(|_| dist.sample(&mut rng)).collect();
        Self::from_parts(num_users, num_items, dim, seed, user_emb, item_emb, backbone)
    }

    pub fn from_parts(
        num_users: usize,
        num_items: usize,
        dim: usize,
        seed: u64,
        user_emb: Vec<f64>,
        item_emb: Vec<f64>,
        backbone: Backbone,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        if user_emb.len() != num_users * dim || item_emb.len() != num_items * dim {
            return Err(Error::invalid("embedding buffer sizes do not match model shape"));
        }
        if let Backbone::LightGcn { adjacency, .. } = &backbone {
            if adjacency.num_users() != num_users || adjacency.num_items() != num_items {
                return Err(Error::invalid("adjacency shape does not match model shape"));
            }
        }
        Ok(Self {
            num_users,
            num_items,
            dim,
            seed,
            user_emb,
            item_emb,
            backbone,
            cache: OnceLock::new(),
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Base (layer-0) embeddings.
    pub fn base(&self) -> EmbeddingView<'_> {
        EmbeddingView {
            users: &self.user_emb,
            items: &self.item_emb,
            dim: self.dim,
        }
    }

    /// Mutable base embeddings `(users, items)`. Invalidates the propagation cache.
    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        self.cache.take();
        (&mut self.user_emb, &mut self.item_emb)
    }

    /// Embeddings used for scoring: base rows for MF, propagated rows otherwise.
    pub fn view(&self) -> EmbeddingView<'_> {
        match &self.backbone {
            Backbone::Mf => self.base(),
            Backbone::LightGcn { layers, adjacency } => {
                let p = self.cache.get_or_init(|| {
                    let (users, items) = adjacency.layer_mean(&self.user_emb, &self.item_emb, self.dim, *layers);
                    Propagated { users, items }
                });
                EmbeddingView {
                    users: &p.users,
                    items: &p.items,
                    dim: self.dim,
                }
            }
        }
    }

    /// Propagated `(users, items)` embeddings; the base embeddings for MF.
    pub fn propagate(&self) -> (Vec<f64>, Vec<f64>) {
        let v = self.view();
        (v.users.to_vec(), v.items.to_vec())
    }

    fn check_user(&self, u: u32) -> Result<()> {
        if (u as usize) < self.num_users {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange { kind: "user", index: u as usize, size: self.num_users })
        }
    }

    fn check_item(&self, p: u32) -> Result<()> {
        if (p as usize) < self.num_items {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange { kind: "item", index: p as usize, size: self.num_items })
        }
    }

    pub fn score(&self, u: u32, p: u32) -> Result<f64> {
        self.check_user(u)?;
        self.check_item(p)?;
        Ok(self.view().score(u, p))
    }

    /// Scores of `u` against every item.
    pub fn score_all(&self, u: u32) -> Result<Vec<f64>> {
        self.check_user(u)?;
        let view = self.view();
        let eu = view.user(u);
        Ok((0..self.num_items as u32).map(|i| dot(eu, view.item(i))).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.user_emb.iter().chain(&self.item_emb).all(|x| x.is_finite())
    }

    /// Text checkpoint. Floats are written as the hex of their bit patterns so
    /// a reload is bit-exact.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "tfps-checkpoint 1")?;
        writeln!(out, "dim {}", self.dim)?;
        writeln!(out, "seed {}", self.seed)?;
        match &self.backbone {
            Backbone::Mf => writeln!(out, "backbone mf")?,
            Backbone::LightGcn { layers, .. } => writeln!(out, "backbone lightgcn {layers}")?,
        }
        writeln!(out, "users {}", self.num_users)?;
        writeln!(out, "items {}", self.num_items)?;
        if let Backbone::LightGcn { adjacency, .. } = &self.backbone {
            writeln!(out, "edges {}", adjacency.edges().len())?;
            for (u, i) in adjacency.edges() {
                writeln!(out, "{u} {i}")?;
            }
        }
        for (name, buf) in [("user_emb", &self.user_emb), ("item_emb", &self.item_emb)] {
            writeln!(out, "{name}")?;
            for row in buf.chunks(self.dim) {
                let line: Vec<String> = row.iter().map(|x| format!("{:016x}", x.to_bits())).collect();
                writeln!(out, "{}", line.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Checkpoint("unexpected end of checkpoint".into()))?
                .map_err(Error::from)
        };
        let bad = |what: &str| Error::Checkpoint(format!("malformed {what}"));
        if next()? != "tfps-checkpoint 1" {
            return Err(Error::Checkpoint("unsupported checkpoint header".into()));
        }
        let field = |line: String, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_owned)
                .ok_or_else(|| bad(key))
        };
        let dim: usize = field(next()?, "dim")?.parse().map_err(|_| bad("dim"))?;
        let seed: u64 = field(next()?, "seed")?.parse().map_err(|_| bad("seed"))?;
        let backbone_line = field(next()?, "backbone")?;
        let num_users: usize = field(next()?, "users")?.parse().map_err(|_| bad("users"))?;
        let num_items: usize = field(next()?, "items")?.parse().map_err(|_| bad("items"))?;
        let backbone = match backbone_line.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["mf"] => Backbone::Mf,
            ["lightgcn", layers] => {
                let layers: usize = layers.parse().map_err(|_| bad("backbone"))?;
                let count: usize = field(next()?, "edges")?.parse().map_err(|_| bad("edges"))?;
                let mut edges = Vec::with_capacity(count);
                for _ in 0..count {
                    let line = next()?;
                    let mut it = line.split_whitespace().map(str::parse::<u32>);
                    match (it.next(), it.next()) {
                        (Some(Ok(u)), Some(Ok(i))) => edges.push((u, i)),
                        _ => return Err(bad("edge")),
                    }
                }
                Backbone::lightgcn(layers, Adjacency::new(num_users, num_items, edges)?)
            }
            _ => return Err(bad("backbone")),
        };
        let mut read_matrix = |name: &str, rows: usize| -> Result<Vec<f64>> {
            if next()? != name {
                return Err(bad(name));
            }
            let mut buf = Vec::with_capacity(rows * dim);
            for _ in 0..rows {
                let line = next()?;
                let before = buf.len();
                for word in line.split_whitespace() {
                    let bits = u64::from_str_radix(word, 16).map_err(|_| bad(name))?;
                    buf.push(f64::from_bits(bits));
                }
                if buf.len() - before != dim {
                    return Err(bad(name));
                }
            }
            Ok(buf)
        };
        let user_emb = read_matrix("user_emb", num_users)?;
        let item_emb = read_matrix("item_emb", num_items)?;
        Self::from_parts(num_users, num_items, dim, seed, user_emb, item_emb, backbone)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mf(users: Vec<f64>, items: Vec<f64>, dim: usize) -> EmbeddingModel {
        EmbeddingModel::from_parts(users.len() / dim, items.len() / dim, dim, 0, users, items, Backbone::Mf).unwrap()
    }

    #[test]
    fn xavier_is_deterministic_per_seed() {
        let a = EmbeddingModel::init_xavier(5, 7, 8, 42, Backbone::Mf).unwrap();
        let b = EmbeddingModel::init_xavier(5, 7, 8, 42, Backbone::Mf).unwrap();
        let c = EmbeddingModel::init_xavier(5, 7, 8, 43, Backbone::Mf).unwrap();
        assert_eq!(a, b);
        assert!(a.base().users.iter().zip(c.base().users).any(|(x, y)| x != y));
    }

    #[test]
    fn xavier_respects_bound() {
        let m = EmbeddingModel::init_xavier(50, 80, 64, 7, Backbone::Mf).unwrap();
        // sqrt(6 / 128)
        let a = 0.216_506_350_946_109_66;
        assert!((xavier_bound(64) - a).abs() < 1e-15);
        assert!(m.base().users.iter().chain(m.base().items).all(|x| x.abs() <= a));
        // the range is actually used
        let max = m.base().users.iter().fold(0f64, |acc, x| acc.max(x.abs()));
        assert!(max > 0.9 * a);
    }

    #[test]
    fn zero_user_scores_zero() {
        let m = mf(vec![0.0, 0.0], vec![1.0, 2.0, -3.0, 4.0], 2);
        assert_eq!(m.score_all(0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn unit_vectors_score_one() {
        let m = mf(vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], 3);
        assert_eq!(m.score(0, 0).unwrap(), 1.0);
    }

    #[test]
    fn out_of_range_indices_error() {
        let m = mf(vec![1.0], vec![1.0], 1);
        assert!(m.score(1, 0).is_err());
        assert!(m.score(0, 1).is_err());
        assert!(m.score_all(3).is_err());
    }

    #[test]
    fn score_all_agrees_with_score() {
        let adj = Adjacency::new(6, 9, [(0, 1), (1, 2), (2, 3), (3, 3), (4, 8), (5, 0), (0, 4)]).unwrap();
        for backbone in [Backbone::Mf, Backbone::lightgcn(2, adj)] {
            let m = EmbeddingModel::init_xavier(6, 9, 4, 3, backbone).unwrap();
            for u in 0..6 {
                let all = m.score_all(u).unwrap();
                assert_eq!(all.len(), 9);
                for p in 0..9 {
                    assert_eq!(all[p as usize], m.score(u, p).unwrap());
                }
            }
        }
    }

    #[test]
    fn zero_layers_is_identity() {
        let adj = Adjacency::new(2, 2, [(0, 0), (1, 1), (0, 1)]).unwrap();
        let m = EmbeddingModel::init_xavier(2, 2, 3, 1, Backbone::lightgcn(0, adj)).unwrap();
        let (u, i) = m.propagate();
        assert_eq!(u, m.base().users);
        assert_eq!(i, m.base().items);
    }

    #[test]
    fn single_edge_one_layer_averages_endpoints() {
        let adj = Adjacency::new(1, 1, [(0, 0)]).unwrap();
        let m = EmbeddingModel::from_parts(1, 1, 2, 0, vec![1.0, 3.0], vec![5.0, -1.0], Backbone::lightgcn(1, adj)).unwrap();
        let (u, i) = m.propagate();
        assert_eq!(u, vec![3.0, 1.0]);
        assert_eq!(i, vec![3.0, 1.0]);
    }

    #[test]
    fn isolated_node_is_scaled_base() {
        // user 1 and item 1 have no edges
        let adj = Adjacency::new(2, 2, [(0, 0)]).unwrap();
        let m = EmbeddingModel::from_parts(2, 2, 1, 0, vec![1.0, 6.0], vec![2.0, 9.0], Backbone::lightgcn(2, adj)).unwrap();
        let (u, i) = m.propagate();
        assert_eq!(u[1], 2.0);
        assert_eq!(i[1], 3.0);
        assert!(u.iter().chain(&i).all(|x| x.is_finite()));
    }

    #[test]
    fn cache_tracks_parameter_updates() {
        let adj = Adjacency::new(2, 2, [(0, 0), (1, 1), (0, 1)]).unwrap();
        let mut m = EmbeddingModel::init_xavier(2, 2, 3, 1, Backbone::lightgcn(3, adj)).unwrap();
        let before = m.score(0, 1).unwrap();
        m.params_mut().1[3] += 1.0;
        let after = m.score(0, 1).unwrap();
        assert_ne!(before, after);
        let fresh = EmbeddingModel::from_parts(
            2, 2, 3, 1, m.base().users.to_vec(), m.base().items.to_vec(), m.backbone().clone(),
        )
        .unwrap();
        assert_eq!(fresh.score(0, 1).unwrap(), after);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let adj = Adjacency::new(3, 4, [(0, 0), (1, 3), (2, 1)]).unwrap();
        for backbone in [Backbone::Mf, Backbone::lightgcn(3, adj)] {
            let m = EmbeddingModel::init_xavier(3, 4, 5, 99, backbone).unwrap();
            let mut buf = Vec::new();
            m.write_checkpoint(&mut buf).unwrap();
            let back = EmbeddingModel::read_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let m = EmbeddingModel::init_xavier(3, 4, 5, 99, Backbone::Mf).unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        buf.truncate(buf.len() / 2);
        assert!(EmbeddingModel::read_checkpoint(buf.as_slice()).is_err());
    }
}
