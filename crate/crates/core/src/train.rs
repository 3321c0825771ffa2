//! BPR training over a positive sample set.
//!
//! One epoch is a shuffled pass over every pair of the training set, so a
//! pair with multiplicity `m` contributes exactly `m` gradient terms per
//! epoch. Negatives for a mini-batch are drawn with the parameters as they
//! stand before that batch's update. Gradients of the batch-mean objective
//!
//! ```text
//! J = 1/B Σ [ w · softplus(-(s_up - s_un)) + l2/2 (|e_u|² + |e_p|² + |e_n|²) ]
//! ```
//!
//! are accumulated densely and applied with one optimizer step per batch.
//! The L2 term acts on base embeddings; scores use propagated embeddings for
//! the LightGCN backbone.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::SplitDataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, DEFAULT_KS};
use crate::model::{dot, Adjacency, Backbone, EmbeddingModel};
use crate::sampling::{NegativeSampler, SamplerKind};
use crate::tgraph::{instance_weights, PositiveSampleSet, WeightedBipartiteGraph};

/// `(-ln σ(margin), d/dmargin)` with the loss in softplus form.
pub fn bpr_loss(margin: f64) -> (f64, f64) {
    let x = -margin;
    let loss = x.max(0.0) + (-x.abs()).exp().ln_1p();
    (loss, -sigmoid(-margin))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Plain gradient descent, `θ -= lr · g`.
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochMode {
    /// One shuffled pass over every pair of the multiset.
    #[default]
    FullPass,
    /// As many draws from the multiset (with replacement) as it has distinct pairs.
    DistinctDraws,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneKind {
    Mf,
    LightGcn { layers: usize },
}

impl Default for BackboneKind {
    fn default() -> Self {
        BackboneKind::LightGcn { layers: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub l2: f64,
    pub epochs: usize,
    pub dim: usize,
    pub seed: u64,
    pub sampler: SamplerKind,
    pub backbone: BackboneKind,
    pub optimizer: OptimizerKind,
    pub epoch_mode: EpochMode,
    pub eval_every: usize,
    pub ks: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 2048,
            l2: 1e-4,
            epochs: 500,
            dim: 64,
            seed: 2024,
            sampler: SamplerKind::Rns,
            backbone: BackboneKind::default(),
            optimizer: OptimizerKind::Adam,
            epoch_mode: EpochMode::FullPass,
            eval_every: 10,
            ks: DEFAULT_KS.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be positive"));
        }
        if self.batch_size == 0 || self.dim == 0 || self.eval_every == 0 {
            return Err(Error::invalid("batch_size, dim and eval_every must be positive"));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::invalid("l2 must be finite and >= 0"));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::invalid("ks must be non-empty and positive"));
        }
        self.sampler.validate()
    }
}

/// Training pairs plus optional per-pair loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pairs: Vec<(u32, u32)>,
    weights: Option<Vec<f64>>,
    distinct: usize,
}

impl TrainingSet {
    pub fn from_pss(pss: &PositiveSampleSet) -> Self {
        let distinct = pss.pairs().iter().collect::<HashSet<_>>().len();
        Self {
            pairs: pss.pairs().to_vec(),
            weights: None,
            distinct,
        }
    }

    /// Original edge set, each pair once, with its decay weight as loss coefficient.
    pub fn weighted(graph: &WeightedBipartiteGraph, split: &SplitDataset) -> Result<Self> {
        let held_out: HashSet<(u32, u32)> = split.validation.pairs().chain(split.test.pairs()).collect();
        let w = instance_weights(graph);
        let pairs: Vec<(u32, u32)> = graph
            .edges()
            .iter()
            .map(|e| (e.user, e.item))
            .filter(|p| !held_out.contains(p))
            .collect();
        if pairs.is_empty() {
            return Err(Error::EmptyPositiveSet);
        }
        let weights = pairs.iter().map(|p| w[p]).collect();
        Ok(Self {
            distinct: pairs.len(),
            pairs,
            weights: Some(weights),
        })
    }

    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.pairs
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn weight(&self, idx: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[idx])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triple {
    pub user: u32,
    pub pos: u32,
    pub neg: u32,
    pub weight: f64,
}

/// Dense gradient buffers shaped like the base embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub users: Vec<f64>,
    pub items: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &EmbeddingModel) -> Self {
        Self {
            users: vec![0.0; model.num_users() * model.dim()],
            items: vec![0.0; model.num_items() * model.dim()],
        }
    }

    fn clear(&mut self) {
        self.users.fill(0.0);
        self.items.fill(0.0);
    }
}

/// Batch-mean regularized BPR objective and its gradient w.r.t. the base
/// embeddings. `grads` is overwritten.
pub fn batch_gradient(model: &EmbeddingModel, batch: &[Triple], l2: f64, grads: &mut Gradients) -> f64 {
    grads.clear();
    if batch.is_empty() {
        return 0.0;
    }
    let d = model.dim();
    let scale = 1.0 / batch.len() as f64;
    let view = model.view();
    let base = model.base();
    let mut loss = 0.0;

    // gradient w.r.t. the scoring embeddings
    let mut gu = vec![0.0; grads.users.len()];
    let mut gi = vec![0.0; grads.items.len()];
    for t in batch {
        let (eu, ep, en) = (view.user(t.user), view.item(t.pos), view.item(t.neg));
        let margin = dot(eu, ep) - dot(eu, en);
        let (l, dl) = bpr_loss(margin);
        loss += t.weight * l;
        let g = scale * t.weight * dl;
        let (u, p, n) = (t.user as usize * d, t.pos as usize * d, t.neg as usize * d);
        for k in 0..d {
            gu[u + k] += g * (ep[k] - en[k]);
            gi[p + k] += g * eu[k];
            gi[n + k] -= g * eu[k];
        }
    }
    match model.backbone() {
        Backbone::Mf => {
            grads.users.copy_from_slice(&gu);
            grads.items.copy_from_slice(&gi);
        }
        Backbone::LightGcn { layers, adjacency } => {
            let (bu, bi) = adjacency.layer_mean(&gu, &gi, d, *layers);
            grads.users.copy_from_slice(&bu);
            grads.items.copy_from_slice(&bi);
        }
    }

    if l2 > 0.0 {
        let r = scale * l2;
        for t in batch {
            let (bu, bp, bn) = (base.user(t.user), base.item(t.pos), base.item(t.neg));
            loss += 0.5 * l2 * (dot(bu, bu) + dot(bp, bp) + dot(bn, bn));
            let (u, p, n) = (t.user as usize * d, t.pos as usize * d, t.neg as usize * d);
            for k in 0..d {
                grads.users[u + k] += r * bu[k];
                grads.items[p + k] += r * bp[k];
                grads.items[n + k] += r * bn[k];
            }
        }
    }
    loss * scale
}

/// The objective of [`batch_gradient`] without the gradient.
pub fn batch_objective(model: &EmbeddingModel, batch: &[Triple], l2: f64) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let view = model.view();
    let base = model.base();
    let total: f64 = batch
        .iter()
        .map(|t| {
            let eu = view.user(t.user);
            let margin = dot(eu, view.item(t.pos)) - dot(eu, view.item(t.neg));
            let (bu, bp, bn) = (base.user(t.user), base.item(t.pos), base.item(t.neg));
            t.weight * bpr_loss(margin).0 + 0.5 * l2 * (dot(bu, bu) + dot(bp, bp) + dot(bn, bn))
        })
        .sum();
    total / batch.len() as f64
}

/// Dense Adam moments for both embedding tables.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Gradients,
    v: Gradients,
}

impl AdamState {
    pub fn new(model: &EmbeddingModel) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Gradients::zeros_like(model),
            v: Gradients::zeros_like(model),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn scale(&self, v: f64, g: f64) -> f64 {
        let bc2 = 1.0 - self.beta2.powi((self.step + 1) as i32);
        let v = self.beta2 * v + (1.0 - self.beta2) * g * g;
        1.0 / ((v / bc2).sqrt() + self.eps)
    }

    /// Diagonal `1 / (sqrt(v̂) + eps)` that a step with `grads` would apply,
    /// with `v̂` the bias-corrected second moment after absorbing `grads`.
    /// Does not advance the state.
    pub fn preconditioner(&self, grads: &Gradients) -> Gradients {
        let diag = |v: &[f64], g: &[f64]| -> Vec<f64> { v.iter().zip(g).map(|(v, g)| self.scale(*v, *g)).collect() };
        Gradients {
            users: diag(&self.v.users, &grads.users),
            items: diag(&self.v.items, &grads.items),
        }
    }

    /// One entry of [`preconditioner`](Self::preconditioner) for the user table.
    pub fn user_scale(&self, j: usize, g: f64) -> f64 {
        self.scale(self.v.users[j], g)
    }

    /// One entry of [`preconditioner`](Self::preconditioner) for the item table.
    pub fn item_scale(&self, j: usize, g: f64) -> f64 {
        self.scale(self.v.items[j], g)
    }

    fn apply(&mut self, model: &mut EmbeddingModel, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (users, items) = model.params_mut();
        let update = |params: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for j in 0..params.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                params[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
            }
        };
        update(users, &grads.users, &mut self.m.users, &mut self.v.users);
        update(items, &grads.items, &mut self.m.items, &mut self.v.items);
    }
}

fn sgd_apply(model: &mut EmbeddingModel, grads: &Gradients, lr: f64) {
    let (users, items) = model.params_mut();
    users.iter_mut().zip(&grads.users).for_each(|(p, g)| *p -= lr * g);
    items.iter_mut().zip(&grads.items).for_each(|(p, g)| *p -= lr * g);
}

/// One evaluated epoch: loss and validation metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub metrics: BTreeMap<usize, (f64, f64)>,
    pub wall_ms: u128,
}

impl EpochRecord {
    pub fn recall(&self, k: usize) -> f64 {
        self.metrics.get(&k).map_or(0.0, |m| m.0)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.metrics.get(&k).map_or(0.0, |m| m.1)
    }

    /// `{epoch, loss, recall@k, ndcg@k…, wall_ms}`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut doc = serde_json::Map::new();
        doc.insert("epoch".into(), self.epoch.into());
        doc.insert("loss".into(), self.loss.into());
        for (k, (r, n)) in &self.metrics {
            doc.insert(format!("recall@{k}"), (*r).into());
            doc.insert(format!("ndcg@{k}"), (*n).into());
        }
        doc.insert("wall_ms".into(), (self.wall_ms as u64).into());
        serde_json::Value::Object(doc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub instances: usize,
    pub batches: usize,
}

/// Hooks into the training loop. All methods default to no-ops.
pub trait TrainObserver {
    /// Called once per training instance, before the batch update.
    fn on_instance(&mut self, _user: u32, _pos: u32, _neg: u32) {}
    fn on_epoch(&mut self, _record: &EpochRecord) {}
    fn on_improvement(&mut self, _epoch: usize, _model: &EmbeddingModel) {}
}

impl TrainObserver for () {}

/// Optimizer state carried across epochs.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Adam(AdamState),
    Sgd,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, model: &EmbeddingModel) -> Self {
        match kind {
            OptimizerKind::Adam => OptimizerState::Adam(AdamState::new(model)),
            OptimizerKind::Sgd => OptimizerState::Sgd,
        }
    }

    fn apply(&mut self, model: &mut EmbeddingModel, grads: &Gradients, lr: f64) {
        match self {
            OptimizerState::Adam(state) => state.apply(model, grads, lr),
            OptimizerState::Sgd => sgd_apply(model, grads, lr),
        }
    }
}

/// Runs one epoch over `set`. `epoch` only labels errors.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<R: Rng>(
    model: &mut EmbeddingModel,
    set: &TrainingSet,
    config: &TrainConfig,
    optimizer: &mut OptimizerState,
    sampler: &NegativeSampler,
    rng: &mut R,
    epoch: usize,
    observer: &mut dyn TrainObserver,
) -> Result<EpochStats> {
    if set.is_empty() {
        return Err(Error::EmptyPositiveSet);
    }
    let order: Vec<usize> = match config.epoch_mode {
        EpochMode::FullPass => {
            let mut idx: Vec<usize> = (0..set.len()).collect();
            idx.shuffle(rng);
            idx
        }
        EpochMode::DistinctDraws => (0..set.distinct).map(|_| rng.random_range(0..set.len())).collect(),
    };

    let mut grads = Gradients::zeros_like(model);
    let mut batch = Vec::with_capacity(config.batch_size);
    let mut loss_sum = 0.0;
    let mut batches = 0;
    for (b, chunk) in order.chunks(config.batch_size).enumerate() {
        batch.clear();
        {
            let view = model.view();
            for &idx in chunk {
                let (u, p) = set.pairs[idx];
                let n = sampler.sample_negative(u, p, &view, rng)?;
                observer.on_instance(u, p, n);
                batch.push(Triple { user: u, pos: p, neg: n, weight: set.weight(idx) });
            }
        }
        let loss = batch_gradient(model, &batch, config.l2, &mut grads);
        optimizer.apply(model, &grads, config.lr);
        if !loss.is_finite() || !model.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: b,
                detail: format!("batch loss {loss}"),
            });
        }
        loss_sum += loss * chunk.len() as f64;
        batches += 1;
    }
    Ok(EpochStats {
        loss: loss_sum / order.len() as f64,
        instances: order.len(),
        batches,
    })
}

/// Backbone for `config` over the split's training edges.
pub fn build_backbone(split: &SplitDataset, kind: BackboneKind) -> Result<Backbone> {
    Ok(match kind {
        BackboneKind::Mf => Backbone::Mf,
        BackboneKind::LightGcn { layers } => Backbone::LightGcn {
            layers,
            adjacency: Arc::new(Adjacency::new(split.num_users(), split.num_items(), split.train.pairs())?),
        },
    })
}

/// Seeded stream for shuffling and negative sampling, independent of the
/// initialization stream.
pub fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: EmbeddingModel,
    pub history: Vec<EpochRecord>,
    /// Mean training objective of every epoch.
    pub losses: Vec<f64>,
    /// Epoch (1-based) of the returned model; 0 for the initialization.
    pub best_epoch: usize,
}

/// Trains for `config.epochs` epochs, evaluates on validation every
/// `eval_every` epochs and returns the model with the best validation
/// Recall@first-k (Recall@20 by default). With an empty validation split the
/// final model is returned.
pub fn fit(split: &SplitDataset, set: &TrainingSet, config: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<FitResult> {
    config.validate()?;
    let backbone = build_backbone(split, config.backbone)?;
    let mut model = EmbeddingModel::init_xavier(split.num_users(), split.num_items(), config.dim, config.seed, backbone)?;
    let sampler = NegativeSampler::new(config.sampler, &split.train)?;
    let mut optimizer = OptimizerState::new(config.optimizer, &model);
    let mut rng = training_rng(config.seed);
    let select_k = config.ks[0];

    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_recall = f64::NEG_INFINITY;
    let mut history = Vec::new();
    let mut losses = Vec::with_capacity(config.epochs);
    let started = Instant::now();
    for epoch in 1..=config.epochs {
        let stats = train_epoch(&mut model, set, config, &mut optimizer, &sampler, &mut rng, epoch, observer)?;
        losses.push(stats.loss);
        if epoch % config.eval_every == 0 {
            let report = evaluate(&model, &split.train, &split.validation, &config.ks)?;
            let record = EpochRecord {
                epoch,
                loss: stats.loss,
                metrics: report.metrics.iter().map(|(k, m)| (*k, (m.recall, m.ndcg))).collect(),
                wall_ms: started.elapsed().as_millis(),
            };
            observer.on_epoch(&record);
            if !split.validation.is_empty() && record.recall(select_k) > best_recall {
                best_recall = record.recall(select_k);
                best = model.clone();
                best_epoch = epoch;
                observer.on_improvement(epoch, &best);
            }
            history.push(record);
        }
    }
    if split.validation.is_empty() || best_recall == f64::NEG_INFINITY {
        best = model;
        best_epoch = config.epochs;
    }
    Ok(FitResult {
        model: best,
        history,
        losses,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{timestamp_split, Interaction, InteractionLog, SplitOptions, Vocabulary};
    use crate::eval::evaluate;
    use crate::model::Backbone;
    use crate::tgraph::{build_weighted_graph, filtrate, DecaySpec, RangeMode};

    #[test]
    fn bpr_loss_at_zero() {
        let (l, d) = bpr_loss(0.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(d, -0.5);
    }

    #[test]
    fn bpr_loss_asymptotes() {
        assert!(bpr_loss(800.0).0 == 0.0);
        assert!(bpr_loss(40.0).0 < 1e-17);
        let (l, d) = bpr_loss(-50.0);
        // ln(1 + e^50) = 50 + ln(1 + e^-50)
        assert!((l - 50.0).abs() < 1e-15);
        assert!((d + 1.0).abs() < 1e-15);
        assert!(bpr_loss(-1e6).0.is_finite());
    }

    fn tiny_split() -> SplitDataset {
        let mut rows = Vec::new();
        for u in 0..6u32 {
            for j in 0..5u32 {
                rows.push(Interaction::new(u, (u * 3 + j * 2) % 12, (j as i64 + u as i64) * 86_400));
            }
        }
        let log = InteractionLog::from_interactions(rows, Arc::new(Vocabulary::numbered(6)), Arc::new(Vocabulary::numbered(12))).unwrap();
        timestamp_split(&log, &SplitOptions::default()).unwrap()
    }

    fn small_config(backbone: BackboneKind) -> TrainConfig {
        TrainConfig {
            epochs: 4,
            dim: 4,
            batch_size: 8,
            eval_every: 2,
            backbone,
            ..Default::default()
        }
    }

    #[derive(Default)]
    struct Counter(BTreeMap<(u32, u32), usize>);

    impl TrainObserver for Counter {
        fn on_instance(&mut self, u: u32, p: u32, _n: u32) {
            *self.0.entry((u, p)).or_default() += 1;
        }
    }

    #[test]
    fn single_pair_sgd_step_raises_margin() {
        let mut model = EmbeddingModel::init_xavier(1, 3, 8, 5, Backbone::Mf).unwrap();
        let sampler = NegativeSampler::from_user_items(SamplerKind::Rns, 3, vec![vec![0, 1]]).unwrap();
        let set = TrainingSet::from_pss(&PositiveSampleSet::from_pairs(vec![(0, 0)]));
        let config = TrainConfig { optimizer: OptimizerKind::Sgd, lr: 0.01, l2: 0.0, ..Default::default() };
        let before = model.score(0, 0).unwrap() - model.score(0, 2).unwrap();
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, &model);
        train_epoch(&mut model, &set, &config, &mut opt, &sampler, &mut training_rng(0), 1, &mut ()).unwrap();
        let after = model.score(0, 0).unwrap() - model.score(0, 2).unwrap();
        assert!(after > before);
    }

    #[test]
    fn multiplicity_sets_gradient_contributions() {
        let split = tiny_split();
        let g = build_weighted_graph(&split.train, &DecaySpec::exponential(0.2, 86_400)).unwrap();
        let layers = filtrate(&g, 3, RangeMode::UnitInterval).unwrap();
        let pss = crate::tgraph::build_pss(&layers, &split).unwrap();
        let set = TrainingSet::from_pss(&pss);
        let config = small_config(BackboneKind::Mf);
        let mut counter = Counter::default();
        fit(&split, &set, &config, &mut counter).unwrap();
        for (pair, m) in pss.multiplicity() {
            assert_eq!(counter.0[&pair], m * config.epochs);
        }
    }

    #[test]
    fn flat_weighted_bpr_equals_standard() {
        let split = tiny_split();
        let g = build_weighted_graph(&split.train, &DecaySpec::exponential(0.0, 86_400)).unwrap();
        let weighted = TrainingSet::weighted(&g, &split).unwrap();
        let layers = filtrate(&g, 1, RangeMode::UnitInterval).unwrap();
        let plain = TrainingSet::from_pss(&crate::tgraph::build_pss(&layers, &split).unwrap());
        assert_eq!(weighted.pairs(), plain.pairs());
        for backbone in [BackboneKind::Mf, BackboneKind::LightGcn { layers: 2 }] {
            let config = small_config(backbone);
            let a = fit(&split, &weighted, &config, &mut ()).unwrap();
            let b = fit(&split, &plain, &config, &mut ()).unwrap();
            let (mut ca, mut cb) = (Vec::new(), Vec::new());
            a.model.write_checkpoint(&mut ca).unwrap();
            b.model.write_checkpoint(&mut cb).unwrap();
            assert_eq!(ca, cb);
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let split = tiny_split();
        let set = TrainingSet::from_pss(&PositiveSampleSet::from_pairs(split.train.pairs().collect()));
        let config = TrainConfig { epochs: 0, ..small_config(BackboneKind::Mf) };
        let out = fit(&split, &set, &config, &mut ()).unwrap();
        assert!(out.history.is_empty());
        let init = EmbeddingModel::init_xavier(6, 12, 4, config.seed, Backbone::Mf).unwrap();
        assert_eq!(out.model, init);
    }

    #[test]
    fn history_tracks_eval_cadence_and_best() {
        let split = tiny_split();
        let set = TrainingSet::from_pss(&PositiveSampleSet::from_pairs(split.train.pairs().collect()));
        let config = TrainConfig { epochs: 7, eval_every: 2, ..small_config(BackboneKind::LightGcn { layers: 1 }) };
        let out = fit(&split, &set, &config, &mut ()).unwrap();
        assert_eq!(out.history.len(), 3);
        assert_eq!(out.losses.len(), 7);
        let best = out.history.iter().map(|r| r.recall(20)).fold(f64::NEG_INFINITY, f64::max);
        let again = evaluate(&out.model, &split.train, &split.validation, &config.ks).unwrap();
        assert_eq!(again.recall(20), best);
        let rec = out.history[0].to_json();
        for key in ["epoch", "loss", "recall@20", "ndcg@20", "recall@30", "ndcg@30", "wall_ms"] {
            assert!(rec.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn identical_config_identical_model() {
        let split = tiny_split();
        let set = TrainingSet::from_pss(&PositiveSampleSet::from_pairs(split.train.pairs().collect()));
        let config = TrainConfig { sampler: SamplerKind::Dns { pool: 3 }, ..small_config(BackboneKind::LightGcn { layers: 2 }) };
        let a = fit(&split, &set, &config, &mut ()).unwrap();
        let b = fit(&split, &set, &config, &mut ()).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn distinct_draws_mode_uses_distinct_count() {
        let split = tiny_split();
        let pairs: Vec<_> = split.train.pairs().flat_map(|p| [p, p]).collect();
        let set = TrainingSet::from_pss(&PositiveSampleSet::from_pairs(pairs));
        let config = TrainConfig { epoch_mode: EpochMode::DistinctDraws, ..small_config(BackboneKind::Mf) };
        let model = EmbeddingModel::init_xavier(6, 12, 4, 1, Backbone::Mf).unwrap();
        let mut m = model.clone();
        let sampler = NegativeSampler::new(config.sampler, &split.train).unwrap();
        let mut opt = OptimizerState::new(OptimizerKind::Adam, &m);
        let stats = train_epoch(&mut m, &set, &config, &mut opt, &sampler, &mut training_rng(1), 1, &mut ()).unwrap();
        assert_eq!(stats.instances, split.train.len());
    }

    #[test]
    fn divergence_is_reported() {
        let split = tiny_split();
        let set = TrainingSet::from_pss(&PositiveSampleSet::from_pairs(split.train.pairs().collect()));
        let config = TrainConfig { optimizer: OptimizerKind::Sgd, lr: 1e200, ..small_config(BackboneKind::Mf) };
        let err = fit(&split, &set, &config, &mut ()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { epoch: 1, .. }), "{err:?}");
    }

    #[test]
    fn adam_preconditioner_is_positive() {
        let model = EmbeddingModel::init_xavier(2, 3, 2, 0, Backbone::Mf).unwrap();
        let adam = AdamState::new(&model);
        let mut g = Gradients::zeros_like(&model);
        g.users[0] = 0.5;
        let d = adam.preconditioner(&g);
        assert!(d.users.iter().chain(&d.items).all(|&x| x > 0.0 && x.is_finite()));
        // first step: v̂ = g², so the rescaled gradient is ~sign(g)
        assert!((d.users[0] * 0.5 - 1.0).abs() < 1e-6);
    }
}
