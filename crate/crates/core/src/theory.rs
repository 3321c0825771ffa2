//! Empirical checks of the one-step margin argument behind layer enhancement.
//!
//! For the MF backbone the margin `Δ = e_u·(e_p − e_n)` has the closed-form
//! gradient `(e_p − e_n, e_u, −e_u)`, so a single BPR step and its first-order
//! prediction `η σ(−Δ) ∇Δᵀ D ∇Δ` can be computed exactly.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::SplitDataset;
use crate::error::{Error, Result};
use crate::model::{dot, Backbone, EmbeddingModel};
use crate::sampling::NegativeSampler;
use crate::train::{
    build_backbone, sigmoid, train_epoch, training_rng, AdamState, OptimizerState, TrainConfig, TrainObserver,
    TrainingSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarginProbe {
    pub user: u32,
    pub pos: u32,
    pub neg: u32,
    pub eta: f64,
    pub margin_before: f64,
    pub margin_after: f64,
    /// `‖∇Δ‖²`, unpreconditioned.
    pub grad_norm_sq: f64,
    /// `η σ(−Δ) ∇Δᵀ D ∇Δ`.
    pub bound_rhs: f64,
}

impl MarginProbe {
    pub fn improvement(&self) -> f64 {
        self.margin_after - self.margin_before
    }

    /// Gap between the observed change and its first-order prediction.
    pub fn residual(&self) -> f64 {
        self.improvement() - self.bound_rhs
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ProbeOptimizer<'a> {
    /// `D = I`.
    SgdIdentity,
    /// Adam's diagonal rescaling at the given state, without momentum.
    Adam(&'a AdamState),
}

/// Applies one BPR step on `(u, p, neg)` to a copy of the three rows involved
/// and reports the margin before and after. The model is not modified.
pub fn probe_one_step(model: &EmbeddingModel, u: u32, p: u32, neg: u32, eta: f64, optimizer: ProbeOptimizer<'_>) -> Result<MarginProbe> {
    if !matches!(model.backbone(), Backbone::Mf) {
        return Err(Error::invalid("margin probes need the mf backbone"));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid("eta must be positive"));
    }
    if p == neg {
        return Err(Error::invalid("positive and negative item must differ"));
    }
    model.score(u, p)?;
    model.score(u, neg)?;
    if !model.is_finite() {
        return Err(Error::invalid("model has non-finite parameters"));
    }
    let d = model.dim();
    let base = model.base();
    let (eu, ep, en) = (base.user(u), base.item(p), base.item(neg));
    let a: Vec<f64> = ep.iter().zip(en).map(|(x, y)| x - y).collect();
    let margin_before = dot(eu, &a);
    let g = sigmoid(-margin_before);

    // ∇ℓ = −g ∇Δ, and θ⁺ = θ − η D ∇ℓ
    let (ud, pd, nd) = (u as usize * d, p as usize * d, neg as usize * d);
    let mut eu2 = eu.to_vec();
    let mut ep2 = ep.to_vec();
    let mut en2 = en.to_vec();
    let mut quad = 0.0;
    for k in 0..d {
        let (du, dp, dn) = match optimizer {
            ProbeOptimizer::SgdIdentity => (1.0, 1.0, 1.0),
            ProbeOptimizer::Adam(state) => (
                state.user_scale(ud + k, -g * a[k]),
                state.item_scale(pd + k, -g * eu[k]),
                state.item_scale(nd + k, g * eu[k]),
            ),
        };
        eu2[k] += eta * g * du * a[k];
        ep2[k] += eta * g * dp * eu[k];
        en2[k] -= eta * g * dn * eu[k];
        quad += du * a[k] * a[k] + (dp + dn) * eu[k] * eu[k];
    }
    let margin_after = dot(&eu2, &ep2) - dot(&eu2, &en2);
    Ok(MarginProbe {
        user: u,
        pos: p,
        neg,
        eta,
        margin_before,
        margin_after,
        grad_norm_sq: dot(&a, &a) + 2.0 * dot(eu, eu),
        bound_rhs: eta * g * quad,
    })
}

/// Aggregate of a batch of probes at one step size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeSummary {
    pub eta: f64,
    pub probes: usize,
    pub mean_improvement: f64,
    pub se_improvement: f64,
    pub mean_bound_rhs: f64,
    /// Fraction of probes with non-zero gradient whose margin strictly grew.
    pub increased_fraction: f64,
    /// Mean `|improvement − bound_rhs| / η²`.
    pub mean_scaled_residual: f64,
}

impl ProbeSummary {
    pub fn from_probes(eta: f64, probes: &[MarginProbe]) -> Self {
        let n = probes.len().max(1) as f64;
        let mean = probes.iter().map(MarginProbe::improvement).sum::<f64>() / n;
        let var = if probes.len() > 1 {
            probes.iter().map(|p| (p.improvement() - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let moving: Vec<&MarginProbe> = probes.iter().filter(|p| p.grad_norm_sq > 0.0).collect();
        let increased = moving.iter().filter(|p| p.margin_after > p.margin_before).count();
        Self {
            eta,
            probes: probes.len(),
            mean_improvement: mean,
            se_improvement: (var / n).sqrt(),
            mean_bound_rhs: probes.iter().map(|p| p.bound_rhs).sum::<f64>() / n,
            increased_fraction: if moving.is_empty() { 1.0 } else { increased as f64 / moving.len() as f64 },
            mean_scaled_residual: probes.iter().map(|p| p.residual().abs() / (eta * eta)).sum::<f64>() / n,
        }
    }
}

/// Draws `count` probe triples: a uniform positive from `pairs` and a
/// negative from `sampler`, each from its own seeded stream.
pub fn draw_triples(model: &EmbeddingModel, pairs: &[(u32, u32)], sampler: &NegativeSampler, count: usize, seed: u64) -> Result<Vec<(u32, u32, u32)>> {
    if pairs.is_empty() {
        return Err(Error::Empty("probe pairs"));
    }
    let view = model.view();
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let (u, p) = pairs[rng.random_range(0..pairs.len())];
            Ok((u, p, sampler.sample_negative(u, p, &view, &mut rng)?))
        })
        .collect()
}

/// Probes every triple at every step size, in parallel.
pub fn probe_grid(
    model: &EmbeddingModel,
    triples: &[(u32, u32, u32)],
    etas: &[f64],
    optimizer: ProbeOptimizer<'_>,
) -> Result<Vec<(ProbeSummary, Vec<MarginProbe>)>> {
    etas.iter()
        .map(|&eta| {
            let probes = triples
                .par_iter()
                .map(|&(u, p, n)| probe_one_step(model, u, p, n, eta, optimizer))
                .collect::<Result<Vec<_>>>()?;
            Ok((ProbeSummary::from_probes(eta, &probes), probes))
        })
        .collect()
}

/// Ratio of the largest to the smallest mean scaled residual across step
/// sizes. A bounded ratio means the remainder is second order in η.
pub fn residual_spread(summaries: &[ProbeSummary]) -> f64 {
    let vals: Vec<f64> = summaries.iter().map(|s| s.mean_scaled_residual).collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    if max == 0.0 {
        1.0
    } else {
        max / min
    }
}

pub fn write_probe_csv<W: Write>(probes: &[MarginProbe], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in probes {
        w.serialize(p).map_err(|e| Error::invalid(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Default)]
struct UpdateCounter(BTreeMap<(u32, u32), usize>);

impl TrainObserver for UpdateCounter {
    fn on_instance(&mut self, u: u32, p: u32, _n: u32) {
        *self.0.entry((u, p)).or_default() += 1;
    }
}

/// How often each positive pair fed a gradient term over `config.epochs`
/// epochs of training on `set`.
pub fn count_updates(split: &SplitDataset, set: &TrainingSet, config: &TrainConfig) -> Result<BTreeMap<(u32, u32), usize>> {
    let mut counter = UpdateCounter::default();
    let config = TrainConfig { eval_every: config.epochs.max(1), ..config.clone() };
    crate::train::fit(split, set, &config, &mut counter)?;
    Ok(counter.0)
}

/// Per-epoch mean margin of a fixed set of probe pairs under two training sets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparationTrace {
    /// Entry `e` is the state after `e` epochs; entry 0 is the initialization.
    pub baseline: Vec<f64>,
    pub variant: Vec<f64>,
}

/// Trains on `baseline` and on `variant` with identical seeds and records the
/// mean of `s_up − s_un` over `pairs` after every epoch. Each pair gets one
/// negative, drawn uniformly once with `neg_seed` and reused throughout.
pub fn cumulative_separation(
    split: &SplitDataset,
    baseline: &TrainingSet,
    variant: &TrainingSet,
    pairs: &[(u32, u32)],
    config: &TrainConfig,
    neg_seed: u64,
) -> Result<SeparationTrace> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("separation pairs"));
    }
    let sampler = NegativeSampler::new(config.sampler, &split.train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(neg_seed);
    let triples: Vec<(u32, u32, u32)> = pairs
        .iter()
        .map(|&(u, p)| Ok((u, p, sampler.uniform(u, &mut rng)?)))
        .collect::<Result<_>>()?;

    let trace = |set: &TrainingSet| -> Result<Vec<f64>> {
        let backbone = build_backbone(split, config.backbone)?;
        let mut model = EmbeddingModel::init_xavier(split.num_users(), split.num_items(), config.dim, config.seed, backbone)?;
        let mut optimizer = OptimizerState::new(config.optimizer, &model);
        let mut rng = training_rng(config.seed);
        let mean_margin = |model: &EmbeddingModel| {
            let view = model.view();
            triples.iter().map(|&(u, p, n)| view.score(u, p) - view.score(u, n)).sum::<f64>() / triples.len() as f64
        };
        let mut out = vec![mean_margin(&model)];
        for epoch in 1..=config.epochs {
            train_epoch(&mut model, set, config, &mut optimizer, &sampler, &mut rng, epoch, &mut ())?;
            out.push(mean_margin(&model));
        }
        Ok(out)
    };
    Ok(SeparationTrace {
        baseline: trace(baseline)?,
        variant: trace(variant)?,
    })
}
