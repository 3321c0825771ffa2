//! Time-decay weighted bipartite graph, threshold filtration into layers,
//! and the layer-enhanced positive sample set.
//!
//! Each training edge `(u, p)` gets weight `decay(t_max(u) - t(u, p))`, so a
//! user's most recent interaction always weighs 1. The weight range is cut
//! into `n` equal-width bins; an edge that lands in bin `i` (1-based) is
//! copied `i` times into the positive sample set.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use log::warn;
use serde::Serialize;

use crate::dataset::{leakage_filter, InteractionLog, SplitDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    #[default]
    Exponential,
    Linear,
    Power,
}

impl std::str::FromStr for DecayKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" | "exp" => Ok(DecayKind::Exponential),
            "linear" => Ok(DecayKind::Linear),
            "power" => Ok(DecayKind::Power),
            other => Err(Error::invalid(format!("unknown decay kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecaySpec {
    pub kind: DecayKind,
    /// Decay rate per `time_unit`.
    pub lambda: f64,
    /// Seconds per unit of gap; 86400 measures gaps in days.
    pub time_unit: u64,
}

impl Default for DecaySpec {
    fn default() -> Self {
        Self {
            kind: DecayKind::Exponential,
            lambda: 0.01,
            time_unit: 86_400,
        }
    }
}

impl DecaySpec {
    pub fn exponential(lambda: f64, time_unit: u64) -> Self {
        Self {
            kind: DecayKind::Exponential,
            lambda,
            time_unit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("decay lambda must be finite and >= 0"));
        }
        if self.time_unit == 0 {
            return Err(Error::invalid("decay time_unit must be >= 1 second"));
        }
        Ok(())
    }
}

/// Weight of an interaction `gap_seconds` older than the user's latest one.
///
/// With `g = gap / time_unit`: exponential `exp(-λg)`, linear
/// `max(0, 1 - λg)`, power `(1 + g)^-λ`. Always in `[0, 1]`.
pub fn decay_weight(gap_seconds: u64, spec: &DecaySpec) -> f64 {
    if gap_seconds == 0 {
        return 1.0;
    }
    let g = gap_seconds as f64 / spec.time_unit as f64;
    let w = match spec.kind {
        DecayKind::Exponential => (-spec.lambda * g).exp(),
        DecayKind::Linear => 1.0 - spec.lambda * g,
        DecayKind::Power => (1.0 + g).powf(-spec.lambda),
    };
    w.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightedEdge {
    pub user: u32,
    pub item: u32,
    pub timestamp: i64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedBipartiteGraph {
    edges: Vec<WeightedEdge>,
    user_last_time: Vec<Option<i64>>,
}

impl WeightedBipartiteGraph {
    /// Graph over explicit weights, for callers that bring their own weighting.
    pub fn from_edges(edges: Vec<WeightedEdge>) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::Empty("weighted graph"));
        }
        if let Some(e) = edges.iter().find(|e| !(0.0..=1.0).contains(&e.weight)) {
            return Err(Error::invalid(format!(
                "edge ({}, {}) weight {} outside [0, 1]",
                e.user, e.item, e.weight
            )));
        }
        let num_users = edges.iter().map(|e| e.user as usize + 1).max().unwrap_or(0);
        let mut user_last_time = vec![None; num_users];
        for e in &edges {
            let slot = &mut user_last_time[e.user as usize];
            *slot = Some(slot.map_or(e.timestamp, |t: i64| t.max(e.timestamp)));
        }
        Ok(Self {
            edges,
            user_last_time,
        })
    }

    pub fn edges(&self) -> &[WeightedEdge] {
        &self.edges
    }

    /// Latest training timestamp of `user`, if the user has any edge.
    pub fn user_last_time(&self, user: u32) -> Option<i64> {
        self.user_last_time.get(user as usize).copied().flatten()
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Weights every training interaction by its recency within its user's history.
pub fn build_weighted_graph(train: &InteractionLog, spec: &DecaySpec) -> Result<WeightedBipartiteGraph> {
    if train.is_empty() {
        return Err(Error::Empty("training log"));
    }
    spec.validate()?;
    let mut user_last_time: Vec<Option<i64>> = vec![None; train.num_users()];
    for it in train.interactions() {
        let slot = &mut user_last_time[it.user as usize];
        *slot = Some(slot.map_or(it.timestamp, |t| t.max(it.timestamp)));
    }
    let edges = train
        .interactions()
        .iter()
        .map(|it| {
            // every user with an interaction has a last time
            let last = user_last_time[it.user as usize].unwrap_or(it.timestamp);
            WeightedEdge {
                user: it.user,
                item: it.item,
                timestamp: it.timestamp,
                weight: decay_weight((last - it.timestamp) as u64, spec),
            }
        })
        .collect();
    Ok(WeightedBipartiteGraph {
        edges,
        user_last_time,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeMode {
    /// Bins over `[0, 1]`.
    #[default]
    UnitInterval,
    /// Bins over the observed `[W_min, W_max]`.
    DataRange,
}

impl std::str::FromStr for RangeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" | "unit_interval" => Ok(RangeMode::UnitInterval),
            "data" | "data_range" => Ok(RangeMode::DataRange),
            other => Err(Error::invalid(format!("unknown range mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayeredGraph {
    layers: Vec<Vec<WeightedEdge>>,
    thresholds: Vec<f64>,
    range_mode: RangeMode,
}

impl LayeredGraph {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Edges of layer `i`, 1-based.
    pub fn layer(&self, i: usize) -> &[WeightedEdge] {
        &self.layers[i - 1]
    }

    /// `(layer index, edges)` for every layer, bottom first.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &[WeightedEdge])> {
        self.layers.iter().enumerate().map(|(i, l)| (i + 1, l.as_slice()))
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn range_mode(&self) -> RangeMode {
        self.range_mode
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    /// `(layer, weight)` for every edge, keyed by pair.
    pub fn edge_index(&self) -> HashMap<(u32, u32), (usize, f64)> {
        self.iter()
            .flat_map(|(i, edges)| edges.iter().map(move |e| ((e.user, e.item), (i, e.weight))))
            .collect()
    }
}

/// 1-based bin of `w` under ascending `thresholds` (`n + 1` entries). Bins
/// are half-open except the top one, which also holds `w == thresholds[n]`.
fn bin_of(w: f64, thresholds: &[f64]) -> usize {
    let n = thresholds.len() - 1;
    let (lo, hi) = (thresholds[0], thresholds[n]);
    if w >= hi {
        return n;
    }
    let mut idx = if hi > lo {
        (((w - lo) / (hi - lo)) * n as f64).floor().clamp(0.0, (n - 1) as f64) as usize
    } else {
        n - 1
    };
    // the arithmetic guess can be off by one near a boundary
    while idx > 0 && w < thresholds[idx] {
        idx -= 1;
    }
    while idx + 1 < n && w >= thresholds[idx + 1] {
        idx += 1;
    }
    idx + 1
}

/// Splits the graph's edges into `n` disjoint layers by weight.
pub fn filtrate(graph: &WeightedBipartiteGraph, n: usize, range_mode: RangeMode) -> Result<LayeredGraph> {
    if n == 0 {
        return Err(Error::invalid("number of layers must be >= 1"));
    }
    let (lo, hi) = match range_mode {
        RangeMode::UnitInterval => (0.0, 1.0),
        RangeMode::DataRange => graph.edges.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
            (lo.min(e.weight), hi.max(e.weight))
        }),
    };
    let mut thresholds: Vec<f64> = (0..=n)
        .map(|i| match range_mode {
            RangeMode::UnitInterval => i as f64 / n as f64,
            RangeMode::DataRange => lo + i as f64 * (hi - lo) / n as f64,
        })
        .collect();
    thresholds[n] = hi;

    let mut layers = vec![Vec::new(); n];
    if hi == lo && n > 1 && range_mode == RangeMode::DataRange {
        warn!("all edge weights equal {lo}; every edge goes to layer {n}");
        layers[n - 1] = graph.edges.clone();
    } else {
        for e in &graph.edges {
            layers[bin_of(e.weight, &thresholds) - 1].push(*e);
        }
    }
    Ok(LayeredGraph {
        layers,
        thresholds,
        range_mode,
    })
}

/// Multiset of `(user, item)` training pairs. Duplicates are intentional.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PositiveSampleSet {
    pairs: Vec<(u32, u32)>,
}

impl PositiveSampleSet {
    pub fn from_pairs(pairs: Vec<(u32, u32)>) -> Self {
        Self { pairs }
    }

    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Occurrence count per distinct pair.
    pub fn multiplicity(&self) -> BTreeMap<(u32, u32), usize> {
        let mut m = BTreeMap::new();
        for &pair in &self.pairs {
            *m.entry(pair).or_insert(0) += 1;
        }
        m
    }

    /// Training distribution induced by the multiset: `m_up / |PSS|`.
    pub fn distribution(&self) -> BTreeMap<(u32, u32), f64> {
        let total = self.pairs.len() as f64;
        self.multiplicity()
            .into_iter()
            .map(|(pair, m)| (pair, m as f64 / total))
            .collect()
    }

    /// Keeps the pairs for which `keep(user, item)` holds, preserving order.
    pub fn retain(&self, mut keep: impl FnMut(u32, u32) -> bool) -> Self {
        Self {
            pairs: self.pairs.iter().copied().filter(|&(u, p)| keep(u, p)).collect(),
        }
    }

    /// Writes `{user_index, item_index, multiplicity, layer, weight}` lines in
    /// `(user, item)` order. Layer and weight are null for pairs absent from
    /// `layers`.
    pub fn write_dump<W: Write>(&self, layers: Option<&LayeredGraph>, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            user_index: u32,
            item_index: u32,
            multiplicity: usize,
            layer: Option<usize>,
            weight: Option<f64>,
        }
        let index = layers.map(LayeredGraph::edge_index).unwrap_or_default();
        for ((u, p), m) in self.multiplicity() {
            let info = index.get(&(u, p));
            let row = Row {
                user_index: u,
                item_index: p,
                multiplicity: m,
                layer: info.map(|x| x.0),
                weight: info.map(|x| x.1),
            };
            serde_json::to_writer(&mut out, &row)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Layer enhancement without leakage filtering: every edge of layer `i`
/// repeated `i` times, layer by layer, copies contiguous.
pub fn enhance(layers: &LayeredGraph) -> PositiveSampleSet {
    enhance_with_iterations(layers, layers.num_layers())
}

/// Edge-addition iterations over a fixed layering. Iteration `j` adds every
/// edge whose layer index is at least `min(j, n)`; `iterations == n` is plain
/// layer enhancement and `iterations == 1` the original edge set. Beyond `n`,
/// each extra iteration adds the top layer once more.
pub fn enhance_with_iterations(layers: &LayeredGraph, iterations: usize) -> PositiveSampleSet {
    let n = layers.num_layers();
    let copies = |i: usize| if i == n { iterations } else { i.min(iterations) };
    let total = layers.iter().map(|(i, e)| copies(i) * e.len()).sum();
    let mut pairs = Vec::with_capacity(total);
    for (i, edges) in layers.iter() {
        for e in edges {
            pairs.extend(std::iter::repeat_n((e.user, e.item), copies(i)));
        }
    }
    PositiveSampleSet { pairs }
}

/// Layer enhancement followed by removal of held-out pairs.
pub fn build_pss(layers: &LayeredGraph, split: &SplitDataset) -> Result<PositiveSampleSet> {
    non_empty(leakage_filter(&enhance(layers), split))
}

/// [`enhance_with_iterations`] followed by removal of held-out pairs.
pub fn build_pss_with_iterations(
    layers: &LayeredGraph,
    iterations: usize,
    split: &SplitDataset,
) -> Result<PositiveSampleSet> {
    if iterations == 0 {
        return Err(Error::invalid("edge-addition iterations must be >= 1"));
    }
    non_empty(leakage_filter(&enhance_with_iterations(layers, iterations), split))
}

fn non_empty(pss: PositiveSampleSet) -> Result<PositiveSampleSet> {
    if pss.is_empty() {
        Err(Error::EmptyPositiveSet)
    } else {
        Ok(pss)
    }
}

/// Each user's `k` most recent interactions, once each. Ties on timestamp
/// prefer the smaller item index. Output is ordered by `(user, item)`.
pub fn recent_k_positives(train: &InteractionLog, k: usize) -> Result<PositiveSampleSet> {
    if k == 0 {
        return Err(Error::invalid("recent-k requires k >= 1"));
    }
    let mut per_user: Vec<Vec<(i64, u32)>> = vec![Vec::new(); train.num_users()];
    for it in train.interactions() {
        per_user[it.user as usize].push((it.timestamp, it.item));
    }
    let mut pairs = Vec::new();
    for (u, mut hist) in per_user.into_iter().enumerate() {
        hist.sort_unstable_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut chosen: Vec<u32> = hist.into_iter().take(k).map(|(_, item)| item).collect();
        chosen.sort_unstable();
        pairs.extend(chosen.into_iter().map(|item| (u as u32, item)));
    }
    Ok(PositiveSampleSet { pairs })
}

/// Decay weight per training pair, used as a per-instance loss coefficient.
pub fn instance_weights(graph: &WeightedBipartiteGraph) -> HashMap<(u32, u32), f64> {
    graph.edges.iter().map(|e| ((e.user, e.item), e.weight)).collect()
}
