use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use proptest::prelude::*;
use tfps::dataset::{leakage_filter, timestamp_split, Interaction, InteractionLog, SplitOptions, Vocabulary};
use tfps::eval::{ndcg_at_k, recall_at_k, top_k};
use tfps::model::{Adjacency, Backbone, EmbeddingModel};
use tfps::tgraph::{enhance, enhance_with_iterations, filtrate, RangeMode, WeightedBipartiteGraph, WeightedEdge};

fn edges_strategy() -> impl Strategy<Value = Vec<WeightedEdge>> {
    prop::collection::btree_map((0u32..12, 0u32..15), (0i64..1_000, 0.0f64..=1.0), 1..60).prop_map(|m| {
        m.into_iter()
            .map(|((user, item), (timestamp, weight))| WeightedEdge { user, item, timestamp, weight })
            .collect()
    })
}

fn log_strategy() -> impl Strategy<Value = InteractionLog> {
    prop::collection::btree_map((0u32..10, 0u32..20), 0i64..500, 6..80).prop_map(|m| {
        let rows = m.into_iter().map(|((u, i), t)| Interaction::new(u, i, t)).collect();
        InteractionLog::from_interactions(rows, Arc::new(Vocabulary::numbered(10)), Arc::new(Vocabulary::numbered(20)))
            .unwrap()
    })
}

fn range_mode() -> impl Strategy<Value = RangeMode> {
    prop_oneof![Just(RangeMode::UnitInterval), Just(RangeMode::DataRange)]
}

proptest! {
    #[test]
    fn filtration_partitions_edges(edges in edges_strategy(), n in 1usize..6, mode in range_mode()) {
        let graph = WeightedBipartiteGraph::from_edges(edges.clone()).unwrap();
        let layers = filtrate(&graph, n, mode).unwrap();
        prop_assert_eq!(layers.num_layers(), n);
        let mut seen = HashSet::new();
        for (_, layer) in layers.iter() {
            for e in layer {
                prop_assert!(seen.insert((e.user, e.item)), "edge in two layers");
            }
        }
        prop_assert_eq!(seen.len(), edges.len());
    }

    #[test]
    fn layer_index_is_monotone_in_weight(edges in edges_strategy(), n in 1usize..6, mode in range_mode()) {
        let graph = WeightedBipartiteGraph::from_edges(edges).unwrap();
        let layers = filtrate(&graph, n, mode).unwrap();
        let index = layers.edge_index();
        let mut by_weight: Vec<(f64, usize)> = index.values().map(|&(layer, w)| (w, layer)).collect();
        by_weight.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for w in by_weight.windows(2) {
            prop_assert!(w[0].1 <= w[1].1, "weight {} in layer {} above weight {} in layer {}", w[0].0, w[0].1, w[1].0, w[1].1);
        }
    }

    #[test]
    fn multiplicity_equals_layer_index(edges in edges_strategy(), n in 1usize..6, mode in range_mode()) {
        let graph = WeightedBipartiteGraph::from_edges(edges).unwrap();
        let layers = filtrate(&graph, n, mode).unwrap();
        let pss = enhance(&layers);
        let index = layers.edge_index();
        let mult = pss.multiplicity();
        prop_assert_eq!(mult.len(), index.len());
        for (pair, count) in &mult {
            prop_assert_eq!(*count, index[pair].0);
        }
        let dist = pss.distribution();
        let total: f64 = dist.values().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_iteration_is_the_original_edge_set(edges in edges_strategy(), n in 1usize..6) {
        let graph = WeightedBipartiteGraph::from_edges(edges.clone()).unwrap();
        let layers = filtrate(&graph, n, RangeMode::UnitInterval).unwrap();
        let pss = enhance_with_iterations(&layers, 1);
        prop_assert_eq!(pss.len(), edges.len());
        prop_assert!(pss.multiplicity().values().all(|&c| c == 1));
    }

    #[test]
    fn split_is_chronological_and_disjoint(log in log_strategy(), frac in 0.3f64..0.9) {
        let opts = SplitOptions { train_fraction: frac, ..Default::default() };
        let Ok(split) = timestamp_split(&log, &opts) else { return Ok(()) };
        let last_train = split.train.interactions().iter().map(|x| x.timestamp).max().unwrap();
        for x in split.validation.interactions().iter().chain(split.test.interactions()) {
            prop_assert!(x.timestamp >= split.cutting_timestamp);
            prop_assert!(x.timestamp >= last_train);
        }
        prop_assert!(split.train.interactions().iter().all(|x| x.timestamp < split.cutting_timestamp));
        let val_last = split.validation.interactions().iter().map(|x| x.timestamp).max();
        let test_first = split.test.interactions().iter().map(|x| x.timestamp).min();
        if let (Some(a), Some(b)) = (val_last, test_first) {
            prop_assert!(a <= b);
        }
        let train_users: HashSet<u32> = split.train.interactions().iter().map(|x| x.user).collect();
        for x in split.validation.interactions().iter().chain(split.test.interactions()) {
            prop_assert!(train_users.contains(&x.user), "holdout user without training history");
        }
        let kept = split.train.len() + split.validation.len() + split.test.len() + split.removed_cold_user + split.removed_cold_item;
        prop_assert_eq!(kept, log.len());
    }

    #[test]
    fn leakage_filter_removes_only_held_out_pairs(log in log_strategy(), n in 1usize..5) {
        let Ok(split) = timestamp_split(&log, &SplitOptions::default()) else { return Ok(()) };
        let edges = split
            .train
            .interactions()
            .iter()
            .map(|x| WeightedEdge { user: x.user, item: x.item, timestamp: x.timestamp, weight: 0.5 })
            .collect();
        let layers = filtrate(&WeightedBipartiteGraph::from_edges(edges).unwrap(), n, RangeMode::UnitInterval).unwrap();
        let full = enhance(&layers);
        let filtered = leakage_filter(&full, &split);
        let held: HashSet<(u32, u32)> = split.validation.pairs().chain(split.test.pairs()).collect();
        prop_assert!(filtered.pairs().iter().all(|p| !held.contains(p)));
        let expected: BTreeMap<(u32, u32), usize> =
            full.multiplicity().into_iter().filter(|(p, _)| !held.contains(p)).collect();
        prop_assert_eq!(filtered.multiplicity(), expected);
    }

    #[test]
    fn propagation_is_linear(
        pairs in prop::collection::btree_set((0u32..6, 0u32..7), 1..25),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        layers in 0usize..4,
        seed in 0u64..1000,
    ) {
        let adj = Adjacency::new(6, 7, pairs.iter().copied()).unwrap();
        let dim = 3;
        let x = EmbeddingModel::init_xavier(6, 7, dim, seed, Backbone::Mf).unwrap();
        let y = EmbeddingModel::init_xavier(6, 7, dim, seed + 1, Backbone::Mf).unwrap();
        let (xu, xi) = (x.base().users.to_vec(), x.base().items.to_vec());
        let (yu, yi) = (y.base().users.to_vec(), y.base().items.to_vec());
        let mix = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(p, q)| a * p + b * q).collect::<Vec<_>>();
        let (fxu, fxi) = adj.layer_mean(&xu, &xi, dim, layers);
        let (fyu, fyi) = adj.layer_mean(&yu, &yi, dim, layers);
        let (fzu, fzi) = adj.layer_mean(&mix(&xu, &yu), &mix(&xi, &yi), dim, layers);
        for (z, (p, q)) in fzu.iter().chain(&fzi).zip(fxu.iter().chain(&fxi).zip(fyu.iter().chain(&fyi))) {
            prop_assert!((z - (a * p + b * q)).abs() < 1e-12);
        }
    }

    #[test]
    fn propagation_cache_tracks_parameter_writes(
        pairs in prop::collection::btree_set((0u32..5, 0u32..6), 1..20),
        seed in 0u64..1000,
        delta in -1.0f64..1.0,
        slot in 0usize..30,
    ) {
        let adj = Adjacency::new(5, 6, pairs.iter().copied()).unwrap();
        let mut model = EmbeddingModel::init_xavier(5, 6, 3, seed, Backbone::lightgcn(2, adj)).unwrap();
        model.score_all(0).unwrap();
        {
            let (users, items) = model.params_mut();
            if slot < users.len() { users[slot] += delta } else { items[slot - users.len()] += delta }
        }
        let after = model.score_all(0).unwrap();
        let fresh = EmbeddingModel::from_parts(
            5, 6, 3, seed,
            model.base().users.to_vec(), model.base().items.to_vec(), model.backbone().clone(),
        ).unwrap();
        prop_assert_eq!(&after, &fresh.score_all(0).unwrap());
        prop_assert!(model.propagate() == fresh.propagate());
    }

    #[test]
    fn top_k_excludes_and_orders(
        scores in prop::collection::vec(-3i32..3, 1..40),
        exclude_mask in prop::collection::vec(any::<bool>(), 40),
        k in 1usize..50,
    ) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let exclude: Vec<u32> = (0..scores.len() as u32).filter(|&i| exclude_mask[i as usize]).collect();
        let ranked = top_k(&scores, &exclude, k);
        prop_assert_eq!(ranked.len(), k.min(scores.len() - exclude.len()));
        prop_assert!(ranked.iter().all(|i| !exclude.contains(i)));
        for w in ranked.windows(2) {
            let (a, b) = (scores[w[0] as usize], scores[w[1] as usize]);
            prop_assert!(a > b || (a == b && w[0] < w[1]));
        }
    }

    #[test]
    fn metrics_lie_in_unit_interval(
        ranked in prop::collection::vec(0u32..30, 0..30),
        positives in prop::collection::hash_set(0u32..30, 1..10),
        k in 1usize..30,
    ) {
        let mut seen = HashSet::new();
        let ranked: Vec<u32> = ranked.into_iter().filter(|i| seen.insert(*i)).collect();
        let r = recall_at_k(&ranked, &positives, k);
        let n = ndcg_at_k(&ranked, &positives, k);
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
        prop_assert_eq!(r == 0.0, n == 0.0);
    }
}
