use std::collections::HashSet;
use std::io::BufReader;

use tfps::eval::evaluate;
use tfps::experiment::{prepare, training_set, ExperimentConfig, Prepared};
use tfps::model::EmbeddingModel;
use tfps::sampling::{NegativeSampler, SamplerKind};
use tfps::tgraph::{build_weighted_graph, filtrate, RangeMode};
use tfps::theory::{cumulative_separation, draw_triples, probe_one_step, ProbeOptimizer};
use tfps::train::{fit, BackboneKind, TrainingSet};

fn small_config(extra: &[(&str, &str)]) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    for (k, v) in [
        ("synthetic.users", "120"),
        ("synthetic.items", "200"),
        ("synthetic.clusters", "8"),
        ("synthetic.base_interactions", "30"),
        ("backbone", "\"mf\""),
        ("dim", "16"),
        ("lr", "0.01"),
        ("batch_size", "256"),
        ("epochs", "10"),
        ("eval_every", "5"),
        ("seeds", "[1]"),
        ("lambda", "0.01"),
    ]
    .iter()
    .chain(extra)
    {
        c.set(k, v).unwrap();
    }
    c
}

fn prepared(extra: &[(&str, &str)]) -> (ExperimentConfig, Prepared) {
    let c = small_config(extra);
    let p = prepare(&c).unwrap();
    (c, p)
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for backbone in ["\"mf\"", "\"lightgcn\""] {
        let (c, p) = prepared(&[("backbone", backbone), ("epochs", "3"), ("eval_every", "3")]);
        let fitted = fit(&p.split, &p.set, &c.train_config(1).unwrap(), &mut ()).unwrap();
        let mut buf = Vec::new();
        fitted.model.write_checkpoint(&mut buf).unwrap();
        let back = EmbeddingModel::read_checkpoint(BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(back, fitted.model);
        let ks = [20, 30];
        let a = evaluate(&fitted.model, &p.split.train, &p.split.test, &ks).unwrap();
        let b = evaluate(&back, &p.split.train, &p.split.test, &ks).unwrap();
        assert_eq!(a.recall(20), b.recall(20));
        assert_eq!(a.ndcg(30), b.ndcg(30));
    }
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let (c, p) = prepared(&[("epochs", "1"), ("eval_every", "1")]);
    let fitted = fit(&p.split, &p.set, &c.train_config(1).unwrap(), &mut ()).unwrap();
    let mut buf = Vec::new();
    fitted.model.write_checkpoint(&mut buf).unwrap();
    buf.truncate(buf.len() / 2);
    assert!(EmbeddingModel::read_checkpoint(BufReader::new(buf.as_slice())).is_err());
}

#[test]
fn small_steps_realize_the_first_order_margin_gain() {
    let (c, p) = prepared(&[]);
    let fitted = fit(&p.split, &p.set, &c.train_config(1).unwrap(), &mut ()).unwrap();
    let sampler = NegativeSampler::new(SamplerKind::Rns, &p.split.train).unwrap();
    let triples = draw_triples(&fitted.model, p.set.pairs(), &sampler, 1000, 9).unwrap();
    for eta in [1e-4, 1e-3] {
        let mut held = 0;
        for &(u, pos, neg) in &triples {
            let probe = probe_one_step(&fitted.model, u, pos, neg, eta, ProbeOptimizer::SgdIdentity).unwrap();
            assert!(probe.margin_after > probe.margin_before, "{probe:?}");
            held += usize::from(probe.improvement() >= 0.9 * probe.bound_rhs);
        }
        assert_eq!(held, triples.len(), "eta {eta}");
    }
}

#[test]
fn identical_training_sets_separate_identically() {
    let (c, p) = prepared(&[("epochs", "4")]);
    let pairs: Vec<(u32, u32)> = p.set.pairs().iter().copied().take(50).collect();
    let trace = cumulative_separation(&p.split, &p.set, &p.set, &pairs, &c.train_config(3).unwrap(), 5).unwrap();
    assert_eq!(trace.baseline.len(), 5);
    assert_eq!(trace.baseline, trace.variant);
}

#[test]
fn enhanced_set_separates_recent_pairs_faster() {
    let (c, tfps_prep) = prepared(&[("synthetic.drift_strength", "0.9"), ("n", "2"), ("epochs", "15")]);
    let mut base_cfg = c.clone();
    base_cfg.set("variant", "\"baseline_n1\"").unwrap();
    let base_set: TrainingSet = training_set(&base_cfg, &tfps_prep.split).unwrap();

    let graph = build_weighted_graph(&tfps_prep.split.train, &c.decay_spec().unwrap()).unwrap();
    let layers = filtrate(&graph, 2, RangeMode::UnitInterval).unwrap();
    let held: HashSet<(u32, u32)> = tfps_prep.split.validation.pairs().chain(tfps_prep.split.test.pairs()).collect();
    let top: Vec<(u32, u32)> = layers
        .layer(2)
        .iter()
        .map(|e| (e.user, e.item))
        .filter(|p| !held.contains(p))
        .collect();
    assert!(top.len() > 100);

    let mut config = c.train_config(1).unwrap();
    config.backbone = BackboneKind::Mf;
    let trace = cumulative_separation(&tfps_prep.split, &base_set, &tfps_prep.set, &top, &config, 11).unwrap();
    assert_eq!(trace.baseline[0], trace.variant[0]);
    let last = config.epochs;
    assert!(
        trace.variant[last] > trace.baseline[last],
        "recent-pair margin {} vs baseline {}",
        trace.variant[last],
        trace.baseline[last]
    );
}

#[test]
fn run_is_reproducible_per_seed() {
    let c = small_config(&[("epochs", "4"), ("eval_every", "2"), ("seeds", "[1, 2]")]);
    let a = tfps::experiment::run(&c).unwrap();
    let b = tfps::experiment::run(&c).unwrap();
    assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
    assert_eq!(a.aggregate.seeds, vec![1, 2]);
}
