//! Configuration-driven runs: split, positive set per variant, multi-seed
//! training and test evaluation, plus parameter sweeps.
//!
//! A configuration is a flat TOML document. Every key is optional; the
//! synthetic generator is configured by the `[synthetic]` table and is used
//! when no `dataset` path is given. Any key, including `synthetic.*`, can be
//! overridden with [`ExperimentConfig::set`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_log, leakage_filter, parse_log, ColdItemPolicy, InteractionLog, LogFormat, SplitDataset, SplitOptions};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metrics};
use crate::sampling::SamplerKind;
use crate::synth::{gen_synthetic, SyntheticSpec};
use crate::tgraph::{
    build_pss, build_pss_with_iterations, build_weighted_graph, filtrate, recent_k_positives, DecayKind, DecaySpec,
    RangeMode,
};
use crate::train::{fit, BackboneKind, EpochMode, FitResult, OptimizerKind, TrainConfig, TrainObserver, TrainingSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Interaction log `user, item, timestamp`; the synthetic generator is used when absent.
    pub dataset: Option<PathBuf>,
    /// `tsv` or `csv`.
    pub format: String,
    pub synthetic: SyntheticSpec,

    pub train_fraction: f64,
    /// Unix seconds; when set, the split cuts here instead of at `train_fraction`.
    pub cut_timestamp: Option<i64>,
    /// Share of the holdout that becomes validation.
    pub val_fraction: f64,
    /// `keep` or `drop`.
    pub cold_items: String,

    /// `exponential`, `linear` or `power`.
    pub decay: String,
    pub lambda: f64,
    pub time_unit: u64,
    /// Number of filtration layers.
    pub n: usize,
    /// `unit` or `data`.
    pub range_mode: String,
    /// Edge-addition iterations; unset means `n`.
    pub iterations: Option<usize>,

    /// `tfps`, `baseline_n1`, `weighted_bpr`, `recent_k`, `decay_linear` or `decay_power`.
    pub variant: String,
    pub recent_k: usize,

    /// `rns`, `pns`, `dns` or `dns-mn`.
    pub sampler: String,
    pub pool: usize,
    pub alpha: f64,
    pub dns_m: usize,
    pub dns_n: usize,

    /// `mf` or `lightgcn`.
    pub backbone: String,
    pub gcn_layers: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub l2: f64,
    pub epochs: usize,
    pub dim: usize,
    /// `adam` or `sgd`.
    pub optimizer: String,
    /// `full_pass` or `distinct_draws`.
    pub epoch_mode: String,
    pub eval_every: usize,

    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            dataset: None,
            format: "tsv".into(),
            synthetic: SyntheticSpec::default(),
            train_fraction: 0.8,
            cut_timestamp: None,
            val_fraction: 0.5,
            cold_items: "keep".into(),
            decay: "exponential".into(),
            lambda: 0.01,
            time_unit: 86_400,
            n: 2,
            range_mode: "unit".into(),
            iterations: None,
            variant: "tfps".into(),
            recent_k: 10,
            sampler: "rns".into(),
            pool: crate::sampling::DEFAULT_POOL,
            alpha: crate::sampling::DEFAULT_PNS_ALPHA,
            dns_m: 1,
            dns_n: crate::sampling::DEFAULT_POOL,
            backbone: "lightgcn".into(),
            gcn_layers: 3,
            lr: train.lr,
            batch_size: train.batch_size,
            l2: train.l2,
            epochs: train.epochs,
            dim: train.dim,
            optimizer: "adam".into(),
            epoch_mode: "full_pass".into(),
            eval_every: train.eval_every,
            ks: train.ks,
            seeds: vec![1, 2, 3, 4, 5],
            output: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Tfps,
    BaselineN1,
    WeightedBpr,
    RecentK(usize),
    DecayLinear,
    DecayPower,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Tfps => "tfps",
            Variant::BaselineN1 => "baseline_n1",
            Variant::WeightedBpr => "weighted_bpr",
            Variant::RecentK(_) => "recent_k",
            Variant::DecayLinear => "decay_linear",
            Variant::DecayPower => "decay_power",
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Overrides one key. `key` may be dotted (`synthetic.seed`); `value` is
    /// read as a TOML literal, falling back to a bare string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_owned()));
        let parsed = serde_json::to_value(parsed)?;
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown parameter `{key}`")))?;
        }
        *slot = parsed;
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("{key} = {value}: {e}")))?;
        Ok(())
    }

    /// Whether `key` names a settable parameter.
    pub fn has_key(&self, key: &str) -> bool {
        let Ok(mut doc) = serde_json::to_value(self) else {
            return false;
        };
        for part in key.split('.') {
            match doc.as_object_mut().and_then(|o| o.remove(part)) {
                Some(v) => doc = v,
                None => return false,
            }
        }
        true
    }

    pub fn variant(&self) -> Result<Variant> {
        Ok(match self.variant.as_str() {
            "tfps" => Variant::Tfps,
            "baseline_n1" => Variant::BaselineN1,
            "weighted_bpr" => Variant::WeightedBpr,
            "recent_k" => Variant::RecentK(self.recent_k),
            "decay_linear" => Variant::DecayLinear,
            "decay_power" => Variant::DecayPower,
            other => return Err(Error::Config(format!("unknown variant `{other}`"))),
        })
    }

    pub fn split_options(&self) -> Result<SplitOptions> {
        Ok(SplitOptions {
            train_fraction: self.train_fraction,
            val_fraction_of_holdout: self.val_fraction,
            cold_items: self.cold_items.parse::<ColdItemPolicy>()?,
            cut_timestamp: self.cut_timestamp,
        })
    }

    /// Decay after applying the variant's override.
    pub fn decay_spec(&self) -> Result<DecaySpec> {
        let kind = match self.variant()? {
            Variant::DecayLinear => DecayKind::Linear,
            Variant::DecayPower => DecayKind::Power,
            _ => self.decay.parse()?,
        };
        let spec = DecaySpec { kind, lambda: self.lambda, time_unit: self.time_unit };
        spec.validate()?;
        Ok(spec)
    }

    /// Layer count after applying the variant's override.
    pub fn layers(&self) -> Result<usize> {
        Ok(match self.variant()? {
            Variant::BaselineN1 => 1,
            _ => self.n,
        })
    }

    pub fn sampler_kind(&self) -> Result<SamplerKind> {
        SamplerKind::from_name(&self.sampler, self.pool, self.alpha, self.dns_m, self.dns_n)
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let backbone = match self.backbone.as_str() {
            "mf" => BackboneKind::Mf,
            "lightgcn" => BackboneKind::LightGcn { layers: self.gcn_layers },
            other => return Err(Error::Config(format!("unknown backbone `{other}`"))),
        };
        let optimizer = match self.optimizer.as_str() {
            "adam" => OptimizerKind::Adam,
            "sgd" => OptimizerKind::Sgd,
            other => return Err(Error::Config(format!("unknown optimizer `{other}`"))),
        };
        let epoch_mode = match self.epoch_mode.as_str() {
            "full_pass" => EpochMode::FullPass,
            "distinct_draws" => EpochMode::DistinctDraws,
            other => return Err(Error::Config(format!("unknown epoch_mode `{other}`"))),
        };
        let config = TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            l2: self.l2,
            epochs: self.epochs,
            dim: self.dim,
            seed,
            sampler: self.sampler_kind()?,
            backbone,
            optimizer,
            epoch_mode,
            eval_every: self.eval_every,
            ks: self.ks.clone(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        if let Some(path) = &self.dataset {
            if !path.exists() {
                return Err(Error::Config(format!("dataset {} does not exist", path.display())));
            }
        }
        self.format.parse::<LogFormat>()?;
        self.range_mode.parse::<RangeMode>()?;
        self.split_options()?;
        self.decay_spec()?;
        if self.layers()? == 0 {
            return Err(Error::Config("n must be >= 1".into()));
        }
        if let Variant::RecentK(0) = self.variant()? {
            return Err(Error::Config("recent_k must be >= 1".into()));
        }
        self.train_config(self.seeds[0])?;
        Ok(())
    }
}

/// The configured dataset, or the synthetic log when no path is set.
pub fn load_log(config: &ExperimentConfig) -> Result<InteractionLog> {
    match &config.dataset {
        Some(path) => {
            let events = parse_log(BufReader::new(File::open(path)?), config.format.parse()?)?;
            build_log(&events)
        }
        None => Ok(gen_synthetic(&config.synthetic)?.log),
    }
}

/// Training multiset for the configured variant.
pub fn training_set(config: &ExperimentConfig, split: &SplitDataset) -> Result<TrainingSet> {
    let variant = config.variant()?;
    if let Variant::RecentK(k) = variant {
        let pss = leakage_filter(&recent_k_positives(&split.train, k)?, split);
        if pss.is_empty() {
            return Err(Error::EmptyPositiveSet);
        }
        return Ok(TrainingSet::from_pss(&pss));
    }
    let graph = build_weighted_graph(&split.train, &config.decay_spec()?)?;
    if variant == Variant::WeightedBpr {
        return TrainingSet::weighted(&graph, split);
    }
    let n = config.layers()?;
    let layers = filtrate(&graph, n, config.range_mode.parse()?)?;
    let pss = match config.iterations {
        Some(t) => build_pss_with_iterations(&layers, t, split)?,
        None => build_pss(&layers, split)?,
    };
    Ok(TrainingSet::from_pss(&pss))
}

/// Split and training set shared by every seed of a run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: SplitDataset,
    pub set: TrainingSet,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    let log = load_log(config).map_err(|e| e.in_stage("load"))?;
    let split = crate::dataset::timestamp_split(&log, &config.split_options()?).map_err(|e| e.in_stage("split"))?;
    let set = training_set(config, &split).map_err(|e| e.in_stage("pss"))?;
    Ok(Prepared { split, set })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub variant: &'static str,
    pub pss_size: usize,
    pub best_epoch: usize,
    pub validation: BTreeMap<usize, Metrics>,
    pub test: BTreeMap<usize, Metrics>,
    pub test_users: usize,
}

pub fn run_seed(config: &ExperimentConfig, prepared: &Prepared, seed: u64) -> Result<SeedRecord> {
    Ok(fit_seed(config, prepared, seed, &mut ())?.0)
}

/// [`run_seed`] that also hands back the fitted model and its history.
pub fn fit_seed(config: &ExperimentConfig, prepared: &Prepared, seed: u64, observer: &mut dyn TrainObserver) -> Result<(SeedRecord, FitResult)> {
    let train = config.train_config(seed)?;
    let fitted = fit(&prepared.split, &prepared.set, &train, observer).map_err(|e| e.in_stage("train"))?;
    let split = &prepared.split;
    let validation = evaluate(&fitted.model, &split.train, &split.validation, &train.ks).map_err(|e| e.in_stage("eval"))?;
    let test = evaluate(&fitted.model, &split.train, &split.test, &train.ks).map_err(|e| e.in_stage("eval"))?;
    let record = SeedRecord {
        seed,
        variant: config.variant()?.name(),
        pss_size: prepared.set.len(),
        best_epoch: fitted.best_epoch,
        validation: validation.metrics,
        test: test.metrics,
        test_users: test.users_evaluated,
    };
    Ok((record, fitted))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub seeds: Vec<u64>,
    pub recall: BTreeMap<usize, MeanStd>,
    pub ndcg: BTreeMap<usize, MeanStd>,
    pub validation_recall: BTreeMap<usize, MeanStd>,
}

impl Aggregate {
    pub fn of(records: &[SeedRecord]) -> Self {
        let ks: Vec<usize> = records.first().map(|r| r.test.keys().copied().collect()).unwrap_or_default();
        let collect = |f: &dyn Fn(&SeedRecord, usize) -> f64| -> BTreeMap<usize, MeanStd> {
            ks.iter()
                .map(|&k| (k, MeanStd::of(&records.iter().map(|r| f(r, k)).collect::<Vec<_>>())))
                .collect()
        };
        Self {
            seeds: records.iter().map(|r| r.seed).collect(),
            recall: collect(&|r, k| r.test[&k].recall),
            ndcg: collect(&|r, k| r.test[&k].ndcg),
            validation_recall: collect(&|r, k| r.validation.get(&k).map_or(0.0, |m| m.recall)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub records: Vec<SeedRecord>,
    pub aggregate: Aggregate,
}

impl RunResult {
    /// One JSON line per seed followed by the aggregate line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&serde_json::json!({ "aggregate": self.aggregate }))?);
        out.push('\n');
        Ok(out)
    }

    /// `row,k,recall,ndcg` with one row per seed and k, then `mean` and `std` rows.
    pub fn write_summary_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "row,k,recall,ndcg")?;
        for r in &self.records {
            for (k, m) in &r.test {
                writeln!(out, "seed{},{k},{},{}", r.seed, m.recall, m.ndcg)?;
            }
        }
        for (k, m) in &self.aggregate.recall {
            writeln!(out, "mean,{k},{},{}", m.mean, self.aggregate.ndcg[k].mean)?;
        }
        for (k, m) in &self.aggregate.recall {
            writeln!(out, "std,{k},{},{}", m.std, self.aggregate.ndcg[k].std)?;
        }
        Ok(())
    }

    /// Writes `results.jsonl` and `summary.csv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("results.jsonl"), self.to_jsonl()?)?;
        self.write_summary_csv(File::create(dir.join("summary.csv"))?)
    }
}

/// Splits, builds the variant's training set and trains/evaluates every seed.
pub fn run(config: &ExperimentConfig) -> Result<RunResult> {
    let prepared = prepare(config)?;
    let records = config
        .seeds
        .par_iter()
        .map(|&seed| run_seed(config, &prepared, seed))
        .collect::<Result<Vec<_>>>()?;
    let aggregate = Aggregate::of(&records);
    let result = RunResult { records, aggregate };
    if let Some(dir) = &config.output {
        result.write_to(dir).map_err(|e| e.in_stage("output"))?;
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SweepMode {
    /// Vary one parameter at a time around the base config.
    #[default]
    OneAtATime,
    /// Cartesian product of all parameter values.
    Full,
}

impl std::str::FromStr for SweepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one" | "one_at_a_time" => Ok(SweepMode::OneAtATime),
            "full" => Ok(SweepMode::Full),
            other => Err(Error::invalid(format!("unknown sweep mode `{other}`"))),
        }
    }
}

/// Ordered `parameter -> values` grid.
pub type Grid = Vec<(String, Vec<String>)>;

/// Parses `name=v1,v2,...`.
pub fn parse_grid_entry(spec: &str) -> Result<(String, Vec<String>)> {
    let (name, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("grid entry `{spec}` is not name=v1,v2")))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_owned()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Error::invalid(format!("grid entry `{spec}` has no values")));
    }
    Ok((name.trim().to_owned(), values))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: usize,
    pub params: Vec<(String, String)>,
    pub seed: u64,
    pub outcome: std::result::Result<SeedRecord, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub ks: Vec<usize>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["point", "params", "seed", "status", "pss_size", "best_epoch"].map(String::from).to_vec();
        for k in &self.ks {
            header.push(format!("recall@{k}"));
            header.push(format!("ndcg@{k}"));
        }
        header.push("error".into());
        w.write_record(&header).map_err(|e| Error::invalid(e.to_string()))?;
        for row in &self.rows {
            let params = row.params.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";");
            let mut rec = vec![row.point.to_string(), params, row.seed.to_string()];
            match &row.outcome {
                Ok(r) => {
                    rec.extend(["ok".to_owned(), r.pss_size.to_string(), r.best_epoch.to_string()]);
                    for k in &self.ks {
                        let m = r.test.get(k);
                        rec.push(m.map_or(String::new(), |m| m.recall.to_string()));
                        rec.push(m.map_or(String::new(), |m| m.ndcg.to_string()));
                    }
                    rec.push(String::new());
                }
                Err(msg) => {
                    rec.extend(["error".to_owned(), String::new(), String::new()]);
                    rec.extend(std::iter::repeat_n(String::new(), 2 * self.ks.len()));
                    rec.push(msg.clone());
                }
            }
            w.write_record(&rec).map_err(|e| Error::invalid(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn grid_points(grid: &Grid, mode: SweepMode) -> Vec<Vec<(String, String)>> {
    match mode {
        SweepMode::OneAtATime => grid
            .iter()
            .flat_map(|(name, values)| values.iter().map(move |v| vec![(name.clone(), v.clone())]))
            .collect(),
        SweepMode::Full => grid.iter().fold(vec![Vec::new()], |acc, (name, values)| {
            acc.iter()
                .flat_map(|prefix| {
                    values.iter().map(move |v| {
                        let mut p = prefix.clone();
                        p.push((name.clone(), v.clone()));
                        p
                    })
                })
                .collect()
        }),
    }
}

/// Runs every grid point for every seed of `base`. A point that fails yields
/// error rows instead of aborting the sweep; unknown parameter names are
/// rejected before anything runs.
pub fn sweep(base: &ExperimentConfig, grid: &Grid, mode: SweepMode) -> Result<SweepTable> {
    for (name, _) in grid {
        if !base.has_key(name) {
            return Err(Error::Config(format!("unknown parameter `{name}`")));
        }
    }
    if base.seeds.is_empty() {
        return Err(Error::Config("seeds must be non-empty".into()));
    }
    let points = grid_points(grid, mode);
    let rows = points
        .par_iter()
        .enumerate()
        .map(|(point, params)| {
            let mut config = base.clone();
            config.output = None;
            let prepared = params
                .iter()
                .try_for_each(|(k, v)| config.set(k, v))
                .and_then(|_| prepare(&config));
            config
                .seeds
                .par_iter()
                .map(|&seed| SweepRow {
                    point,
                    params: params.clone(),
                    seed,
                    outcome: match &prepared {
                        Ok(p) => run_seed(&config, p, seed).map_err(|e| e.to_string()),
                        Err(e) => Err(e.to_string()),
                    },
                })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    Ok(SweepTable { ks: base.ks.clone(), rows })
}
