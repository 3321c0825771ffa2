use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tfps::dataset::{leakage_filter, timestamp_split};
use tfps::eval::evaluate;
use tfps::experiment::{self, fit_seed, parse_grid_entry, prepare, Aggregate, ExperimentConfig, RunResult, SweepMode, Variant};
use tfps::model::{Backbone, EmbeddingModel};
use tfps::sampling::NegativeSampler;
use tfps::synth::{gen_synthetic, SyntheticSpec};
use tfps::tgraph::{build_pss_with_iterations, build_weighted_graph, filtrate, recent_k_positives};
use tfps::theory::{draw_triples, probe_grid, residual_spread, write_probe_csv, ProbeOptimizer};
use tfps::train::AdamState;
use tfps::{Error, Result};

#[derive(Parser)]
#[command(name = "tfps", version, about = "Time-filtered positive sampling for recommender training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a log by timestamp and write the split manifest.
    Split {
        #[command(flatten)]
        config: ConfigArgs,
        /// Manifest destination (JSON lines); stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the positive sample set and dump it.
    BuildPss {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dump destination (JSON lines); stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every seed, evaluate on test and write results.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory for checkpoints, histories, results.jsonl and summary.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `test` or `validation`.
        #[arg(long, default_value = "test")]
        target: String,
        #[arg(long)]
        per_user: bool,
        /// Also write `k,recall,ndcg,users_evaluated` rows here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run a parameter grid and write one CSV row per point and seed.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// `name=v1,v2,...`; repeatable.
        #[arg(long = "grid", required = true)]
        grid: Vec<String>,
        /// `one` (vary one parameter at a time) or `full`.
        #[arg(long, default_value = "one")]
        mode: String,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One-step margin probes on an MF model.
    Probe {
        #[command(flatten)]
        config: ConfigArgs,
        /// MF checkpoint; a fresh initialization with the first seed otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [1e-2, 1e-3, 1e-4])]
        etas: Vec<f64>,
        #[arg(long, default_value_t = 1000)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        probe_seed: u64,
        /// `sgd` (identity preconditioner) or `adam`.
        #[arg(long = "probe-optimizer", default_value = "sgd")]
        probe_optimizer: String,
        /// Directory for probes.csv and summary.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic log with a preference drift.
    GenSynth {
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        base_interactions: Option<usize>,
        /// Seconds from the start of the log.
        #[arg(long)]
        drift_time: Option<i64>,
        #[arg(long)]
        drift_strength: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long)]
        span_seconds: Option<i64>,
        /// TSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Ground-truth clusters as JSON.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

/// Flags that override the configuration file. Unset flags leave it alone.
#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Arbitrary override, e.g. `synthetic.drift_strength=0.5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Interaction log; the synthetic generator is used when no dataset is configured.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Unix seconds; interactions strictly before it train. Overrides the fraction.
    #[arg(long)]
    cut_timestamp: Option<i64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    cold_items: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    recent_k: Option<usize>,
    #[arg(long)]
    decay: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    time_unit: Option<u64>,
    /// Number of filtration layers.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    range_mode: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    /// `rns`, `pns`, `dns` or `dns-mn`.
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long)]
    pool: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// First eligible rank for `dns-mn`.
    #[arg(long)]
    m: Option<usize>,
    /// Candidate count for `dns-mn`.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    gcn_layers: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    epoch_mode: Option<String>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    ks: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

fn quoted(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

fn list<T: ToString>(values: &[T]) -> String {
    format!("[{}]", values.iter().map(T::to_string).collect::<Vec<_>>().join(","))
}

impl ConfigArgs {
    /// Loads, overrides and validates the configuration; failures are tagged with the `config` stage.
    fn resolve(&self) -> Result<ExperimentConfig> {
        self.build()
            .and_then(|c| c.validate().map(|()| c))
            .map_err(|e| match e {
                Error::Stage { .. } => e,
                e => e.in_stage("config"),
            })
    }

    fn build(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let mut overrides: Vec<(&str, String)> = Vec::new();
        let mut push = |key: &'static str, value: Option<String>| {
            if let Some(v) = value {
                overrides.push((key, v));
            }
        };
        push("dataset", self.input.as_ref().map(|p| quoted(&p.to_string_lossy())));
        push("format", self.format.as_deref().map(quoted));
        push("train_fraction", self.train_fraction.map(|v| v.to_string()));
        push("cut_timestamp", self.cut_timestamp.map(|v| v.to_string()));
        push("val_fraction", self.val_fraction.map(|v| v.to_string()));
        push("cold_items", self.cold_items.as_deref().map(quoted));
        push("variant", self.variant.as_deref().map(quoted));
        push("recent_k", self.recent_k.map(|v| v.to_string()));
        push("decay", self.decay.as_deref().map(quoted));
        push("lambda", self.lambda.map(|v| v.to_string()));
        push("time_unit", self.time_unit.map(|v| v.to_string()));
        push("n", self.layers.map(|v| v.to_string()));
        push("range_mode", self.range_mode.as_deref().map(quoted));
        push("iterations", self.iterations.map(|v| v.to_string()));
        push("sampler", self.sampler.as_deref().map(quoted));
        push("pool", self.pool.map(|v| v.to_string()));
        push("alpha", self.alpha.map(|v| v.to_string()));
        push("dns_m", self.m.map(|v| v.to_string()));
        push("dns_n", self.n.map(|v| v.to_string()));
        push("backbone", self.backbone.as_deref().map(quoted));
        push("gcn_layers", self.gcn_layers.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("l2", self.l2.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("dim", self.dim.map(|v| v.to_string()));
        push("optimizer", self.optimizer.as_deref().map(quoted));
        push("epoch_mode", self.epoch_mode.as_deref().map(quoted));
        push("eval_every", self.eval_every.map(|v| v.to_string()));
        push("ks", (!self.ks.is_empty()).then(|| list(&self.ks)));
        push("seeds", (!self.seeds.is_empty()).then(|| list(&self.seeds)));
        for (key, value) in overrides {
            config.set(key, &value)?;
        }
        for entry in &self.sets {
            let (key, value) = entry
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{entry}`")))?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn cmd_split(args: &ConfigArgs, out: Option<&Path>) -> Result<()> {
    let config = args.resolve()?;
    let log = experiment::load_log(&config).map_err(|e| e.in_stage("load"))?;
    let split = timestamp_split(&log, &config.split_options()?).map_err(|e| e.in_stage("split"))?;
    let mut w = output(out)?;
    split.write_manifest(&mut w)?;
    w.flush()?;
    if out.is_some() {
        print_json(&json!({
            "users": split.num_users(),
            "items": split.num_items(),
            "train": split.train.len(),
            "validation": split.validation.len(),
            "test": split.test.len(),
            "cutting_timestamp": split.cutting_timestamp,
            "removed_cold_user": split.removed_cold_user,
            "removed_cold_item": split.removed_cold_item,
        }))?;
    }
    Ok(())
}

fn cmd_build_pss(args: &ConfigArgs, out: Option<&Path>) -> Result<()> {
    let config = args.resolve()?;
    config.validate()?;
    let log = experiment::load_log(&config).map_err(|e| e.in_stage("load"))?;
    let split = timestamp_split(&log, &config.split_options()?).map_err(|e| e.in_stage("split"))?;
    let (pss, layers) = match config.variant()? {
        Variant::WeightedBpr => return Err(Error::Config("weighted_bpr trains on the original edges; there is no sample set to build".into())),
        Variant::RecentK(k) => (leakage_filter(&recent_k_positives(&split.train, k)?, &split), None),
        _ => {
            let graph = build_weighted_graph(&split.train, &config.decay_spec()?)?;
            let layers = filtrate(&graph, config.layers()?, config.range_mode.parse()?)?;
            let t = config.iterations.unwrap_or(layers.num_layers());
            (build_pss_with_iterations(&layers, t, &split)?, Some(layers))
        }
    };
    let mut w = output(out)?;
    pss.write_dump(layers.as_ref(), &mut w)?;
    w.flush()?;
    if out.is_some() {
        print_json(&json!({
            "train_edges": split.train.len(),
            "pss_size": pss.len(),
            "distinct_pairs": pss.multiplicity().len(),
            "layer_sizes": layers.as_ref().map(|l| l.layer_sizes()),
            "thresholds": layers.as_ref().map(|l| l.thresholds().to_vec()),
        }))?;
    }
    Ok(())
}

fn cmd_train(args: &ConfigArgs, out: Option<&Path>) -> Result<()> {
    let mut config = args.resolve()?;
    if let Some(dir) = out {
        config.output = Some(dir.to_path_buf());
    }
    let prepared = prepare(&config)?;
    let mut records = Vec::new();
    for &seed in &config.seeds {
        let (record, fitted) = fit_seed(&config, &prepared, seed, &mut ())?;
        if let Some(dir) = &config.output {
            std::fs::create_dir_all(dir)?;
            fitted.model.write_checkpoint(BufWriter::new(File::create(dir.join(format!("model_seed{seed}.ckpt")))?))?;
            let mut history = BufWriter::new(File::create(dir.join(format!("history_seed{seed}.jsonl")))?);
            for rec in &fitted.history {
                serde_json::to_writer(&mut history, &rec.to_json())?;
                writeln!(history)?;
            }
            history.flush()?;
        }
        records.push(record);
    }
    let result = RunResult { aggregate: Aggregate::of(&records), records };
    match &config.output {
        Some(dir) => {
            result.write_to(dir)?;
            print_json(&json!({ "aggregate": result.aggregate }))
        }
        None => {
            print!("{}", result.to_jsonl()?);
            Ok(())
        }
    }
}

fn cmd_eval(args: &ConfigArgs, checkpoint: &Path, target: &str, per_user: bool, csv: Option<&Path>) -> Result<()> {
    let config = args.resolve()?;
    let log = experiment::load_log(&config).map_err(|e| e.in_stage("load"))?;
    let split = timestamp_split(&log, &config.split_options()?).map_err(|e| e.in_stage("split"))?;
    let model = EmbeddingModel::read_checkpoint(BufReader::new(File::open(checkpoint)?))?;
    if model.num_users() != split.num_users() || model.num_items() != split.num_items() {
        return Err(Error::Checkpoint("model shape does not match the dataset".into()));
    }
    let target_log = match target {
        "test" => &split.test,
        "validation" => &split.validation,
        other => return Err(Error::invalid(format!("unknown target `{other}`"))),
    };
    let report = evaluate(&model, &split.train, target_log, &config.ks)?;
    if let Some(path) = csv {
        report.write_csv(BufWriter::new(File::create(path)?))?;
    }
    print_json(&report.to_json(per_user))
}

fn cmd_sweep(args: &ConfigArgs, grid: &[String], mode: &str, out: Option<&Path>) -> Result<()> {
    let config = args.resolve()?;
    let grid = grid.iter().map(|g| parse_grid_entry(g)).collect::<Result<Vec<_>>>()?;
    let mode: SweepMode = mode.parse()?;
    let table = experiment::sweep(&config, &grid, mode)?;
    let mut w = output(out)?;
    table.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_probe(
    args: &ConfigArgs,
    checkpoint: Option<&Path>,
    etas: &[f64],
    count: usize,
    probe_seed: u64,
    optimizer: &str,
    out: Option<&Path>,
) -> Result<()> {
    let config = args.resolve()?;
    let log = experiment::load_log(&config).map_err(|e| e.in_stage("load"))?;
    let split = timestamp_split(&log, &config.split_options()?).map_err(|e| e.in_stage("split"))?;
    let model = match checkpoint {
        Some(path) => EmbeddingModel::read_checkpoint(BufReader::new(File::open(path)?))?,
        None => EmbeddingModel::init_xavier(split.num_users(), split.num_items(), config.dim, config.seeds[0], Backbone::Mf)?,
    };
    let sampler = NegativeSampler::new(config.sampler_kind()?, &split.train)?;
    let pairs: Vec<(u32, u32)> = split.train.pairs().collect();
    let triples = draw_triples(&model, &pairs, &sampler, count, probe_seed)?;
    let adam = AdamState::new(&model);
    let opt = match optimizer {
        "sgd" => ProbeOptimizer::SgdIdentity,
        "adam" => ProbeOptimizer::Adam(&adam),
        other => return Err(Error::invalid(format!("unknown probe optimizer `{other}`"))),
    };
    let grid = probe_grid(&model, &triples, etas, opt)?;
    let summaries: Vec<_> = grid.iter().map(|(s, _)| s.clone()).collect();
    let summary = json!({ "etas": summaries, "residual_spread": residual_spread(&summaries) });
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let all: Vec<_> = grid.iter().flat_map(|(_, p)| p.iter().copied()).collect();
        write_probe_csv(&all, BufWriter::new(File::create(dir.join("probes.csv"))?))?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    print_json(&summary)
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_synth(
    users: Option<usize>,
    items: Option<usize>,
    base_interactions: Option<usize>,
    drift_time: Option<i64>,
    drift_strength: Option<f64>,
    seed: Option<u64>,
    clusters: Option<usize>,
    span_seconds: Option<i64>,
    out: Option<&Path>,
    truth: Option<&Path>,
) -> Result<()> {
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        users: users.unwrap_or(d.users),
        items: items.unwrap_or(d.items),
        base_interactions: base_interactions.unwrap_or(d.base_interactions),
        drift_time: drift_time.unwrap_or(d.drift_time),
        drift_strength: drift_strength.unwrap_or(d.drift_strength),
        seed: seed.unwrap_or(d.seed),
        clusters: clusters.unwrap_or(d.clusters),
        span_seconds: span_seconds.unwrap_or(d.span_seconds),
        ..d
    };
    let data = gen_synthetic(&spec)?;
    let mut w = output(out)?;
    for x in data.log.interactions() {
        writeln!(w, "{}\t{}\t{}", x.user, x.item, x.timestamp)?;
    }
    w.flush()?;
    if let Some(path) = truth {
        let doc = json!({
            "item_cluster": data.item_cluster,
            "user_cluster_a": data.user_cluster_a,
            "user_cluster_b": data.user_cluster_b,
        });
        std::fs::write(path, serde_json::to_string(&doc)?)?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Split { config, out } => cmd_split(&config, out.as_deref()),
        Command::BuildPss { config, out } => cmd_build_pss(&config, out.as_deref()),
        Command::Train { config, out } => cmd_train(&config, out.as_deref()),
        Command::Eval { config, checkpoint, target, per_user, csv } => cmd_eval(&config, &checkpoint, &target, per_user, csv.as_deref()),
        Command::Sweep { config, grid, mode, out } => cmd_sweep(&config, &grid, &mode, out.as_deref()),
        Command::Probe { config, checkpoint, etas, probes, probe_seed, probe_optimizer, out } => {
            cmd_probe(&config, checkpoint.as_deref(), &etas, probes, probe_seed, &probe_optimizer, out.as_deref())
        }
        Command::GenSynth { users, items, base_interactions, drift_time, drift_strength, seed, clusters, span_seconds, out, truth } => {
            cmd_gen_synth(users, items, base_interactions, drift_time, drift_strength, seed, clusters, span_seconds, out.as_deref(), truth.as_deref())
        }
    }
}

fn error_record(err: &Error) -> serde_json::Value {
    let (stage, inner) = match err {
        Error::Stage { stage, source } => (Some(*stage), source.as_ref()),
        other => (None, other),
    };
    json!({ "error": inner.to_string(), "stage": stage })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_record(&err));
            ExitCode::FAILURE
        }
    }
}
