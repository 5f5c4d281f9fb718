//! `orhash` command-line experiment runner.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use orhash::codes::save_codes;
use orhash::data::generate_clusters;
use orhash::encoder::{load_checkpoint, save_checkpoint, CheckpointHeader};
use orhash::harness::{
    compare_arms, emit_report, encode, evaluate_codes, gamma_sweep, map_table_csv, pr_file_name,
    run_experiment, DataSource, EvalReport, ExperimentConfig, PrecisionAtK,
};
use orhash::ranking::write_pr_csv;
use orhash::train::{train, JsonLinesSink, Method, RunSpec, StatsSink};

#[derive(Parser)]
#[command(name = "orhash", version, about = "Order-aware reweighted triplet hashing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clustered dataset as CSV.
    GenData {
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method at one code length and save a checkpoint.
    Train {
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        bits: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "full")]
        method: Method,
    },
    /// Evaluate a checkpoint on the configured query/database split.
    Eval {
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ablation: full, order_weight_only, squared_only, triplet_plain.
    Ablate {
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated code lengths.
        #[arg(long, value_delimiter = ',')]
        bits: Option<Vec<usize>>,
        /// Comma-separated methods replacing the ablation set.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
    },
    /// MAP of the full method over a list of γ values at 32 bits.
    GammaSweep {
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated code lengths.
        #[arg(long, value_delimiter = ',')]
        bits: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        gammas: Vec<u32>,
    },
    /// Full method against hard-negative and semi-hard mining.
    CompareMining {
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated code lengths.
        #[arg(long, value_delimiter = ',')]
        bits: Option<Vec<usize>>,
    },
}

/// Settings layered over the config file.
#[derive(Args, Default)]
struct Overrides {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Feature CSV (`id,labels,f1,...`) instead of synthetic data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Standardize each feature dimension of the input file.
    #[arg(long)]
    standardize: bool,
    /// Synthetic data: number of classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Synthetic data: items per class.
    #[arg(long)]
    per_class: Option<usize>,
    /// Synthetic data: feature dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Synthetic data: per-dimension cluster spread.
    #[arg(long)]
    sigma: Option<f64>,
    /// Synthetic data: probability of a second label.
    #[arg(long)]
    overlap: Option<f64>,
    /// Synthetic data: generator seed.
    #[arg(long)]
    data_seed: Option<u64>,
    /// Fraction of each class held out as queries.
    #[arg(long)]
    query_fraction: Option<f64>,
    /// Comma-separated training seeds.
    #[arg(long = "seeds", value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Epochs between ×0.1 learning-rate decays.
    #[arg(long)]
    decay_every: Option<usize>,
    /// Triplet margin.
    #[arg(long)]
    margin: Option<f64>,
    /// Loss exponent of the full method.
    #[arg(long)]
    gamma: Option<u32>,
    /// (relevant, irrelevant) pairs sampled per query.
    #[arg(long)]
    cap: Option<usize>,
    /// Keep every (relevant, irrelevant) pair per query.
    #[arg(long)]
    no_cap: bool,
    /// Comma-separated hidden layer widths.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Write per-step mining/loss statistics as JSON lines.
    #[arg(long)]
    stats: Option<PathBuf>,
}

impl Overrides {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let user: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                let mut merged = toml::Table::try_from(ExperimentConfig::default())?;
                merge(&mut merged, user);
                merged.try_into().with_context(|| format!("parsing {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(path) = &self.data {
            cfg.data = DataSource::File {
                path: path.clone(),
                standardize: self.standardize,
            };
        } else if let DataSource::File { standardize, .. } = &mut cfg.data {
            *standardize |= self.standardize;
        }
        if let DataSource::Synthetic(spec) = &mut cfg.data {
            set(&mut spec.num_classes, self.classes);
            set(&mut spec.per_class, self.per_class);
            set(&mut spec.dim, self.dim);
            set(&mut spec.sigma, self.sigma);
            set(&mut spec.overlap, self.overlap);
            set(&mut spec.seed, self.data_seed);
        }
        if let Some(f) = self.query_fraction {
            cfg.split.query = orhash::data::QuerySize::Fraction(f);
        }
        set(&mut cfg.seeds, self.seeds.clone());
        set(&mut cfg.train.epochs, self.epochs);
        set(&mut cfg.train.batch_size, self.batch_size);
        set(&mut cfg.train.sgd.lr, self.lr);
        set(&mut cfg.train.sgd.decay_every, self.decay_every);
        set(&mut cfg.train.hidden, self.hidden.clone());
        set(&mut cfg.loss.margin, self.margin);
        set(&mut cfg.loss.gamma, self.gamma);
        if self.cap.is_some() {
            cfg.train.cap_per_query = self.cap;
        }
        if self.no_cap {
            cfg.train.cap_per_query = None;
        }
        Ok(cfg)
    }

    fn sink(&self) -> Result<Option<JsonLinesSink<BufWriter<File>>>> {
        self.stats
            .as_ref()
            .map(|p| {
                let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
                Ok(JsonLinesSink::new(BufWriter::new(f)))
            })
            .transpose()
    }
}

/// Overlays `over` on `base` table by table, so a partial `[train]` keeps
/// the experiment defaults for every field it does not mention. The data
/// source is replaced as a whole since its fields depend on its kind.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if key != "data" => merge(b, o),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_table(report: &EvalReport) {
    print!("{}", map_table_csv(report));
}

fn finish_report(report: &EvalReport, out: &Path) -> Result<()> {
    emit_report(report, out)?;
    print_table(report);
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    method: Method,
    bits: usize,
    seed: u64,
    init_hash: &'a str,
    loss_curve: &'a [f64],
    active_curve: &'a [f64],
    mining: orhash::mining::MiningStats,
}

#[derive(Serialize)]
struct EvalSummary {
    method: Option<String>,
    bits: usize,
    map: f64,
    precision_at_k: Vec<PrecisionAtK>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { opts, out } => {
            let cfg = opts.config()?;
            let DataSource::Synthetic(spec) = &cfg.data else {
                bail!("gen-data needs a synthetic data source");
            };
            let ds = generate_clusters(spec)?;
            ds.save_csv(&out)?;
            println!("wrote {} items of dimension {} to {}", ds.len(), ds.dim(), out.display());
        }
        Command::Train {
            opts,
            seed,
            bits,
            out,
            method,
        } => {
            let mut cfg = opts.config()?;
            cfg.methods = vec![method];
            cfg.bits = vec![bits];
            cfg.seeds = vec![seed];
            cfg.validate()?;
            let ds = cfg.load_dataset()?;
            let train_rows = &ds.splits().expect("split applied").train;
            let sink = opts.sink()?;
            let outcome = train(
                ds.select_features(train_rows).view(),
                &ds.select_labels(train_rows),
                &RunSpec {
                    arm: method.name(),
                    method,
                    loss: cfg.loss,
                    bits,
                    seed,
                },
                &cfg.train,
                sink.as_ref().map(|s| s as &dyn StatsSink),
            )?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let header = CheckpointHeader {
                dims: outcome.encoder.dims(),
                sgd: cfg.train.sgd,
                loss: Some(method.loss_config(&cfg.loss)),
                method: Some(method.name().to_string()),
                epoch: cfg.train.epochs,
                seed,
            };
            save_checkpoint(&out.join("model.ckpt"), &header, &outcome.encoder)?;
            write_json(
                &out.join("train_summary.json"),
                &TrainSummary {
                    method,
                    bits,
                    seed,
                    init_hash: &outcome.init_hash,
                    loss_curve: &outcome.loss_curve,
                    active_curve: &outcome.active_curve,
                    mining: outcome.mining,
                },
            )?;
            println!(
                "trained {method} ({bits} bits, seed {seed}): final epoch loss {:.6}",
                outcome.loss_curve.last().copied().unwrap_or(0.0)
            );
        }
        Command::Eval { opts, checkpoint, out } => {
            let cfg = opts.config()?;
            let (header, enc) = load_checkpoint(&checkpoint)?;
            let ds = cfg.load_dataset()?;
            if enc.input_dim() != ds.dim() {
                bail!("checkpoint expects {} features, dataset has {}", enc.input_dim(), ds.dim());
            }
            let splits = ds.splits().expect("split applied");
            let threshold = cfg.train.threshold;
            let q = encode(&enc, &ds, &splits.query, threshold)?;
            let db = encode(&enc, &ds, &splits.database, threshold)?;
            let eval = evaluate_codes(&ds, &splits.query, &q, &splits.database, &db, &cfg.precision_ks)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let bits = enc.code_len();
            let arm = header.method.clone().unwrap_or_else(|| "model".into());
            let pr_path = out.join(pr_file_name(&arm, bits));
            let mut w = BufWriter::new(File::create(&pr_path)?);
            write_pr_csv(&mut w, &eval.pr_curve)?;
            save_codes(&out.join("codes_query.ohc"), &q)?;
            save_codes(&out.join("codes_database.ohc"), &db)?;
            write_json(
                &out.join("metrics.json"),
                &EvalSummary {
                    method: header.method,
                    bits,
                    map: eval.map,
                    precision_at_k: eval.precision_at_k,
                },
            )?;
            println!("MAP {:.6}", eval.map);
        }
        Command::Ablate {
            opts,
            out,
            bits,
            methods,
        } => {
            let mut cfg = opts.config()?;
            set(&mut cfg.bits, bits);
            cfg.methods = methods.unwrap_or_else(|| Method::ABLATION.to_vec());
            let sink = opts.sink()?;
            let report = run_experiment(&cfg, sink.as_ref().map(|s| s as &dyn StatsSink))?;
            finish_report(&report, &out)?;
        }
        Command::GammaSweep {
            opts,
            out,
            bits,
            gammas,
        } => {
            let mut cfg = opts.config()?;
            set(&mut cfg.bits, bits);
            let sink = opts.sink()?;
            let report = gamma_sweep(&cfg, &gammas, sink.as_ref().map(|s| s as &dyn StatsSink))?;
            finish_report(&report, &out)?;
        }
        Command::CompareMining { opts, out, bits } => {
            let mut cfg = opts.config()?;
            set(&mut cfg.bits, bits);
            cfg.methods = Method::MINING.to_vec();
            let sink = opts.sink()?;
            let report = run_experiment(&cfg, sink.as_ref().map(|s| s as &dyn StatsSink))?;
            finish_report(&report, &out)?;
            for &bits in &cfg.bits {
                for other in ["hnm", "semi_hard", "triplet_plain"] {
                    let c = compare_arms(&report, "full", other, bits)?;
                    println!(
                        "{bits} bits: full - {other} = {:+.4} (se {:.4}, {}W/{}L/{}T, sign p {:.4})",
                        c.mean_diff, c.std_err_diff, c.wins, c.losses, c.ties, c.sign_test_p
                    );
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e
                .downcast_ref::<orhash::Error>()
                .is_some_and(orhash::Error::is_numeric);
            ExitCode::from(if numeric { 2 } else { 1 })
        }
    }
}
