use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use nodemoe::analysis::{
    bucket_by_degree, bucket_by_homophily, expert_weight_profile, node_rows, node_weight_rows, per_bucket_accuracy,
    run_ablation, sweep_walk_length, write_csv, Ablation, Buckets,
};
use nodemoe::csbm::{degree_shift_check, degree_shift_grid, opposing_homophily_check, opposing_homophily_grid, BoundReport};
use nodemoe::dataset::Dataset;
use nodemoe::graph::node_homophily;
use nodemoe::moe::GraphInputs;
use nodemoe::synthetic::{sample_blend, BlendParams};
use nodemoe::trainer::{accuracy, load_run, make_splits, model_eval_contexts, run_experiment, SplitSpec, TrainConfig};
use nodemoe::{Error, Result};

#[derive(Parser)]
#[command(name = "nodemoe", version, about = "Gated mixture-of-experts node classification")]
struct Cli {
    /// TOML training config; defaults apply for anything missing.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Config override, `section.key=value`; repeatable.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset bundle directory or manifest.
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Use the synthetic blended graph generated with this seed instead.
    #[arg(long, conflicts_with = "bundle")]
    synthetic: Option<u64>,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    /// A saved run directory (`checkpoints/split{s}_seed{k}` from `train`).
    #[arg(long)]
    run: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BucketBy {
    Homophily,
    Degree,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Opposing,
    DegreeShift,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset and write its summary and per-node statistics.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
        /// Also write the dataset as a bundle here.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Write the train/val/test partitions.
    Splits {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Run the splits × seeds protocol and save every model.
    Train {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Evaluate one saved run and dump per-node predictions, patterns and weights.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
    },
    #[command(subcommand)]
    Analyze(Analyze),
    /// Monte-Carlo check of the CSBM loss lower bounds.
    CsbmValidate {
        #[arg(long, value_enum, default_value = "both")]
        regime: RegimeArg,
        #[arg(long, default_value_t = 10)]
        trials: usize,
    },
}

#[derive(Subcommand)]
enum Analyze {
    /// Per-bucket accuracy of the ensemble and each of its experts.
    Buckets {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "homophily")]
        by: BucketBy,
        #[arg(long, default_value_t = 5)]
        buckets: usize,
    },
    /// Mean gate weight per bucket and expert.
    Weights {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "homophily")]
        by: BucketBy,
        #[arg(long, default_value_t = 5)]
        buckets: usize,
    },
    /// Full protocol vs an ablated variant.
    Ablation {
        #[command(flatten)]
        data: DataArgs,
        /// no_global, no_local, average_weights, no_residual_experts, full_sample_pretrain
        #[arg(long, required = true, value_delimiter = ',')]
        kind: Vec<Ablation>,
    },
    /// Accuracy as a function of random-walk length.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', default_value = "5,10,20,40")]
        lengths: Vec<usize>,
    },
}

/// Tracks written artifacts for the manifest.
struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, serde_json::to_vec_pretty(value)?)?;
        self.files.push(name.into());
        Ok(())
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        write_csv(&self.dir.join(name), rows)?;
        self.files.push(name.into());
        Ok(())
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        std::fs::write(self.dir.join(name), body)?;
        self.files.push(name.into());
        Ok(())
    }

    fn finish(self, command: &str, config: &TrainConfig) -> Result<()> {
        let mut files = Vec::new();
        for f in &self.files {
            let bytes = std::fs::read(self.dir.join(f))?;
            files.push(json!({ "path": f, "sha256": hex::encode(Sha256::digest(&bytes)), "bytes": bytes.len() }));
        }
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": config.seed,
            "config_hash": config.hash(),
            "files": files,
        });
        std::fs::write(self.dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        for f in &self.files {
            println!("{}", self.dir.join(f).display());
        }
        Ok(())
    }
}

fn load_data(args: &DataArgs) -> Result<Dataset> {
    match (&args.bundle, args.synthetic) {
        (Some(path), _) => Dataset::load_bundle(path),
        (None, Some(seed)) => Ok(sample_blend(&BlendParams::default(), seed)?.dataset),
        (None, None) => Err(Error::InvalidParameter("pass --bundle or --synthetic".into())),
    }
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let base = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct NodeStatRow {
    node: usize,
    degree: usize,
    homophily: Option<f64>,
    label: usize,
}

#[derive(Serialize)]
struct SplitRecord<'a> {
    split_index: usize,
    train: &'a [usize],
    val: &'a [usize],
    test: &'a [usize],
}

#[derive(Serialize)]
struct RunRow {
    split: usize,
    seed_index: usize,
    run_seed: u64,
    test_acc: f64,
    val_acc: f64,
    best_epoch: usize,
}

#[derive(Serialize)]
struct BoundRow {
    regime: String,
    train_p: f64,
    train_q: f64,
    test_p: f64,
    test_q: f64,
    trials: usize,
    measured_loss: f64,
    std_error: f64,
    bound: f64,
    satisfied: bool,
}

impl From<&BoundReport> for BoundRow {
    fn from(r: &BoundReport) -> Self {
        Self {
            regime: serde_json::to_value(r.regime).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            train_p: r.train.p,
            train_q: r.train.q,
            test_p: r.test.p,
            test_q: r.test.q,
            trials: r.trials,
            measured_loss: r.measured_loss,
            std_error: r.std_error,
            bound: r.theoretical_bound,
            satisfied: r.satisfied,
        }
    }
}

fn buckets_for(by: BucketBy, ds: &Dataset, nodes: &[usize], k: usize) -> Result<Buckets> {
    match by {
        BucketBy::Homophily => bucket_by_homophily(&ds.graph, &ds.labels, nodes, k),
        BucketBy::Degree => bucket_by_degree(&ds.graph, nodes, k),
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    }
    let config = load_config(&cli)?;
    let mut out = Outputs::new(&cli.out_dir)?;
    let name = match &cli.command {
        Command::Ingest { data, export } => {
            let ds = load_data(data)?;
            out.json("dataset_summary.json", &ds.summary())?;
            let rows: Vec<NodeStatRow> = (0..ds.num_nodes())
                .map(|i| NodeStatRow {
                    node: i,
                    degree: ds.graph.degree(i),
                    homophily: node_homophily(&ds.graph, &ds.labels, i).ok(),
                    label: ds.labels[i],
                })
                .collect();
            out.csv("node_stats.csv", &rows)?;
            if let Some(dir) = export {
                ds.write_bundle(dir, "exported by nodemoe ingest")?;
            }
            "ingest"
        }
        Command::Splits { data } => {
            let ds = load_data(data)?;
            let splits = (0..config.experiment.splits)
                .map(|s| make_splits(ds.num_nodes(), SplitSpec { seed: config.seed, split_index: s }))
                .collect::<Result<Vec<_>>>()?;
            let records: Vec<SplitRecord> = splits
                .iter()
                .enumerate()
                .map(|(s, x)| SplitRecord {
                    split_index: s,
                    train: &x.train,
                    val: &x.val,
                    test: &x.test,
                })
                .collect();
            out.json("splits.json", &records)?;
            "splits"
        }
        Command::Train { data } => {
            let ds = load_data(data)?;
            let result = run_experiment(&config, &ds, Some(&cli.out_dir.join("checkpoints")))?;
            out.text("config.toml", &config.to_toml_string()?)?;
            out.json("run_result.json", &result)?;
            let rows: Vec<RunRow> = result
                .runs
                .iter()
                .map(|r| RunRow {
                    split: r.split,
                    seed_index: r.seed_index,
                    run_seed: r.run_seed,
                    test_acc: r.test_acc,
                    val_acc: r.val_acc,
                    best_epoch: r.best_epoch,
                })
                .collect();
            out.csv("runs.csv", &rows)?;
            eprintln!("{}: {:.2} ± {:.2}", result.dataset, 100.0 * result.mean, 100.0 * result.std);
            "train"
        }
        Command::Evaluate { run } => {
            let ds = load_data(&run.data)?;
            let data = GraphInputs::new(ds.graph.clone(), &ds.features)?;
            let saved = load_run(&run.run, &config, ds.num_nodes())?;
            let ctx = model_eval_contexts(&saved.model, &data, config.walk, saved.record.run_seed);
            let fwd = saved.model.forward(&data, &ctx, None)?;
            let preds = fwd.predictions();
            let names: Vec<String> = saved.model.experts.kinds().iter().map(|k| k.to_string()).collect();
            let test = &saved.splits.test;
            let experts: serde_json::Map<String, serde_json::Value> = names
                .iter()
                .zip(&fwd.expert_logits)
                .map(|(n, l)| (n.clone(), json!(accuracy(&l.argmax_rows(), &ds.labels, test))))
                .collect();
            out.json(
                "evaluation.json",
                &json!({
                    "split": saved.record.split,
                    "seed_index": saved.record.seed_index,
                    "test_acc": accuracy(&preds, &ds.labels, test),
                    "val_acc": accuracy(&preds, &ds.labels, &saved.splits.val),
                    "expert_test_acc": experts,
                }),
            )?;
            out.csv("node_rows.csv", &node_rows(&ds.graph, &ds.labels, &fwd, test))?;
            out.csv("node_weights.csv", &node_weight_rows(&fwd.weights, &names, test))?;
            "evaluate"
        }
        Command::Analyze(Analyze::Buckets { run, by, buckets }) | Command::Analyze(Analyze::Weights { run, by, buckets }) => {
            let is_weights = matches!(cli.command, Command::Analyze(Analyze::Weights { .. }));
            let ds = load_data(&run.data)?;
            let data = GraphInputs::new(ds.graph.clone(), &ds.features)?;
            let saved = load_run(&run.run, &config, ds.num_nodes())?;
            let ctx = model_eval_contexts(&saved.model, &data, config.walk, saved.record.run_seed);
            let fwd = saved.model.forward(&data, &ctx, None)?;
            let b = buckets_for(*by, &ds, &saved.splits.test, *buckets)?;
            out.json("buckets.json", &b)?;
            let names: Vec<String> = saved.model.experts.kinds().iter().map(|k| k.to_string()).collect();
            if is_weights {
                out.csv("weight_profile.csv", &expert_weight_profile(&b, &fwd.weights, &names)?)?;
                out.csv("node_weights.csv", &node_weight_rows(&fwd.weights, &names, &saved.splits.test))?;
                "analyze weights"
            } else {
                let mut models = vec![("moe".to_string(), fwd.predictions())];
                models.extend(names.iter().cloned().zip(fwd.expert_logits.iter().map(|l| l.argmax_rows())));
                out.csv("bucket_accuracy.csv", &per_bucket_accuracy(&b, &models, &ds.labels)?)?;
                "analyze buckets"
            }
        }
        Command::Analyze(Analyze::Ablation { data, kind }) => {
            let ds = load_data(data)?;
            let mut rows = Vec::new();
            for &k in kind {
                let report = run_ablation(k, &config, &ds)?;
                rows.extend(report.rows());
                out.json(&format!("ablation_{k}.json"), &report)?;
            }
            out.csv("ablation.csv", &rows)?;
            "analyze ablation"
        }
        Command::Analyze(Analyze::Sweep { data, lengths }) => {
            let ds = load_data(data)?;
            out.csv("walk_sweep.csv", &sweep_walk_length(&config, &ds, lengths)?)?;
            "analyze sweep"
        }
        Command::CsbmValidate { regime, trials } => {
            let mut reports = Vec::new();
            if matches!(regime, RegimeArg::Opposing | RegimeArg::Both) {
                for (i, (train, test)) in opposing_homophily_grid().iter().enumerate() {
                    reports.push(opposing_homophily_check(train, test, 1.0, *trials, config.seed.wrapping_add(i as u64))?);
                }
            }
            if matches!(regime, RegimeArg::DegreeShift | RegimeArg::Both) {
                for (i, (train, test)) in degree_shift_grid().iter().enumerate() {
                    reports.push(degree_shift_check(train, test, 1.0, *trials, config.seed.wrapping_add(100 + i as u64))?);
                }
            }
            let rows: Vec<BoundRow> = reports.iter().map(BoundRow::from).collect();
            let failed = rows.iter().filter(|r| !r.satisfied).count();
            out.csv("csbm_bounds.csv", &rows)?;
            out.json("csbm_bounds.json", &reports)?;
            eprintln!("{} of {} settings satisfy their bound", rows.len() - failed, rows.len());
            "csbm-validate"
        }
    };
    out.finish(name, &config)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run() {
        eprintln!("error: {e}");
        let mut src = std::error::Error::source(&e);
        while let Some(s) = src {
            eprintln!("  caused by: {s}");
            src = s.source();
        }
        std::process::exit(1);
    }
}
