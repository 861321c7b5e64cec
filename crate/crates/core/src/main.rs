use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use divgnn::dataio::{generate_dataset, read_bounds, read_sample, DatasetConfig};
use divgnn::fem::ElasticMaterial;
use divgnn::pipeline::{
    run_bench, run_eval, run_reproduce, run_train, write_config, BenchConfig, EvalRunConfig, ReproduceConfig,
    TrainRunConfig,
};
use divgnn::training::{DivergenceSpace, ModelVariant};
use divgnn::{Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Periodic micro-structure stress reconstruction with graph networks.
#[derive(Parser)]
#[command(name = "divgnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a FE-labelled corpus of periodic hole plates.
    GenDataset(GenArgs),
    /// Train one model variant on a generated corpus.
    Train(TrainArgs),
    /// Metrics, histograms and VTK exports for trained checkpoints.
    Eval(EvalArgs),
    /// Time FE solves against graph inference for growing meshes.
    Bench(BenchArgs),
    /// Dataset, all three variants and their comparison in one run.
    Reproduce(ReproduceArgs),
    /// Print a summary of one sample file.
    Inspect {
        path: PathBuf,
    },
}

fn parse_pair(s: &str) -> std::result::Result<[f64; 2], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected two comma-separated numbers, got {s:?}"))
}

fn parse_triple(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected three comma-separated numbers, got {s:?}"))
}

/// Defaults, overridden by a TOML file, overridden by flags.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.into(),
                source: e,
            })?;
            toml::from_str(&text).map_err(|e| Error::Format {
                path: p.into(),
                detail: e.to_string(),
            })
        }
    }
}

#[derive(Args)]
struct DatasetFlags {
    /// Number of samples.
    #[arg(long)]
    count: Option<usize>,
    /// Corpus seed.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML or JSON file with geometry sampling bounds.
    #[arg(long)]
    bounds: Option<PathBuf>,
    /// Young's modulus and Poisson ratio, e.g. 100000,0.3.
    #[arg(long, value_parser = parse_pair)]
    material: Option<[f64; 2]>,
    /// Mean-strain component range, e.g. -0.05,0.05.
    #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
    strain_range: Option<[f64; 2]>,
    /// Train, validation and test fractions.
    #[arg(long, value_parser = parse_triple)]
    split: Option<[f64; 3]>,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
}

impl DatasetFlags {
    fn apply(&self, cfg: &mut DatasetConfig) -> Result<()> {
        if let Some(v) = self.count {
            cfg.count = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(p) = &self.bounds {
            cfg.bounds = read_bounds(p)?;
        }
        if let Some([e, nu]) = self.material {
            cfg.material = ElasticMaterial {
                youngs_modulus: e,
                poisson_ratio: nu,
            };
        }
        if let Some(v) = self.strain_range {
            cfg.strain_range = v;
        }
        if let Some(v) = self.split {
            cfg.split = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        Ok(())
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML file with dataset settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: DatasetFlags,
}

#[derive(Args)]
struct TrainFlags {
    /// Divergence penalty weight (p-divgnn only).
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Seed for initialization and batch shuffling.
    #[arg(long)]
    train_seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Train for the full epoch budget.
    #[arg(long)]
    no_early_stopping: bool,
    /// Units of the divergence penalty: scaled or physical.
    #[arg(long)]
    divergence_space: Option<String>,
    /// Latent width.
    #[arg(long)]
    hidden: Option<usize>,
    /// Message-passing steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Separate weights per message-passing step.
    #[arg(long)]
    unshared: bool,
    /// Fixed-order execution (training is always sequential; recorded for
    /// provenance).
    #[arg(long)]
    deterministic: bool,
}

impl TrainFlags {
    fn apply(&self, model: &mut divgnn::model::GnnConfig, train: &mut divgnn::training::TrainConfig) -> Result<()> {
        if let Some(v) = self.lambda {
            train.lambda = v;
        }
        if let Some(v) = self.epochs {
            train.max_epochs = v;
        }
        if let Some(v) = self.train_seed {
            train.seed = v;
        }
        if let Some(v) = self.lr {
            train.lr = v;
        }
        if let Some(v) = self.batch_size {
            train.batch_size = v;
        }
        if let Some(v) = self.patience {
            train.patience = v;
        }
        if self.no_early_stopping {
            train.early_stopping = false;
        }
        if let Some(s) = &self.divergence_space {
            train.divergence_space = match s.as_str() {
                "scaled" => DivergenceSpace::Scaled,
                "physical" => DivergenceSpace::Physical,
                _ => return Err(Error::Config(format!("unknown divergence space {s:?}"))),
            };
        }
        if self.deterministic {
            train.deterministic = true;
        }
        if let Some(v) = self.hidden {
            model.hidden = v;
        }
        if let Some(v) = self.steps {
            model.message_steps = v;
        }
        if self.unshared {
            model.shared_processor = false;
        }
        Ok(())
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// gnn, p-gnn or p-divgnn.
    #[arg(long)]
    model: Option<ModelVariant>,
    /// Alias of --train-seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file; repeat to compare several models.
    #[arg(long = "ckpt", required = true)]
    ckpts: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Export this many samples per model (worst first, then best) as VTK.
    #[arg(long)]
    export_fields: Option<usize>,
    /// train, val or test.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Target node counts, e.g. 1000,5000,20000.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    ckpt: PathBuf,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ReproduceArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    export_fields: Option<usize>,
    #[command(flatten)]
    data: DatasetFlags,
    #[command(flatten)]
    train: TrainFlags,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenDataset(a) => {
            let mut cfg: DatasetConfig = load_config(a.config.as_deref())?;
            a.flags.apply(&mut cfg)?;
            let m = generate_dataset(&a.out, &cfg)?;
            write_config(&a.out, &cfg)?;
            println!(
                "{} samples in {} (train {}, val {}, test {}, resampled {})",
                m.count,
                a.out.display(),
                m.splits.train.len(),
                m.splits.val.len(),
                m.splits.test.len(),
                m.resampled
            );
        }
        Command::Train(a) => {
            let mut cfg: TrainRunConfig = load_config(a.config.as_deref())?;
            cfg.data = a.data;
            cfg.out = a.out;
            if let Some(v) = a.model {
                cfg.variant = v;
            }
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            a.flags.apply(&mut cfg.model, &mut cfg.train)?;
            if !cfg.variant.uses_divergence() {
                if a.flags.lambda.is_some_and(|l| l != 0.0) {
                    log::warn!("lambda ignored for {}", cfg.variant);
                    eprintln!("warning: lambda ignored for {}", cfg.variant);
                }
                cfg.train.lambda = 0.0;
            }
            let s = run_train(&cfg)?;
            println!(
                "{}: best val NMSE {:.4e} at epoch {} of {}{}",
                s.variant,
                s.best_val_nmse,
                s.best_epoch,
                s.epochs_run,
                if s.stopped_early { " (early stop)" } else { "" }
            );
        }
        Command::Eval(a) => {
            let mut cfg: EvalRunConfig = load_config(a.config.as_deref())?;
            cfg.data = a.data;
            cfg.out = a.out;
            cfg.checkpoints = a.ckpts;
            if let Some(v) = a.export_fields {
                cfg.export_fields = v;
            }
            if let Some(v) = a.split {
                cfg.split = v;
            }
            if let Some(v) = a.bins {
                cfg.histogram_bins = v;
            }
            if let Some(v) = a.workers {
                cfg.workers = v;
            }
            let r = run_eval(&cfg)?;
            println!("{:<12} {:>8} {:>14} {:>14}", "model", "samples", "nmse", "divergence");
            for row in &r.rows {
                let m = &row.summary;
                println!("{:<12} {:>8} {:>14.4e} {:>14.4e}", row.model, m.samples, m.nmse, m.mean_div_norm);
            }
        }
        Command::Bench(a) => {
            let mut cfg: BenchConfig = load_config(a.config.as_deref())?;
            cfg.checkpoint = a.ckpt;
            cfg.out = a.out;
            if let Some(v) = a.sizes {
                cfg.sizes = v;
            }
            let rows = run_bench(&cfg)?;
            if let Some(dir) = cfg.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                write_config(dir, &cfg)?;
            }
            println!("nodes,t_fem_s,t_gnn_s,t_gnn_periodic_s");
            for r in rows {
                println!("{},{:.4e},{:.4e},{:.4e}", r.nodes, r.t_fem_s, r.t_gnn_s, r.t_gnn_periodic_s);
            }
        }
        Command::Reproduce(a) => {
            let mut cfg: ReproduceConfig = load_config(a.config.as_deref())?;
            cfg.out = a.out;
            if let Some(v) = a.export_fields {
                cfg.export_fields = v;
            }
            a.data.apply(&mut cfg.dataset)?;
            a.train.apply(&mut cfg.model, &mut cfg.train)?;
            let r = run_reproduce(&cfg)?;
            println!("{:<12} {:>14} {:>14}", "model", "nmse", "divergence");
            for row in &r.eval.rows {
                println!("{:<12} {:>14.4e} {:>14.4e}", row.model, row.summary.nmse, row.summary.mean_div_norm);
            }
            let o = r.ordering;
            println!("divergence ratio p-divgnn/p-gnn {:.3} ({})", o.div_ratio, pass(o.div_pass));
            println!("nmse ratio p-gnn/gnn {:.3} ({})", o.periodic_nmse_ratio, pass(o.periodic_pass));
            println!("nmse ratio p-divgnn/p-gnn {:.3} ({})", o.divergence_nmse_ratio, pass(o.nmse_pass));
            let d = r.dynamics;
            println!(
                "validation divergence lower in {}/{} late epochs ({})",
                d.below,
                d.compared_epochs,
                pass(d.pass)
            );
        }
        Command::Inspect { path } => {
            let r = read_sample(&path)?;
            let summary = serde_json::json!({
                "id": r.id,
                "spec": r.spec,
                "nodes": r.mesh.node_count(),
                "elements": r.mesh.element_count(),
                "periodic_pairs": r.mesh.periodic_pairs.len(),
                "eps_mean": r.eps_mean,
                "sigma_mean": r.sigma_mean,
                "div_operator": r.div_operator_ref,
            });
            println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
        }
    }
    Ok(())
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "fail"
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
