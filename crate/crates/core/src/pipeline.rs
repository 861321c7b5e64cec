//! End-to-end stages behind the command-line tool: training runs,
//! evaluation reports, timing benchmarks and the three-variant ablation.
//!
//! Every stage writes its fully resolved configuration into its output
//! directory as `config.toml`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::dataio::{
    export_vtk, generate_dataset, read_checkpoint, sha256_hex, write_atomic, write_checkpoint,
    write_json, Checkpoint, Dataset, DatasetConfig, MANIFEST_FILE,
};
use crate::divop::apply_divergence;
use crate::error::{Error, Result};
use crate::fem::{solve_sample, ElasticMaterial, MeanStrain, NodalStressField};
use crate::graph::{add_periodic_edges, mesh_to_graph};
use crate::meshgen::{generate_mesh, HolePlateSpec};
use crate::model::{GnnConfig, GnnModel, GraphInput};
use crate::training::{
    evaluate_fields, predict_sample, stress_histograms, stress_scale, train_with, EpochRecord, EvalSummary,
    Evaluation, ModelVariant, PreparedSample, SampleMetrics, TrainConfig,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_FILE: &str = "report.json";

/// Serializes a resolved configuration into `dir/config.toml`.
pub fn write_config<T: Serialize>(dir: &Path, cfg: &T) -> Result<()> {
    let text = toml::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&dir.join(CONFIG_FILE), text.as_bytes())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// SHA-256 of the canonical JSON form of a value.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("configuration serializes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub variant: ModelVariant,
    pub model: GnnConfig,
    /// `train.lambda` is the effective value: zero for variants without the
    /// divergence term.
    pub train: TrainConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            data: PathBuf::from("data"),
            out: PathBuf::from("runs/p-divgnn"),
            variant: ModelVariant::PDivGnn,
            model: GnnConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: ModelVariant,
    pub config_fingerprint: String,
    pub dataset_manifest_sha256: String,
    pub checkpoint_sha256: String,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_nmse: f64,
    pub stopped_early: bool,
    pub seconds: f64,
}

fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_nmse,val_nmse,val_div\n");
    for r in history {
        writeln!(s, "{},{:.17e},{:.17e},{:.17e}", r.epoch, r.train_nmse, r.val_nmse, r.val_div).unwrap();
    }
    s
}

/// Trains one variant on a dataset's train split with validation-based
/// early stopping, writing checkpoint, history and summary into `cfg.out`.
pub fn run_train(cfg: &TrainRunConfig) -> Result<TrainSummary> {
    cfg.model.validate()?;
    cfg.train.validate()?;
    if cfg.train.lambda != cfg.variant.effective_lambda(cfg.train.lambda) {
        return Err(Error::Config(format!("{} trains without the divergence term; lambda must be 0", cfg.variant)));
    }
    let ds = Dataset::load(&cfg.data)?;
    let dataset_manifest_sha256 = file_sha256(&cfg.data.join(MANIFEST_FILE))?;
    train_on(&ds, &dataset_manifest_sha256, cfg)
}

fn train_on(ds: &Dataset, manifest_sha: &str, cfg: &TrainRunConfig) -> Result<TrainSummary> {
    create_dir(&cfg.out)?;
    write_config(&cfg.out, cfg)?;
    let periodic = cfg.variant.periodic_edges();
    let train_set = ds.prepare(&ds.manifest.splits.train, periodic)?;
    let val_set = ds.prepare(&ds.manifest.splits.val, periodic)?;
    let model = GnnModel::new(cfg.model, cfg.train.seed)?;
    log::info!(
        "training {} ({} parameters) on {} samples, validating on {}",
        cfg.variant,
        model.param_count(),
        train_set.len(),
        val_set.len()
    );
    let start = Instant::now();
    let history_path = cfg.out.join(HISTORY_FILE);
    let mut partial = Vec::new();
    let outcome = train_with(model, &train_set, &val_set, &ds.stats, &cfg.train, |rec| {
        partial.push(*rec);
        write_atomic(&history_path, history_csv(&partial).as_bytes())
    })?;
    let seconds = start.elapsed().as_secs_f64();
    let ckpt = Checkpoint {
        model: outcome.model,
        stats: ds.stats.clone(),
        periodic_edges: periodic,
        variant: cfg.variant.name().into(),
        train_config: Some(cfg.train),
        history: outcome.history.clone(),
    };
    let ckpt_path = cfg.out.join(CHECKPOINT_FILE);
    write_checkpoint(&ckpt_path, &ckpt)?;
    write_atomic(&history_path, history_csv(&outcome.history).as_bytes())?;
    let summary = TrainSummary {
        variant: cfg.variant,
        config_fingerprint: fingerprint(&(cfg.variant, cfg.model, cfg.train)),
        dataset_manifest_sha256: manifest_sha.to_string(),
        checkpoint_sha256: file_sha256(&ckpt_path)?,
        epochs_run: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        best_val_nmse: outcome.best_val_nmse,
        stopped_early: outcome.stopped_early,
        seconds,
    };
    write_json(&cfg.out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalRunConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    /// `train`, `val` or `test`.
    pub split: String,
    /// Number of samples per model exported as VTK: the worst half (rounded
    /// up) and the best half by NMSE.
    pub export_fields: usize,
    pub histogram_bins: usize,
    pub workers: usize,
}

impl Default for EvalRunConfig {
    fn default() -> Self {
        EvalRunConfig {
            data: PathBuf::from("data"),
            out: PathBuf::from("eval"),
            checkpoints: Vec::new(),
            split: "test".into(),
            export_fields: 0,
            histogram_bins: 50,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub model: String,
    pub summary: EvalSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub divergence_reduction: String,
    pub nmse_reduction: String,
    /// The FE truth itself is always the first row.
    pub rows: Vec<ModelMetrics>,
}

pub const DIVERGENCE_REDUCTION: &str =
    "mean over samples of the per-sample mean Euclidean norm of the nodal divergence over internal nodes [MPa/mm]";
pub const NMSE_REDUCTION: &str =
    "mean over samples of the per-component squared error normalized by the truth variance, averaged over components";

fn split_ids<'a>(ds: &'a Dataset, split: &str) -> Result<&'a [usize]> {
    match split {
        "train" => Ok(&ds.manifest.splits.train),
        "val" => Ok(&ds.manifest.splits.val),
        "test" => Ok(&ds.manifest.splits.test),
        s => Err(Error::Config(format!("unknown split {s:?}; expected train, val or test"))),
    }
}

fn metrics_csv(report: &EvalReport) -> String {
    let mut s = format!("# divergence: {}\n# nmse: {}\n", report.divergence_reduction, report.nmse_reduction);
    s.push_str("model,samples,nmse,mean_div_norm,mean_sq_div_scaled\n");
    for r in &report.rows {
        let m = &r.summary;
        writeln!(s, "{},{},{:.9e},{:.9e},{:.9e}", r.model, m.samples, m.nmse, m.mean_div_norm, m.mean_sq_div_scaled)
            .unwrap();
    }
    s
}

fn field_matrix(f: &NodalStressField) -> Matrix {
    Matrix {
        rows: f.len(),
        cols: 3,
        data: f.0.iter().flatten().copied().collect(),
    }
}

/// Indices of the `k` samples to export: worst first, then best, distinct.
pub fn export_selection(per_sample: &[SampleMetrics], k: usize) -> Vec<(usize, &'static str)> {
    let mut order: Vec<usize> = (0..per_sample.len()).collect();
    order.sort_by(|&a, &b| per_sample[b].nmse.total_cmp(&per_sample[a].nmse).then(a.cmp(&b)));
    let k = k.min(order.len());
    let worst = k.div_ceil(2);
    let mut out: Vec<(usize, &'static str)> = order[..worst].iter().map(|&i| (i, "worst")).collect();
    out.extend(order[order.len() - (k - worst)..].iter().rev().map(|&i| (i, "best")));
    out
}

fn export_sample(
    path: &Path,
    ds: &Dataset,
    id: usize,
    s: &PreparedSample,
    pred: &NodalStressField,
) -> Result<()> {
    let truth = field_matrix(&s.truth);
    let p = field_matrix(pred);
    let mut err = p.clone();
    for (e, t) in err.data.iter_mut().zip(&truth.data) {
        *e -= t;
    }
    let div = apply_divergence(s.operator(), pred)?;
    let norms = Matrix {
        rows: div.0.len(),
        cols: 1,
        data: div.norms(),
    };
    export_vtk(
        path,
        &ds.records[id].mesh,
        &[("truth", &truth), ("prediction", &p), ("error", &err), ("divergence_norm", &norms)],
    )
}

/// Metrics table, per-sample metrics, histograms and optional VTK exports
/// for the FE truth and every checkpoint.
pub fn run_eval(cfg: &EvalRunConfig) -> Result<EvalReport> {
    let ds = Dataset::load(&cfg.data)?;
    let ckpts = cfg
        .checkpoints
        .iter()
        .map(|p| read_checkpoint(p))
        .collect::<Result<Vec<_>>>()?;
    eval_on(&ds, &ckpts, cfg)
}

fn eval_on(ds: &Dataset, ckpts: &[Checkpoint], cfg: &EvalRunConfig) -> Result<EvalReport> {
    create_dir(&cfg.out)?;
    write_config(&cfg.out, cfg)?;
    let ids = split_ids(ds, &cfg.split)?;
    if ids.is_empty() {
        return Err(Error::Dataset(format!("split {} is empty", cfg.split)));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let scale = stress_scale(&ds.stats);
    let plain = ds.prepare(ids, false)?;
    let truth_eval = evaluate_fields(&plain, plain.iter().map(|s| s.truth.clone()).collect(), scale)?;
    let mut rows = vec![ModelMetrics {
        model: "fem".into(),
        summary: truth_eval.summary,
    }];
    let mut per_sample = String::from("model,id,nodes,nmse,mean_div_norm,mean_sq_div_scaled\n");
    let mut push_rows = |name: &str, e: &Evaluation| {
        for (id, m) in ids.iter().zip(&e.per_sample) {
            writeln!(
                per_sample,
                "{name},{id},{},{:.9e},{:.9e},{:.9e}",
                m.nodes, m.nmse, m.mean_div_norm, m.mean_sq_div_scaled
            )
            .unwrap();
        }
    };
    push_rows("fem", &truth_eval);
    let mut hist = String::from("model,component,bin_lo,bin_hi,truth_count,pred_count\n");
    let mut names: BTreeMap<String, usize> = BTreeMap::new();
    for ckpt in ckpts {
        if ckpt.stats.checksum() != ds.stats.checksum() {
            return Err(Error::Config(format!(
                "checkpoint {} was trained with different feature statistics than dataset {}",
                ckpt.variant,
                ds.dir.display()
            )));
        }
        let seen = names.entry(ckpt.variant.clone()).or_insert(0);
        *seen += 1;
        let name = if *seen == 1 { ckpt.variant.clone() } else { format!("{}-{}", ckpt.variant, seen) };
        let samples = if ckpt.periodic_edges { ds.prepare(ids, true)? } else { plain.clone() };
        let preds = pool.install(|| {
            samples
                .par_iter()
                .map(|s| predict_sample(&ckpt.model, s, &ds.stats))
                .collect::<Result<Vec<_>>>()
        })?;
        let e = evaluate_fields(&samples, preds, scale)?;
        push_rows(&name, &e);
        for h in stress_histograms(&samples, &e.predictions, &ds.stats, cfg.histogram_bins)? {
            for b in 0..h.truth.len() {
                writeln!(
                    hist,
                    "{name},{},{:.9e},{:.9e},{},{}",
                    ["xx", "yy", "xy"][h.component],
                    h.edges[b],
                    h.edges[b + 1],
                    h.truth[b],
                    h.pred[b]
                )
                .unwrap();
            }
        }
        if cfg.export_fields > 0 {
            let dir = cfg.out.join("vtk").join(&name);
            for (k, tag) in export_selection(&e.per_sample, cfg.export_fields) {
                let id = ids[k];
                export_sample(&dir.join(format!("{tag}_sample_{id:05}.vtk")), ds, id, &samples[k], &e.predictions[k])?;
            }
        }
        rows.push(ModelMetrics {
            model: name,
            summary: e.summary,
        });
    }
    let report = EvalReport {
        split: cfg.split.clone(),
        divergence_reduction: DIVERGENCE_REDUCTION.into(),
        nmse_reduction: NMSE_REDUCTION.into(),
        rows,
    };
    write_atomic(&cfg.out.join("metrics.csv"), metrics_csv(&report).as_bytes())?;
    write_atomic(&cfg.out.join("per_sample.csv"), per_sample.as_bytes())?;
    write_atomic(&cfg.out.join("histograms.csv"), hist.as_bytes())?;
    write_json(&cfg.out.join("metrics.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub material: ElasticMaterial,
    pub plate_side: f64,
    pub hole_radius: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![1000, 2000, 5000, 10000, 20000],
            checkpoint: PathBuf::from("runs/p-divgnn/checkpoint.bin"),
            out: PathBuf::from("bench.csv"),
            material: ElasticMaterial::default(),
            plate_side: 100.0,
            hole_radius: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub nodes: usize,
    pub t_fem_s: f64,
    pub t_gnn_s: f64,
    pub t_gnn_periodic_s: f64,
}

/// Centered-hole plate, refined twofold at the hole, whose element size is tuned so the mesh has
/// roughly `target` nodes.
pub fn sized_spec(cfg: &BenchConfig, target: usize) -> Result<HolePlateSpec> {
    let c = cfg.plate_side / 2.0;
    let area = cfg.plate_side * cfg.plate_side - std::f64::consts::PI * cfg.hole_radius * cfg.hole_radius;
    // Equilateral-ish triangulations have about 2 / (sqrt(3) h^2) nodes per area.
    let mut h = (2.0 * area / (3f64.sqrt() * target.max(4) as f64)).sqrt();
    let make = |h: f64| HolePlateSpec {
        plate_side: cfg.plate_side,
        hole_center: [c, c],
        hole_radius: cfg.hole_radius,
        global_elem_size: h,
        hole_elem_size: 0.5 * h,
        seed: 0,
    };
    for _ in 0..3 {
        let n = generate_mesh(&make(h))?.node_count();
        h *= (n as f64 / target as f64).sqrt();
    }
    let spec = make(h);
    spec.validate()?;
    Ok(spec)
}

/// Wall-clock of the FE solve versus graph construction plus inference,
/// with and without periodic edges. Rows are sorted by node count.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let ckpt = read_checkpoint(&cfg.checkpoint)?;
    let eps = MeanStrain::new(0.01, -0.005, 0.004);
    let mut rows = Vec::with_capacity(cfg.sizes.len());
    for &target in &cfg.sizes {
        let spec = sized_spec(cfg, target)?;
        let mesh = generate_mesh(&spec)?;
        let t = Instant::now();
        let fe = solve_sample(&mesh, &cfg.material, &eps)?;
        let t_fem_s = t.elapsed().as_secs_f64();
        let infer = |periodic: bool| -> Result<f64> {
            let t = Instant::now();
            let mut g = mesh_to_graph(&mesh, &fe.mean);
            if periodic {
                g = add_periodic_edges(g, &mesh.periodic_pairs)?;
            }
            let input = GraphInput::from_graph(&ckpt.stats.standardize(&g));
            let y = ckpt.model.predict(&input)?;
            std::hint::black_box(&y);
            Ok(t.elapsed().as_secs_f64())
        };
        let row = BenchRow {
            nodes: mesh.node_count(),
            t_fem_s,
            t_gnn_s: infer(false)?,
            t_gnn_periodic_s: infer(true)?,
        };
        log::info!("bench {row:?}");
        rows.push(row);
    }
    rows.sort_by_key(|r| r.nodes);
    let mut csv = String::from("nodes,t_fem_s,t_gnn_s,t_gnn_periodic_s\n");
    for r in &rows {
        writeln!(csv, "{},{:.6e},{:.6e},{:.6e}", r.nodes, r.t_fem_s, r.t_gnn_s, r.t_gnn_periodic_s).unwrap();
    }
    write_atomic(&cfg.out, csv.as_bytes())?;
    Ok(rows)
}

/// The three-variant ablation on one generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReproduceConfig {
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub model: GnnConfig,
    /// `lambda` applies to the divergence variant only.
    pub train: TrainConfig,
    pub export_fields: usize,
}

impl Default for ReproduceConfig {
    fn default() -> Self {
        ReproduceConfig {
            out: PathBuf::from("reproduce"),
            dataset: DatasetConfig {
                count: 1000,
                seed: 2024,
                workers: 8,
                ..DatasetConfig::default()
            },
            model: GnnConfig {
                hidden: 64,
                message_steps: 6,
                shared_processor: true,
            },
            train: TrainConfig {
                max_epochs: 100,
                seed: 2024,
                ..TrainConfig::default()
            },
            export_fields: 0,
        }
    }
}

impl ReproduceConfig {
    /// Identity of the experiment: everything except paths and worker counts.
    pub fn fingerprint(&self) -> String {
        let mut d = self.dataset.clone();
        d.workers = 0;
        fingerprint(&(d, self.model, self.train))
    }
}

/// Relative-ordering checks on the ablation's test metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderingChecks {
    /// Divergence of P-DivGNN over P-GNN; pass when at most 0.5.
    pub div_ratio: f64,
    /// NMSE of P-GNN over GNN; pass when at most 0.7.
    pub periodic_nmse_ratio: f64,
    /// NMSE of P-DivGNN over P-GNN; pass when at most 1.15.
    pub divergence_nmse_ratio: f64,
    pub div_pass: bool,
    pub periodic_pass: bool,
    pub nmse_pass: bool,
}

pub fn ordering_checks(gnn: &EvalSummary, pgnn: &EvalSummary, pdiv: &EvalSummary) -> OrderingChecks {
    let div_ratio = pdiv.mean_div_norm / pgnn.mean_div_norm;
    let periodic_nmse_ratio = pgnn.nmse / gnn.nmse;
    let divergence_nmse_ratio = pdiv.nmse / pgnn.nmse;
    OrderingChecks {
        div_ratio,
        periodic_nmse_ratio,
        divergence_nmse_ratio,
        div_pass: div_ratio <= 0.5,
        periodic_pass: periodic_nmse_ratio <= 0.7,
        nmse_pass: divergence_nmse_ratio <= 1.15,
    }
}

/// Validation-divergence comparison over the final half of the epochs both
/// runs completed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsCheck {
    pub common_epochs: usize,
    pub compared_epochs: usize,
    pub below: usize,
    pub fraction_below: f64,
    pub pass: bool,
}

pub fn dynamics_check(pgnn: &[EpochRecord], pdiv: &[EpochRecord]) -> DynamicsCheck {
    let common = pgnn.len().min(pdiv.len());
    let start = common / 2;
    let compared = common - start;
    let below = (start..common).filter(|&k| pdiv[k].val_div < pgnn[k].val_div).count();
    let fraction_below = if compared == 0 { 0.0 } else { below as f64 / compared as f64 };
    DynamicsCheck {
        common_epochs: common,
        compared_epochs: compared,
        below,
        fraction_below,
        pass: compared > 0 && fraction_below >= 0.8,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproduceReport {
    pub config: ReproduceConfig,
    pub config_fingerprint: String,
    pub dataset_manifest_sha256: String,
    pub eval: EvalReport,
    pub runs: Vec<TrainSummary>,
    pub histories: BTreeMap<String, Vec<EpochRecord>>,
    pub ordering: OrderingChecks,
    pub dynamics: DynamicsCheck,
}

fn dataset_matches(dir: &Path, cfg: &DatasetConfig) -> bool {
    let Ok(m) = crate::dataio::read_json::<crate::dataio::DatasetManifest>(&dir.join(MANIFEST_FILE)) else {
        return false;
    };
    m.corpus_seed == cfg.seed
        && m.count == cfg.count
        && m.bounds == cfg.bounds
        && m.material == cfg.material
        && m.strain_range == cfg.strain_range
        && m.split_fractions == cfg.split
}

/// Generates the corpus, trains all three variants and evaluates them on
/// the test split. Stages whose outputs already match the configuration
/// are reused, so an interrupted run can be resumed.
pub fn run_reproduce(cfg: &ReproduceConfig) -> Result<ReproduceReport> {
    create_dir(&cfg.out)?;
    write_config(&cfg.out, cfg)?;
    let data_dir = cfg.out.join("dataset");
    if dataset_matches(&data_dir, &cfg.dataset) {
        log::info!("reusing dataset in {}", data_dir.display());
    } else {
        let t = Instant::now();
        generate_dataset(&data_dir, &cfg.dataset)?;
        log::info!("generated {} samples in {:.1} s", cfg.dataset.count, t.elapsed().as_secs_f64());
    }
    let ds = Dataset::load(&data_dir)?;
    let manifest_sha = file_sha256(&data_dir.join(MANIFEST_FILE))?;
    let mut runs = Vec::new();
    let mut ckpts = Vec::new();
    for variant in ModelVariant::ALL {
        let run = TrainRunConfig {
            data: data_dir.clone(),
            out: cfg.out.join("runs").join(variant.name()),
            variant,
            model: cfg.model,
            train: TrainConfig {
                lambda: variant.effective_lambda(cfg.train.lambda),
                ..cfg.train
            },
        };
        let fp = fingerprint(&(run.variant, run.model, run.train));
        let cached: Option<TrainSummary> = crate::dataio::read_json(&run.out.join(SUMMARY_FILE)).ok();
        let summary = match cached {
            Some(s)
                if s.config_fingerprint == fp
                    && s.dataset_manifest_sha256 == manifest_sha
                    && file_sha256(&run.out.join(CHECKPOINT_FILE)).ok().as_deref() == Some(&s.checkpoint_sha256) =>
            {
                log::info!("reusing trained {variant}");
                s
            }
            _ => train_on(&ds, &manifest_sha, &run)?,
        };
        ckpts.push(read_checkpoint(&run.out.join(CHECKPOINT_FILE))?);
        runs.push(summary);
    }
    let eval = eval_on(
        &ds,
        &ckpts,
        &EvalRunConfig {
            data: data_dir.clone(),
            out: cfg.out.join("eval"),
            checkpoints: ModelVariant::ALL
                .iter()
                .map(|v| cfg.out.join("runs").join(v.name()).join(CHECKPOINT_FILE))
                .collect(),
            split: "test".into(),
            export_fields: cfg.export_fields,
            histogram_bins: 50,
            workers: cfg.dataset.workers,
        },
    )?;
    let row = |name: &str| eval.rows.iter().find(|r| r.model == name).map(|r| r.summary).expect("evaluated");
    let ordering = ordering_checks(&row("gnn"), &row("p-gnn"), &row("p-divgnn"));
    let dynamics = dynamics_check(&ckpts[1].history, &ckpts[2].history);
    let histories = ModelVariant::ALL
        .iter()
        .zip(&ckpts)
        .map(|(v, c)| (v.name().to_string(), c.history.clone()))
        .collect();
    let report = ReproduceReport {
        config: cfg.clone(),
        config_fingerprint: cfg.fingerprint(),
        dataset_manifest_sha256: manifest_sha,
        eval,
        runs,
        histories,
        ordering,
        dynamics,
    };
    write_json(&cfg.out.join(REPORT_FILE), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(nmse: f64) -> SampleMetrics {
        SampleMetrics {
            nodes: 10,
            nmse,
            mean_div_norm: 0.0,
            mean_sq_div_scaled: 0.0,
        }
    }

    #[test]
    fn export_selection_takes_worst_then_best() {
        let m: Vec<SampleMetrics> = [0.3, 0.9, 0.1, 0.5, 0.2].into_iter().map(metrics).collect();
        assert_eq!(export_selection(&m, 2), vec![(1, "worst"), (2, "best")]);
        assert_eq!(export_selection(&m, 3), vec![(1, "worst"), (3, "worst"), (2, "best")]);
        assert_eq!(export_selection(&m, 9).len(), 5);
        assert!(export_selection(&m, 0).is_empty());
    }

    fn summary(nmse: f64, div: f64) -> EvalSummary {
        EvalSummary {
            samples: 1,
            nmse,
            mean_div_norm: div,
            mean_sq_div_scaled: 0.0,
        }
    }

    #[test]
    fn ordering_checks_use_the_stated_thresholds() {
        let c = ordering_checks(&summary(2.33e-2, 1.13e-3), &summary(1.13e-2, 1.11e-3), &summary(1.08e-2, 3.23e-4));
        assert!(c.div_pass && c.periodic_pass && c.nmse_pass);
        assert!((c.div_ratio - 3.23e-4 / 1.11e-3).abs() < 1e-15);
        let c = ordering_checks(&summary(1.0, 1.0), &summary(0.71, 1.0), &summary(0.8166, 0.51));
        assert!(!c.div_pass && !c.periodic_pass && !c.nmse_pass);
    }

    fn history(divs: &[f64]) -> Vec<EpochRecord> {
        divs.iter()
            .enumerate()
            .map(|(k, &d)| EpochRecord {
                epoch: k + 1,
                train_nmse: 0.0,
                val_nmse: 0.0,
                val_div: d,
            })
            .collect()
    }

    #[test]
    fn dynamics_compares_final_half_of_common_epochs() {
        let a = history(&[1.0; 10]);
        let mut b = vec![2.0; 5];
        b.extend([0.5, 0.5, 0.5, 0.5, 2.0]);
        let d = dynamics_check(&a, &history(&b));
        assert_eq!((d.common_epochs, d.compared_epochs, d.below), (10, 5, 4));
        assert!(d.pass);
        let d = dynamics_check(&a, &history(&[0.5, 0.5, 0.5, 2.0]));
        assert_eq!((d.compared_epochs, d.below), (2, 1));
        assert!(!d.pass);
        assert!(!dynamics_check(&a, &[]).pass);
    }
}
