//! Loss terms, the mini-batch training loop with early stopping, and test
//! metrics.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Backend, DivBlock, Eval, Matrix, Tape};
use crate::divop::{mean_internal_divergence_norm, mean_sq_divergence, DivergenceOperator};
use crate::error::{Error, Result};
use crate::fem::NodalStressField;
use crate::graph::{FeatureStats, MicroGraph};
use crate::model::{Bound, GnnModel, GraphInput};

/// Stress units in which the divergence penalty is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceSpace {
    /// MPa.
    Physical,
    /// MPa divided by one global stress scale (the RMS of the per-component
    /// target standard deviations), which keeps equilibrium intact.
    #[default]
    Scaled,
}

/// The three ablation variants differ only in periodic edges and λ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    #[serde(rename = "gnn")]
    Gnn,
    #[serde(rename = "p-gnn")]
    PGnn,
    #[serde(rename = "p-divgnn")]
    PDivGnn,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 3] = [ModelVariant::Gnn, ModelVariant::PGnn, ModelVariant::PDivGnn];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Gnn => "gnn",
            ModelVariant::PGnn => "p-gnn",
            ModelVariant::PDivGnn => "p-divgnn",
        }
    }

    pub fn periodic_edges(self) -> bool {
        self != ModelVariant::Gnn
    }

    pub fn uses_divergence(self) -> bool {
        self == ModelVariant::PDivGnn
    }

    /// λ actually used for a requested value: zero unless the variant has the
    /// divergence term.
    pub fn effective_lambda(self, requested: f64) -> f64 {
        if self.uses_divergence() {
            requested
        } else {
            0.0
        }
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant {s:?}; expected gnn, p-gnn or p-divgnn")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lambda: f64,
    pub seed: u64,
    pub divergence_space: DivergenceSpace,
    pub early_stopping: bool,
    /// Execution is always sequential and fixed-order; the flag is recorded
    /// with the run for provenance.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            batch_size: 16,
            max_epochs: 200,
            patience: 20,
            lambda: 10.0,
            seed: 0,
            divergence_space: DivergenceSpace::Scaled,
            early_stopping: true,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and epoch count must be positive".into()));
        }
        if self.early_stopping && self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} must be below max epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be non-negative", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nmse: f64,
    pub div_penalty: f64,
    pub total: f64,
}

/// Column-wise normalized squared error averaged over columns.
pub fn nmse_columns(truth: &Matrix, pred: &Matrix) -> Result<f64> {
    if truth.shape() != pred.shape() || truth.rows == 0 || truth.cols == 0 {
        return Err(Error::shape("nmse", format!("{:?} vs {:?}", truth.shape(), pred.shape())));
    }
    let mut total = 0.0;
    for c in 0..truth.cols {
        fn col(m: &Matrix, c: usize) -> impl Iterator<Item = f64> + '_ {
            (0..m.rows).map(move |r| m.get(r, c))
        }
        let mean = col(truth, c).sum::<f64>() / truth.rows as f64;
        let den: f64 = col(truth, c).map(|v| (v - mean) * (v - mean)).sum();
        if !(den > 0.0) {
            return Err(Error::ZeroVariance { component: c });
        }
        let num: f64 = col(truth, c).zip(col(pred, c)).map(|(t, p)| (t - p) * (t - p)).sum();
        total += num / den;
    }
    Ok(total / truth.cols as f64)
}

fn field_matrix(f: &NodalStressField) -> Matrix {
    Matrix {
        rows: f.len(),
        cols: 3,
        data: f.0.iter().flatten().copied().collect(),
    }
}

fn matrix_field(m: &Matrix) -> NodalStressField {
    NodalStressField(m.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

pub fn nmse(truth: &NodalStressField, pred: &NodalStressField) -> Result<f64> {
    nmse_columns(&field_matrix(truth), &field_matrix(pred))
}

/// Global stress scale used by [`DivergenceSpace::Scaled`].
pub fn stress_scale(stats: &FeatureStats) -> f64 {
    (stats.target_std.iter().map(|s| s * s).sum::<f64>() / 3.0).sqrt()
}

/// Affine map from standardized predictions to divergence-space stresses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StressMap {
    pub scale: [f64; 3],
    pub shift: [f64; 3],
}

impl StressMap {
    pub fn new(stats: &FeatureStats, space: DivergenceSpace) -> Self {
        let s = match space {
            DivergenceSpace::Physical => 1.0,
            DivergenceSpace::Scaled => stress_scale(stats),
        };
        StressMap {
            scale: std::array::from_fn(|c| stats.target_std[c] / s),
            shift: std::array::from_fn(|c| stats.target_mean[c] / s),
        }
    }
}

/// One sample ready for the loss: standardized inputs and targets plus the
/// constant weights of both loss terms.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub input: GraphInput,
    pub target: Matrix,
    pub nmse_weights: Matrix,
    pub div_weights: Matrix,
    pub div: Vec<DivBlock>,
    pub truth: NodalStressField,
}

impl PreparedSample {
    /// `graph` must already be standardized; `truth` is in MPa.
    pub fn new(
        graph: &MicroGraph,
        truth: &NodalStressField,
        op: Arc<DivergenceOperator>,
        stats: &FeatureStats,
    ) -> Result<Self> {
        let n = graph.node_count();
        if truth.len() != n || op.n != n {
            return Err(Error::shape(
                "prepare_sample",
                format!("graph {n} nodes, truth {}, operator {}", truth.len(), op.n),
            ));
        }
        let target = field_matrix(&NodalStressField(stats.standardize_stress(truth)));
        let mut w = [0.0; 3];
        for (c, wc) in w.iter_mut().enumerate() {
            let mean = (0..n).map(|r| target.get(r, c)).sum::<f64>() / n as f64;
            let den: f64 = (0..n).map(|r| (target.get(r, c) - mean).powi(2)).sum();
            if !(den > 0.0) {
                return Err(Error::ZeroVariance { component: c });
            }
            *wc = 1.0 / (3.0 * den);
        }
        let mut nmse_weights = Matrix::zeros(n, 3);
        for r in 0..n {
            nmse_weights.row_mut(r).copy_from_slice(&w);
        }
        Ok(PreparedSample {
            input: GraphInput::from_graph(graph),
            target,
            nmse_weights,
            div_weights: Matrix::filled(n, 2, 1.0 / n as f64),
            div: vec![DivBlock { op, offset: 0 }],
            truth: truth.clone(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.input.node_count()
    }

    pub fn operator(&self) -> &DivergenceOperator {
        &self.div[0].op
    }

    /// Disjoint union whose loss is the mean of the members' losses.
    pub fn merge(samples: &[&PreparedSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::shape("merge_samples", "empty batch"));
        }
        let b = samples.len() as f64;
        let cat = |f: &dyn Fn(&PreparedSample) -> &Matrix| -> Matrix {
            let cols = f(samples[0]).cols;
            let mut data = Vec::new();
            for s in samples {
                data.extend_from_slice(&f(s).data);
            }
            Matrix {
                rows: data.len() / cols,
                cols,
                data,
            }
        };
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut div = Vec::new();
        let mut truth = Vec::new();
        let mut off = 0;
        for s in samples {
            src.extend(s.input.src.iter().map(|v| v + off));
            dst.extend(s.input.dst.iter().map(|v| v + off));
            div.extend(s.div.iter().map(|d| DivBlock {
                op: d.op.clone(),
                offset: d.offset + off,
            }));
            truth.extend_from_slice(&s.truth.0);
            off += s.node_count();
        }
        let mut nmse_weights = cat(&|s| &s.nmse_weights);
        let mut div_weights = cat(&|s| &s.div_weights);
        nmse_weights.data.iter_mut().for_each(|v| *v /= b);
        div_weights.data.iter_mut().for_each(|v| *v /= b);
        Ok(PreparedSample {
            input: GraphInput {
                nodes: cat(&|s| &s.input.nodes),
                edges: cat(&|s| &s.input.edges),
                src: src.into(),
                dst: dst.into(),
            },
            target: cat(&|s| &s.target),
            nmse_weights,
            div_weights,
            div,
            truth: NodalStressField(truth),
        })
    }
}

/// Builds the loss on any backend. The divergence term is skipped entirely
/// when `lambda` is zero.
pub fn sample_loss<B: Backend>(
    bk: &mut B,
    model: &GnnModel,
    params: &Bound<B::V>,
    s: &PreparedSample,
    map: &StressMap,
    lambda: f64,
) -> Result<(B::V, LossBreakdown)> {
    let pred = model.forward(bk, params, &s.input)?;
    let target = bk.constant(s.target.clone());
    let diff = bk.sub(&pred, &target)?;
    let sq = bk.square(&diff);
    let weighted = bk.mul_const(&sq, &s.nmse_weights)?;
    let nmse = bk.sum(&weighted);
    let nmse_value = bk.value(&nmse).data[0];
    if lambda == 0.0 {
        let b = LossBreakdown {
            nmse: nmse_value,
            div_penalty: 0.0,
            total: nmse_value,
        };
        return Ok((nmse, b));
    }
    let div = divergence_penalty(bk, &pred, s, map)?;
    let div_value = bk.value(&div).data[0];
    let scaled = bk.scale(&div, lambda);
    let total = bk.add(&nmse, &scaled)?;
    let b = LossBreakdown {
        nmse: nmse_value,
        div_penalty: div_value,
        total: bk.value(&total).data[0],
    };
    Ok((total, b))
}

fn divergence_penalty<B: Backend>(bk: &mut B, pred: &B::V, s: &PreparedSample, map: &StressMap) -> Result<B::V> {
    let stress = bk.affine_cols(pred, &map.scale, &map.shift)?;
    let d = bk.divergence(&stress, &s.div)?;
    let d2 = bk.square(&d);
    let w = bk.mul_const(&d2, &s.div_weights)?;
    Ok(bk.sum(&w))
}

/// Loss values without recording a tape.
pub fn evaluate_loss(model: &GnnModel, s: &PreparedSample, map: &StressMap, lambda: f64) -> Result<LossBreakdown> {
    let mut bk = Eval::new();
    let p = model.bind(&mut bk);
    let (_, b) = sample_loss(&mut bk, model, &p, s, map, lambda)?;
    Ok(b)
}

/// Loss and parameter gradients for one (possibly merged) sample; gradients
/// are added into `acc` after scaling by `weight`.
pub fn accumulate_gradients(
    model: &GnnModel,
    s: &PreparedSample,
    map: &StressMap,
    lambda: f64,
    weight: f64,
    acc: &mut [Matrix],
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let (loss, b) = sample_loss(&mut tape, model, &p, s, map, lambda)?;
    let root = if weight == 1.0 { loss } else { tape.scale(&loss, weight) };
    tape.backward(root)?.accumulate_params(acc)?;
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nmse: f64,
    pub val_nmse: f64,
    pub val_div: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: GnnModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_nmse: f64,
    pub stopped_early: bool,
}

/// Mini-batch Adam training. Each batch's gradient is the mean of
/// per-sample gradients, accumulated one sample at a time to bound memory.
pub fn train(
    model: GnnModel,
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
    stats: &FeatureStats,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, train_set, val_set, stats, cfg, |_| Ok(()))
}

/// [`train`] with a hook called after every epoch's validation.
pub fn train_with(
    mut model: GnnModel,
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
    stats: &FeatureStats,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Dataset("training and validation sets must be nonempty".into()));
    }
    let map = StressMap::new(stats, cfg.divergence_space);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best = (model.clone(), 0usize, f64::INFINITY);
    let mut streak = 0usize;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut nmse_sum = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads: Vec<Matrix> = model.params.iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect();
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let b = accumulate_gradients(&model, &train_set[i], &map, cfg.lambda, w, &mut grads)?;
                if !b.total.is_finite() {
                    return Err(Error::NonFinite {
                        epoch,
                        batch: bi,
                        detail: format!("loss {:?} on training sample {i}", b),
                    });
                }
                nmse_sum += b.nmse;
            }
            if let Some(k) = grads.iter().position(|g| !g.all_finite()) {
                return Err(Error::NonFinite {
                    epoch,
                    batch: bi,
                    detail: format!("gradient of {}", model.names[k]),
                });
            }
            adam.update(&mut model.params, &grads)?;
        }
        let val = evaluate_with(&model, val_set, stats)?;
        let rec = EpochRecord {
            epoch,
            train_nmse: nmse_sum / train_set.len() as f64,
            val_nmse: val.summary.nmse,
            val_div: val.summary.mean_div_norm,
        };
        if !rec.val_nmse.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: 0,
                detail: "validation NMSE".into(),
            });
        }
        log::info!(
            "epoch {epoch}: train_nmse {:.4e} val_nmse {:.4e} val_div {:.4e}",
            rec.train_nmse,
            rec.val_nmse,
            rec.val_div
        );
        history.push(rec);
        on_epoch(&rec)?;
        if rec.val_nmse < best.2 {
            best = (model.clone(), epoch, rec.val_nmse);
            streak = 0;
        } else {
            streak += 1;
            if cfg.early_stopping && streak >= cfg.patience.max(1) {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best.0,
        history,
        best_epoch: best.1,
        best_val_nmse: best.2,
        stopped_early,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub nodes: usize,
    pub nmse: f64,
    /// Mean over internal nodes of the Euclidean divergence norm, MPa/mm.
    pub mean_div_norm: f64,
    /// Mean squared nodal divergence of the field divided by the global
    /// stress scale.
    pub mean_sq_div_scaled: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub samples: usize,
    pub nmse: f64,
    pub mean_div_norm: f64,
    pub mean_sq_div_scaled: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub per_sample: Vec<SampleMetrics>,
    pub summary: EvalSummary,
    pub predictions: Vec<NodalStressField>,
}

/// Physical-unit prediction for one sample.
pub fn predict_sample(model: &GnnModel, s: &PreparedSample, stats: &FeatureStats) -> Result<NodalStressField> {
    let y = model.predict(&s.input)?;
    Ok(stats.destandardize_stress(&matrix_field(&y).0))
}

pub fn sample_metrics(s: &PreparedSample, pred: &NodalStressField, scale: f64) -> Result<SampleMetrics> {
    let op = s.operator();
    let scaled = NodalStressField(pred.0.iter().map(|v| v.map(|x| x / scale)).collect());
    Ok(SampleMetrics {
        nodes: s.node_count(),
        nmse: nmse(&s.truth, pred)?,
        mean_div_norm: mean_internal_divergence_norm(op, pred)?,
        mean_sq_div_scaled: mean_sq_divergence(op, &scaled)?,
    })
}

pub fn summarize(per_sample: &[SampleMetrics]) -> EvalSummary {
    let n = per_sample.len().max(1) as f64;
    EvalSummary {
        samples: per_sample.len(),
        nmse: per_sample.iter().map(|m| m.nmse).sum::<f64>() / n,
        mean_div_norm: per_sample.iter().map(|m| m.mean_div_norm).sum::<f64>() / n,
        mean_sq_div_scaled: per_sample.iter().map(|m| m.mean_sq_div_scaled).sum::<f64>() / n,
    }
}

/// Metrics of arbitrary predicted fields, e.g. the FE truth itself.
pub fn evaluate_fields(samples: &[PreparedSample], preds: Vec<NodalStressField>, stress_scale: f64) -> Result<Evaluation> {
    if samples.len() != preds.len() {
        return Err(Error::shape("evaluate_fields", "one prediction per sample required"));
    }
    let per_sample = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| sample_metrics(s, p, stress_scale))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        summary: summarize(&per_sample),
        per_sample,
        predictions: preds,
    })
}

/// Test-set metrics with the model's own statistics.
pub fn evaluate_with(model: &GnnModel, samples: &[PreparedSample], stats: &FeatureStats) -> Result<Evaluation> {
    let preds = samples
        .iter()
        .map(|s| predict_sample(model, s, stats))
        .collect::<Result<Vec<_>>>()?;
    evaluate_fields(samples, preds, stress_scale(stats))
}

/// Density comparison of standardized truth and prediction per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub component: usize,
    pub edges: Vec<f64>,
    pub truth: Vec<usize>,
    pub pred: Vec<usize>,
}

pub fn stress_histograms(
    samples: &[PreparedSample],
    preds: &[NodalStressField],
    stats: &FeatureStats,
    bins: usize,
) -> Result<Vec<Histogram>> {
    if samples.len() != preds.len() || bins == 0 {
        return Err(Error::shape("stress_histograms", "one prediction per sample and at least one bin"));
    }
    let truth: Vec<[f64; 3]> = samples.iter().flat_map(|s| stats.standardize_stress(&s.truth)).collect();
    let pred: Vec<[f64; 3]> = preds.iter().flat_map(|p| stats.standardize_stress(p)).collect();
    let mut out = Vec::with_capacity(3);
    for c in 0..3 {
        let (lo, hi) = truth
            .iter()
            .chain(&pred)
            .map(|v| v[c])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|k| lo + k as f64 * width).collect();
        let count = |vals: &[[f64; 3]]| {
            let mut h = vec![0usize; bins];
            for v in vals {
                let k = (((v[c] - lo) / width) as usize).min(bins - 1);
                h[k] += 1;
            }
            h
        };
        out.push(Histogram {
            component: c,
            edges,
            truth: count(&truth),
            pred: count(&pred),
        });
    }
    Ok(out)
}
