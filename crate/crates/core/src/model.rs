//! Encode-process-decode graph network for nodal stress prediction.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Eval, Index, Matrix};
use crate::error::{Error, Result};
use crate::graph::{MicroGraph, EDGE_FEATURES, NODE_FEATURES};

pub const OUTPUT_FEATURES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnnConfig {
    pub hidden: usize,
    pub message_steps: usize,
    /// One processor reused at every step; otherwise one per step.
    pub shared_processor: bool,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            hidden: 128,
            message_steps: 10,
            shared_processor: true,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if self.message_steps == 0 {
            return Err(Error::Config("at least one message-passing step is required".into()));
        }
        Ok(())
    }
}

/// Parameter ids of a three-layer perceptron with optional output
/// normalization.
#[derive(Debug, Clone, PartialEq)]
struct Mlp {
    layers: [(usize, usize); 3],
    norm: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    node_encoder: Mlp,
    edge_encoder: Mlp,
    processors: Vec<(Mlp, Mlp)>,
    decoder: Mlp,
}

/// Model inputs in matrix form.
#[derive(Debug, Clone)]
pub struct GraphInput {
    pub nodes: Matrix,
    pub edges: Matrix,
    pub src: Index,
    pub dst: Index,
}

impl GraphInput {
    pub fn from_graph(g: &MicroGraph) -> Self {
        GraphInput {
            nodes: Matrix {
                rows: g.node_count(),
                cols: NODE_FEATURES,
                data: g.node_features.clone(),
            },
            edges: Matrix {
                rows: g.edge_count(),
                cols: EDGE_FEATURES,
                data: g.edge_features.clone(),
            },
            src: g.sources().into(),
            dst: g.destinations().into(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.rows
    }

    fn validate(&self) -> Result<()> {
        if self.nodes.cols != NODE_FEATURES {
            return Err(Error::shape(
                "gnn_input",
                format!("node features have {} columns, expected {NODE_FEATURES}", self.nodes.cols),
            ));
        }
        if self.edges.cols != EDGE_FEATURES {
            return Err(Error::shape(
                "gnn_input",
                format!("edge features have {} columns, expected {EDGE_FEATURES}", self.edges.cols),
            ));
        }
        if self.src.len() != self.edges.rows || self.dst.len() != self.edges.rows {
            return Err(Error::shape("gnn_input", "edge index length differs from edge count"));
        }
        let n = self.nodes.rows;
        if let Some(&bad) = self.src.iter().chain(self.dst.iter()).find(|&&v| v >= n) {
            return Err(Error::Index {
                op: "gnn_input",
                index: bad,
                len: n,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnModel {
    pub config: GnnConfig,
    pub names: Vec<String>,
    pub params: Vec<Matrix>,
    layout: Layout,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.names.push(name);
        self.shapes.push((rows, cols));
        self.names.len() - 1
    }

    fn mlp(&mut self, prefix: &str, input: usize, hidden: usize, output: usize, norm: bool) -> Mlp {
        let dims = [(input, hidden), (hidden, hidden), (hidden, output)];
        let layers = std::array::from_fn(|k| {
            let (i, o) = dims[k];
            (
                self.add(format!("{prefix}.linear{k}.weight"), i, o),
                self.add(format!("{prefix}.linear{k}.bias"), 1, o),
            )
        });
        let norm = norm.then(|| {
            (
                self.add(format!("{prefix}.norm.gamma"), 1, output),
                self.add(format!("{prefix}.norm.beta"), 1, output),
            )
        });
        Mlp { layers, norm }
    }
}

fn build_layout(config: &GnnConfig) -> (Layout, Builder) {
    let h = config.hidden;
    let mut b = Builder {
        names: Vec::new(),
        shapes: Vec::new(),
    };
    let node_encoder = b.mlp("node_encoder", NODE_FEATURES, h, h, true);
    let edge_encoder = b.mlp("edge_encoder", EDGE_FEATURES, h, h, true);
    let copies = if config.shared_processor { 1 } else { config.message_steps };
    let processors = (0..copies)
        .map(|s| {
            let tag = if config.shared_processor { String::new() } else { format!("{s}") };
            (
                b.mlp(&format!("processor{tag}.edge"), 3 * h, h, h, true),
                b.mlp(&format!("processor{tag}.node"), 2 * h, h, h, true),
            )
        })
        .collect();
    let decoder = b.mlp("decoder", h, h, OUTPUT_FEATURES, false);
    (
        Layout {
            node_encoder,
            edge_encoder,
            processors,
            decoder,
        },
        b,
    )
}

/// Parameter tensors bound to a backend for one forward pass.
pub struct Bound<V> {
    vars: Vec<V>,
}

impl<V> Bound<V> {
    fn get(&self, id: usize) -> &V {
        &self.vars[id]
    }
}

impl GnnModel {
    /// Glorot-uniform weights, zero biases, unit normalization gains.
    pub fn new(config: GnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, b) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = b
            .names
            .iter()
            .zip(&b.shapes)
            .map(|(name, &(r, c))| {
                if name.ends_with(".weight") {
                    let a = (6.0 / (r + c) as f64).sqrt();
                    Matrix {
                        rows: r,
                        cols: c,
                        data: (0..r * c).map(|_| rng.random_range(-a..a)).collect(),
                    }
                } else if name.ends_with(".gamma") {
                    Matrix::filled(r, c, 1.0)
                } else {
                    Matrix::zeros(r, c)
                }
            })
            .collect();
        Ok(GnnModel {
            config,
            names: b.names,
            params,
            layout,
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_tensors(config: GnnConfig, tensors: Vec<(String, Matrix)>) -> Result<Self> {
        config.validate()?;
        let (layout, b) = build_layout(&config);
        if tensors.len() != b.names.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors for a model with {}",
                tensors.len(),
                b.names.len()
            )));
        }
        let mut params = Vec::with_capacity(tensors.len());
        for ((name, m), (want, shape)) in tensors.into_iter().zip(b.names.iter().zip(&b.shapes)) {
            if &name != want || m.shape() != *shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match {want} {shape:?}",
                    m.shape()
                )));
            }
            params.push(m);
        }
        Ok(GnnModel {
            config,
            names: b.names,
            params,
            layout,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn bind<B: Backend>(&self, bk: &mut B) -> Bound<B::V> {
        Bound {
            vars: self.params.iter().enumerate().map(|(i, p)| bk.param(i, p)).collect(),
        }
    }

    fn mlp<B: Backend>(&self, bk: &mut B, p: &Bound<B::V>, m: &Mlp, x: &B::V) -> Result<B::V> {
        let [l0, l1, l2] = m.layers;
        let h = bk.linear(x, p.get(l0.0), p.get(l0.1), true)?;
        self.mlp_tail(bk, p, m, l1, l2, &h)
    }

    fn mlp_tail<B: Backend>(
        &self,
        bk: &mut B,
        p: &Bound<B::V>,
        m: &Mlp,
        l1: (usize, usize),
        l2: (usize, usize),
        h: &B::V,
    ) -> Result<B::V> {
        let h = bk.linear(h, p.get(l1.0), p.get(l1.1), true)?;
        let out = bk.linear(&h, p.get(l2.0), p.get(l2.1), false)?;
        match m.norm {
            Some((g, b)) => bk.layer_norm(&out, p.get(g), p.get(b)),
            None => Ok(out),
        }
    }

    /// Latent node and edge states.
    pub fn encode<B: Backend>(&self, bk: &mut B, p: &Bound<B::V>, input: &GraphInput) -> Result<(B::V, B::V)> {
        input.validate()?;
        let x = bk.constant(input.nodes.clone());
        let e = bk.constant(input.edges.clone());
        let h = self.mlp(bk, p, &self.layout.node_encoder, &x)?;
        let e = self.mlp(bk, p, &self.layout.edge_encoder, &e)?;
        Ok((h, e))
    }

    /// One residual message-passing step. The edge update sees
    /// `[h_src, h_dst, e]`; its output is summed into destination nodes.
    pub fn message_step<B: Backend>(
        &self,
        bk: &mut B,
        p: &Bound<B::V>,
        input: &GraphInput,
        step: usize,
        h: &B::V,
        e: &B::V,
    ) -> Result<(B::V, B::V)> {
        let hd = self.config.hidden;
        let (phi, gamma) = &self.layout.processors[step % self.layout.processors.len()];
        // First edge layer applied blockwise: node products are computed once
        // per node and gathered, instead of multiplying the E x 3H concat.
        let (w0, b0) = phi.layers[0];
        let w_src = bk.slice_rows(p.get(w0), 0, hd)?;
        let w_dst = bk.slice_rows(p.get(w0), hd, 2 * hd)?;
        let w_edge = bk.slice_rows(p.get(w0), 2 * hd, 3 * hd)?;
        let ps = bk.matmul(h, &w_src)?;
        let pd = bk.matmul(h, &w_dst)?;
        let z = bk.linear_gathered(e, &w_edge, p.get(b0), &[(&ps, &input.src), (&pd, &input.dst)], true)?;
        let m = self.mlp_tail(bk, p, phi, phi.layers[1], phi.layers[2], &z)?;
        let e_next = bk.add(e, &m)?;
        let agg = bk.segment_sum(&m, &input.dst, input.node_count())?;
        let hin = bk.concat_cols(&[h, &agg])?;
        let dh = self.mlp(bk, p, gamma, &hin)?;
        let h_next = bk.add(h, &dh)?;
        Ok((h_next, e_next))
    }

    pub fn decode<B: Backend>(&self, bk: &mut B, p: &Bound<B::V>, h: &B::V) -> Result<B::V> {
        self.mlp(bk, p, &self.layout.decoder, h)
    }

    /// Standardized nodal stress prediction, `n x 3`.
    pub fn forward<B: Backend>(&self, bk: &mut B, p: &Bound<B::V>, input: &GraphInput) -> Result<B::V> {
        let (mut h, mut e) = self.encode(bk, p, input)?;
        for step in 0..self.config.message_steps {
            (h, e) = self.message_step(bk, p, input, step, &h, &e)?;
        }
        self.decode(bk, p, &h)
    }

    pub fn predict(&self, input: &GraphInput) -> Result<Matrix> {
        let mut bk = Eval::new();
        let p = self.bind(&mut bk);
        let y = self.forward(&mut bk, &p, input)?;
        Ok(bk.value(&y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::fem::MeanStress;
    use crate::graph::{add_periodic_edges, batch_graphs, mesh_to_graph};
    use crate::meshgen::{generate_mesh, HolePlateSpec};

    fn small() -> GnnConfig {
        GnnConfig {
            hidden: 8,
            message_steps: 3,
            shared_processor: true,
        }
    }

    fn graph(seed: u64) -> MicroGraph {
        let spec = HolePlateSpec {
            plate_side: 100.0,
            hole_center: [50.0, 50.0],
            hole_radius: 20.0,
            global_elem_size: 9.0,
            hole_elem_size: 1.2,
            seed,
        };
        let mesh = generate_mesh(&spec).unwrap();
        let mut g = mesh_to_graph(&mesh, &MeanStress::from_array([0.3, -0.2, 0.1]));
        for row in g.node_features.chunks_mut(NODE_FEATURES) {
            row[3] = row[3] / 50.0 - 1.0;
            row[4] = row[4] / 50.0 - 1.0;
        }
        add_periodic_edges(g, &mesh.periodic_pairs).unwrap()
    }

    #[test]
    fn default_parameter_count() {
        let m = GnnModel::new(GnnConfig::default(), 0).unwrap();
        assert_eq!(m.param_count(), 249_859);
        let unshared = GnnModel::new(
            GnnConfig {
                shared_processor: false,
                ..GnnConfig::default()
            },
            0,
        )
        .unwrap();
        assert_eq!(unshared.param_count(), 249_859 + 9 * (82_560 + 66_176));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = GnnModel::new(small(), 7).unwrap();
        assert_eq!(a, GnnModel::new(small(), 7).unwrap());
        assert_ne!(a.params, GnnModel::new(small(), 8).unwrap().params);
        for (name, p) in a.names.iter().zip(&a.params) {
            if name.ends_with(".weight") {
                let bound = (6.0 / (p.rows + p.cols) as f64).sqrt();
                assert!(p.data.iter().all(|v| v.abs() <= bound));
            } else if name.ends_with(".gamma") {
                assert!(p.data.iter().all(|&v| v == 1.0));
            } else {
                assert!(p.data.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let g = graph(1);
        let model = GnnModel::new(small(), 3).unwrap();
        let y = model.predict(&GraphInput::from_graph(&g)).unwrap();
        let n = g.node_count();
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut pg = g.clone();
        for old in 0..n {
            pg.node_features[perm[old] * NODE_FEATURES..(perm[old] + 1) * NODE_FEATURES]
                .copy_from_slice(g.node_row(old));
            pg.internal_mask[perm[old]] = g.internal_mask[old];
        }
        for e in &mut pg.edge_index {
            *e = [perm[e[0]], perm[e[1]]];
        }
        let py = model.predict(&GraphInput::from_graph(&pg)).unwrap();
        let mut worst: f64 = 0.0;
        for old in 0..n {
            for c in 0..3 {
                worst = worst.max((y.get(old, c) - py.get(perm[old], c)).abs());
            }
        }
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn batching_matches_individual_predictions() {
        let (a, b) = (graph(1), graph(2));
        let model = GnnModel::new(small(), 3).unwrap();
        let ya = model.predict(&GraphInput::from_graph(&a)).unwrap();
        let yb = model.predict(&GraphInput::from_graph(&b)).unwrap();
        let (one, _) = batch_graphs(&[&a]).unwrap();
        let y1 = model.predict(&GraphInput::from_graph(&one)).unwrap();
        assert!(y1.max_abs_diff(&ya) <= 1e-10);
        let (ab, off) = batch_graphs(&[&a, &b]).unwrap();
        let y = model.predict(&GraphInput::from_graph(&ab)).unwrap();
        let ya2 = crate::autodiff::kernels::slice_rows(&y, 0, off[1]).unwrap();
        let yb2 = crate::autodiff::kernels::slice_rows(&y, off[1], y.rows).unwrap();
        assert!(ya2.max_abs_diff(&ya) <= 1e-10);
        assert!(yb2.max_abs_diff(&yb) <= 1e-10);
    }

    #[test]
    fn tape_and_eval_agree_bitwise() {
        let g = graph(4);
        let model = GnnModel::new(small(), 5).unwrap();
        let input = GraphInput::from_graph(&g);
        let mut t = Tape::new();
        let p = model.bind(&mut t);
        let y = model.forward(&mut t, &p, &input).unwrap();
        assert_eq!(t.value(&y), &model.predict(&input).unwrap());
    }

    #[test]
    fn message_step_is_residual() {
        let g = graph(1);
        let mut model = GnnModel::new(small(), 3).unwrap();
        // Zero the last processor layers so both updates vanish.
        for (name, p) in model.names.iter().zip(model.params.iter_mut()) {
            if name.starts_with("processor") && (name.contains(".norm.")) {
                p.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let input = GraphInput::from_graph(&g);
        let mut bk = Eval::new();
        let p = model.bind(&mut bk);
        let (h, e) = model.encode(&mut bk, &p, &input).unwrap();
        let (h1, e1) = model.message_step(&mut bk, &p, &input, 0, &h, &e).unwrap();
        assert_eq!(h1, h);
        assert_eq!(e1, e);
        assert_eq!(h.shape(), (g.node_count(), 8));
        assert_eq!(e.shape(), (g.edge_count(), 8));
    }

    #[test]
    fn shared_gradient_equals_sum_over_unrolled_copies() {
        let g = graph(3);
        let input = GraphInput::from_graph(&g);
        let shared = GnnModel::new(small(), 9).unwrap();
        let unrolled_cfg = GnnConfig {
            shared_processor: false,
            ..small()
        };
        let mut unrolled = GnnModel::new(unrolled_cfg, 0).unwrap();
        for (name, p) in unrolled.names.iter().zip(unrolled.params.iter_mut()) {
            let shared_name = if let Some(rest) = name.strip_prefix("processor") {
                let dot = rest.find('.').unwrap();
                format!("processor{}", &rest[dot..])
            } else {
                name.clone()
            };
            let k = shared.names.iter().position(|n| *n == shared_name).unwrap();
            *p = shared.params[k].clone();
        }
        let grads = |m: &GnnModel| {
            let mut t = Tape::new();
            let p = m.bind(&mut t);
            let y = m.forward(&mut t, &p, &input).unwrap();
            let y2 = t.square(&y);
            let s = t.mean(&y2).unwrap();
            let gr = t.backward(s).unwrap();
            let mut acc: Vec<Matrix> = m.params.iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect();
            gr.accumulate_params(&mut acc).unwrap();
            (t.value(&s).data[0], acc)
        };
        let (ls, gs) = grads(&shared);
        let (lu, gu) = grads(&unrolled);
        assert_eq!(ls, lu);
        for (k, name) in shared.names.iter().enumerate() {
            let mut total = Matrix::zeros(gs[k].rows, gs[k].cols);
            for (j, un) in unrolled.names.iter().enumerate() {
                let matches = match name.strip_prefix("processor") {
                    Some(rest) => un.starts_with("processor") && un.ends_with(rest) && {
                        let r = un.strip_prefix("processor").unwrap();
                        r[..r.len() - rest.len()].chars().all(|c| c.is_ascii_digit())
                    },
                    None => un == name,
                };
                if matches {
                    total.add_assign(&gu[j]);
                }
            }
            let scale = gs[k].data.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
            assert!(total.max_abs_diff(&gs[k]) <= 1e-10 * scale.max(1.0), "{name}");
        }
    }

    #[test]
    fn rejects_malformed_inputs() {
        let g = graph(1);
        let model = GnnModel::new(small(), 3).unwrap();
        let mut input = GraphInput::from_graph(&g);
        input.edges = Matrix::zeros(g.edge_count(), 0);
        assert!(matches!(model.predict(&input), Err(Error::Shape { .. })));
        let mut input = GraphInput::from_graph(&g);
        input.dst = vec![g.node_count(); g.edge_count()].into();
        assert!(matches!(model.predict(&input), Err(Error::Index { .. })));
        assert!(GnnModel::new(
            GnnConfig {
                hidden: 0,
                ..small()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn from_tensors_round_trip_and_mismatch() {
        let m = GnnModel::new(small(), 3).unwrap();
        let named: Vec<(String, Matrix)> = m.names.iter().cloned().zip(m.params.iter().cloned()).collect();
        assert_eq!(GnnModel::from_tensors(small(), named.clone()).unwrap(), m);
        let mut bad = named;
        bad[0].1 = Matrix::zeros(1, 1);
        assert!(matches!(GnnModel::from_tensors(small(), bad), Err(Error::Checkpoint(_))));
    }
}
