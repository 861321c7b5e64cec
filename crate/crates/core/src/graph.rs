//! Mesh-to-graph conversion, periodic edge augmentation, feature scaling and
//! block-diagonal batching.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{MeanStress, NodalStressField};
use crate::mesh::{dist, Mesh2D, PeriodicPair};

/// Node feature layout: (sigma_bar_xx, sigma_bar_yy, sigma_bar_xy, x, y, alpha).
pub const NODE_FEATURES: usize = 6;
pub const EDGE_FEATURES: usize = 1;
pub const ALPHA_CHANNEL: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct MicroGraph {
    /// Row-major `n x NODE_FEATURES`.
    pub node_features: Vec<f64>,
    /// Directed `(source, destination)` pairs.
    pub edge_index: Vec<[usize; 2]>,
    /// Row-major `E x EDGE_FEATURES`.
    pub edge_features: Vec<f64>,
    pub internal_mask: Vec<bool>,
}

impl MicroGraph {
    pub fn node_count(&self) -> usize {
        self.internal_mask.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_index.len()
    }

    pub fn node_row(&self, i: usize) -> &[f64] {
        &self.node_features[i * NODE_FEATURES..(i + 1) * NODE_FEATURES]
    }

    pub fn sources(&self) -> Vec<usize> {
        self.edge_index.iter().map(|e| e[0]).collect()
    }

    pub fn destinations(&self) -> Vec<usize> {
        self.edge_index.iter().map(|e| e[1]).collect()
    }
}

pub fn mesh_to_graph(mesh: &Mesh2D, sigma_bar: &MeanStress) -> MicroGraph {
    let n = mesh.node_count();
    let s = sigma_bar.to_array();
    let mut node_features = Vec::with_capacity(n * NODE_FEATURES);
    for (p, l) in mesh.coords.iter().zip(&mesh.labels) {
        node_features.extend_from_slice(&[s[0], s[1], s[2], p[0], p[1], l.alpha() as f64]);
    }
    let edges = mesh.unique_edges();
    let mut edge_index = Vec::with_capacity(2 * edges.len());
    let mut edge_features = Vec::with_capacity(2 * edges.len());
    for (a, b) in edges {
        let d = dist(mesh.coords[a], mesh.coords[b]);
        edge_index.push([a, b]);
        edge_index.push([b, a]);
        edge_features.push(d);
        edge_features.push(d);
    }
    MicroGraph {
        node_features,
        edge_index,
        edge_features,
        internal_mask: mesh.interior_mask(),
    }
}

/// Appends both orientations of every pair with a zero edge feature.
pub fn add_periodic_edges(mut g: MicroGraph, pairs: &[PeriodicPair]) -> Result<MicroGraph> {
    let n = g.node_count();
    for p in pairs {
        for v in [p.plus, p.minus] {
            if v >= n {
                return Err(Error::Index {
                    op: "add_periodic_edges",
                    index: v,
                    len: n,
                });
            }
        }
        g.edge_index.push([p.plus, p.minus]);
        g.edge_index.push([p.minus, p.plus]);
        g.edge_features.extend_from_slice(&[0.0; 2 * EDGE_FEATURES]);
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub node_mean: [f64; NODE_FEATURES],
    pub node_std: [f64; NODE_FEATURES],
    pub edge_mean: [f64; EDGE_FEATURES],
    pub edge_std: [f64; EDGE_FEATURES],
    pub target_mean: [f64; 3],
    pub target_std: [f64; 3],
}

#[derive(Default)]
struct Moments {
    count: usize,
    sum: f64,
}

fn mean_std<I: Iterator<Item = f64>>(values: impl Fn() -> I) -> (f64, f64) {
    let mut m = Moments::default();
    for v in values() {
        m.count += 1;
        m.sum += v;
    }
    if m.count == 0 {
        return (0.0, 0.0);
    }
    let mean = m.sum / m.count as f64;
    let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m.count as f64;
    (mean, var.sqrt())
}

impl FeatureStats {
    /// Fits node, edge and target statistics over training samples. Graphs
    /// should be built without periodic edges so the statistics do not
    /// depend on the model variant.
    pub fn fit(samples: &[(&MicroGraph, &NodalStressField)]) -> Result<Self> {
        let mut stats = FeatureStats {
            node_mean: [0.0; NODE_FEATURES],
            node_std: [1.0; NODE_FEATURES],
            edge_mean: [0.0; EDGE_FEATURES],
            edge_std: [1.0; EDGE_FEATURES],
            target_mean: [0.0; 3],
            target_std: [1.0; 3],
        };
        if samples.is_empty() {
            return Err(Error::Stats("no training samples".into()));
        }
        const NAMES: [&str; NODE_FEATURES] = ["sigma_bar_xx", "sigma_bar_yy", "sigma_bar_xy", "x", "y", "alpha"];
        for c in 0..NODE_FEATURES {
            if c == ALPHA_CHANNEL {
                continue;
            }
            let (m, s) = mean_std(|| {
                samples
                    .iter()
                    .flat_map(move |(g, _)| g.node_features.iter().skip(c).step_by(NODE_FEATURES).copied())
            });
            if !(s > 0.0) {
                return Err(Error::Stats(format!("node channel {} has zero spread", NAMES[c])));
            }
            stats.node_mean[c] = m;
            stats.node_std[c] = s;
        }
        for c in 0..EDGE_FEATURES {
            let (m, s) = mean_std(|| {
                samples
                    .iter()
                    .flat_map(move |(g, _)| g.edge_features.iter().skip(c).step_by(EDGE_FEATURES).copied())
            });
            if !(s > 0.0) {
                return Err(Error::Stats("edge distance has zero spread".into()));
            }
            stats.edge_mean[c] = m;
            stats.edge_std[c] = s;
        }
        for c in 0..3 {
            let (m, s) = mean_std(|| samples.iter().flat_map(move |(_, t)| t.0.iter().map(move |s| s[c])));
            if !(s > 0.0) {
                return Err(Error::Stats(format!("stress target {c} has zero spread")));
            }
            stats.target_mean[c] = m;
            stats.target_std[c] = s;
        }
        Ok(stats)
    }

    pub fn standardize(&self, g: &MicroGraph) -> MicroGraph {
        let mut out = g.clone();
        for row in out.node_features.chunks_exact_mut(NODE_FEATURES) {
            for c in 0..NODE_FEATURES {
                if c != ALPHA_CHANNEL {
                    row[c] = (row[c] - self.node_mean[c]) / self.node_std[c];
                }
            }
        }
        for row in out.edge_features.chunks_exact_mut(EDGE_FEATURES) {
            for c in 0..EDGE_FEATURES {
                row[c] = (row[c] - self.edge_mean[c]) / self.edge_std[c];
            }
        }
        out
    }

    pub fn standardize_stress(&self, field: &NodalStressField) -> Vec<[f64; 3]> {
        field
            .0
            .iter()
            .map(|s| std::array::from_fn(|c| (s[c] - self.target_mean[c]) / self.target_std[c]))
            .collect()
    }

    pub fn destandardize_stress(&self, pred: &[[f64; 3]]) -> NodalStressField {
        NodalStressField(
            pred.iter()
                .map(|s| std::array::from_fn(|c| s[c] * self.target_std[c] + self.target_mean[c]))
                .collect(),
        )
    }

    /// Stable digest of the statistics for manifest/checkpoint matching.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self
            .node_mean
            .iter()
            .chain(&self.node_std)
            .chain(&self.edge_mean)
            .chain(&self.edge_std)
            .chain(&self.target_mean)
            .chain(&self.target_std)
        {
            h.update(v.to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }
}

/// Disjoint union of graphs; returns the batch and each graph's node offset.
pub fn batch_graphs(graphs: &[&MicroGraph]) -> Result<(MicroGraph, Vec<usize>)> {
    if graphs.is_empty() {
        return Err(Error::shape("batch_graphs", "empty batch"));
    }
    let mut out = MicroGraph {
        node_features: Vec::new(),
        edge_index: Vec::new(),
        edge_features: Vec::new(),
        internal_mask: Vec::new(),
    };
    let mut offsets = Vec::with_capacity(graphs.len());
    for g in graphs {
        let off = out.node_count();
        offsets.push(off);
        out.node_features.extend_from_slice(&g.node_features);
        out.edge_features.extend_from_slice(&g.edge_features);
        out.internal_mask.extend_from_slice(&g.internal_mask);
        out.edge_index
            .extend(g.edge_index.iter().map(|e| [e[0] + off, e[1] + off]));
    }
    Ok((out, offsets))
}

/// Set of undirected edges, for structural comparisons in tests and tools.
pub fn undirected_edge_set(g: &MicroGraph) -> HashSet<(usize, usize)> {
    g.edge_index
        .iter()
        .map(|e| (e[0].min(e[1]), e[0].max(e[1])))
        .collect()
}
