//! Triangle mesh of a square periodic cell.
//!
//! The plate occupies `[0, side] x [0, side]`. Opposite boundary nodes are
//! linked through [`PeriodicPair`]s whose `plus` node is the translate of the
//! `minus` node by one plate side along `axis`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Node classification used both as a graph feature and for masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeLabel {
    /// Lies on the hole boundary (internal surface), alpha = -1.
    HoleBoundary,
    /// Strictly inside the material, alpha = 0.
    Interior,
    /// Lies on the square's outer boundary, alpha = +1.
    ExternalBoundary,
}

impl NodeLabel {
    pub fn alpha(self) -> i32 {
        match self {
            NodeLabel::HoleBoundary => -1,
            NodeLabel::Interior => 0,
            NodeLabel::ExternalBoundary => 1,
        }
    }

    pub fn from_alpha(alpha: i64) -> Option<Self> {
        match alpha {
            -1 => Some(NodeLabel::HoleBoundary),
            0 => Some(NodeLabel::Interior),
            1 => Some(NodeLabel::ExternalBoundary),
            _ => None,
        }
    }

    pub fn is_interior(self) -> bool {
        self == NodeLabel::Interior
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PeriodicPair {
    pub plus: usize,
    pub minus: usize,
    pub axis: Axis,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh2D {
    pub plate_side: f64,
    pub coords: Vec<[f64; 2]>,
    /// Counter-clockwise node triples.
    pub triangles: Vec<[usize; 3]>,
    pub labels: Vec<NodeLabel>,
    pub periodic_pairs: Vec<PeriodicPair>,
}

pub fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

impl Mesh2D {
    pub fn node_count(&self) -> usize {
        self.coords.len()
    }

    pub fn element_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn triangle_coords(&self, e: usize) -> [[f64; 2]; 3] {
        let t = self.triangles[e];
        [self.coords[t[0]], self.coords[t[1]], self.coords[t[2]]]
    }

    pub fn triangle_area(&self, e: usize) -> f64 {
        let [a, b, c] = self.triangle_coords(e);
        signed_area(a, b, c)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.element_count()).map(|e| self.triangle_area(e)).sum()
    }

    pub fn interior_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|l| l.is_interior()).collect()
    }

    /// Number of elements touching each node.
    pub fn node_valence(&self) -> Vec<usize> {
        let mut count = vec![0usize; self.node_count()];
        for t in &self.triangles {
            for &v in t {
                count[v] += 1;
            }
        }
        count
    }

    /// Unique undirected edges `(a, b)` with `a < b`, sorted.
    pub fn unique_edges(&self) -> Vec<(usize, usize)> {
        let mut set = BTreeSet::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                set.insert((a.min(b), a.max(b)));
            }
        }
        set.into_iter().collect()
    }

    /// Smallest edge length of each element.
    pub fn element_min_edge(&self, e: usize) -> f64 {
        let p = self.triangle_coords(e);
        (0..3)
            .map(|k| dist(p[k], p[(k + 1) % 3]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Checks the structural invariants: positive orientation, consistent
    /// array lengths, exact pair translations, pair coverage of the outer
    /// boundary, and no coincident nodes.
    pub fn validate(&self) -> Result<()> {
        let n = self.node_count();
        let side = self.plate_side;
        let fail = |reason: String| Error::MeshGeneration {
            spec: format!("mesh with {n} nodes"),
            reason,
        };
        if self.labels.len() != n {
            return Err(fail(format!("{} labels for {n} nodes", self.labels.len())));
        }
        for (e, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&v| v >= n) {
                return Err(fail(format!("triangle {e} references a missing node")));
            }
            let area = self.triangle_area(e);
            if !(area > 0.0) {
                return Err(Error::DegenerateElement { element: e, area });
            }
        }
        let tol = 1e-9 * side;
        let mut paired = vec![[false; 2]; n];
        for p in &self.periodic_pairs {
            if p.plus >= n || p.minus >= n {
                return Err(fail(format!("pair {p:?} references a missing node")));
            }
            let d = [
                self.coords[p.plus][0] - self.coords[p.minus][0],
                self.coords[p.plus][1] - self.coords[p.minus][1],
            ];
            let expect = match p.axis {
                Axis::X => [side, 0.0],
                Axis::Y => [0.0, side],
            };
            if (d[0] - expect[0]).abs() > tol || (d[1] - expect[1]).abs() > tol {
                return Err(fail(format!("pair {p:?} offset {d:?} is not a plate translation")));
            }
            paired[p.plus][p.axis.index()] = true;
            paired[p.minus][p.axis.index()] = true;
        }
        for (i, l) in self.labels.iter().enumerate() {
            if *l == NodeLabel::ExternalBoundary && !(paired[i][0] || paired[i][1]) {
                return Err(fail(format!("boundary node {i} has no periodic partner")));
            }
        }
        let corners = self.corner_nodes(tol);
        for c in corners.into_iter().flatten() {
            if !(paired[c][0] && paired[c][1]) {
                return Err(fail(format!("corner node {c} is not paired along both axes")));
            }
        }
        if let Some((a, b)) = closest_pair_below(&self.coords, tol) {
            return Err(fail(format!("nodes {a} and {b} coincide")));
        }
        Ok(())
    }

    /// Corner nodes in order bottom-left, bottom-right, top-left, top-right.
    pub fn corner_nodes(&self, tol: f64) -> [Option<usize>; 4] {
        let s = self.plate_side;
        let targets = [[0.0, 0.0], [s, 0.0], [0.0, s], [s, s]];
        let mut out = [None; 4];
        for (k, t) in targets.iter().enumerate() {
            out[k] = self
                .coords
                .iter()
                .position(|p| (p[0] - t[0]).abs() <= tol && (p[1] - t[1]).abs() <= tol);
        }
        out
    }
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn closest_pair_below(coords: &[[f64; 2]], tol: f64) -> Option<(usize, usize)> {
    let mut order: Vec<usize> = (0..coords.len()).collect();
    order.sort_by(|&a, &b| coords[a][0].total_cmp(&coords[b][0]));
    for (k, &i) in order.iter().enumerate() {
        for &j in &order[k + 1..] {
            if coords[j][0] - coords[i][0] > tol {
                break;
            }
            if dist(coords[i], coords[j]) <= tol {
                return Some((i.min(j), i.max(j)));
            }
        }
    }
    None
}

/// Pairs external-boundary nodes on opposite faces of the square.
///
/// Left/right nodes are matched by `y`, bottom/top nodes by `x`. Corner nodes
/// sit on two faces and therefore appear in one pair per axis.
pub fn match_periodic_pairs(mesh: &Mesh2D, plate_side: f64, tol: f64) -> Result<Vec<PeriodicPair>> {
    let on = |v: f64, target: f64| (v - target).abs() <= tol;
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut bottom = Vec::new();
    let mut top = Vec::new();
    let mut stray = Vec::new();
    for (i, (p, l)) in mesh.coords.iter().zip(&mesh.labels).enumerate() {
        if *l != NodeLabel::ExternalBoundary {
            continue;
        }
        let mut hit = false;
        if on(p[0], 0.0) {
            left.push(i);
            hit = true;
        }
        if on(p[0], plate_side) {
            right.push(i);
            hit = true;
        }
        if on(p[1], 0.0) {
            bottom.push(i);
            hit = true;
        }
        if on(p[1], plate_side) {
            top.push(i);
            hit = true;
        }
        if !hit {
            stray.push(i);
        }
    }

    let mut unmatched = stray;
    let mut pairs = Vec::new();
    match_side(mesh, &right, &left, 1, tol, Axis::X, &mut pairs, &mut unmatched);
    match_side(mesh, &top, &bottom, 0, tol, Axis::Y, &mut pairs, &mut unmatched);
    if !unmatched.is_empty() {
        unmatched.sort_unstable();
        unmatched.dedup();
        return Err(Error::Pairing { unmatched });
    }
    pairs.sort();
    Ok(pairs)
}

#[allow(clippy::too_many_arguments)]
fn match_side(
    mesh: &Mesh2D,
    plus: &[usize],
    minus: &[usize],
    coord: usize,
    tol: f64,
    axis: Axis,
    pairs: &mut Vec<PeriodicPair>,
    unmatched: &mut Vec<usize>,
) {
    let key = |i: &usize| mesh.coords[*i][coord];
    let mut plus = plus.to_vec();
    let mut minus = minus.to_vec();
    plus.sort_by(|a, b| key(a).total_cmp(&key(b)));
    minus.sort_by(|a, b| key(a).total_cmp(&key(b)));
    let (mut i, mut j) = (0, 0);
    while i < plus.len() && j < minus.len() {
        let (a, b) = (key(&plus[i]), key(&minus[j]));
        if (a - b).abs() <= tol {
            pairs.push(PeriodicPair {
                plus: plus[i],
                minus: minus[j],
                axis,
            });
            i += 1;
            j += 1;
        } else if a < b {
            unmatched.push(plus[i]);
            i += 1;
        } else {
            unmatched.push(minus[j]);
            j += 1;
        }
    }
    unmatched.extend_from_slice(&plus[i..]);
    unmatched.extend_from_slice(&minus[j..]);
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Boundary-only square ring with `k` equispaced nodes per edge.
    fn boundary_ring(k: usize) -> Mesh2D {
        let mut coords = Vec::new();
        let step = 1.0 / (k - 1) as f64;
        for i in 0..k {
            for j in 0..k {
                if i == 0 || j == 0 || i == k - 1 || j == k - 1 {
                    coords.push([j as f64 * step, i as f64 * step]);
                }
            }
        }
        let labels = vec![NodeLabel::ExternalBoundary; coords.len()];
        Mesh2D {
            plate_side: 1.0,
            coords,
            triangles: Vec::new(),
            labels,
            periodic_pairs: Vec::new(),
        }
    }

    #[test]
    fn corners_only() {
        let m = boundary_ring(2);
        let pairs = match_periodic_pairs(&m, 1.0, 1e-9).unwrap();
        assert_eq!(pairs.iter().filter(|p| p.axis == Axis::X).count(), 2);
        assert_eq!(pairs.iter().filter(|p| p.axis == Axis::Y).count(), 2);
    }

    #[test]
    fn five_per_edge() {
        let m = boundary_ring(5);
        let pairs = match_periodic_pairs(&m, 1.0, 1e-9).unwrap();
        assert_eq!(pairs.iter().filter(|p| p.axis == Axis::X).count(), 5);
        assert_eq!(pairs.iter().filter(|p| p.axis == Axis::Y).count(), 5);
        for p in &pairs {
            let d = [
                m.coords[p.plus][0] - m.coords[p.minus][0],
                m.coords[p.plus][1] - m.coords[p.minus][1],
            ];
            match p.axis {
                Axis::X => assert_eq!(d, [1.0, 0.0]),
                Axis::Y => assert_eq!(d, [0.0, 1.0]),
            }
        }
    }

    #[test]
    fn perturbed_node_is_reported() {
        let tol = 1e-9;
        let mut m = boundary_ring(5);
        let victim = m
            .coords
            .iter()
            .position(|p| p[0] == 1.0 && p[1] == 0.5)
            .unwrap();
        m.coords[victim][1] += 10.0 * tol;
        match match_periodic_pairs(&m, 1.0, tol) {
            Err(Error::Pairing { unmatched }) => assert!(unmatched.contains(&victim)),
            other => panic!("expected pairing error, got {other:?}"),
        }
    }

    #[test]
    fn alpha_codes() {
        for l in [
            NodeLabel::HoleBoundary,
            NodeLabel::Interior,
            NodeLabel::ExternalBoundary,
        ] {
            assert_eq!(NodeLabel::from_alpha(l.alpha() as i64), Some(l));
        }
        assert_eq!(NodeLabel::from_alpha(2), None);
    }
}
