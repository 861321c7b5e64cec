//! Discrete divergence of nodal stress fields.
//!
//! For a linear triangle the shape-function derivatives are constant, so the
//! element-level divergence of an interpolated nodal field is exact. The
//! nodal operator averages those element rows over the elements adjacent to
//! each node. Rows of boundary nodes (outer edge and hole) are left
//! structurally empty.

use crate::error::{Error, Result};
use crate::fem::{shape_gradients, NodalStressField};
use crate::mesh::{signed_area, Mesh2D};
use crate::sparse::{CooMatrix, CsrMatrix};

/// Sparse `2n x 3n` map from `[xx | yy | xy]` stacked nodal stresses to
/// `[x-divergence | y-divergence]` stacked nodal values.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceOperator {
    pub n: usize,
    pub matrix: CsrMatrix,
    pub internal_mask: Vec<bool>,
}

/// Per-node divergence vectors, MPa per unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalDivergence(pub Vec<[f64; 2]>);

impl NodalDivergence {
    pub fn norms(&self) -> Vec<f64> {
        self.0.iter().map(|d| d[0].hypot(d[1])).collect()
    }
}

pub fn build_divergence_operator(mesh: &Mesh2D) -> Result<DivergenceOperator> {
    let n = mesh.node_count();
    let mask = mesh.interior_mask();
    let valence = mesh.node_valence();
    let mut coo = CooMatrix::new(2 * n, 3 * n);
    for (e, t) in mesh.triangles.iter().enumerate() {
        // Start each element at its smallest node so the floating-point
        // gradients do not depend on how the triangle was enumerated.
        let mut t = *t;
        let k = (0..3).min_by_key(|&k| t[k]).unwrap();
        t.rotate_left(k);
        let tri = t.map(|v| mesh.coords[v]);
        let (dx, dy, _) = shape_gradients(&tri).ok_or(Error::DegenerateElement {
            element: e,
            area: signed_area(tri[0], tri[1], tri[2]),
        })?;
        for &i in &t {
            if !mask[i] {
                continue;
            }
            let w = 1.0 / valence[i] as f64;
            for (k, &j) in t.iter().enumerate() {
                coo.push(i, j, w * dx[k]);
                coo.push(i, 2 * n + j, w * dy[k]);
                coo.push(n + i, n + j, w * dy[k]);
                coo.push(n + i, 2 * n + j, w * dx[k]);
            }
        }
    }
    Ok(DivergenceOperator {
        n,
        matrix: coo.to_csr(),
        internal_mask: mask,
    })
}

impl DivergenceOperator {
    pub fn from_parts(matrix: CsrMatrix, internal_mask: Vec<bool>) -> Result<Self> {
        let n = internal_mask.len();
        if matrix.nrows != 2 * n || matrix.ncols != 3 * n {
            return Err(Error::shape(
                "divergence_operator",
                format!("{}x{} matrix for {n} nodes", matrix.nrows, matrix.ncols),
            ));
        }
        for (i, &inside) in internal_mask.iter().enumerate() {
            if !inside && (matrix.row_nnz(i) > 0 || matrix.row_nnz(n + i) > 0) {
                return Err(Error::shape(
                    "divergence_operator",
                    format!("masked node {i} has a non-empty row"),
                ));
            }
        }
        Ok(DivergenceOperator {
            n,
            matrix,
            internal_mask,
        })
    }

    pub fn internal_count(&self) -> usize {
        self.internal_mask.iter().filter(|&&m| m).count()
    }

    /// Applies the operator to a stacked `[xx | yy | xy]` vector.
    pub fn apply_stacked(&self, stacked: &[f64]) -> Result<Vec<f64>> {
        self.matrix.matvec(stacked).map_err(|_| {
            Error::shape(
                "apply_divergence",
                format!("stacked stress of {} for {} nodes", stacked.len(), self.n),
            )
        })
    }
}

pub fn apply_divergence(op: &DivergenceOperator, sigma: &NodalStressField) -> Result<NodalDivergence> {
    if sigma.len() != op.n {
        return Err(Error::shape(
            "apply_divergence",
            format!("field of {} nodes, operator for {}", sigma.len(), op.n),
        ));
    }
    let d = op.apply_stacked(&sigma.stacked())?;
    Ok(NodalDivergence(
        (0..op.n).map(|i| [d[i], d[op.n + i]]).collect(),
    ))
}

/// `(1/n) sum_i |div_i|^2` over all `n` nodes; masked nodes contribute zero.
pub fn mean_sq_divergence(op: &DivergenceOperator, sigma: &NodalStressField) -> Result<f64> {
    let d = apply_divergence(op, sigma)?;
    Ok(d.0.iter().map(|v| v[0] * v[0] + v[1] * v[1]).sum::<f64>() / op.n as f64)
}

/// Mean Euclidean norm of the nodal divergence over internal nodes.
pub fn mean_internal_divergence_norm(op: &DivergenceOperator, sigma: &NodalStressField) -> Result<f64> {
    let d = apply_divergence(op, sigma)?;
    let count = op.internal_count();
    if count == 0 {
        return Ok(0.0);
    }
    let total: f64 = d
        .norms()
        .iter()
        .zip(&op.internal_mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| v)
        .sum();
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::NodeLabel;
    use crate::meshgen::{generate_mesh, HolePlateSpec};

    fn fan() -> Mesh2D {
        Mesh2D {
            plate_side: 2.0,
            coords: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]],
            triangles: vec![[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 1]],
            labels: vec![
                NodeLabel::Interior,
                NodeLabel::ExternalBoundary,
                NodeLabel::ExternalBoundary,
                NodeLabel::ExternalBoundary,
                NodeLabel::ExternalBoundary,
            ],
            periodic_pairs: vec![],
        }
    }

    #[test]
    fn fan_row_matches_hand_assembly() {
        // Per-triangle gradients of the centre and rim hats, averaged over the
        // four triangles: d/dx row [0, 1/2, 0, -1/2, 0], d/dy row [0, 0, 1/2, 0, -1/2].
        let op = build_divergence_operator(&fan()).unwrap();
        let n = 5;
        let dx = [0.0, 0.5, 0.0, -0.5, 0.0];
        let dy = [0.0, 0.0, 0.5, 0.0, -0.5];
        for j in 0..n {
            assert!((op.matrix.get(0, j) - dx[j]).abs() < 1e-15);
            assert!((op.matrix.get(0, 2 * n + j) - dy[j]).abs() < 1e-15);
            assert!((op.matrix.get(n, n + j) - dy[j]).abs() < 1e-15);
            assert!((op.matrix.get(n, 2 * n + j) - dx[j]).abs() < 1e-15);
            assert_eq!(op.matrix.get(0, n + j), 0.0);
            assert_eq!(op.matrix.get(n, j), 0.0);
        }
        for i in 1..n {
            assert_eq!(op.matrix.row_nnz(i), 0);
            assert_eq!(op.matrix.row_nnz(n + i), 0);
        }
    }

    #[test]
    fn uniform_field_has_zero_divergence() {
        let spec = HolePlateSpec {
            plate_side: 100.0,
            hole_center: [50.0, 50.0],
            hole_radius: 20.0,
            global_elem_size: 8.0,
            hole_elem_size: 1.0,
            seed: 1,
        };
        let mesh = generate_mesh(&spec).unwrap();
        let op = build_divergence_operator(&mesh).unwrap();
        let sigma = NodalStressField(vec![[120.0, -45.0, 17.5]; mesh.node_count()]);
        let d = apply_divergence(&op, &sigma).unwrap();
        assert!(d.0.iter().all(|v| v[0].abs() <= 1e-12 && v[1].abs() <= 1e-12));
        assert!(mean_sq_divergence(&op, &sigma).unwrap() <= 1e-24);
    }

    #[test]
    fn affine_field_is_exact() {
        let mesh = generate_mesh(&HolePlateSpec::hole_free(1.0, 0.2)).unwrap();
        let op = build_divergence_operator(&mesh).unwrap();
        let sigma = NodalStressField(mesh.coords.iter().map(|p| [2.0 * p[0], 0.0, 0.0]).collect());
        let d = apply_divergence(&op, &sigma).unwrap();
        for (i, v) in d.0.iter().enumerate() {
            if op.internal_mask[i] {
                assert!((v[0] - 2.0).abs() <= 1e-10 * 2.0);
                assert!(v[1].abs() <= 1e-10 * 2.0);
            } else {
                assert_eq!(*v, [0.0, 0.0]);
            }
        }
    }

    #[test]
    fn linearity() {
        let mesh = generate_mesh(&HolePlateSpec::hole_free(1.0, 0.25)).unwrap();
        let op = build_divergence_operator(&mesh).unwrap();
        let f1 = NodalStressField(mesh.coords.iter().map(|p| [p[0] * p[1], p[0].sin(), p[1] * p[1]]).collect());
        let f2 = NodalStressField(mesh.coords.iter().map(|p| [p[1].cos(), p[0] - p[1], 3.0 * p[0]]).collect());
        let (a, b) = (1.7, -0.3);
        let combo = NodalStressField(
            f1.0.iter()
                .zip(&f2.0)
                .map(|(x, y)| [a * x[0] + b * y[0], a * x[1] + b * y[1], a * x[2] + b * y[2]])
                .collect(),
        );
        let d1 = apply_divergence(&op, &f1).unwrap();
        let d2 = apply_divergence(&op, &f2).unwrap();
        let dc = apply_divergence(&op, &combo).unwrap();
        for i in 0..mesh.node_count() {
            for c in 0..2 {
                assert!((dc.0[i][c] - (a * d1.0[i][c] + b * d2.0[i][c])).abs() < 1e-12);
            }
        }
        let zero = apply_divergence(&op, &NodalStressField::zeros(mesh.node_count())).unwrap();
        assert!(zero.0.iter().all(|v| *v == [0.0, 0.0]));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let op = build_divergence_operator(&fan()).unwrap();
        assert!(matches!(
            apply_divergence(&op, &NodalStressField::zeros(4)),
            Err(Error::Shape { .. })
        ));
    }

    /// Solves `D D^T y = t` densely and returns `D^T y`, a field whose
    /// divergence is exactly the requested target.
    fn field_with_divergence(op: &DivergenceOperator, target: &[f64]) -> Vec<f64> {
        let rows: Vec<usize> = (0..2 * op.n).filter(|&r| op.matrix.row_nnz(r) > 0).collect();
        let dense = op.matrix.to_dense();
        let m = rows.len();
        let mut a = vec![vec![0.0; m + 1]; m];
        for (p, &r) in rows.iter().enumerate() {
            for (q, &s) in rows.iter().enumerate() {
                a[p][q] = dense[r].iter().zip(&dense[s]).map(|(x, y)| x * y).sum();
            }
            a[p][m] = target[r];
        }
        for col in 0..m {
            let piv = (col..m).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..m {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..=m {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        let y: Vec<f64> = (0..m).map(|p| a[p][m] / a[p][p]).collect();
        let mut out = vec![0.0; 3 * op.n];
        for (p, &r) in rows.iter().enumerate() {
            for (c, v) in op.matrix.row(r) {
                out[c] += v * y[p];
            }
        }
        out
    }

    #[test]
    fn single_node_divergence_mean_square() {
        let mesh = generate_mesh(&HolePlateSpec::hole_free(1.0, 0.3)).unwrap();
        assert_eq!(mesh.node_count(), 25);
        let op = build_divergence_operator(&mesh).unwrap();
        let centre = 12;
        assert!(op.internal_mask[centre]);
        let mut target = vec![0.0; 50];
        target[centre] = 3.0;
        target[25 + centre] = 4.0;
        let s = field_with_divergence(&op, &target);
        let sigma = NodalStressField((0..25).map(|i| [s[i], s[25 + i], s[50 + i]]).collect());
        let msd = mean_sq_divergence(&op, &sigma).unwrap();
        assert!((msd - 1.0).abs() < 1e-10);
    }

    #[test]
    fn assembly_is_order_independent() {
        let spec = HolePlateSpec {
            plate_side: 100.0,
            hole_center: [55.0, 45.0],
            hole_radius: 14.0,
            global_elem_size: 7.0,
            hole_elem_size: 0.9,
            seed: 4,
        };
        let mesh = generate_mesh(&spec).unwrap();
        let mut shuffled = mesh.clone();
        shuffled.triangles.reverse();
        for t in shuffled.triangles.iter_mut().step_by(3) {
            t.rotate_left(1);
        }
        let a = build_divergence_operator(&mesh).unwrap();
        let b = build_divergence_operator(&shuffled).unwrap();
        assert_eq!(a, b);
    }
}
