//! Periodic linear-elastic cell problem on constant-strain triangles.
//!
//! The total displacement is split as `u = eps_bar . x + u_fluct` with a
//! periodic fluctuation. Right/top boundary DOFs are eliminated onto their
//! left/bottom masters (corners chain to the bottom-left node), the master
//! corner is pinned, and the reduced SPD system is factored directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Axis, Mesh2D};
use crate::sparse::{norm2, CooMatrix, CsrMatrix, SkylineCholesky};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticMaterial {
    /// MPa.
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
}

impl Default for ElasticMaterial {
    fn default() -> Self {
        ElasticMaterial {
            youngs_modulus: 1e5,
            poisson_ratio: 0.3,
        }
    }
}

/// Plane-stress constitutive matrix in Voigt order (xx, yy, xy) with
/// engineering shear strain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StiffnessMatrix3(pub [[f64; 3]; 3]);

impl StiffnessMatrix3 {
    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let l = &self.0;
        [
            l[0][0] * v[0] + l[0][1] * v[1] + l[0][2] * v[2],
            l[1][0] * v[0] + l[1][1] * v[1] + l[1][2] * v[2],
            l[2][0] * v[0] + l[2][1] * v[1] + l[2][2] * v[2],
        ]
    }

    pub fn identity() -> Self {
        StiffnessMatrix3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }
}

/// Prescribed mean strain; `eps_xy` is the tensor component (gamma = 2 eps_xy).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanStrain {
    pub eps_xx: f64,
    pub eps_yy: f64,
    pub eps_xy: f64,
}

impl MeanStrain {
    pub fn new(eps_xx: f64, eps_yy: f64, eps_xy: f64) -> Self {
        MeanStrain {
            eps_xx,
            eps_yy,
            eps_xy,
        }
    }

    /// (eps_xx, eps_yy, gamma_xy).
    pub fn voigt(&self) -> [f64; 3] {
        [self.eps_xx, self.eps_yy, 2.0 * self.eps_xy]
    }

    /// Affine displacement `eps_bar . x`.
    pub fn affine(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.eps_xx * p[0] + self.eps_xy * p[1],
            self.eps_xy * p[0] + self.eps_yy * p[1],
        ]
    }

    pub fn scaled(&self, s: f64) -> Self {
        MeanStrain::new(s * self.eps_xx, s * self.eps_yy, s * self.eps_xy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanStress {
    pub sigma_xx: f64,
    pub sigma_yy: f64,
    pub sigma_xy: f64,
}

impl MeanStress {
    pub fn to_array(&self) -> [f64; 3] {
        [self.sigma_xx, self.sigma_yy, self.sigma_xy]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        MeanStress {
            sigma_xx: a[0],
            sigma_yy: a[1],
            sigma_xy: a[2],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    /// Total displacement per node.
    pub u: Vec<[f64; 2]>,
    /// Periodic fluctuation per node.
    pub fluctuation: Vec<[f64; 2]>,
}

/// Per-node (sigma_xx, sigma_yy, sigma_xy) in MPa.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodalStressField(pub Vec<[f64; 3]>);

impl NodalStressField {
    pub fn zeros(n: usize) -> Self {
        NodalStressField(vec![[0.0; 3]; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Column-stacked layout `[xx (n) | yy (n) | xy (n)]`.
    pub fn stacked(&self) -> Vec<f64> {
        let n = self.0.len();
        let mut out = vec![0.0; 3 * n];
        for (i, s) in self.0.iter().enumerate() {
            out[i] = s[0];
            out[n + i] = s[1];
            out[2 * n + i] = s[2];
        }
        out
    }
}

pub fn plane_stress_stiffness(mat: &ElasticMaterial) -> Result<StiffnessMatrix3> {
    let (e, nu) = (mat.youngs_modulus, mat.poisson_ratio);
    if !(e > 0.0) || !e.is_finite() {
        return Err(Error::Material(format!("Young's modulus {e} must be positive")));
    }
    if !(nu > -1.0 && nu < 0.5) {
        return Err(Error::Material(format!("Poisson ratio {nu} outside (-1, 0.5)")));
    }
    let c = e / (1.0 - nu * nu);
    Ok(StiffnessMatrix3([
        [c, c * nu, 0.0],
        [c * nu, c, 0.0],
        [0.0, 0.0, c * (1.0 - nu) / 2.0],
    ]))
}

/// Constant shape-function gradients of a linear triangle: `([dN/dx; 3], [dN/dy; 3], area)`.
pub fn shape_gradients(tri: &[[f64; 2]; 3]) -> Option<([f64; 3], [f64; 3], f64)> {
    let [p1, p2, p3] = *tri;
    let two_a = (p2[0] - p1[0]) * (p3[1] - p1[1]) - (p3[0] - p1[0]) * (p2[1] - p1[1]);
    if !(two_a > 0.0) {
        return None;
    }
    let b = [p2[1] - p3[1], p3[1] - p1[1], p1[1] - p2[1]];
    let c = [p3[0] - p2[0], p1[0] - p3[0], p2[0] - p1[0]];
    Some((b.map(|v| v / two_a), c.map(|v| v / two_a), 0.5 * two_a))
}

pub type BMatrix = [[f64; 6]; 3];

/// Strain-displacement matrix for DOF order (u1, v1, u2, v2, u3, v3).
pub fn element_b_matrix(tri: &[[f64; 2]; 3]) -> Result<BMatrix> {
    element_b_and_area(tri, 0).map(|(b, _)| b)
}

fn element_b_and_area(tri: &[[f64; 2]; 3], element: usize) -> Result<(BMatrix, f64)> {
    let (dx, dy, area) = shape_gradients(tri).ok_or_else(|| Error::DegenerateElement {
        element,
        area: crate::mesh::signed_area(tri[0], tri[1], tri[2]),
    })?;
    let mut b = [[0.0; 6]; 3];
    for k in 0..3 {
        b[0][2 * k] = dx[k];
        b[1][2 * k + 1] = dy[k];
        b[2][2 * k] = dy[k];
        b[2][2 * k + 1] = dx[k];
    }
    Ok((b, area))
}

fn element_dofs(t: &[usize; 3]) -> [usize; 6] {
    [2 * t[0], 2 * t[0] + 1, 2 * t[1], 2 * t[1] + 1, 2 * t[2], 2 * t[2] + 1]
}

pub fn element_stiffness(b: &BMatrix, l: &StiffnessMatrix3, area: f64, thickness: f64) -> [[f64; 6]; 6] {
    let mut lb = [[0.0; 6]; 3];
    for r in 0..3 {
        for c in 0..6 {
            lb[r][c] = (0..3).map(|k| l.0[r][k] * b[k][c]).sum();
        }
    }
    let mut ke = [[0.0; 6]; 6];
    for i in 0..6 {
        for j in 0..6 {
            ke[i][j] = area * thickness * (0..3).map(|k| b[k][i] * lb[k][j]).sum::<f64>();
        }
    }
    ke
}

pub fn assemble_stiffness(mesh: &Mesh2D, l: &StiffnessMatrix3, thickness: f64) -> Result<CsrMatrix> {
    let ndof = 2 * mesh.node_count();
    let mut coo = CooMatrix::new(ndof, ndof);
    for (e, t) in mesh.triangles.iter().enumerate() {
        let (b, area) = element_b_and_area(&mesh.triangle_coords(e), e)?;
        let ke = element_stiffness(&b, l, area, thickness);
        let dofs = element_dofs(t);
        for i in 0..6 {
            for j in 0..6 {
                coo.push(dofs[i], dofs[j], ke[i][j]);
            }
        }
    }
    Ok(coo.to_csr())
}

/// Maps every node to its independent master node. Right-edge nodes map
/// through x-pairs, top-edge nodes through y-pairs; chains are followed so
/// every corner resolves to the bottom-left master.
pub fn periodic_masters(mesh: &Mesh2D) -> Result<Vec<usize>> {
    let n = mesh.node_count();
    let mut parent: Vec<usize> = (0..n).collect();
    for p in &mesh.periodic_pairs {
        if p.plus >= n || p.minus >= n {
            return Err(Error::Index {
                op: "periodic_masters",
                index: p.plus.max(p.minus),
                len: n,
            });
        }
        // Prefer x-pairs for nodes that sit on both the right and top faces;
        // both choices resolve to the same master.
        if parent[p.plus] == p.plus || p.axis == Axis::X {
            parent[p.plus] = p.minus;
        }
    }
    let mut master = vec![0usize; n];
    for (i, m) in master.iter_mut().enumerate() {
        let mut cur = i;
        let mut hops = 0;
        while parent[cur] != cur {
            cur = parent[cur];
            hops += 1;
            if hops > 4 {
                return Err(Error::Solver(format!("periodic chain from node {i} does not terminate")));
            }
        }
        *m = cur;
    }
    Ok(master)
}

pub struct MicroSolution {
    pub displacement: DisplacementField,
    /// Relative residual of the reduced system.
    pub residual: f64,
}

pub fn solve_microproblem(
    mesh: &Mesh2D,
    mat: &ElasticMaterial,
    eps_bar: &MeanStrain,
) -> Result<DisplacementField> {
    solve_microproblem_detailed(mesh, mat, eps_bar).map(|s| s.displacement)
}

pub fn solve_microproblem_detailed(
    mesh: &Mesh2D,
    mat: &ElasticMaterial,
    eps_bar: &MeanStrain,
) -> Result<MicroSolution> {
    let l = plane_stress_stiffness(mat)?;
    let k = assemble_stiffness(mesh, &l, 1.0)?;
    let n = mesh.node_count();
    let master = periodic_masters(mesh)?;

    let corner = mesh.corner_nodes(1e-9 * mesh.plate_side)[0]
        .ok_or_else(|| Error::Solver("no bottom-left corner node to pin".into()))?;
    let pinned = master[corner];

    // Reduced numbering over the DOFs of free master nodes.
    let mut reduced = vec![usize::MAX; n];
    let mut count = 0;
    for i in 0..n {
        if master[i] == i && i != pinned {
            reduced[i] = count;
            count += 1;
        }
    }
    let dof_map = |dof: usize| -> Option<usize> {
        let node = master[dof / 2];
        (reduced[node] != usize::MAX).then(|| 2 * reduced[node] + dof % 2)
    };

    let u_affine: Vec<f64> = mesh
        .coords
        .iter()
        .flat_map(|&p| eps_bar.affine(p))
        .collect();
    let f_full: Vec<f64> = k.matvec(&u_affine)?.into_iter().map(|v| -v).collect();

    let nred = 2 * count;
    let mut coo = CooMatrix::new(nred, nred);
    let mut f = vec![0.0; nred];
    for r in 0..k.nrows {
        let Some(rr) = dof_map(r) else { continue };
        f[rr] += f_full[r];
        for (c, v) in k.row(r) {
            if let Some(cc) = dof_map(c) {
                coo.push(rr, cc, v);
            }
        }
    }
    let k_red = coo.to_csr();
    let mut fluct_red = vec![0.0; nred];
    let mut residual = 0.0;
    let f_norm = norm2(&f);
    if nred > 0 && f_norm > 0.0 {
        let chol = SkylineCholesky::factor(&k_red)?;
        fluct_red = chol.solve(&f)?;
        let mut r = k_red.matvec(&fluct_red)?;
        for (ri, fi) in r.iter_mut().zip(&f) {
            *ri -= fi;
        }
        residual = norm2(&r) / f_norm;
        if !(residual <= 1e-8) {
            return Err(Error::Solver(format!("reduced residual {residual:e} exceeds 1e-8")));
        }
    }

    let mut fluctuation = vec![[0.0; 2]; n];
    let mut u = vec![[0.0; 2]; n];
    for i in 0..n {
        let m = master[i];
        if reduced[m] != usize::MAX {
            fluctuation[i] = [fluct_red[2 * reduced[m]], fluct_red[2 * reduced[m] + 1]];
        }
        let a = eps_bar.affine(mesh.coords[i]);
        u[i] = [a[0] + fluctuation[i][0], a[1] + fluctuation[i][1]];
    }
    Ok(MicroSolution {
        displacement: DisplacementField { u, fluctuation },
        residual,
    })
}

/// Constant strain (eps_xx, eps_yy, gamma_xy) of every element.
pub fn element_strains(mesh: &Mesh2D, u: &DisplacementField) -> Result<Vec<[f64; 3]>> {
    let mut out = Vec::with_capacity(mesh.element_count());
    for (e, t) in mesh.triangles.iter().enumerate() {
        let (b, _) = element_b_and_area(&mesh.triangle_coords(e), e)?;
        let ue: Vec<f64> = t.iter().flat_map(|&v| u.u[v]).collect();
        let mut eps = [0.0; 3];
        for r in 0..3 {
            eps[r] = (0..6).map(|c| b[r][c] * ue[c]).sum();
        }
        out.push(eps);
    }
    Ok(out)
}

pub fn element_stresses(mesh: &Mesh2D, u: &DisplacementField, l: &StiffnessMatrix3) -> Result<Vec<[f64; 3]>> {
    Ok(element_strains(mesh, u)?.into_iter().map(|e| l.apply(e)).collect())
}

/// Nodal values as the unweighted mean of the adjacent element values.
pub fn average_to_nodes(mesh: &Mesh2D, element_values: &[[f64; 3]]) -> NodalStressField {
    let n = mesh.node_count();
    let mut sum = vec![[0.0; 3]; n];
    let mut count = vec![0usize; n];
    for (t, s) in mesh.triangles.iter().zip(element_values) {
        for &v in t {
            for c in 0..3 {
                sum[v][c] += s[c];
            }
            count[v] += 1;
        }
    }
    NodalStressField(
        sum.into_iter()
            .zip(count)
            .map(|(s, k)| if k == 0 { s } else { s.map(|x| x / k as f64) })
            .collect(),
    )
}

pub fn nodal_stress_field(mesh: &Mesh2D, u: &DisplacementField, l: &StiffnessMatrix3) -> Result<NodalStressField> {
    Ok(average_to_nodes(mesh, &element_stresses(mesh, u, l)?))
}

/// Area-weighted average of per-element values.
pub fn volume_average(mesh: &Mesh2D, element_values: &[[f64; 3]]) -> [f64; 3] {
    let mut acc = [0.0; 3];
    let mut area = 0.0;
    for (e, s) in element_values.iter().enumerate() {
        let a = mesh.triangle_area(e);
        for c in 0..3 {
            acc[c] += a * s[c];
        }
        area += a;
    }
    acc.map(|v| v / area)
}

pub fn mean_stress(mesh: &Mesh2D, element_stresses: &[[f64; 3]]) -> MeanStress {
    MeanStress::from_array(volume_average(mesh, element_stresses))
}

/// Strain averaged over the whole periodic cell, void included.
///
/// The void's contribution follows from the displacement on the hole
/// boundary (`int_void grad u = sum over hole edges of u_mid (x) n_void * len`),
/// which is exact for piecewise-linear fields. Returns (eps_xx, eps_yy, gamma_xy).
pub fn cell_average_strain(mesh: &Mesh2D, u: &DisplacementField) -> Result<[f64; 3]> {
    let strains = element_strains(mesh, u)?;
    // grad[i][j] accumulates the integral of d u_i / d x_j.
    let mut grad = [[0.0; 2]; 2];
    for (e, eps) in strains.iter().enumerate() {
        let a = mesh.triangle_area(e);
        grad[0][0] += a * eps[0];
        grad[1][1] += a * eps[1];
        grad[0][1] += 0.5 * a * eps[2];
        grad[1][0] += 0.5 * a * eps[2];
    }
    let mut uses = std::collections::BTreeMap::new();
    for t in &mesh.triangles {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            uses.entry((a.min(b), a.max(b))).or_insert_with(Vec::new).push((a, b));
        }
    }
    for (_, dirs) in uses {
        let [(a, b)] = dirs[..] else { continue };
        if mesh.labels[a] != crate::mesh::NodeLabel::HoleBoundary
            || mesh.labels[b] != crate::mesh::NodeLabel::HoleBoundary
        {
            continue;
        }
        // Solid lies left of a->b, so the void's outward normal times length is (-dy, dx).
        let (pa, pb) = (mesh.coords[a], mesh.coords[b]);
        let nl = [-(pb[1] - pa[1]), pb[0] - pa[0]];
        let um = [0.5 * (u.u[a][0] + u.u[b][0]), 0.5 * (u.u[a][1] + u.u[b][1])];
        for i in 0..2 {
            for j in 0..2 {
                grad[i][j] += um[i] * nl[j];
            }
        }
    }
    let v = mesh.plate_side * mesh.plate_side;
    Ok([grad[0][0] / v, grad[1][1] / v, (grad[0][1] + grad[1][0]) / v])
}

/// Full ground-truth pipeline for one sample.
pub struct FeResult {
    pub displacement: DisplacementField,
    pub element_stresses: Vec<[f64; 3]>,
    pub nodal: NodalStressField,
    pub mean: MeanStress,
}

pub fn solve_sample(mesh: &Mesh2D, mat: &ElasticMaterial, eps_bar: &MeanStrain) -> Result<FeResult> {
    let l = plane_stress_stiffness(mat)?;
    let displacement = solve_microproblem(mesh, mat, eps_bar)?;
    let element_stresses = element_stresses(mesh, &displacement, &l)?;
    let nodal = average_to_nodes(mesh, &element_stresses);
    let mean = mean_stress(mesh, &element_stresses);
    Ok(FeResult {
        displacement,
        element_stresses,
        nodal,
        mean,
    })
}
