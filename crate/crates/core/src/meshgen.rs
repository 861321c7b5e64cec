//! Randomized periodic plate-with-hole meshes.
//!
//! Each pair of opposite square edges shares one 1D discretization, so the
//! outer boundary pairs exactly. Interior nodes come from variable-radius
//! Poisson-disk sampling driven by a size field that grows linearly with the
//! distance to the hole, then a constrained Delaunay triangulation, a few
//! sweeps of guarded Laplacian smoothing, and a final re-triangulation.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spade::{ConstrainedDelaunayTriangulation, Point2, Triangulation};

use crate::error::{Error, Result};
use crate::mesh::{dist, match_periodic_pairs, signed_area, Mesh2D, NodeLabel};

/// Size increase per unit distance away from the hole.
pub const SIZE_GRADING: f64 = 0.25;

/// Poisson-disk spacing factor relative to the local target size.
const DISK_FACTOR: f64 = 0.8;
const DISK_CANDIDATES: usize = 24;
const SMOOTHING_SWEEPS: usize = 4;
const MAX_SPEC_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HolePlateSpec {
    pub plate_side: f64,
    pub hole_center: [f64; 2],
    /// `0.0` is the hole-free sentinel and yields a structured grid.
    pub hole_radius: f64,
    pub global_elem_size: f64,
    pub hole_elem_size: f64,
    pub seed: u64,
}

impl std::fmt::Display for HolePlateSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "HolePlateSpec(side={}, center=({}, {}), r={}, h_global={}, h_hole={}, seed={})",
            self.plate_side,
            self.hole_center[0],
            self.hole_center[1],
            self.hole_radius,
            self.global_elem_size,
            self.hole_elem_size,
            self.seed
        )
    }
}

impl HolePlateSpec {
    /// Structured square without a hole; only used for analytic checks.
    pub fn hole_free(plate_side: f64, global_elem_size: f64) -> Self {
        HolePlateSpec {
            plate_side,
            hole_center: [0.5 * plate_side, 0.5 * plate_side],
            hole_radius: 0.0,
            global_elem_size,
            hole_elem_size: 0.5 * global_elem_size,
            seed: 0,
        }
    }

    pub fn is_hole_free(&self) -> bool {
        self.hole_radius == 0.0
    }

    pub fn required_margin(&self) -> f64 {
        self.hole_elem_size.max(0.05 * self.plate_side)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(format!("{msg} in {self}")));
        let finite = [
            self.plate_side,
            self.hole_center[0],
            self.hole_center[1],
            self.hole_radius,
            self.global_elem_size,
            self.hole_elem_size,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return bad("non-finite value".into());
        }
        if !(self.plate_side > 0.0) || !(self.global_elem_size > 0.0) {
            return bad("plate side and element size must be positive".into());
        }
        if self.global_elem_size > self.plate_side {
            return bad("global element size exceeds the plate".into());
        }
        if self.is_hole_free() {
            return Ok(());
        }
        if !(self.hole_radius > 0.0) {
            return bad("hole radius must be positive".into());
        }
        if !(self.hole_elem_size > 0.0) || self.hole_elem_size >= self.global_elem_size {
            return bad("need 0 < hole_elem_size < global_elem_size".into());
        }
        let margin = self.required_margin();
        for c in self.hole_center {
            if c - self.hole_radius < margin || self.plate_side - c - self.hole_radius < margin {
                return bad(format!("hole closer than {margin} to the plate edge"));
            }
        }
        Ok(())
    }

    /// Target element size at `p`.
    pub fn size_at(&self, p: [f64; 2]) -> f64 {
        if self.is_hole_free() {
            return self.global_elem_size;
        }
        let d = (dist(p, self.hole_center) - self.hole_radius).max(0.0);
        let span = self.global_elem_size - self.hole_elem_size;
        let ramp = span / SIZE_GRADING;
        self.hole_elem_size + span * (d / ramp).min(1.0)
    }
}

/// Uniform sampling ranges for [`sample_spec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecBounds {
    pub plate_side: f64,
    pub radius: [f64; 2],
    /// Clearance between the hole and the plate edge in addition to the radius.
    pub center_margin: f64,
    /// Explicit center ranges `[[x_lo, x_hi], [y_lo, y_hi]]`; overrides the margin rule.
    pub center: Option<[[f64; 2]; 2]>,
    pub global_elem_size: [f64; 2],
    pub hole_elem_size: [f64; 2],
}

impl Default for SpecBounds {
    fn default() -> Self {
        SpecBounds {
            plate_side: 100.0,
            radius: [10.0, 30.0],
            center_margin: 5.0,
            center: None,
            global_elem_size: [5.0, 9.0],
            hole_elem_size: [0.6, 1.2],
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        range[0] + (range[1] - range[0]) * rng.random::<f64>()
    }
}

pub fn sample_spec(rng_seed: u64, bounds: &SpecBounds) -> Result<HolePlateSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut last = String::from("no attempt made");
    for _ in 0..MAX_SPEC_ATTEMPTS {
        let r = uniform(&mut rng, bounds.radius);
        let ranges = match bounds.center {
            Some(c) => c,
            None => {
                let lo = r + bounds.center_margin;
                let hi = bounds.plate_side - r - bounds.center_margin;
                [[lo, hi], [lo, hi]]
            }
        };
        if ranges.iter().any(|[lo, hi]| lo > hi) {
            last = format!("empty center range {ranges:?} for radius {r}");
            continue;
        }
        let spec = HolePlateSpec {
            plate_side: bounds.plate_side,
            hole_center: [uniform(&mut rng, ranges[0]), uniform(&mut rng, ranges[1])],
            hole_radius: r,
            global_elem_size: uniform(&mut rng, bounds.global_elem_size),
            hole_elem_size: uniform(&mut rng, bounds.hole_elem_size),
            seed: rng.random::<u64>(),
        };
        match spec.validate() {
            Ok(()) => return Ok(spec),
            Err(e) => last = e.to_string(),
        }
    }
    Err(Error::SpecRejected {
        attempts: MAX_SPEC_ATTEMPTS,
        reason: last,
    })
}

pub fn generate_mesh(spec: &HolePlateSpec) -> Result<Mesh2D> {
    spec.validate()?;
    let mesh = if spec.is_hole_free() {
        structured_square(spec)?
    } else {
        hole_plate(spec)?
    };
    mesh.validate().map_err(|e| Error::MeshGeneration {
        spec: spec.to_string(),
        reason: e.to_string(),
    })?;
    Ok(mesh)
}

/// Segment count whose spacing is strictly below `target`.
fn segments_for(length_over_size: f64) -> usize {
    (length_over_size.floor() as usize + 1).max(1)
}

fn structured_square(spec: &HolePlateSpec) -> Result<Mesh2D> {
    let side = spec.plate_side;
    let k = segments_for(side / spec.global_elem_size);
    let ticks: Vec<f64> = (0..=k)
        .map(|i| if i == k { side } else { side * i as f64 / k as f64 })
        .collect();
    let id = |i: usize, j: usize| i * (k + 1) + j;
    let mut coords = Vec::with_capacity((k + 1) * (k + 1));
    let mut labels = Vec::with_capacity((k + 1) * (k + 1));
    for i in 0..=k {
        for j in 0..=k {
            coords.push([ticks[j], ticks[i]]);
            let edge = i == 0 || j == 0 || i == k || j == k;
            labels.push(if edge {
                NodeLabel::ExternalBoundary
            } else {
                NodeLabel::Interior
            });
        }
    }
    let mut triangles = Vec::with_capacity(2 * k * k);
    for i in 0..k {
        for j in 0..k {
            let (a, b, c, d) = (id(i, j), id(i, j + 1), id(i + 1, j + 1), id(i + 1, j));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    finish(spec, coords, triangles, labels)
}

fn finish(
    spec: &HolePlateSpec,
    coords: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    labels: Vec<NodeLabel>,
) -> Result<Mesh2D> {
    let mut mesh = Mesh2D {
        plate_side: spec.plate_side,
        coords,
        triangles,
        labels,
        periodic_pairs: Vec::new(),
    };
    mesh.periodic_pairs = match_periodic_pairs(&mesh, spec.plate_side, 1e-9 * spec.plate_side)
        .map_err(|e| Error::MeshGeneration {
            spec: spec.to_string(),
            reason: e.to_string(),
        })?;
    Ok(mesh)
}

/// Positions along `[0, length]` equidistributing `1 / size(t)`.
fn edge_ticks(length: f64, size: impl Fn(f64) -> f64) -> Vec<f64> {
    const SAMPLES: usize = 4096;
    let dt = length / SAMPLES as f64;
    let mut cumulative = Vec::with_capacity(SAMPLES + 1);
    cumulative.push(0.0);
    let mut prev = 1.0 / size(0.0);
    for s in 1..=SAMPLES {
        let cur = 1.0 / size(s as f64 * dt);
        let last = *cumulative.last().unwrap();
        cumulative.push(last + 0.5 * (prev + cur) * dt);
        prev = cur;
    }
    let total = cumulative[SAMPLES];
    let k = segments_for(total);
    let mut ticks = vec![0.0];
    let mut s = 0;
    for i in 1..k {
        let target = total * i as f64 / k as f64;
        while cumulative[s + 1] < target {
            s += 1;
        }
        let frac = (target - cumulative[s]) / (cumulative[s + 1] - cumulative[s]);
        ticks.push((s as f64 + frac) * dt);
    }
    ticks.push(length);
    ticks
}

struct PointGrid {
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<usize>>,
}

impl PointGrid {
    fn new(side: f64, cell: f64) -> Self {
        let cols = ((side / cell).ceil() as usize).max(1);
        PointGrid {
            cell,
            cols,
            rows: cols,
            buckets: vec![Vec::new(); cols * cols],
        }
    }

    fn cell_of(&self, p: [f64; 2]) -> (usize, usize) {
        let cx = ((p[0] / self.cell).floor().max(0.0) as usize).min(self.cols - 1);
        let cy = ((p[1] / self.cell).floor().max(0.0) as usize).min(self.rows - 1);
        (cx, cy)
    }

    fn insert(&mut self, p: [f64; 2], id: usize) {
        let (cx, cy) = self.cell_of(p);
        self.buckets[cy * self.cols + cx].push(id);
    }

    fn any_within(&self, p: [f64; 2], radius: f64, mut hit: impl FnMut(usize) -> bool) -> bool {
        let reach = (radius / self.cell).ceil() as isize;
        let (cx, cy) = self.cell_of(p);
        for dy in -reach..=reach {
            let y = cy as isize + dy;
            if y < 0 || y >= self.rows as isize {
                continue;
            }
            for dx in -reach..=reach {
                let x = cx as isize + dx;
                if x < 0 || x >= self.cols as isize {
                    continue;
                }
                for &id in &self.buckets[y as usize * self.cols + x as usize] {
                    if hit(id) {
                        return true;
                    }
                }
            }
        }
        false
    }
}

fn hole_plate(spec: &HolePlateSpec) -> Result<Mesh2D> {
    let side = spec.plate_side;
    let gen_err = |reason: String| Error::MeshGeneration {
        spec: spec.to_string(),
        reason,
    };

    // Boundary discretization shared by opposite edges.
    let along_x = edge_ticks(side, |t| {
        spec.size_at([t, 0.0]).min(spec.size_at([t, side]))
    });
    let along_y = edge_ticks(side, |t| {
        spec.size_at([0.0, t]).min(spec.size_at([side, t]))
    });

    let mut coords: Vec<[f64; 2]> = vec![[0.0, 0.0], [side, 0.0], [0.0, side], [side, side]];
    let mut labels = vec![NodeLabel::ExternalBoundary; 4];
    let inner_x = &along_x[1..along_x.len() - 1];
    let inner_y = &along_y[1..along_y.len() - 1];
    for &t in inner_x {
        coords.push([t, 0.0]);
    }
    for &t in inner_x {
        coords.push([t, side]);
    }
    for &t in inner_y {
        coords.push([0.0, t]);
    }
    for &t in inner_y {
        coords.push([side, t]);
    }
    labels.resize(coords.len(), NodeLabel::ExternalBoundary);

    let mut outer_loop = vec![0usize];
    outer_loop.extend(4..4 + inner_x.len());
    outer_loop.push(1);
    let right0 = 4 + 2 * inner_x.len() + inner_y.len();
    outer_loop.extend(right0..right0 + inner_y.len());
    outer_loop.push(3);
    let top0 = 4 + inner_x.len();
    outer_loop.extend((top0..top0 + inner_x.len()).rev());
    outer_loop.push(2);
    let left0 = 4 + 2 * inner_x.len();
    outer_loop.extend((left0..left0 + inner_y.len()).rev());

    let [cx, cy] = spec.hole_center;
    let r = spec.hole_radius;
    let hole_count = ((2.0 * std::f64::consts::PI * r / spec.hole_elem_size).ceil() as usize).max(8);
    let hole0 = coords.len();
    for k in 0..hole_count {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / hole_count as f64;
        coords.push([cx + r * theta.cos(), cy + r * theta.sin()]);
        labels.push(NodeLabel::HoleBoundary);
    }
    let fixed = coords.len();

    sample_interior(spec, &mut coords);
    labels.resize(coords.len(), NodeLabel::Interior);

    let mut constraints: Vec<(usize, usize)> = outer_loop
        .iter()
        .zip(outer_loop.iter().cycle().skip(1))
        .map(|(&a, &b)| (a, b))
        .collect();
    constraints.extend((0..hole_count).map(|k| (hole0 + k, hole0 + (k + 1) % hole_count)));

    let mut triangles = triangulate(spec, &coords, &constraints).map_err(gen_err)?;
    for _ in 0..SMOOTHING_SWEEPS {
        smooth(spec, &mut coords, &triangles, fixed);
        triangles = triangulate(spec, &coords, &constraints).map_err(gen_err)?;
    }
    finish(spec, coords, triangles, labels)
}

/// Variable-radius Poisson-disk fill of the material region, seeded from the
/// already placed boundary and hole nodes.
fn sample_interior(spec: &HolePlateSpec, coords: &mut Vec<[f64; 2]>) {
    let side = spec.plate_side;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let slope = DISK_FACTOR * SIZE_GRADING / 2.0;
    let mut grid = PointGrid::new(side, DISK_FACTOR * spec.hole_elem_size);
    for (i, &p) in coords.iter().enumerate() {
        grid.insert(p, i);
    }
    let mut active: Vec<usize> = (0..coords.len()).collect();
    let admissible = |p: [f64; 2], h: f64| {
        let clearance = 0.5 * h;
        p[0] >= clearance
            && p[1] >= clearance
            && p[0] <= side - clearance
            && p[1] <= side - clearance
            && dist(p, spec.hole_center) >= spec.hole_radius + clearance
    };
    while !active.is_empty() {
        let slot = rng.random_range(0..active.len());
        let origin = coords[active[slot]];
        let h0 = spec.size_at(origin);
        let mut placed = false;
        for _ in 0..DISK_CANDIDATES {
            let rho = DISK_FACTOR * h0 * (1.0 + rng.random::<f64>());
            let theta = 2.0 * std::f64::consts::PI * rng.random::<f64>();
            let p = [origin[0] + rho * theta.cos(), origin[1] + rho * theta.sin()];
            let h = spec.size_at(p);
            if !admissible(p, h) {
                continue;
            }
            let reach = DISK_FACTOR * h / (1.0 - slope);
            let blocked = grid.any_within(p, reach, |id| {
                let q = coords[id];
                dist(p, q) < DISK_FACTOR * 0.5 * (h + spec.size_at(q))
            });
            if blocked {
                continue;
            }
            let id = coords.len();
            coords.push(p);
            grid.insert(p, id);
            active.push(id);
            placed = true;
            break;
        }
        if !placed {
            active.swap_remove(slot);
        }
    }
}

fn triangulate(
    spec: &HolePlateSpec,
    coords: &[[f64; 2]],
    constraints: &[(usize, usize)],
) -> std::result::Result<Vec<[usize; 3]>, String> {
    let mut cdt = ConstrainedDelaunayTriangulation::<Point2<f64>>::new();
    let mut handles = Vec::with_capacity(coords.len());
    let mut node_of = vec![usize::MAX; coords.len()];
    for (i, p) in coords.iter().enumerate() {
        let h = cdt
            .insert(Point2::new(p[0], p[1]))
            .map_err(|e| format!("insertion of node {i} failed: {e:?}"))?;
        if node_of[h.index()] != usize::MAX {
            return Err(format!("node {i} duplicates node {}", node_of[h.index()]));
        }
        node_of[h.index()] = i;
        handles.push(h);
    }
    for &(a, b) in constraints {
        if cdt.can_add_constraint(handles[a], handles[b]) {
            cdt.add_constraint(handles[a], handles[b]);
        } else {
            return Err(format!("constraint edge ({a}, {b}) crosses existing constraints"));
        }
    }
    let mut triangles = Vec::with_capacity(cdt.num_inner_faces());
    for face in cdt.inner_faces() {
        let v = face.vertices();
        let mut t = [
            node_of[v[0].fix().index()],
            node_of[v[1].fix().index()],
            node_of[v[2].fix().index()],
        ];
        let centroid = [
            (coords[t[0]][0] + coords[t[1]][0] + coords[t[2]][0]) / 3.0,
            (coords[t[0]][1] + coords[t[1]][1] + coords[t[2]][1]) / 3.0,
        ];
        if dist(centroid, spec.hole_center) < spec.hole_radius {
            continue;
        }
        let area = signed_area(coords[t[0]], coords[t[1]], coords[t[2]]);
        if area < 0.0 {
            t.swap(1, 2);
        } else if area == 0.0 {
            return Err(format!("zero-area triangle {t:?}"));
        }
        triangles.push(t);
    }
    // Canonical ordering so downstream results do not depend on DCEL layout.
    for t in &mut triangles {
        let k = (0..3).min_by_key(|&k| t[k]).unwrap();
        t.rotate_left(k);
    }
    triangles.sort_unstable();
    Ok(triangles)
}

/// One Jacobi sweep of Laplacian smoothing on the free nodes, rejecting moves
/// that would shrink any incident triangle below a quarter of its area or
/// leave the admissible region.
fn smooth(spec: &HolePlateSpec, coords: &mut [[f64; 2]], triangles: &[[usize; 3]], fixed: usize) {
    let n = coords.len();
    let mut neighbor_sum = vec![[0.0f64; 2]; n];
    let mut neighbor_count = vec![0usize; n];
    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (e, t) in triangles.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            // Each interior edge is visited twice (once per side) which keeps
            // the average symmetric; boundary edges of the free set do not occur.
            neighbor_sum[a][0] += coords[b][0];
            neighbor_sum[a][1] += coords[b][1];
            neighbor_count[a] += 1;
            incident[t[k]].push(e);
        }
    }
    let old = coords.to_vec();
    for i in fixed..n {
        if neighbor_count[i] == 0 {
            continue;
        }
        let target = [
            neighbor_sum[i][0] / neighbor_count[i] as f64,
            neighbor_sum[i][1] / neighbor_count[i] as f64,
        ];
        let h = spec.size_at(target);
        let side = spec.plate_side;
        let clearance = 0.3 * h;
        if target[0] < clearance
            || target[1] < clearance
            || target[0] > side - clearance
            || target[1] > side - clearance
            || dist(target, spec.hole_center) < spec.hole_radius + clearance
        {
            continue;
        }
        let ok = incident[i].iter().all(|&e| {
            let t = triangles[e];
            let before = signed_area(old[t[0]], old[t[1]], old[t[2]]);
            let p = |v: usize| if v == i { target } else { old[v] };
            let after = signed_area(p(t[0]), p(t[1]), p(t[2]));
            after > 0.25 * before
        });
        if ok {
            coords[i] = target;
        }
    }
}
