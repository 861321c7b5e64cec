//! C ABI over meshing, FE solves, nodal divergence and checkpoint inference.
//!
//! Every entry point returns a [`DgStatus`]; on failure a message is kept in
//! thread-local storage and readable through [`dg_last_error`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use divgnn::dataio::{read_checkpoint, Checkpoint};
use divgnn::divop::{apply_divergence, build_divergence_operator};
use divgnn::fem::{solve_sample, ElasticMaterial, MeanStrain, MeanStress, NodalStressField};
use divgnn::graph::{add_periodic_edges, mesh_to_graph};
use divgnn::mesh::Mesh2D;
use divgnn::meshgen::{generate_mesh, HolePlateSpec};
use divgnn::model::GraphInput;
use divgnn::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Io = 4,
    Format = 5,
    Solver = 6,
    Mesh = 7,
    Model = 8,
    Panic = 9,
}

/// Geometry of one periodic hole plate.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DgHolePlateSpec {
    pub plate_side: f64,
    pub hole_center_x: f64,
    pub hole_center_y: f64,
    /// Zero for a plate without hole.
    pub hole_radius: f64,
    pub global_elem_size: f64,
    pub hole_elem_size: f64,
    pub seed: u64,
}

/// Opaque triangulated plate.
pub struct DgMesh {
    mesh: Mesh2D,
}

/// Opaque trained model with its feature statistics.
pub struct DgModel {
    ckpt: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> DgStatus {
    match e {
        Error::Io { .. } => DgStatus::Io,
        Error::Format { .. } | Error::Checksum { .. } | Error::Version { .. } => DgStatus::Format,
        Error::Solver(_) | Error::Material(_) => DgStatus::Solver,
        Error::InvalidSpec(_)
        | Error::SpecRejected { .. }
        | Error::MeshGeneration { .. }
        | Error::Pairing { .. }
        | Error::DegenerateElement { .. } => DgStatus::Mesh,
        Error::Checkpoint(_) | Error::Stats(_) | Error::NonFinite { .. } | Error::Shape { .. } => DgStatus::Model,
        _ => DgStatus::InvalidArgument,
    }
}

struct Fail(DgStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DgStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            DgStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    // SAFETY: caller passes either null or a valid pointer.
    unsafe { p.as_ref() }.ok_or_else(|| Fail(DgStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, needed: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(Fail(DgStatus::NullPointer, format!("{what} is null")));
    }
    if len < needed {
        return Err(Fail(DgStatus::BufferTooSmall, format!("{what} holds {len} values, {needed} needed")));
    }
    // SAFETY: caller guarantees `p` points to at least `len` writable values.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, needed) })
}

unsafe fn in_slice<'a, T>(p: *const T, len: usize, needed: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(Fail(DgStatus::NullPointer, format!("{what} is null")));
    }
    if len < needed {
        return Err(Fail(DgStatus::BufferTooSmall, format!("{what} holds {len} values, {needed} needed")));
    }
    // SAFETY: caller guarantees `p` points to at least `len` readable values.
    Ok(unsafe { std::slice::from_raw_parts(p, needed) })
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Meshes a periodic hole plate into `*out`.
///
/// # Safety
/// `spec` must point to a valid spec and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn dg_mesh_generate(spec: *const DgHolePlateSpec, out: *mut *mut DgMesh) -> DgStatus {
    guard(|| {
        let s = unsafe { deref(spec, "spec") }?;
        if out.is_null() {
            return Err(Fail(DgStatus::NullPointer, "out is null".into()));
        }
        let spec = HolePlateSpec {
            plate_side: s.plate_side,
            hole_center: [s.hole_center_x, s.hole_center_y],
            hole_radius: s.hole_radius,
            global_elem_size: s.global_elem_size,
            hole_elem_size: s.hole_elem_size,
            seed: s.seed,
        };
        let mesh = generate_mesh(&spec)?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(DgMesh { mesh })) };
        Ok(())
    })
}

/// # Safety
/// `mesh` must be null or a handle from [`dg_mesh_generate`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dg_mesh_free(mesh: *mut DgMesh) {
    if !mesh.is_null() {
        // SAFETY: handle was created by Box::into_raw.
        drop(unsafe { Box::from_raw(mesh) });
    }
}

/// Node count, or 0 for a null handle.
///
/// # Safety
/// `mesh` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dg_mesh_node_count(mesh: *const DgMesh) -> usize {
    unsafe { mesh.as_ref() }.map_or(0, |m| m.mesh.node_count())
}

/// Triangle count, or 0 for a null handle.
///
/// # Safety
/// `mesh` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dg_mesh_element_count(mesh: *const DgMesh) -> usize {
    unsafe { mesh.as_ref() }.map_or(0, |m| m.mesh.element_count())
}

/// Copies node coordinates as interleaved `x, y` pairs (`2 n` values).
///
/// # Safety
/// `out` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dg_mesh_coords(mesh: *const DgMesh, out: *mut f64, len: usize) -> DgStatus {
    guard(|| {
        let m = &unsafe { deref(mesh, "mesh") }?.mesh;
        let dst = unsafe { out_slice(out, len, 2 * m.node_count(), "out") }?;
        for (d, v) in dst.iter_mut().zip(m.coords.iter().flatten()) {
            *d = *v;
        }
        Ok(())
    })
}

/// Copies triangle connectivity (`3 m` node indices, counter-clockwise).
///
/// # Safety
/// `out` must hold `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn dg_mesh_triangles(mesh: *const DgMesh, out: *mut usize, len: usize) -> DgStatus {
    guard(|| {
        let m = &unsafe { deref(mesh, "mesh") }?.mesh;
        let dst = unsafe { out_slice(out, len, 3 * m.element_count(), "out") }?;
        for (d, v) in dst.iter_mut().zip(m.triangles.iter().flatten()) {
            *d = *v;
        }
        Ok(())
    })
}

/// Solves the periodic plane-stress problem for mean strain
/// `(eps_xx, eps_yy, eps_xy)` (tensor shear). Writes nodal stresses as
/// `n x 3` row-major `(xx, yy, xy)` and, if non-null, the mean stress.
///
/// # Safety
/// `eps` must hold 3 doubles, `nodal_stress` `len` writable doubles and
/// `mean_stress` null or 3 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dg_fe_solve(
    mesh: *const DgMesh,
    youngs_modulus: f64,
    poisson_ratio: f64,
    eps: *const f64,
    nodal_stress: *mut f64,
    len: usize,
    mean_stress: *mut f64,
) -> DgStatus {
    guard(|| {
        let m = &unsafe { deref(mesh, "mesh") }?.mesh;
        let e = unsafe { in_slice(eps, 3, 3, "eps") }?;
        let dst = unsafe { out_slice(nodal_stress, len, 3 * m.node_count(), "nodal_stress") }?;
        let mat = ElasticMaterial {
            youngs_modulus,
            poisson_ratio,
        };
        let fe = solve_sample(m, &mat, &MeanStrain::new(e[0], e[1], e[2]))?;
        for (d, v) in dst.iter_mut().zip(fe.nodal.0.iter().flatten()) {
            *d = *v;
        }
        if !mean_stress.is_null() {
            let ms = unsafe { out_slice(mean_stress, 3, 3, "mean_stress") }?;
            ms.copy_from_slice(&fe.mean.to_array());
        }
        Ok(())
    })
}

/// Nodal divergence `n x 2` of an `n x 3` stress field; rows of nodes on
/// the outer or hole boundary are zero.
///
/// # Safety
/// `stress` must hold `stress_len` doubles and `out` `out_len` writable ones.
#[no_mangle]
pub unsafe extern "C" fn dg_divergence(
    mesh: *const DgMesh,
    stress: *const f64,
    stress_len: usize,
    out: *mut f64,
    out_len: usize,
) -> DgStatus {
    guard(|| {
        let m = &unsafe { deref(mesh, "mesh") }?.mesh;
        let n = m.node_count();
        let s = unsafe { in_slice(stress, stress_len, 3 * n, "stress") }?;
        let dst = unsafe { out_slice(out, out_len, 2 * n, "out") }?;
        let op = build_divergence_operator(m)?;
        let field = NodalStressField(s.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect());
        let div = apply_divergence(&op, &field)?;
        for (d, v) in dst.iter_mut().zip(div.0.iter().flatten()) {
            *d = *v;
        }
        Ok(())
    })
}

/// Loads a checkpoint written by the `divgnn` tool.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dg_model_load(path: *const c_char, out: *mut *mut DgModel) -> DgStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(Fail(DgStatus::NullPointer, "path or out is null".into()));
        }
        // SAFETY: caller passes a NUL-terminated string.
        let p = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| Fail(DgStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ckpt = read_checkpoint(Path::new(p))?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(DgModel { ckpt })) };
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`dg_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dg_model_free(model: *mut DgModel) {
    if !model.is_null() {
        // SAFETY: handle was created by Box::into_raw.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Trainable scalar count, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dg_model_param_count(model: *const DgModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.ckpt.model.param_count())
}

/// Whether the model was trained with periodic edges (1) or not (0).
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dg_model_periodic_edges(model: *const DgModel) -> i32 {
    unsafe { model.as_ref() }.map_or(0, |m| m.ckpt.periodic_edges as i32)
}

/// Predicts the `n x 3` nodal stress field (MPa) of `mesh` under the given
/// mean stress `(xx, yy, xy)`.
///
/// # Safety
/// `mean_stress` must hold 3 doubles and `out` `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dg_model_predict(
    model: *const DgModel,
    mesh: *const DgMesh,
    mean_stress: *const f64,
    out: *mut f64,
    len: usize,
) -> DgStatus {
    guard(|| {
        let c = &unsafe { deref(model, "model") }?.ckpt;
        let m = &unsafe { deref(mesh, "mesh") }?.mesh;
        let s = unsafe { in_slice(mean_stress, 3, 3, "mean_stress") }?;
        let dst = unsafe { out_slice(out, len, 3 * m.node_count(), "out") }?;
        let mut g = mesh_to_graph(m, &MeanStress::from_array([s[0], s[1], s[2]]));
        if c.periodic_edges {
            g = add_periodic_edges(g, &m.periodic_pairs)?;
        }
        let y = c.model.predict(&GraphInput::from_graph(&c.stats.standardize(&g)))?;
        let rows: Vec<[f64; 3]> = y.data.chunks_exact(3).map(|r| [r[0], r[1], r[2]]).collect();
        let field = c.stats.destandardize_stress(&rows);
        for (d, v) in dst.iter_mut().zip(field.0.iter().flatten()) {
            *d = *v;
        }
        Ok(())
    })
}
