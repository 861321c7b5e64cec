use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use divgnn::dataio::{write_checkpoint, Checkpoint};
use divgnn::divop::{apply_divergence, build_divergence_operator};
use divgnn::fem::{plane_stress_stiffness, solve_sample, ElasticMaterial, MeanStrain};
use divgnn::graph::{add_periodic_edges, mesh_to_graph, FeatureStats};
use divgnn::meshgen::{generate_mesh, HolePlateSpec};
use divgnn::model::{GnnConfig, GnnModel, GraphInput};
use divgnn_ffi::*;

fn plate_spec() -> DgHolePlateSpec {
    DgHolePlateSpec {
        plate_side: 100.0,
        hole_center_x: 50.0,
        hole_center_y: 50.0,
        hole_radius: 20.0,
        global_elem_size: 12.0,
        hole_elem_size: 3.0,
        seed: 7,
    }
}

fn core_spec(s: &DgHolePlateSpec) -> HolePlateSpec {
    HolePlateSpec {
        plate_side: s.plate_side,
        hole_center: [s.hole_center_x, s.hole_center_y],
        hole_radius: s.hole_radius,
        global_elem_size: s.global_elem_size,
        hole_elem_size: s.hole_elem_size,
        seed: s.seed,
    }
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(dg_last_error()) }.to_string_lossy().into_owned()
}

fn mesh(spec: &DgHolePlateSpec) -> *mut DgMesh {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { dg_mesh_generate(spec, &mut m) }, DgStatus::Ok, "{}", last_error());
    assert!(!m.is_null());
    m
}

#[test]
fn mesh_matches_core() {
    let spec = plate_spec();
    let m = mesh(&spec);
    let reference = generate_mesh(&core_spec(&spec)).unwrap();
    let n = unsafe { dg_mesh_node_count(m) };
    let e = unsafe { dg_mesh_element_count(m) };
    assert_eq!(n, reference.node_count());
    assert_eq!(e, reference.element_count());

    let mut xy = vec![0.0; 2 * n];
    let mut tri = vec![0usize; 3 * e];
    unsafe {
        assert_eq!(dg_mesh_coords(m, xy.as_mut_ptr(), xy.len()), DgStatus::Ok);
        assert_eq!(dg_mesh_triangles(m, tri.as_mut_ptr(), tri.len()), DgStatus::Ok);
    }
    assert_eq!(xy, reference.coords.iter().flatten().copied().collect::<Vec<_>>());
    assert_eq!(tri, reference.triangles.iter().flatten().copied().collect::<Vec<_>>());
    unsafe { dg_mesh_free(m) };
}

#[test]
fn uniform_strain_on_solid_plate_gives_uniform_stress() {
    let solid = HolePlateSpec::hole_free(10.0, 2.0);
    let spec = DgHolePlateSpec {
        plate_side: solid.plate_side,
        hole_center_x: solid.hole_center[0],
        hole_center_y: solid.hole_center[1],
        hole_radius: 0.0,
        global_elem_size: solid.global_elem_size,
        hole_elem_size: solid.hole_elem_size,
        seed: 0,
    };
    let m = mesh(&spec);
    let n = unsafe { dg_mesh_node_count(m) };
    let mat = ElasticMaterial::default();
    let eps = [0.01, -0.004, 0.003];
    let mut sigma = vec![0.0; 3 * n];
    let mut mean = [0.0; 3];
    let status = unsafe {
        dg_fe_solve(
            m,
            mat.youngs_modulus,
            mat.poisson_ratio,
            eps.as_ptr(),
            sigma.as_mut_ptr(),
            sigma.len(),
            mean.as_mut_ptr(),
        )
    };
    assert_eq!(status, DgStatus::Ok, "{}", last_error());

    // Tensor shear in, engineering shear for the constitutive matrix.
    let l = plane_stress_stiffness(&mat).unwrap();
    let expect = l.apply([eps[0], eps[1], 2.0 * eps[2]]);
    for row in sigma.chunks_exact(3) {
        for k in 0..3 {
            approx::assert_abs_diff_eq!(row[k], expect[k], epsilon = 1e-8 * mat.youngs_modulus);
        }
    }
    for k in 0..3 {
        approx::assert_abs_diff_eq!(mean[k], expect[k], epsilon = 1e-8 * mat.youngs_modulus);
    }

    let mut div = vec![1.0; 2 * n];
    let status = unsafe { dg_divergence(m, sigma.as_ptr(), sigma.len(), div.as_mut_ptr(), div.len()) };
    assert_eq!(status, DgStatus::Ok, "{}", last_error());
    assert!(div.iter().all(|d| d.abs() < 1e-6));
    unsafe { dg_mesh_free(m) };
}

#[test]
fn solve_and_divergence_match_core() {
    let spec = plate_spec();
    let m = mesh(&spec);
    let n = unsafe { dg_mesh_node_count(m) };
    let mat = ElasticMaterial::default();
    let eps = [0.02, 0.0, -0.01];
    let mut sigma = vec![0.0; 3 * n];
    let status = unsafe {
        dg_fe_solve(
            m,
            mat.youngs_modulus,
            mat.poisson_ratio,
            eps.as_ptr(),
            sigma.as_mut_ptr(),
            sigma.len(),
            ptr::null_mut(),
        )
    };
    assert_eq!(status, DgStatus::Ok, "{}", last_error());

    let reference_mesh = generate_mesh(&core_spec(&spec)).unwrap();
    let fe = solve_sample(&reference_mesh, &mat, &MeanStrain::new(eps[0], eps[1], eps[2])).unwrap();
    assert_eq!(sigma, fe.nodal.0.iter().flatten().copied().collect::<Vec<_>>());

    let mut div = vec![0.0; 2 * n];
    unsafe {
        assert_eq!(dg_divergence(m, sigma.as_ptr(), sigma.len(), div.as_mut_ptr(), div.len()), DgStatus::Ok);
    }
    let op = build_divergence_operator(&reference_mesh).unwrap();
    let expect = apply_divergence(&op, &fe.nodal).unwrap();
    assert_eq!(div, expect.0.iter().flatten().copied().collect::<Vec<_>>());
    unsafe { dg_mesh_free(m) };
}

#[test]
fn errors_set_status_and_message() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { dg_mesh_generate(ptr::null(), &mut m) }, DgStatus::NullPointer);
    assert!(last_error().contains("spec"));
    assert!(m.is_null());

    let mut bad = plate_spec();
    bad.hole_radius = 60.0;
    assert_eq!(unsafe { dg_mesh_generate(&bad, &mut m) }, DgStatus::Mesh);
    assert!(!last_error().is_empty());

    let good = mesh(&plate_spec());
    assert!(last_error().is_empty());
    let mut small = vec![0.0; 4];
    assert_eq!(unsafe { dg_mesh_coords(good, small.as_mut_ptr(), small.len()) }, DgStatus::BufferTooSmall);
    assert!(last_error().contains("needed"));

    let eps = [0.01, 0.0, 0.0];
    let n = unsafe { dg_mesh_node_count(good) };
    let mut sigma = vec![0.0; 3 * n];
    let status = unsafe { dg_fe_solve(good, 1e5, 0.7, eps.as_ptr(), sigma.as_mut_ptr(), sigma.len(), ptr::null_mut()) };
    assert_eq!(status, DgStatus::Solver);

    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/checkpoint.bin").unwrap();
    assert_eq!(unsafe { dg_model_load(missing.as_ptr(), &mut model) }, DgStatus::Io);
    assert!(model.is_null());

    assert_eq!(unsafe { dg_mesh_node_count(ptr::null()) }, 0);
    unsafe {
        dg_mesh_free(ptr::null_mut());
        dg_model_free(ptr::null_mut());
        dg_mesh_free(good);
    }
}

#[test]
fn model_prediction_matches_core() {
    let spec = plate_spec();
    let reference_mesh = generate_mesh(&core_spec(&spec)).unwrap();
    let mat = ElasticMaterial::default();
    let fe = solve_sample(&reference_mesh, &mat, &MeanStrain::new(0.01, -0.02, 0.005)).unwrap();
    let graph = add_periodic_edges(mesh_to_graph(&reference_mesh, &fe.mean), &reference_mesh.periodic_pairs).unwrap();
    let stats = FeatureStats::fit(&[(&graph, &fe.nodal)]).unwrap();
    let cfg = GnnConfig {
        hidden: 8,
        message_steps: 2,
        shared_processor: true,
    };
    let ckpt = Checkpoint {
        model: GnnModel::new(cfg, 3).unwrap(),
        stats,
        periodic_edges: true,
        variant: "p-gnn".into(),
        train_config: None,
        history: Vec::new(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.bin");
    write_checkpoint(&path, &ckpt).unwrap();

    let mut model = ptr::null_mut();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dg_model_load(cpath.as_ptr(), &mut model) }, DgStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { dg_model_param_count(model) }, ckpt.model.param_count());
    assert_eq!(unsafe { dg_model_periodic_edges(model) }, 1);

    let m = mesh(&spec);
    let n = unsafe { dg_mesh_node_count(m) };
    let mean = fe.mean.to_array();
    let mut out = vec![0.0; 3 * n];
    let status = unsafe { dg_model_predict(model, m, mean.as_ptr(), out.as_mut_ptr(), out.len()) };
    assert_eq!(status, DgStatus::Ok, "{}", last_error());

    let y = ckpt.model.predict(&GraphInput::from_graph(&ckpt.stats.standardize(&graph))).unwrap();
    let rows: Vec<[f64; 3]> = y.data.chunks_exact(3).map(|r| [r[0], r[1], r[2]]).collect();
    let expect = ckpt.stats.destandardize_stress(&rows);
    assert_eq!(out, expect.0.iter().flatten().copied().collect::<Vec<_>>());

    unsafe {
        dg_mesh_free(m);
        dg_model_free(model);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/divgnn.h")).unwrap();
    for name in [
        "dg_last_error",
        "dg_version",
        "dg_mesh_generate",
        "dg_mesh_free",
        "dg_mesh_node_count",
        "dg_mesh_element_count",
        "dg_mesh_coords",
        "dg_mesh_triangles",
        "dg_fe_solve",
        "dg_divergence",
        "dg_model_load",
        "dg_model_free",
        "dg_model_param_count",
        "dg_model_periodic_edges",
        "dg_model_predict",
        "DG_STATUS_BUFFER_TOO_SMALL",
        "typedef struct DgMesh DgMesh",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let version = unsafe { CStr::from_ptr(dg_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"divgnn.h\"\nint main(void) { DgStatus s = DG_STATUS_OK; DgMesh *m = 0; (void)m; return (int)s; }\n",
    )
    .unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let out = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
