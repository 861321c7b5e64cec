//! On-disk formats: sample documents, divergence-operator triplets, dataset
//! manifests, binary checkpoints and legacy VTK exports.
//!
//! Sample files are JSON documents whose numeric arrays are written with 17
//! significant digits and guarded by a SHA-256 digest over the array values.
//! Checkpoints are a magic tag, a JSON header and raw little-endian `f64`
//! tensor data.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::autodiff::Matrix;
use crate::divop::{build_divergence_operator, DivergenceOperator};
use crate::error::{Error, Result};
use crate::fem::{plane_stress_stiffness, solve_sample, ElasticMaterial, MeanStrain, MeanStress, NodalStressField};
use crate::graph::{add_periodic_edges, mesh_to_graph, FeatureStats, MicroGraph};
use crate::mesh::{Axis, Mesh2D, NodeLabel, PeriodicPair};
use crate::meshgen::{generate_mesh, sample_spec, HolePlateSpec, SpecBounds};
use crate::model::{GnnConfig, GnnModel};
use crate::sparse::CooMatrix;
use crate::training::{EpochRecord, PreparedSample, TrainConfig};

pub const SAMPLE_FORMAT: &str = "divgnn-sample";
pub const SAMPLE_VERSION: u64 = 1;
pub const DIVOP_HEADER: &str = "# divgnn divergence operator v1";
pub const MANIFEST_FORMAT: &str = "divgnn-dataset";
pub const MANIFEST_VERSION: u64 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DGNNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// One FE-labelled microstructure.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: usize,
    pub spec: HolePlateSpec,
    pub mesh: Mesh2D,
    pub eps_mean: MeanStrain,
    pub sigma_mean: MeanStress,
    pub sigma_nodal: NodalStressField,
    /// Triplet file name, relative to the sample file's directory.
    pub div_operator_ref: String,
}

#[derive(Serialize, Deserialize)]
struct SampleHeader {
    format: String,
    version: u64,
    id: usize,
    spec: HolePlateSpec,
    eps_mean: MeanStrain,
    sigma_mean: MeanStress,
    div_operator: String,
}

enum Array<'a> {
    Float(&'a str, [usize; 2], Vec<f64>),
    Int(&'a str, [usize; 2], Vec<i64>),
}

fn sample_arrays(r: &SampleRecord) -> Vec<Array<'static>> {
    let m = &r.mesh;
    let n = m.node_count();
    vec![
        Array::Float("coords", [n, 2], m.coords.iter().flatten().copied().collect()),
        Array::Int(
            "triangles",
            [m.element_count(), 3],
            m.triangles.iter().flatten().map(|&v| v as i64).collect(),
        ),
        Array::Int("labels", [n, 1], m.labels.iter().map(|l| l.alpha() as i64).collect()),
        Array::Int(
            "periodic_pairs",
            [m.periodic_pairs.len(), 3],
            m.periodic_pairs
                .iter()
                .flat_map(|p| [p.plus as i64, p.minus as i64, p.axis.index() as i64])
                .collect(),
        ),
        Array::Float("sigma_nodal", [n, 3], r.sigma_nodal.0.iter().flatten().copied().collect()),
    ]
}

fn array_digest(arrays: &[Array]) -> String {
    let mut h = Sha256::new();
    for a in arrays {
        match a {
            Array::Float(name, shape, v) => {
                h.update(name.as_bytes());
                h.update((shape[0] as u64).to_le_bytes());
                h.update((shape[1] as u64).to_le_bytes());
                v.iter().for_each(|x| h.update(x.to_le_bytes()));
            }
            Array::Int(name, shape, v) => {
                h.update(name.as_bytes());
                h.update((shape[0] as u64).to_le_bytes());
                h.update((shape[1] as u64).to_le_bytes());
                v.iter().for_each(|x| h.update(x.to_le_bytes()));
            }
        }
    }
    format!("{:x}", h.finalize())
}

/// Full-precision decimal: 17 significant digits.
fn fmt_f64(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("writing to a String");
}

pub fn sample_to_string(r: &SampleRecord) -> Result<String> {
    let header = SampleHeader {
        format: SAMPLE_FORMAT.into(),
        version: SAMPLE_VERSION,
        id: r.id,
        spec: r.spec,
        eps_mean: r.eps_mean,
        sigma_mean: r.sigma_mean,
        div_operator: r.div_operator_ref.clone(),
    };
    let head = serde_json::to_string_pretty(&header).map_err(|e| Error::Dataset(e.to_string()))?;
    let arrays = sample_arrays(r);
    let mut out = String::with_capacity(64 * r.mesh.node_count());
    out.push_str(head.trim_end().trim_end_matches('}').trim_end());
    out.push_str(",\n  \"arrays\": {\n");
    for (k, a) in arrays.iter().enumerate() {
        let (name, shape) = match a {
            Array::Float(n, s, _) | Array::Int(n, s, _) => (n, s),
        };
        write!(out, "    \"{name}\": {{\"shape\": [{}, {}], \"values\": [", shape[0], shape[1]).unwrap();
        match a {
            Array::Float(_, _, v) => {
                for (i, x) in v.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    fmt_f64(&mut out, *x);
                }
            }
            Array::Int(_, _, v) => {
                for (i, x) in v.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    write!(out, "{x}").unwrap();
                }
            }
        }
        out.push_str("]}");
        out.push_str(if k + 1 < arrays.len() { ",\n" } else { "\n" });
    }
    write!(out, "  }},\n  \"checksum\": \"{}\"\n}}\n", array_digest(&arrays)).unwrap();
    Ok(out)
}

pub fn write_sample(path: &Path, r: &SampleRecord) -> Result<()> {
    write_atomic(path, sample_to_string(r)?.as_bytes())
}

fn get<'a>(path: &Path, v: &'a Value, key: &str) -> Result<&'a Value> {
    v.get(key)
        .ok_or_else(|| Error::format(path, format!("missing field \"{key}\"")))
}

fn shaped<'a>(path: &Path, arrays: &'a Value, name: &str, cols: usize) -> Result<(usize, &'a Vec<Value>)> {
    let a = get(path, arrays, name)?;
    let shape = get(path, a, "shape")?
        .as_array()
        .filter(|s| s.len() == 2)
        .ok_or_else(|| Error::format(path, format!("bad shape of {name}")))?;
    let rows = shape[0].as_u64().unwrap_or(u64::MAX) as usize;
    let c = shape[1].as_u64().unwrap_or(u64::MAX) as usize;
    let values = get(path, a, "values")?
        .as_array()
        .ok_or_else(|| Error::format(path, format!("values of {name} are not an array")))?;
    if c != cols || rows.checked_mul(cols) != Some(values.len()) {
        return Err(Error::format(path, format!("{name} has {} values for shape [{rows}, {c}]", values.len())));
    }
    Ok((rows, values))
}

fn floats(path: &Path, arrays: &Value, name: &str, cols: usize) -> Result<(usize, Vec<f64>)> {
    let (rows, values) = shaped(path, arrays, name, cols)?;
    let v = values
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| Error::format(path, format!("non-numeric entry in {name}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, v))
}

fn ints(path: &Path, arrays: &Value, name: &str, cols: usize) -> Result<(usize, Vec<i64>)> {
    let (rows, values) = shaped(path, arrays, name, cols)?;
    let v = values
        .iter()
        .map(|x| x.as_i64().ok_or_else(|| Error::format(path, format!("non-integer entry in {name}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, v))
}

fn index(path: &Path, v: i64, len: usize, what: &str) -> Result<usize> {
    usize::try_from(v)
        .ok()
        .filter(|&i| i < len)
        .ok_or_else(|| Error::format(path, format!("{what} index {v} out of range {len}")))
}

pub fn sample_from_str(path: &Path, text: &str) -> Result<SampleRecord> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
    let format = get(path, &doc, "format")?.as_str().unwrap_or_default();
    if format != SAMPLE_FORMAT {
        return Err(Error::format(path, format!("not a sample document (format {format:?})")));
    }
    let version = get(path, &doc, "version")?.as_u64().unwrap_or(0);
    if version != SAMPLE_VERSION {
        return Err(Error::Version {
            path: path.into(),
            found: version.to_string(),
            expected: SAMPLE_VERSION.to_string(),
        });
    }
    let header: SampleHeader = serde_json::from_value(doc.clone()).map_err(|e| Error::format(path, e.to_string()))?;
    let arrays = get(path, &doc, "arrays")?;
    let (n, coords) = floats(path, arrays, "coords", 2)?;
    let (m, tris) = ints(path, arrays, "triangles", 3)?;
    let (nl, labels) = ints(path, arrays, "labels", 1)?;
    let (_, pairs) = ints(path, arrays, "periodic_pairs", 3)?;
    let (ns, sigma) = floats(path, arrays, "sigma_nodal", 3)?;
    if nl != n || ns != n {
        return Err(Error::format(path, "node-aligned arrays differ in length"));
    }
    let mut triangles = Vec::with_capacity(m);
    for t in tris.chunks_exact(3) {
        triangles.push([
            index(path, t[0], n, "triangle")?,
            index(path, t[1], n, "triangle")?,
            index(path, t[2], n, "triangle")?,
        ]);
    }
    let labels = labels
        .iter()
        .map(|&a| NodeLabel::from_alpha(a).ok_or_else(|| Error::format(path, format!("bad node label {a}"))))
        .collect::<Result<Vec<_>>>()?;
    let periodic_pairs = pairs
        .chunks_exact(3)
        .map(|p| {
            Ok(PeriodicPair {
                plus: index(path, p[0], n, "pair")?,
                minus: index(path, p[1], n, "pair")?,
                axis: match p[2] {
                    0 => Axis::X,
                    1 => Axis::Y,
                    a => return Err(Error::format(path, format!("bad axis {a}"))),
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let record = SampleRecord {
        id: header.id,
        spec: header.spec,
        mesh: Mesh2D {
            plate_side: header.spec.plate_side,
            coords: coords.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
            triangles,
            labels,
            periodic_pairs,
        },
        eps_mean: header.eps_mean,
        sigma_mean: header.sigma_mean,
        sigma_nodal: NodalStressField(sigma.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()),
        div_operator_ref: header.div_operator,
    };
    let stored = get(path, &doc, "checksum")?.as_str().unwrap_or_default().to_string();
    let computed = array_digest(&sample_arrays(&record));
    if stored != computed {
        return Err(Error::Checksum {
            path: path.into(),
            stored,
            computed,
        });
    }
    Ok(record)
}

pub fn read_sample(path: &Path) -> Result<SampleRecord> {
    sample_from_str(path, &read_string(path)?)
}

pub fn write_divergence_operator(path: &Path, op: &DivergenceOperator) -> Result<()> {
    let coo = op.matrix.to_coo();
    let mut out = String::with_capacity(48 * coo.nnz() + 64);
    writeln!(out, "{DIVOP_HEADER}").unwrap();
    writeln!(out, "{} {} {}", coo.nrows, coo.ncols, coo.nnz()).unwrap();
    for k in 0..coo.nnz() {
        write!(out, "{} {} ", coo.rows[k], coo.cols[k]).unwrap();
        fmt_f64(&mut out, coo.values[k]);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Reads a triplet file; the internal-node mask comes from the mesh labels.
pub fn read_divergence_operator(path: &Path, internal_mask: Vec<bool>) -> Result<DivergenceOperator> {
    let text = read_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(DIVOP_HEADER) {
        return Err(Error::format(path, "missing divergence operator header"));
    }
    let dims: Vec<usize> = lines
        .next()
        .unwrap_or_default()
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::format(path, "bad dimension line")))
        .collect::<Result<_>>()?;
    let [nrows, ncols, nnz] = dims[..] else {
        return Err(Error::format(path, "dimension line needs three entries"));
    };
    let mut coo = CooMatrix::new(nrows, ncols);
    for k in 0..nnz {
        let line = lines
            .next()
            .ok_or_else(|| Error::format(path, format!("truncated after {k} of {nnz} entries")))?;
        let mut it = line.split_whitespace();
        let bad = || Error::format(path, format!("bad triplet on entry {k}"));
        let r: usize = it.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
        let c: usize = it.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
        let v: f64 = it.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
        if r >= nrows || c >= ncols {
            return Err(bad());
        }
        coo.push(r, c, v);
    }
    DivergenceOperator::from_parts(coo.to_csr(), internal_mask)
}

/// Which samples belong to which split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: usize,
    pub file: String,
    pub div_file: String,
    pub nodes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u64,
    pub corpus_seed: u64,
    pub count: usize,
    pub split_fractions: [f64; 3],
    pub splits: SplitAssignment,
    pub material: ElasticMaterial,
    pub bounds: SpecBounds,
    pub strain_range: [f64; 2],
    pub stats_checksum: String,
    pub resampled: usize,
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub count: usize,
    pub seed: u64,
    pub bounds: SpecBounds,
    pub material: ElasticMaterial,
    pub strain_range: [f64; 2],
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub workers: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            count: 1000,
            seed: 0,
            bounds: SpecBounds::default(),
            material: ElasticMaterial::default(),
            strain_range: [-0.05, 0.05],
            split: [0.7, 0.1, 0.2],
            workers: 1,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("sample count must be positive".into()));
        }
        let [a, b] = self.strain_range;
        if !(a.is_finite() && b.is_finite() && a <= b) {
            return Err(Error::Config(format!("bad strain range [{a}, {b}]")));
        }
        if self.split.iter().any(|f| !(*f >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {:?} must be non-negative and sum to 1", self.split)));
        }
        if self.split[0] == 0.0 {
            return Err(Error::Config("the training split must be nonempty".into()));
        }
        plane_stress_stiffness(&self.material)?;
        Ok(())
    }
}

/// Seed for attempt `attempt` of sample `id` of a corpus.
fn sample_seed(corpus_seed: u64, id: usize, attempt: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(corpus_seed.to_le_bytes());
    h.update((id as u64).to_le_bytes());
    h.update(attempt.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

pub fn sample_file_name(id: usize) -> String {
    format!("sample_{id:05}.json")
}

pub fn div_file_name(id: usize) -> String {
    format!("sample_{id:05}.div.txt")
}

/// Generates and solves one sample. FE or meshing failures surface as errors
/// so the caller can resample.
pub fn generate_record(cfg: &DatasetConfig, id: usize, attempt: u64) -> Result<(SampleRecord, DivergenceOperator)> {
    let seed = sample_seed(cfg.seed, id, attempt);
    let spec = sample_spec(seed, &cfg.bounds)?;
    let mesh = generate_mesh(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66_D1CE_4E5B);
    let [lo, hi] = cfg.strain_range;
    let mut draw = || if lo == hi { lo } else { rng.random_range(lo..hi) };
    let eps = MeanStrain::new(draw(), draw(), draw());
    let fe = solve_sample(&mesh, &cfg.material, &eps)?;
    let op = build_divergence_operator(&mesh)?;
    let record = SampleRecord {
        id,
        spec,
        mesh,
        eps_mean: eps,
        sigma_mean: fe.mean,
        sigma_nodal: fe.nodal,
        div_operator_ref: div_file_name(id),
    };
    Ok((record, op))
}

/// Seeded split of `count` ids; sizes are rounded so that they add up.
pub fn split_ids(count: usize, fractions: [f64; 3], seed: u64) -> SplitAssignment {
    let mut ids: Vec<usize> = (0..count).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x0005_9117));
    let n_train = (fractions[0] * count as f64).round() as usize;
    let n_val = ((fractions[1] * count as f64).round() as usize).min(count - n_train.min(count));
    let n_train = n_train.min(count);
    let mut s = SplitAssignment {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    };
    s.train.sort_unstable();
    s.val.sort_unstable();
    s.test.sort_unstable();
    s
}

/// Graph without periodic edges, as used for statistics.
pub fn record_graph(r: &SampleRecord) -> MicroGraph {
    mesh_to_graph(&r.mesh, &r.sigma_mean)
}

/// Statistics over the given records (mesh edges only).
pub fn fit_record_stats(records: &[&SampleRecord]) -> Result<FeatureStats> {
    let graphs: Vec<MicroGraph> = records.iter().map(|r| record_graph(r)).collect();
    let pairs: Vec<(&MicroGraph, &NodalStressField)> =
        graphs.iter().zip(records).map(|(g, r)| (g, &r.sigma_nodal)).collect();
    FeatureStats::fit(&pairs)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_string(path)?).map_err(|e| Error::format(path, e.to_string()))
}

/// Sampling bounds from a `.json` file or, otherwise, TOML.
pub fn read_bounds(path: &Path) -> Result<SpecBounds> {
    if path.extension().is_some_and(|e| e == "json") {
        return read_json(path);
    }
    toml::from_str(&read_string(path)?).map_err(|e| Error::format(path, e.to_string()))
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATS_FILE: &str = "stats.json";

/// Generates a corpus into `dir`: sample files, operator triplets, fitted
/// statistics and the manifest. Failed samples are resampled with a fresh
/// attempt seed; more than 1% failures abort.
pub fn generate_dataset(dir: &Path, cfg: &DatasetConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let max_failures = cfg.count / 100;
    let results: Vec<Result<(SampleRecord, DivergenceOperator, u64)>> = pool.install(|| {
        (0..cfg.count)
            .into_par_iter()
            .map(|id| {
                let mut failures = 0u64;
                loop {
                    match generate_record(cfg, id, failures) {
                        Ok((r, op)) => return Ok((r, op, failures)),
                        Err(e) => {
                            log::warn!("sample {id} attempt {failures} failed: {e}; resampling");
                            failures += 1;
                            if failures as usize > max_failures {
                                return Err(Error::Dataset(format!(
                                    "sample {id} failed {failures} times; last error: {e}"
                                )));
                            }
                        }
                    }
                }
            })
            .collect()
    });
    let mut records = Vec::with_capacity(cfg.count);
    let mut resampled = 0usize;
    for r in results {
        let (rec, op, fails) = r?;
        resampled += fails as usize;
        records.push((rec, op));
    }
    if resampled > max_failures {
        return Err(Error::Dataset(format!(
            "{resampled} failed samples exceed 1% of {}",
            cfg.count
        )));
    }
    let mut samples = Vec::with_capacity(cfg.count);
    for (rec, op) in &records {
        let text = sample_to_string(rec)?;
        let file = sample_file_name(rec.id);
        write_atomic(&dir.join(&file), text.as_bytes())?;
        write_divergence_operator(&dir.join(&rec.div_operator_ref), op)?;
        samples.push(SampleEntry {
            id: rec.id,
            file,
            div_file: rec.div_operator_ref.clone(),
            nodes: rec.mesh.node_count(),
            sha256: sha256_hex(text.as_bytes()),
        });
    }
    let splits = split_ids(cfg.count, cfg.split, cfg.seed);
    let train: Vec<&SampleRecord> = splits.train.iter().map(|&i| &records[i].0).collect();
    let stats = fit_record_stats(&train)?;
    write_json(&dir.join(STATS_FILE), &stats)?;
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        corpus_seed: cfg.seed,
        count: cfg.count,
        split_fractions: cfg.split,
        splits,
        material: cfg.material,
        bounds: cfg.bounds.clone(),
        strain_range: cfg.strain_range,
        stats_checksum: stats.checksum(),
        resampled,
        samples,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// A corpus loaded from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub stats: FeatureStats,
    pub records: Vec<SampleRecord>,
    pub operators: Vec<Arc<DivergenceOperator>>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = read_json(&dir.join(MANIFEST_FILE))?;
        if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
            return Err(Error::Version {
                path: dir.join(MANIFEST_FILE),
                found: format!("{} {}", manifest.format, manifest.version),
                expected: format!("{MANIFEST_FORMAT} {MANIFEST_VERSION}"),
            });
        }
        let stats: FeatureStats = read_json(&dir.join(STATS_FILE))?;
        if stats.checksum() != manifest.stats_checksum {
            return Err(Error::Checksum {
                path: dir.join(STATS_FILE),
                stored: manifest.stats_checksum.clone(),
                computed: stats.checksum(),
            });
        }
        let mut records = Vec::with_capacity(manifest.samples.len());
        let mut operators = Vec::with_capacity(manifest.samples.len());
        for (k, entry) in manifest.samples.iter().enumerate() {
            if entry.id != k {
                return Err(Error::Dataset(format!("manifest entry {k} has id {}", entry.id)));
            }
            let rec = read_sample(&dir.join(&entry.file))?;
            let op = read_divergence_operator(&dir.join(&entry.div_file), rec.mesh.interior_mask())?;
            records.push(rec);
            operators.push(Arc::new(op));
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            stats,
            records,
            operators,
        })
    }

    /// Standardized, loss-ready samples for the given ids.
    pub fn prepare(&self, ids: &[usize], periodic_edges: bool) -> Result<Vec<PreparedSample>> {
        ids.iter()
            .map(|&i| {
                let r = self
                    .records
                    .get(i)
                    .ok_or_else(|| Error::Dataset(format!("sample id {i} not in dataset")))?;
                prepare_record(r, self.operators[i].clone(), &self.stats, periodic_edges)
            })
            .collect()
    }
}

pub fn prepare_record(
    r: &SampleRecord,
    op: Arc<DivergenceOperator>,
    stats: &FeatureStats,
    periodic_edges: bool,
) -> Result<PreparedSample> {
    let mut g = record_graph(r);
    if periodic_edges {
        g = add_periodic_edges(g, &r.mesh.periodic_pairs)?;
    }
    PreparedSample::new(&stats.standardize(&g), &r.sigma_nodal, op, stats)
}

/// Trained model plus everything needed to use and audit it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: GnnModel,
    pub stats: FeatureStats,
    pub periodic_edges: bool,
    pub variant: String,
    pub train_config: Option<TrainConfig>,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model_config: GnnConfig,
    stats: FeatureStats,
    periodic_edges: bool,
    variant: String,
    train_config: Option<TrainConfig>,
    history: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
}

pub fn checkpoint_to_bytes(c: &Checkpoint) -> Result<Vec<u8>> {
    let mut offset = 0;
    let tensors = c
        .model
        .names
        .iter()
        .zip(&c.model.params)
        .map(|(name, p)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: [p.rows, p.cols],
                offset,
            };
            offset += p.len();
            e
        })
        .collect();
    let header = CheckpointHeader {
        model_config: c.model.config,
        stats: c.stats.clone(),
        periodic_edges: c.periodic_edges,
        variant: c.variant.clone(),
        train_config: c.train_config,
        history: c.history.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(24 + json.len() + 8 * offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &c.model.params {
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |d: &str| Error::format(path, d.to_string());
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.into(),
            found: version.to_string(),
            expected: CHECKPOINT_VERSION.to_string(),
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[20..body]).map_err(|e| Error::format(path, e.to_string()))?;
    let data = &bytes[body..];
    let total: usize = header.tensors.iter().map(|t| t.shape[0] * t.shape[1]).sum();
    if data.len() != 8 * total {
        return Err(bad("tensor data length does not match the header"));
    }
    let tensors = header
        .tensors
        .iter()
        .map(|t| {
            let len = t.shape[0] * t.shape[1];
            let raw = data
                .get(8 * t.offset..8 * (t.offset + len))
                .ok_or_else(|| bad("tensor offset out of range"))?;
            let values = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            Ok((t.name.clone(), Matrix::new(t.shape[0], t.shape[1], values)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        model: GnnModel::from_tensors(header.model_config, tensors)?,
        stats: header.stats,
        periodic_edges: header.periodic_edges,
        variant: header.variant,
        train_config: header.train_config,
        history: header.history,
    })
}

pub fn write_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint_to_bytes(c)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(path, &read_bytes(path)?)
}

/// Legacy ASCII unstructured grid with one point-data block per field.
/// One-column fields become SCALARS, two- and three-column fields VECTORS
/// (two-column ones padded with zero).
pub fn vtk_string(mesh: &Mesh2D, fields: &[(&str, &Matrix)]) -> Result<String> {
    let n = mesh.node_count();
    let mut out = String::new();
    out.push_str("# vtk DataFile Version 3.0\n");
    out.push_str("divgnn microstructure\nASCII\nDATASET UNSTRUCTURED_GRID\n");
    writeln!(out, "POINTS {n} double").unwrap();
    for p in &mesh.coords {
        writeln!(out, "{:.16e} {:.16e} 0", p[0], p[1]).unwrap();
    }
    let m = mesh.element_count();
    writeln!(out, "CELLS {m} {}", 4 * m).unwrap();
    for t in &mesh.triangles {
        writeln!(out, "3 {} {} {}", t[0], t[1], t[2]).unwrap();
    }
    writeln!(out, "CELL_TYPES {m}").unwrap();
    for _ in 0..m {
        out.push_str("5\n");
    }
    if !fields.is_empty() {
        writeln!(out, "POINT_DATA {n}").unwrap();
    }
    for (name, f) in fields {
        if f.rows != n {
            return Err(Error::shape("export_vtk", format!("field {name} has {} rows for {n} nodes", f.rows)));
        }
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::shape("export_vtk", format!("field name {name:?} must be one word")));
        }
        match f.cols {
            1 => {
                writeln!(out, "SCALARS {name} double 1\nLOOKUP_TABLE default").unwrap();
                for v in &f.data {
                    writeln!(out, "{v:.16e}").unwrap();
                }
            }
            2 | 3 => {
                writeln!(out, "VECTORS {name} double").unwrap();
                for r in 0..n {
                    let row = f.row(r);
                    let z = if f.cols == 3 { row[2] } else { 0.0 };
                    writeln!(out, "{:.16e} {:.16e} {:.16e}", row[0], row[1], z).unwrap();
                }
            }
            c => {
                return Err(Error::shape("export_vtk", format!("field {name} has {c} columns; 1 to 3 supported")));
            }
        }
    }
    Ok(out)
}

pub fn export_vtk(path: &Path, mesh: &Mesh2D, fields: &[(&str, &Matrix)]) -> Result<()> {
    write_atomic(path, vtk_string(mesh, fields)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divop::apply_divergence;
    use crate::meshgen::HolePlateSpec;

    fn coarse() -> DatasetConfig {
        DatasetConfig {
            count: 5,
            seed: 11,
            bounds: SpecBounds {
                global_elem_size: [14.0, 16.0],
                hole_elem_size: [3.0, 4.0],
                ..SpecBounds::default()
            },
            split: [0.6, 0.2, 0.2],
            ..DatasetConfig::default()
        }
    }

    fn record() -> (SampleRecord, DivergenceOperator) {
        generate_record(&coarse(), 0, 0).unwrap()
    }

    #[test]
    fn sample_round_trip_is_bit_exact() {
        let (r, _) = record();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        write_sample(&path, &r).unwrap();
        let back = read_sample(&path).unwrap();
        assert_eq!(back, r);
        for (a, b) in back.sigma_nodal.0.iter().flatten().zip(r.sigma_nodal.0.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn corrupted_array_fails_checksum() {
        let (r, _) = record();
        let text = sample_to_string(&r).unwrap();
        let at = text.find("\"sigma_nodal\"").unwrap();
        let at = at + text[at..].find("\"values\"").unwrap() + 12;
        let digit = at + text[at..].find(|c: char| ('1'..='8').contains(&c)).unwrap();
        let mut bytes = text.into_bytes();
        bytes[digit] += 1;
        let err = sample_from_str(Path::new("x"), std::str::from_utf8(&bytes).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Checksum { .. }), "{err}");
    }

    #[test]
    fn truncated_and_foreign_versions_are_rejected() {
        let (r, _) = record();
        let text = sample_to_string(&r).unwrap();
        let err = sample_from_str(Path::new("x"), &text[..text.len() / 2]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        let bumped = text.replacen("\"version\": 1", "\"version\": 7", 1);
        let err = sample_from_str(Path::new("x"), &bumped).unwrap_err();
        assert!(matches!(err, Error::Version { .. }), "{err}");
    }

    #[test]
    fn divergence_operator_round_trip() {
        let (r, op) = record();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        write_divergence_operator(&path, &op).unwrap();
        let back = read_divergence_operator(&path, r.mesh.interior_mask()).unwrap();
        assert_eq!(back.matrix, op.matrix);
        assert_eq!(back.internal_mask, op.internal_mask);
        let a = apply_divergence(&op, &r.sigma_nodal).unwrap();
        let b = apply_divergence(&back, &r.sigma_nodal).unwrap();
        assert_eq!(a, b);
        let text = fs::read_to_string(&path).unwrap();
        let cut: Vec<&str> = text.lines().collect();
        fs::write(&path, cut[..cut.len() - 3].join("\n")).unwrap();
        assert!(read_divergence_operator(&path, r.mesh.interior_mask()).is_err());
    }

    #[test]
    fn split_sizes_follow_fractions() {
        for count in [1usize, 7, 10, 1000] {
            let s = split_ids(count, [0.7, 0.1, 0.2], 3);
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..count).collect::<Vec<_>>());
            assert!((s.train.len() as f64 - 0.7 * count as f64).abs() <= 1.0);
            assert!((s.val.len() as f64 - 0.1 * count as f64).abs() <= 1.0);
            assert!((s.test.len() as f64 - 0.2 * count as f64).abs() <= 1.0);
        }
        assert_eq!(split_ids(50, [0.7, 0.1, 0.2], 3), split_ids(50, [0.7, 0.1, 0.2], 3));
        assert_ne!(split_ids(50, [0.7, 0.1, 0.2], 3), split_ids(50, [0.7, 0.1, 0.2], 4));
    }

    #[test]
    fn dataset_generation_is_reproducible_and_loadable() {
        let cfg = coarse();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = generate_dataset(a.path(), &cfg).unwrap();
        let mb = generate_dataset(b.path(), &DatasetConfig { workers: 2, ..cfg.clone() }).unwrap();
        assert_eq!(ma, mb);
        for e in &ma.samples {
            for f in [&e.file, &e.div_file] {
                assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
            }
        }
        assert_eq!(ma.splits.train.len(), 3);
        let ds = Dataset::load(a.path()).unwrap();
        assert_eq!(ds.records.len(), cfg.count);
        assert_eq!(ds.stats.checksum(), ma.stats_checksum);
        let prepared = ds.prepare(&ma.splits.test, true).unwrap();
        assert_eq!(prepared.len(), 1);
        let plain = ds.prepare(&ma.splits.test, false).unwrap();
        assert!(prepared[0].input.edges.rows > plain[0].input.edges.rows);
        assert!(ds.prepare(&[99], true).is_err());
    }

    #[test]
    fn checkpoint_round_trip_reproduces_forward_bitwise() {
        let (r, op) = record();
        let cfg = GnnConfig {
            hidden: 8,
            message_steps: 2,
            shared_processor: false,
        };
        let (r2, _) = generate_record(&coarse(), 1, 0).unwrap();
        let stats = fit_record_stats(&[&r, &r2]).unwrap();
        let c = Checkpoint {
            model: GnnModel::new(cfg, 5).unwrap(),
            stats: stats.clone(),
            periodic_edges: true,
            variant: "p-divgnn".into(),
            train_config: Some(TrainConfig::default()),
            history: vec![EpochRecord {
                epoch: 1,
                train_nmse: 0.5,
                val_nmse: 0.25,
                val_div: 1e-3,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        write_checkpoint(&path, &c).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, c);
        let s = prepare_record(&r, Arc::new(op), &stats, true).unwrap();
        let y0 = c.model.predict(&s.input).unwrap();
        let y1 = back.model.predict(&s.input).unwrap();
        assert!(y0.data.iter().zip(&y1.data).all(|(a, b)| a.to_bits() == b.to_bits()));

        let bytes = fs::read(&path).unwrap();
        assert!(checkpoint_from_bytes(&path, &bytes[..bytes.len() - 8]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(checkpoint_from_bytes(&path, &bad).is_err());
    }

    #[test]
    fn checkpoint_tensors_do_not_fit_a_wider_config() {
        let small = GnnModel::new(
            GnnConfig {
                hidden: 64,
                message_steps: 1,
                shared_processor: true,
            },
            0,
        )
        .unwrap();
        let tensors = small.names.iter().cloned().zip(small.params.iter().cloned()).collect();
        let wide = GnnConfig {
            hidden: 128,
            message_steps: 1,
            shared_processor: true,
        };
        assert!(matches!(GnnModel::from_tensors(wide, tensors), Err(Error::Checkpoint(_))));
    }

    fn single_triangle() -> Mesh2D {
        Mesh2D {
            plate_side: 1.0,
            coords: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            triangles: vec![[0, 1, 2]],
            labels: vec![NodeLabel::ExternalBoundary; 3],
            periodic_pairs: vec![],
        }
    }

    #[test]
    fn vtk_single_triangle_layout() {
        let mesh = single_triangle();
        let geometry = vtk_string(&mesh, &[]).unwrap();
        let lines: Vec<&str> = geometry.lines().collect();
        assert_eq!(lines.len(), 12);
        assert_eq!(lines[0], "# vtk DataFile Version 3.0");
        assert_eq!(lines[10], "CELL_TYPES 1");
        assert_eq!(lines[11], "5");
        assert!(!geometry.contains("POINT_DATA"));

        let f = Matrix::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let with = vtk_string(&mesh, &[("s", &f)]).unwrap();
        let lines: Vec<&str> = with.lines().collect();
        assert_eq!(lines.len(), 18);
        assert_eq!(lines[12], "POINT_DATA 3");
        assert_eq!(lines[13], "SCALARS s double 1");
        let parsed: Vec<f64> = lines[15..].iter().map(|l| l.parse().unwrap()).collect();
        assert_eq!(parsed, f.data);

        let v = Matrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let with = vtk_string(&mesh, &[("v", &v)]).unwrap();
        assert!(with.contains("VECTORS v double"));
        assert!(with.trim_end().ends_with("5.0000000000000000e0 6.0000000000000000e0 0.0000000000000000e0"));
    }

    #[test]
    fn vtk_rejects_misaligned_fields() {
        let mesh = single_triangle();
        let f = Matrix::zeros(4, 1);
        assert!(vtk_string(&mesh, &[("s", &f)]).is_err());
        let f = Matrix::zeros(3, 4);
        assert!(vtk_string(&mesh, &[("s", &f)]).is_err());
    }

    #[test]
    fn hole_free_record_survives_round_trip() {
        let spec = HolePlateSpec::hole_free(100.0, 20.0);
        let mesh = generate_mesh(&spec).unwrap();
        let eps = MeanStrain::new(0.01, 0.0, 0.0);
        let fe = solve_sample(&mesh, &ElasticMaterial::default(), &eps).unwrap();
        let r = SampleRecord {
            id: 3,
            spec,
            mesh,
            eps_mean: eps,
            sigma_mean: fe.mean,
            sigma_nodal: fe.nodal,
            div_operator_ref: div_file_name(3),
        };
        let back = sample_from_str(Path::new("x"), &sample_to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
