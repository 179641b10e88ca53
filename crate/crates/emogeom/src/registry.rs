//! Run directories, manifests and on-disk artifact formats.
//!
//! Layout under a run root:
//!
//! ```text
//! <root>/<model_slug>/
//!     meta.json  sweep.json  descriptors.json
//!     manifests/<manifest_id>.json
//!     layers/<L>/{vectors.f32, meta.json, rdm.json}
//!     generation/<label>/{samples.json, activations.f32, meta.json, vectors.f32, rdm.json}
//!     conditions/<A|B|C|D>/{rdm.json, meta.json}
//!     equivalence_report.json  decomposition_report.json  steering/traces.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, TryLockError};
use std::path::{Path, PathBuf};

use emogeom_core::geometry::Rdm;
use emogeom_core::record::{model_slug, BackendKind, EmotionVectorSet, ModelRecord, Precision, Variant};
use emogeom_core::vocab::canonical_labels;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::stimuli::hex;

pub const VECTOR_FILE: &str = "vectors.f32";
pub const META_FILE: &str = "meta.json";
pub const RDM_FILE: &str = "rdm.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hardware {
    pub arch: String,
    pub os: String,
    pub logical_cpus: usize,
}

impl Hardware {
    pub fn detect() -> Self {
        Self {
            arch: std::env::consts::ARCH.into(),
            os: std::env::consts::OS.into(),
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

/// Provenance shared by every artifact of one pipeline invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Hash of every field except the timestamps.
    pub manifest_id: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub command: String,
    pub model_id: String,
    pub software: BTreeMap<String, String>,
    pub hardware: Hardware,
    pub precision: Precision,
    pub backend: BackendKind,
    pub corpus_hash: String,
    pub corpus_stand_in: bool,
    pub seeds: Vec<u64>,
    pub int8_scheme: Option<String>,
    pub notes: Vec<String>,
}

impl RunManifest {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        command: &str,
        model_id: &str,
        precision: Precision,
        backend: BackendKind,
        corpus_hash: &str,
        corpus_stand_in: bool,
        seeds: Vec<u64>,
        notes: Vec<String>,
    ) -> Self {
        let mut software = BTreeMap::new();
        software.insert("emogeom".into(), env!("CARGO_PKG_VERSION").into());
        software.insert("runtime".into(), "emogeom-lm (cpu, f32 accumulate)".into());
        let int8_scheme = (precision == Precision::Int8).then(|| crate::lm::numeric::INT8_SCHEME.to_string());
        let mut m = Self {
            manifest_id: String::new(),
            started_at: now(),
            finished_at: None,
            command: command.into(),
            model_id: model_id.into(),
            software,
            hardware: Hardware::detect(),
            precision,
            backend,
            corpus_hash: corpus_hash.into(),
            corpus_stand_in,
            seeds,
            int8_scheme,
            notes,
        };
        m.manifest_id = m.compute_id();
        m
    }

    fn compute_id(&self) -> String {
        let mut v = serde_json::to_value(self).expect("manifest serializes");
        let obj = v.as_object_mut().expect("object");
        for k in ["manifest_id", "started_at", "finished_at"] {
            obj.remove(k);
        }
        let bytes = serde_json::to_vec(&v).expect("manifest serializes");
        hex(&Sha256::digest(&bytes)[..8])
    }

    pub fn finish(&mut self) {
        self.finished_at = Some(now());
    }

    pub fn write(&self, layout: &RunLayout) -> Result<PathBuf> {
        let path = layout.manifest(&self.model_id, &self.manifest_id);
        write_json(&path, self)?;
        Ok(path)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Any JSON artifact tagged with the manifest that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub manifest_id: String,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Artifact<T> {
    pub fn new(manifest_id: &str, body: T) -> Self {
        Self {
            manifest_id: manifest_id.into(),
            body,
        }
    }
}

/// Path arithmetic for a run root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn model_dir(&self, model_id: &str) -> PathBuf {
        self.root.join(model_slug(model_id))
    }

    pub fn meta(&self, model_id: &str) -> PathBuf {
        self.model_dir(model_id).join(META_FILE)
    }

    pub fn sweep(&self, model_id: &str) -> PathBuf {
        self.model_dir(model_id).join("sweep.json")
    }

    pub fn descriptors(&self, model_id: &str) -> PathBuf {
        self.model_dir(model_id).join("descriptors.json")
    }

    pub fn manifest(&self, model_id: &str, manifest_id: &str) -> PathBuf {
        self.model_dir(model_id).join("manifests").join(format!("{manifest_id}.json"))
    }

    pub fn layer_dir(&self, model_id: &str, layer: usize) -> PathBuf {
        self.model_dir(model_id).join("layers").join(layer.to_string())
    }

    pub fn generation_dir(&self, model_id: &str, label: &str) -> PathBuf {
        self.model_dir(model_id).join("generation").join(label)
    }

    pub fn condition_dir(&self, model_id: &str, letter: char) -> PathBuf {
        self.model_dir(model_id).join("conditions").join(letter.to_string())
    }

    pub fn equivalence_report(&self, model_id: &str) -> PathBuf {
        self.model_dir(model_id).join("equivalence_report.json")
    }

    pub fn decomposition_report(&self, model_id: &str) -> PathBuf {
        self.model_dir(model_id).join("decomposition_report.json")
    }

    pub fn steering_traces(&self, model_id: &str) -> PathBuf {
        self.model_dir(model_id).join("steering").join("traces.json")
    }

    /// Model directories present under the root, sorted by name.
    pub fn model_dirs(&self) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(Error::io(&self.root, e)),
        };
        for e in entries {
            let p = e.map_err(|e| Error::io(&self.root, e))?.path();
            if p.join(META_FILE).is_file() || p.join("equivalence_report.json").is_file() {
                out.push(p);
            }
        }
        out.sort();
        Ok(out)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

/// Raw little-endian f32, row-major.
pub fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_len * 4 {
        return Err(Error::parse(
            path,
            format!("{} bytes, expected {} floats", bytes.len(), expected_len),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Sidecar for a `vectors.f32` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorMeta {
    pub model: ModelRecord,
    pub layer: usize,
    pub emotion_order: Vec<String>,
    pub rows: usize,
    pub d_model: usize,
    pub centered: bool,
    pub dtype: String,
}

/// Writes `layers/<L>/vectors.f32` and its sidecar under a model directory.
pub fn persist_vector_set(set: &EmotionVectorSet, model_dir: &Path, manifest_id: &str) -> Result<PathBuf> {
    set.validate()?;
    let dir = model_dir.join("layers").join(set.layer.to_string());
    let path = dir.join(VECTOR_FILE);
    write_f32(&path, set.as_slice())?;
    let meta = VectorMeta {
        model: set.model.clone(),
        layer: set.layer,
        emotion_order: set.emotion_order.clone(),
        rows: set.emotion_order.len(),
        d_model: set.d_model(),
        centered: set.centered,
        dtype: "f32le".into(),
    };
    write_json(&dir.join(META_FILE), &Artifact::new(manifest_id, meta))?;
    Ok(path)
}

/// Reads a vector set back from its layer directory; returns the manifest id
/// recorded in the sidecar.
pub fn load_vector_set(layer_dir: &Path) -> Result<(EmotionVectorSet, String)> {
    let meta: Artifact<VectorMeta> = read_json(&layer_dir.join(META_FILE))?;
    let m = meta.body;
    if m.emotion_order != canonical_labels() {
        return Err(Error::parse(&layer_dir.join(META_FILE), "emotion order is not canonical"));
    }
    let values = read_f32(&layer_dir.join(VECTOR_FILE), m.rows * m.d_model)?;
    let set = EmotionVectorSet::new(m.model, m.layer, m.emotion_order, values, m.centered)?;
    Ok((set, meta.manifest_id))
}

/// JSON form of an RDM: nested rows (NaN as `null`) plus the label order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdmFile {
    pub model_id: String,
    pub layer: usize,
    pub emotion_order: Vec<String>,
    pub matrix: Vec<Vec<Option<f64>>>,
    pub off_diag_std: Option<f64>,
    pub contains_nan: bool,
}

impl RdmFile {
    pub fn from_rdm(rdm: &Rdm) -> Self {
        Self {
            model_id: rdm.model_id.clone(),
            layer: rdm.layer,
            emotion_order: rdm.labels.clone(),
            matrix: rdm
                .rows()
                .into_iter()
                .map(|r| r.into_iter().map(finite).collect())
                .collect(),
            off_diag_std: finite(rdm.off_diag_std),
            contains_nan: rdm.contains_nan,
        }
    }

    pub fn to_rdm(&self) -> Result<Rdm> {
        let n = self.emotion_order.len();
        if self.matrix.len() != n || self.matrix.iter().any(|r| r.len() != n) {
            return Err(Error::Validation(format!(
                "RDM for {} is not {n}x{n}",
                self.model_id
            )));
        }
        let flat = self.matrix.iter().flatten().map(|v| v.unwrap_or(f64::NAN)).collect();
        Ok(Rdm::from_matrix(self.model_id.clone(), self.layer, self.emotion_order.clone(), flat)?)
    }
}

pub fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

pub fn write_rdm(path: &Path, rdm: &Rdm, manifest_id: &str) -> Result<()> {
    write_json(path, &Artifact::new(manifest_id, RdmFile::from_rdm(rdm)))
}

pub fn read_rdm(path: &Path) -> Result<(Rdm, String)> {
    let f: Artifact<RdmFile> = read_json(path)?;
    Ok((f.body.to_rdm()?, f.manifest_id))
}

/// Anisotropy at a fixed fraction of depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceDepth {
    pub fraction: f64,
    pub layer: usize,
    pub anisotropy: Option<f64>,
}

/// Per-layer sweep values; non-finite layers are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFile {
    pub model: ModelRecord,
    pub per_layer_mean_cosine: Vec<Option<f64>>,
    pub neutral_anisotropy: Vec<Option<f64>>,
    pub neutral_mean_norm: Vec<Option<f64>>,
    pub best_layer: usize,
    pub best_layer_pct: f64,
    pub first_null_layer: Option<usize>,
    pub reference_depths: Vec<ReferenceDepth>,
}

/// Descriptor values as printed in the model table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportedDescriptors {
    pub best_layer: usize,
    /// Percentage of depth, e.g. 39.3.
    pub best_layer_pct: f64,
    pub anisotropy: f64,
    pub rdm_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTableRow {
    pub record: ModelRecord,
    pub reported: Option<ReportedDescriptors>,
}

#[derive(Debug, Deserialize)]
struct RawRow {
    model_id: String,
    family: String,
    variant: String,
    size_b: f64,
    n_layers: usize,
    d_model: usize,
    #[serde(alias = "backend_kind")]
    backend: String,
    precision: Option<String>,
    best_layer: Option<usize>,
    best_layer_pct: Option<f64>,
    anisotropy: Option<f64>,
    rdm_std: Option<f64>,
}

impl RawRow {
    fn into_row(self) -> std::result::Result<ModelTableRow, String> {
        let record = ModelRecord {
            model_id: self.model_id.trim().to_string(),
            family: self.family.trim().to_string(),
            variant: self.variant.parse::<Variant>().map_err(|e| e.to_string())?,
            size_b: self.size_b,
            n_layers: self.n_layers,
            d_model: self.d_model,
            backend_kind: self.backend.parse::<BackendKind>().map_err(|e| e.to_string())?,
            precision: match self.precision.as_deref().map(str::trim) {
                None | Some("") => Precision::Fp16,
                Some(p) => p.parse().map_err(|e: emogeom_core::Error| e.to_string())?,
            },
        };
        record.validate().map_err(|e| e.to_string())?;
        let reported = match (self.best_layer, self.best_layer_pct, self.anisotropy, self.rdm_std) {
            (Some(best_layer), Some(best_layer_pct), Some(anisotropy), Some(rdm_std)) => {
                Some(ReportedDescriptors {
                    best_layer,
                    best_layer_pct,
                    anisotropy,
                    rdm_std,
                })
            }
            (None, None, None, None) => None,
            _ => return Err("reported descriptors must be all present or all absent".into()),
        };
        Ok(ModelTableRow { record, reported })
    }
}

/// Reads a model table (CSV, or a JSON array of row objects) with the
/// model-record columns plus optional descriptor columns.
pub fn load_model_table(path: &Path) -> Result<Vec<ModelTableRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
        || text.trim_start().starts_with('[');
    let raw: Vec<(usize, std::result::Result<RawRow, String>)> = if is_json {
        let values: Vec<serde_json::Value> = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        values
            .into_iter()
            .enumerate()
            .map(|(i, v)| (i + 1, serde_json::from_value(v).map_err(|e| e.to_string())))
            .collect()
    } else {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        reader
            .deserialize::<RawRow>()
            .enumerate()
            .map(|(i, r)| (i + 2, r.map_err(|e| e.to_string())))
            .collect()
    };
    let mut seen = BTreeSet::new();
    let mut rows = Vec::with_capacity(raw.len());
    for (line, r) in raw {
        let row = r
            .and_then(RawRow::into_row)
            .map_err(|msg| Error::parse(path, format!("row {line}: {msg}")))?;
        if !seen.insert(row.record.model_id.clone()) {
            return Err(Error::parse(
                path,
                format!("row {line}: duplicate model_id '{}'", row.record.model_id),
            ));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Exclusive writer lock on a run directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    _file: File,
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        let file = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        match file.try_lock() {
            Ok(()) => Ok(Self { _file: file, path }),
            Err(TryLockError::WouldBlock) => Err(Error::Locked(dir.to_path_buf())),
            Err(TryLockError::Error(e)) => Err(Error::io(&path, e)),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
