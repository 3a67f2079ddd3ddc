//! Bit-exact on-disk storage for embedding sets and distance matrices.
//!
//! An embedding set lives in a directory with three files:
//!
//! * `manifest.json` — row/column counts, dtype token, file names
//! * `features.bin`  — row-major little-endian floats
//! * `labels.csv`    — header `person_id,cam_id`, one row per embedding
//!
//! Features are stored as 32-bit floats (`dtype: "f32le"`). Distance
//! matrices reuse the same layout with `dtype: "f64le"` and one label
//! table per side. All downstream math runs in 64-bit floats; storage
//! stays 32-bit for embeddings.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::distances::{DistanceMatrix, LabelMeta, Metric};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// N feature vectors with per-row identity and camera labels.
///
/// Invariants are enforced at construction: no NaN/Inf entries, label
/// lengths equal to the row count, and N ≥ 1, D ≥ 1. A constructed set
/// is immutable and safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    features: Array2<f32>,
    person_ids: Vec<u32>,
    cam_ids: Vec<u32>,
    name: String,
}

impl EmbeddingSet {
    pub fn new(
        features: Array2<f32>,
        person_ids: Vec<u32>,
        cam_ids: Vec<u32>,
        name: impl Into<String>,
    ) -> Result<Self> {
        let (n, d) = features.dim();
        if n == 0 || d == 0 {
            return Err(Error::BadValue(format!(
                "embedding set must have N >= 1 and D >= 1, got {n}x{d}"
            )));
        }
        if person_ids.len() != n || cam_ids.len() != n {
            return Err(Error::BadValue(format!(
                "label length mismatch: {} person ids, {} cam ids for {} rows",
                person_ids.len(),
                cam_ids.len(),
                n
            )));
        }
        if let Some((idx, _)) = features.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::BadValue(format!(
                "non-finite feature value at flat index {idx}"
            )));
        }
        Ok(Self {
            features,
            person_ids,
            cam_ids,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // N >= 1 by construction
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    /// Features widened to f64 for downstream math.
    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }

    pub fn person_ids(&self) -> &[u32] {
        &self.person_ids
    }

    pub fn cam_ids(&self) -> &[u32] {
        &self.cam_ids
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn label_meta(&self) -> LabelMeta {
        LabelMeta {
            person_ids: self.person_ids.clone(),
            cam_ids: self.cam_ids.clone(),
        }
    }

    /// New set holding the given rows, in the given order.
    pub fn subset(&self, rows: &[usize], name: impl Into<String>) -> Result<Self> {
        let d = self.dim();
        let mut features = Array2::<f32>::zeros((rows.len(), d));
        let mut person_ids = Vec::with_capacity(rows.len());
        let mut cam_ids = Vec::with_capacity(rows.len());
        for (out, &r) in rows.iter().enumerate() {
            if r >= self.len() {
                return Err(Error::BadValue(format!(
                    "subset row {r} out of range for set of {} rows",
                    self.len()
                )));
            }
            features.row_mut(out).assign(&self.features.row(r));
            person_ids.push(self.person_ids[r]);
            cam_ids.push(self.cam_ids[r]);
        }
        Self::new(features, person_ids, cam_ids, name)
    }

    /// Features and labels compared bit-exactly; the name is ignored
    /// because it is derived from the directory on load.
    pub fn data_eq(&self, other: &Self) -> bool {
        self.person_ids == other.person_ids
            && self.cam_ids == other.cam_ids
            && self.features.dim() == other.features.dim()
            && self
                .features
                .iter()
                .zip(other.features.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// On-disk description of a binary matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub n: usize,
    pub dim: usize,
    pub dtype: String,
    pub feature_file: String,
    pub label_file: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric_hint: Option<String>,
    /// Second label table for two-sided matrices (distance dumps).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gallery_label_file: Option<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedManifest(e.to_string()))
}

fn check_file_size(path: &Path, expected: u64) -> Result<()> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let found = fs::metadata(path).map_err(io_err(path))?.len();
    if found != expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn read_labels(path: &Path) -> Result<(Vec<u32>, Vec<u32>)> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::MalformedManifest(format!("{}: {e}", path.display())))?;
    {
        let headers = reader
            .headers()
            .map_err(|e| Error::MalformedManifest(format!("{}: {e}", path.display())))?;
        if headers.len() != 2 || &headers[0] != "person_id" || &headers[1] != "cam_id" {
            return Err(Error::MalformedManifest(format!(
                "{}: expected header person_id,cam_id",
                path.display()
            )));
        }
    }
    let mut person_ids = Vec::new();
    let mut cam_ids = Vec::new();
    for record in reader.records() {
        let record =
            record.map_err(|e| Error::MalformedManifest(format!("{}: {e}", path.display())))?;
        if record.len() != 2 {
            return Err(Error::MalformedManifest(format!(
                "{}: expected 2 columns, got {}",
                path.display(),
                record.len()
            )));
        }
        let pid: u32 = record[0].trim().parse().map_err(|_| {
            Error::BadLabel(format!("non-integer person_id {:?}", &record[0]))
        })?;
        let cam: u32 = record[1]
            .trim()
            .parse()
            .map_err(|_| Error::BadLabel(format!("non-integer cam_id {:?}", &record[1])))?;
        person_ids.push(pid);
        cam_ids.push(cam);
    }
    Ok((person_ids, cam_ids))
}

fn csv_io_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |e| Error::IoFailure {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

fn write_labels(path: &Path, person_ids: &[u32], cam_ids: &[u32]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_io_err(path))?;
    writer
        .write_record(["person_id", "cam_id"])
        .map_err(csv_io_err(path))?;
    for (pid, cam) in person_ids.iter().zip(cam_ids) {
        writer
            .write_record([pid.to_string(), cam.to_string()])
            .map_err(csv_io_err(path))?;
    }
    writer.flush().map_err(io_err(path))
}

/// Load a validated embedding set from `dir_path`.
///
/// Row `i` of the feature matrix corresponds to row `i` of the label
/// table. The set name is the directory's file name.
pub fn load_embedding_set(dir_path: &Path) -> Result<EmbeddingSet> {
    let manifest = read_manifest(dir_path)?;
    if manifest.dtype != "f32le" {
        return Err(Error::MalformedManifest(format!(
            "dtype must be \"f32le\", got {:?}",
            manifest.dtype
        )));
    }
    if manifest.n == 0 || manifest.dim == 0 {
        return Err(Error::MalformedManifest(format!(
            "n and dim must be >= 1, got n={} dim={}",
            manifest.n, manifest.dim
        )));
    }
    let feature_path = dir_path.join(&manifest.feature_file);
    let expected = (manifest.n as u64) * (manifest.dim as u64) * 4;
    check_file_size(&feature_path, expected)?;

    let mut bytes = Vec::with_capacity(expected as usize);
    fs::File::open(&feature_path)
        .map_err(io_err(&feature_path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(&feature_path))?;
    let mut values = Vec::with_capacity(manifest.n * manifest.dim);
    for chunk in bytes.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let features = Array2::from_shape_vec((manifest.n, manifest.dim), values)
        .expect("shape checked against byte length");

    let label_path = dir_path.join(&manifest.label_file);
    let (person_ids, cam_ids) = read_labels(&label_path)?;
    if person_ids.len() != manifest.n {
        return Err(Error::SizeMismatch {
            path: label_path,
            expected: manifest.n as u64,
            found: person_ids.len() as u64,
        });
    }

    let name = dir_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    EmbeddingSet::new(features, person_ids, cam_ids, name)
}

/// Persist an embedding set into `dir_path` (created if absent).
///
/// Round-trip contract: `load(save(x))` reproduces features and labels
/// bit-exactly.
pub fn save_embedding_set(set: &EmbeddingSet, dir_path: &Path) -> Result<()> {
    fs::create_dir_all(dir_path).map_err(io_err(dir_path))?;
    let manifest = Manifest {
        n: set.len(),
        dim: set.dim(),
        dtype: "f32le".to_string(),
        feature_file: "features.bin".to_string(),
        label_file: "labels.csv".to_string(),
        metric_hint: None,
        gallery_label_file: None,
    };
    write_manifest(dir_path, &manifest)?;

    let feature_path = dir_path.join(&manifest.feature_file);
    let mut bytes = Vec::with_capacity(set.len() * set.dim() * 4);
    for v in set.features().iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&feature_path, &bytes).map_err(io_err(&feature_path))?;

    write_labels(
        &dir_path.join(&manifest.label_file),
        set.person_ids(),
        set.cam_ids(),
    )
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let mut file = fs::File::create(&path).map_err(io_err(&path))?;
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::MalformedManifest(e.to_string()))?;
    file.write_all(text.as_bytes()).map_err(io_err(&path))?;
    file.write_all(b"\n").map_err(io_err(&path))
}

/// Dump a distance matrix as `values.bin` (f64le) plus one label table
/// per side.
pub fn save_distance_matrix(matrix: &DistanceMatrix, dir_path: &Path) -> Result<()> {
    fs::create_dir_all(dir_path).map_err(io_err(dir_path))?;
    let (q, g) = matrix.values.dim();
    let manifest = Manifest {
        n: q,
        dim: g,
        dtype: "f64le".to_string(),
        feature_file: "values.bin".to_string(),
        label_file: "query_labels.csv".to_string(),
        metric_hint: Some(matrix.metric.token().to_string()),
        gallery_label_file: Some("gallery_labels.csv".to_string()),
    };
    write_manifest(dir_path, &manifest)?;

    let values_path = dir_path.join(&manifest.feature_file);
    let mut bytes = Vec::with_capacity(q * g * 8);
    for v in matrix.values.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&values_path, &bytes).map_err(io_err(&values_path))?;

    write_labels(
        &dir_path.join(&manifest.label_file),
        &matrix.query_meta.person_ids,
        &matrix.query_meta.cam_ids,
    )?;
    write_labels(
        &dir_path.join("gallery_labels.csv"),
        &matrix.gallery_meta.person_ids,
        &matrix.gallery_meta.cam_ids,
    )
}

/// Load a distance matrix dumped by [`save_distance_matrix`].
pub fn load_distance_matrix(dir_path: &Path) -> Result<DistanceMatrix> {
    let manifest = read_manifest(dir_path)?;
    if manifest.dtype != "f64le" {
        return Err(Error::MalformedManifest(format!(
            "dtype must be \"f64le\", got {:?}",
            manifest.dtype
        )));
    }
    let values_path = dir_path.join(&manifest.feature_file);
    let expected = (manifest.n as u64) * (manifest.dim as u64) * 8;
    check_file_size(&values_path, expected)?;

    let mut bytes = Vec::with_capacity(expected as usize);
    fs::File::open(&values_path)
        .map_err(io_err(&values_path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(&values_path))?;
    let mut values = Vec::with_capacity(manifest.n * manifest.dim);
    for chunk in bytes.chunks_exact(8) {
        let mut b = [0u8; 8];
        b.copy_from_slice(chunk);
        values.push(f64::from_le_bytes(b));
    }
    let values = Array2::from_shape_vec((manifest.n, manifest.dim), values)
        .expect("shape checked against byte length");

    let metric = match manifest.metric_hint.as_deref() {
        Some(token) => Metric::from_token(token)
            .ok_or_else(|| Error::MalformedManifest(format!("unknown metric hint {token:?}")))?,
        None => Metric::Euclidean,
    };

    let (q_pids, q_cams) = read_labels(&dir_path.join(&manifest.label_file))?;
    let gallery_label_file = manifest
        .gallery_label_file
        .as_deref()
        .unwrap_or("gallery_labels.csv");
    let (g_pids, g_cams) = read_labels(&dir_path.join(gallery_label_file))?;
    if q_pids.len() != manifest.n || g_pids.len() != manifest.dim {
        return Err(Error::MalformedManifest(format!(
            "label tables ({} query rows, {} gallery rows) disagree with matrix {}x{}",
            q_pids.len(),
            g_pids.len(),
            manifest.n,
            manifest.dim
        )));
    }

    DistanceMatrix::new(
        values,
        metric,
        LabelMeta {
            person_ids: q_pids,
            cam_ids: q_cams,
        },
        LabelMeta {
            person_ids: g_pids,
            cam_ids: g_cams,
        },
    )
}
