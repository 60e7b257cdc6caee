//! On-disk store of target-word vectors, one directory per (model, layer):
//!
//! - `manifest.json`: `model_id`, `layer`, `dim`, `count`, `dtype` (`"f32le"`), `created_by`
//! - `vectors.bin`: row-major little-endian `f32`, `count * dim * 4` bytes
//! - `index.tsv`: header `row\tinstance_id\tside`, then one line per row in row order
//!
//! Vectors are stored as `f32` and promoted to `f64` on read.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DTYPE: &str = "f32le";
const MANIFEST: &str = "manifest.json";
const VECTORS: &str = "vectors.bin";
const INDEX: &str = "index.tsv";
const INDEX_HEADER: &str = "row\tinstance_id\tside";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub model_id: String,
    pub layer: u32,
    pub dim: usize,
    pub count: usize,
    pub dtype: String,
    pub created_by: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VectorKey {
    pub instance_id: String,
    /// 1 or 2.
    pub side: u8,
}

impl VectorKey {
    pub fn new(instance_id: impl Into<String>, side: u8) -> Self {
        VectorKey {
            instance_id: instance_id.into(),
            side,
        }
    }

    /// Both sides of a usage pair.
    pub fn pair(instance_id: &str) -> [VectorKey; 2] {
        [VectorKey::new(instance_id, 1), VectorKey::new(instance_id, 2)]
    }
}

/// Directory for a (model, layer) store under `root`.
pub fn store_dir(root: impl AsRef<Path>, model_id: &str, layer: u32) -> PathBuf {
    root.as_ref().join(model_id).join(format!("layer-{layer}"))
}

/// Layers with a store directory for `model_id` under `root`, ascending.
pub fn available_layers(root: impl AsRef<Path>, model_id: &str) -> Result<Vec<u32>> {
    let dir = root.as_ref().join(model_id);
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut layers: Vec<u32> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join(MANIFEST).is_file())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_prefix("layer-"))
                .and_then(|n| n.parse().ok())
        })
        .collect();
    layers.sort_unstable();
    Ok(layers)
}

#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dir: PathBuf,
    manifest: StoreManifest,
    data: Vec<f32>,
    keys: Vec<VectorKey>,
    rows: HashMap<VectorKey, usize>,
}

impl EmbeddingStore {
    /// Empty in-memory store that will be written to `dir` by [`save`](Self::save).
    pub fn create(
        dir: impl Into<PathBuf>,
        model_id: impl Into<String>,
        layer: u32,
        dim: usize,
        created_by: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("store dim must be positive".into()));
        }
        Ok(EmbeddingStore {
            dir: dir.into(),
            manifest: StoreManifest {
                model_id: model_id.into(),
                layer,
                dim,
                count: 0,
                dtype: DTYPE.into(),
                created_by: created_by.into(),
            },
            data: Vec::new(),
            keys: Vec::new(),
            rows: HashMap::new(),
        })
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let corrupt = |reason: String| Error::CorruptStore {
            path: dir.to_path_buf(),
            reason,
        };
        let manifest_path = dir.join(MANIFEST);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: StoreManifest = serde_json::from_str(&text).map_err(|e| corrupt(format!("bad manifest: {e}")))?;
        if manifest.dtype != DTYPE {
            return Err(corrupt(format!("unsupported dtype {:?}", manifest.dtype)));
        }
        if manifest.dim == 0 {
            return Err(corrupt("manifest dim is 0".into()));
        }

        let vec_path = dir.join(VECTORS);
        let bytes = fs::read(&vec_path).map_err(|e| Error::io(&vec_path, e))?;
        let expected = manifest.count * manifest.dim * 4;
        if bytes.len() != expected {
            return Err(corrupt(format!(
                "vectors.bin has {} bytes, expected {} ({} rows x {} dims x 4)",
                bytes.len(),
                expected,
                manifest.count,
                manifest.dim
            )));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();

        let index_path = dir.join(INDEX);
        let index = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let mut lines = index.lines();
        if lines.next() != Some(INDEX_HEADER) {
            return Err(corrupt("index.tsv header missing".into()));
        }
        let mut keys = Vec::with_capacity(manifest.count);
        let mut rows = HashMap::with_capacity(manifest.count);
        for (i, line) in lines.filter(|l| !l.is_empty()).enumerate() {
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(corrupt(format!("index line {}: expected 3 fields", i + 2)));
            }
            let row: usize = parts[0]
                .parse()
                .map_err(|_| corrupt(format!("index line {}: bad row {:?}", i + 2, parts[0])))?;
            if row != i {
                return Err(corrupt(format!("index line {}: row {row} out of order", i + 2)));
            }
            let side: u8 = match parts[2] {
                "1" => 1,
                "2" => 2,
                s => return Err(corrupt(format!("index line {}: bad side {s:?}", i + 2))),
            };
            let key = VectorKey::new(parts[1], side);
            if rows.insert(key.clone(), row).is_some() {
                return Err(corrupt(format!(
                    "index line {}: duplicate key ({}, {side})",
                    i + 2,
                    parts[1]
                )));
            }
            keys.push(key);
        }
        if keys.len() != manifest.count {
            return Err(corrupt(format!(
                "manifest count {} disagrees with {} index rows",
                manifest.count,
                keys.len()
            )));
        }
        Ok(EmbeddingStore {
            dir: dir.to_path_buf(),
            manifest,
            data,
            keys,
            rows,
        })
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn keys(&self) -> &[VectorKey] {
        &self.keys
    }

    pub fn contains(&self, key: &VectorKey) -> bool {
        self.rows.contains_key(key)
    }

    /// Inserts or replaces the vector for `key`.
    pub fn put_vector(&mut self, key: VectorKey, vector: &[f32]) -> Result<()> {
        let dim = self.dim();
        if vector.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: vector.len(),
            });
        }
        if key.side != 1 && key.side != 2 {
            return Err(Error::InvalidConfig(format!("side must be 1 or 2, got {}", key.side)));
        }
        if key.instance_id.is_empty() || key.instance_id.contains(['\t', '\n', '\r']) {
            return Err(Error::InvalidConfig(format!(
                "instance_id {:?} is not storable",
                key.instance_id
            )));
        }
        match self.rows.get(&key) {
            Some(&row) => self.data[row * dim..(row + 1) * dim].copy_from_slice(vector),
            None => {
                self.rows.insert(key.clone(), self.keys.len());
                self.keys.push(key);
                self.data.extend_from_slice(vector);
            }
        }
        self.manifest.count = self.keys.len();
        Ok(())
    }

    /// The stored `f32` values, untouched.
    pub fn get_raw(&self, key: &VectorKey) -> Result<&[f32]> {
        let row = *self.rows.get(key).ok_or_else(|| Error::MissingVector {
            instance_id: key.instance_id.clone(),
            side: key.side,
        })?;
        let dim = self.dim();
        Ok(&self.data[row * dim..(row + 1) * dim])
    }

    pub fn get_vector(&self, key: &VectorKey) -> Result<Vec<f64>> {
        Ok(self.get_raw(key)?.iter().map(|&x| x as f64).collect())
    }

    /// Stacks the vectors for `keys` as rows, in key order.
    pub fn get_matrix(&self, keys: &[VectorKey]) -> Result<Array2<f64>> {
        let dim = self.dim();
        let mut out = Array2::zeros((keys.len(), dim));
        for (r, key) in keys.iter().enumerate() {
            let raw = self.get_raw(key)?;
            for (dst, &src) in out.row_mut(r).iter_mut().zip(raw) {
                *dst = src as f64;
            }
        }
        Ok(out)
    }

    /// Every stored vector, in row order.
    pub fn all_vectors(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), self.dim()), |(r, c)| self.data[r * self.dim() + c] as f64)
    }

    /// Writes the three store files to the store directory.
    pub fn save(&self) -> Result<()> {
        let dir = &self.dir;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for x in &self.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        let vec_path = dir.join(VECTORS);
        fs::write(&vec_path, bytes).map_err(|e| Error::io(&vec_path, e))?;

        let mut index = String::from(INDEX_HEADER);
        index.push('\n');
        for (row, key) in self.keys.iter().enumerate() {
            let _ = writeln!(index, "{row}\t{}\t{}", key.instance_id, key.side);
        }
        let index_path = dir.join(INDEX);
        fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;

        let manifest_path = dir.join(MANIFEST);
        let mut json = serde_json::to_string_pretty(&self.manifest)?;
        json.push('\n');
        fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))
    }
}
