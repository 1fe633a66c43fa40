//! Checkpoint directories: `manifest.json` plus `weights.bin`, the named
//! tensors concatenated as little-endian `f64` in manifest order. Full
//! precision keeps a resumed stage bit-identical to an uninterrupted run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{EmbeddingTables, PretrainedCF};
use crate::io::sha256_bytes;
use crate::model::{FairModel, ModelDims};
use crate::nn::Parameterized;
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";
const FORMAT: &str = "blindrec-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub stage: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<ModelDims>,
    pub tensors: Vec<TensorEntry>,
    pub weights_sha256: String,
    /// Stage-specific extras such as the selected epoch.
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn format_err(dir: &Path, message: impl Into<String>) -> Error {
    Error::Format { path: dir.to_path_buf(), message: message.into() }
}

/// Writes every tensor of `shapes`, read from `params` by name.
pub fn save_params<P: Parameterized + ?Sized>(
    dir: &Path,
    params: &mut P,
    shapes: &[(String, (usize, usize))],
    stage: &str,
    seed: u64,
    dims: Option<ModelDims>,
    meta: serde_json::Value,
) -> Result<Manifest> {
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    params.visit_params("", &mut |n, v| {
        values.insert(n.to_string(), v.to_vec());
    });
    let mut bytes = Vec::new();
    let mut tensors = Vec::with_capacity(shapes.len());
    for (name, (rows, cols)) in shapes {
        let v = values.get(name).ok_or_else(|| Error::arg(format!("no parameter named {name}")))?;
        if v.len() != rows * cols {
            return Err(Error::arg(format!("{name} has {} values, shape says {rows}x{cols}", v.len())));
        }
        bytes.extend(v.iter().flat_map(|x| x.to_le_bytes()));
        tensors.push(TensorEntry { name: name.clone(), rows: *rows, cols: *cols });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        stage: stage.into(),
        seed,
        dims,
        tensors,
        weights_sha256: sha256_bytes(&bytes),
        meta,
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join(WEIGHTS), &bytes)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if m.format != FORMAT || m.version != 1 {
        return Err(format_err(dir, format!("unsupported checkpoint {} v{}", m.format, m.version)));
    }
    Ok(m)
}

/// Loads weights into `params`; every tensor the parameters expose must be
/// present with a matching size.
pub fn load_params<P: Parameterized + ?Sized>(dir: &Path, params: &mut P) -> Result<Manifest> {
    let m = read_manifest(dir)?;
    let bytes = fs::read(dir.join(WEIGHTS))?;
    if sha256_bytes(&bytes) != m.weights_sha256 {
        return Err(format_err(dir, "weights do not match the manifest hash"));
    }
    let mut stored: BTreeMap<&str, &[u8]> = BTreeMap::new();
    let mut offset = 0;
    for t in &m.tensors {
        let len = t.rows * t.cols * 8;
        let chunk = bytes.get(offset..offset + len).ok_or_else(|| format_err(dir, "weights file is truncated"))?;
        stored.insert(&t.name, chunk);
        offset += len;
    }
    if offset != bytes.len() {
        return Err(format_err(dir, "weights file has trailing bytes"));
    }
    let mut problem = None;
    params.visit_params("", &mut |n, v| match stored.get(n) {
        Some(chunk) if chunk.len() == v.len() * 8 => {
            for (x, c) in v.iter_mut().zip(chunk.chunks_exact(8)) {
                *x = f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
            }
        }
        Some(_) => {
            problem.get_or_insert_with(|| format!("{n} has the wrong size"));
        }
        None => {
            problem.get_or_insert_with(|| format!("{n} is missing"));
        }
    });
    match problem {
        Some(p) => Err(format_err(dir, p)),
        None => Ok(m),
    }
}

pub fn save_model(dir: &Path, model: &FairModel, stage: &str, seed: u64, meta: serde_json::Value) -> Result<Manifest> {
    let shapes = model.tensor_shapes();
    save_params(dir, &mut model.clone(), &shapes, stage, seed, Some(model.dims), meta)
}

pub fn load_model(dir: &Path) -> Result<(FairModel, Manifest)> {
    let m = read_manifest(dir)?;
    let dims = m.dims.ok_or_else(|| format_err(dir, "checkpoint has no model dimensions"))?;
    let tables = EmbeddingTables::init(dims.users, dims.items, dims.dim, 0.0, 0);
    let mut model = FairModel::new(dims, tables, 0.0, 0)?;
    let m = load_params(dir, &mut model)?;
    Ok((model, m))
}

pub fn save_pretrained(dir: &Path, cf: &PretrainedCF, seed: u64) -> Result<Manifest> {
    let t = cf.tables().clone();
    let shapes = vec![
        (crate::encoders::USERS.to_string(), t.users.dim()),
        (crate::encoders::ITEMS.to_string(), t.items.dim()),
    ];
    let meta = serde_json::json!({"epoch": cf.epoch, "val_recall": cf.val_recall});
    save_params(dir, &mut t.clone(), &shapes, "pretrain", seed, None, meta)
}

pub fn load_pretrained(dir: &Path) -> Result<PretrainedCF> {
    let m = read_manifest(dir)?;
    let shape = |name: &str| {
        m.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| (t.rows, t.cols))
            .ok_or_else(|| format_err(dir, format!("{name} is missing")))
    };
    let (users, dim) = shape(crate::encoders::USERS)?;
    let (items, _) = shape(crate::encoders::ITEMS)?;
    let mut t = EmbeddingTables::init(users, items, dim, 0.0, 0);
    let m = load_params(dir, &mut t)?;
    let epoch = m.meta.get("epoch").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    let val_recall = m.meta.get("val_recall").and_then(|v| v.as_f64()).unwrap_or(f64::NAN);
    Ok(PretrainedCF::freeze(t, epoch, val_recall))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::snapshot;

    fn model() -> FairModel {
        let dims = ModelDims { users: 5, items: 7, dim: 4, arity: 2, annotators: 3, embed_dim: 6 };
        FairModel::new(dims, EmbeddingTables::init(5, 7, 4, 0.3, 2), 2.0, 9).unwrap()
    }

    #[test]
    fn model_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = model();
        save_model(dir.path(), &m, "stage1", 9, serde_json::json!({"epoch": 3})).unwrap();
        let (mut back, manifest) = load_model(dir.path()).unwrap();
        assert_eq!(snapshot(&mut back, ""), snapshot(&mut m, ""));
        assert_eq!(manifest.stage, "stage1");
        assert_eq!(manifest.meta["epoch"], 3);
        assert_eq!(manifest.tensors.len(), m.tensor_shapes().len());
    }

    #[test]
    fn pretrained_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cf = PretrainedCF::freeze(EmbeddingTables::init(3, 4, 2, 0.5, 1), 12, 0.25);
        save_pretrained(dir.path(), &cf, 1).unwrap();
        let back = load_pretrained(dir.path()).unwrap();
        assert_eq!(back.tables(), cf.tables());
        assert_eq!((back.epoch, back.val_recall), (12, 0.25));
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &model(), "stage2", 1, serde_json::Value::Null).unwrap();
        let path = dir.path().join(WEIGHTS);
        let mut bytes = fs::read(&path).unwrap();
        bytes[10] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_directory_is_io_error() {
        assert!(matches!(load_model(Path::new("/nonexistent/ckpt")), Err(Error::Io(_))));
    }
}
