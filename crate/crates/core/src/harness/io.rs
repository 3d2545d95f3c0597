//! Tensor files, checkpoints and atomic writes.
//!
//! A tensor file is the raw little-endian scalar buffer in N,C,H,W order; its
//! sidecar `<path>.json` records shape, dtype and seed. A checkpoint is a
//! [`record`](crate::record) file with a sidecar holding the model spec.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::model::{ModelSpec, TinyCnn};
use crate::record;
use crate::tensor::{Scalar, Shape, Tensor};

pub const CHECKPOINT_FORMAT: &str = "patchnorm-checkpoint";

pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorMeta {
    pub shape: [usize; 4],
    pub dtype: String,
    pub seed: Option<u64>,
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>, seed: Option<u64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.numel() * std::mem::size_of::<T>());
    for &v in t.data() {
        match T::DTYPE {
            "f32" => bytes.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
            _ => bytes.extend_from_slice(&v.f64().to_le_bytes()),
        }
    }
    let meta = TensorMeta { shape: t.shape().to_array(), dtype: T::DTYPE.into(), seed };
    write_atomic(path, &bytes)?;
    write_atomic(&sidecar(path), serde_json::to_string_pretty(&meta)?.as_bytes())
}

/// Reads a tensor file of either dtype as `f64`.
pub fn read_tensor(path: &Path) -> Result<(Tensor<f64>, TensorMeta)> {
    let bad = |reason: String| Error::Format { path: path.display().to_string(), reason };
    let meta_text = fs::read_to_string(sidecar(path)).map_err(|e| bad(format!("sidecar: {e}")))?;
    let meta: TensorMeta = serde_json::from_str(&meta_text).map_err(|e| bad(format!("sidecar: {e}")))?;
    let bytes = fs::read(path).map_err(|e| bad(e.to_string()))?;
    let [n, c, h, w] = meta.shape;
    let shape = Shape::new(n, c, h, w);
    let width = match meta.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(bad(format!("unknown dtype `{other}`"))),
    };
    if bytes.len() != shape.numel() * width {
        return Err(bad(format!("{} bytes do not hold a {} {shape} tensor", bytes.len(), meta.dtype)));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(width)
        .map(|b| match width {
            4 => f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
            _ => f64::from_le_bytes(b.try_into().expect("8 bytes")),
        })
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite value".into()));
    }
    Ok((Tensor::new(shape, data)?, meta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub spec: ModelSpec,
    pub seed: u64,
    pub dtype: String,
    pub label: String,
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &TinyCnn<T>, seed: u64, label: &str) -> Result<()> {
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        spec: model.spec.clone(),
        seed,
        dtype: T::DTYPE.into(),
        label: label.into(),
    };
    write_atomic(path, &record::encode(&model.to_record()))?;
    write_atomic(&sidecar(path), serde_json::to_string_pretty(&meta)?.as_bytes())
}

/// Every failure to read or match a checkpoint is [`Error::Mismatch`].
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(TinyCnn<T>, CheckpointMeta)> {
    let mismatch = |why: String| Error::Mismatch(format!("checkpoint {}: {why}", path.display()));
    let text = fs::read_to_string(sidecar(path)).map_err(|e| mismatch(format!("sidecar: {e}")))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| mismatch(format!("sidecar: {e}")))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(mismatch(format!("unknown format `{}`", meta.format)));
    }
    let rec = record::read(path).map_err(|e| mismatch(e.to_string()))?;
    let model = TinyCnn::from_record(meta.spec.clone(), &rec).map_err(|e| mismatch(e.to_string()))?;
    Ok((model, meta))
}
