//! Checkpoint container: a TOML metadata header (config snapshot, epoch,
//! optimizer step counters, format version) followed by a tensor archive
//! holding every parameter, normalization buffer, and Adam moment.

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{archive, ParamStore};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"ES3DCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub epoch: usize,
    pub adam_g_step: u64,
    pub adam_d_step: u64,
    pub best_dice: f64,
    pub config: TrainConfig,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, store: &ParamStore) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    let meta_text = toml::to_string(meta).expect("metadata serializes");
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(meta_text.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(meta_text.as_bytes()).map_err(io_err)?;

    let mut named: Vec<(String, &ArrayD<f32>)> = Vec::new();
    for id in store.ids() {
        let entry = store.entry(id);
        named.push((format!("param.{}", entry.name), &entry.value));
        if let Some(m) = &entry.adam_m {
            named.push((format!("adam_m.{}", entry.name), m));
        }
        if let Some(v) = &entry.adam_v {
            named.push((format!("adam_v.{}", entry.name), v));
        }
    }
    archive::write_tensors_to(&mut w, path, named.iter().map(|(n, t)| (n.as_str(), *t)))?;
    w.flush().map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    let bad = |reason: String| Error::Checkpoint {
        path: path.into(),
        reason,
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(bad("bad magic; not a checkpoint".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let meta_len = u32::from_le_bytes(u32buf) as usize;
    if meta_len > 1 << 20 {
        return Err(bad("metadata block too large".into()));
    }
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes).map_err(io_err)?;
    let meta_text = String::from_utf8(meta_bytes).map_err(|_| bad("metadata is not UTF-8".into()))?;
    let meta: CheckpointMeta =
        toml::from_str(&meta_text).map_err(|e| bad(format!("metadata parse error: {e}")))?;
    let tensors = archive::read_tensors_from(&mut r, path)?;
    Ok(Checkpoint { meta, tensors })
}

/// Copy checkpoint tensors into a freshly constructed store. Every `param.*`
/// tensor must match a registered entry exactly; Adam moments are optional.
pub fn restore_store(path: &Path, ckpt: &Checkpoint, store: &mut ParamStore) -> Result<()> {
    for (name, tensor) in &ckpt.tensors {
        let (kind, param_name) = name
            .split_once('.')
            .ok_or_else(|| Error::Checkpoint {
                path: path.into(),
                reason: format!("malformed tensor name {name:?}"),
            })?;
        let id = store.find(param_name).ok_or_else(|| Error::Checkpoint {
            path: path.into(),
            reason: format!("checkpoint tensor {param_name:?} has no matching parameter"),
        })?;
        if store.value(id).shape() != tensor.shape() {
            return Err(Error::Checkpoint {
                path: path.into(),
                reason: format!(
                    "shape mismatch for {param_name:?}: expected {:?}, got {:?}",
                    store.value(id).shape(),
                    tensor.shape()
                ),
            });
        }
        let entry = store.entry_mut(id);
        match kind {
            "param" => entry.value = tensor.clone(),
            "adam_m" => entry.adam_m = Some(tensor.clone()),
            "adam_v" => entry.adam_v = Some(tensor.clone()),
            other => {
                return Err(Error::Checkpoint {
                    path: path.into(),
                    reason: format!("unknown tensor section {other:?}"),
                })
            }
        }
    }
    Ok(())
}
