//! Single-file checkpoints.
//!
//! Layout: the line `CAMSCOPE-CKPT 1`, one line of JSON holding the model
//! config, free-form metadata and a tensor table (name, shape, offset and
//! length in values), then every tensor as little-endian f64.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::Params;

const MAGIC: &str = "CAMSCOPE-CKPT 1\n";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Index {
    config: ModelConfig,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Params,
    pub metadata: serde_json::Value,
}

pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    params: &Params,
    metadata: &serde_json::Value,
) -> Result<()> {
    params.check_compatible(config)?;
    if !params.all_finite() {
        return Err(Error::NonFinite("refusing to save non-finite parameters".into()));
    }
    let mut tensors = Vec::new();
    let mut payload = Vec::with_capacity(params.count() * 8);
    let mut offset = 0;
    for v in params.views() {
        tensors.push(TensorEntry {
            name: v.name,
            shape: v.shape,
            offset,
            len: v.data.len(),
        });
        offset += v.data.len();
        for x in v.data {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let index = Index {
        config: config.clone(),
        metadata: metadata.clone(),
        tensors,
    };
    let json = serde_json::to_string(&index).map_err(|e| Error::format(e.to_string()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + json.len() + 1 + payload.len());
    out.extend_from_slice(MAGIC.as_bytes());
    out.extend_from_slice(json.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&payload);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&out).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let rest = bytes
        .strip_prefix(MAGIC.as_bytes())
        .ok_or_else(|| Error::format(format!("{} is not a checkpoint", path.display())))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("checkpoint index is not terminated"))?;
    let index: Index =
        serde_json::from_slice(&rest[..nl]).map_err(|e| Error::format(format!("checkpoint index: {e}")))?;
    let payload = &rest[nl + 1..];
    if payload.len() % 8 != 0 {
        return Err(Error::format("checkpoint payload is not a whole number of f64 values"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut params = Params::zeros(&index.config)?;
    let views = params.views_mut();
    if views.len() != index.tensors.len() {
        return Err(Error::format(format!(
            "checkpoint holds {} tensors, its config expects {}",
            index.tensors.len(),
            views.len()
        )));
    }
    for (dst, entry) in views.into_iter().zip(&index.tensors) {
        if dst.name != entry.name || dst.shape != entry.shape || dst.data.len() != entry.len {
            return Err(Error::format(format!(
                "checkpoint tensor {} {:?} does not match expected {} {:?}",
                entry.name, entry.shape, dst.name, dst.shape
            )));
        }
        let src = values
            .get(entry.offset..entry.offset + entry.len)
            .ok_or_else(|| Error::format(format!("checkpoint tensor {} is truncated", entry.name)))?;
        dst.data.copy_from_slice(src);
    }
    Ok(Checkpoint {
        config: index.config,
        params,
        metadata: index.metadata,
    })
}
