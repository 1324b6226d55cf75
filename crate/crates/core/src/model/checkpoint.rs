//! Checkpoint archives.
//!
//! A checkpoint is one safetensors file. Parameters are stored as F64
//! tensors under their dotted names, optimizer moments (when present) under
//! `optimizer.m.<name>` and `optimizer.v.<name>`, and a JSON record with the
//! model config, step and format version sits under the single metadata key
//! [`METADATA_KEY`]. One key keeps the header byte-stable.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "1";
pub const METADATA_KEY: &str = "record";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: String,
    pub model: ModelConfig,
    pub step: u64,
    pub epoch: u64,
    /// Training configuration that produced the weights, if any.
    #[serde(default)]
    pub train_config: Option<serde_json::Value>,
    #[serde(default)]
    pub train_loss: Option<f64>,
}

/// First and second Adam moments, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: ModelParams,
    pub second: ModelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
    pub moments: Option<Moments>,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION.into(),
                model: params.config.clone(),
                step: 0,
                epoch: 0,
                train_config: None,
                train_loss: None,
            },
            params,
            moments: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        let mut add = |prefix: &str, params: &ModelParams| {
            for t in params.tensors() {
                let bytes = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
                owned.push((format!("{prefix}{}", t.name), t.shape, bytes));
            }
        };
        add("", &self.params);
        if let Some(m) = &self.moments {
            add("optimizer.m.", &m.first);
            add("optimizer.v.", &m.second);
        }
        let views = owned
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F64, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let record = serde_json::to_string(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta = HashMap::from([(METADATA_KEY.to_string(), record)]);
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let meta = read_meta(bytes)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version `{}`",
                meta.format_version
            )));
        }
        meta.model.validate()?;
        let archive = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut params = ModelParams::random(&meta.model, 0);
        fill(&mut params, &archive, "")?;
        let has_moments = archive.names().iter().any(|n| n.starts_with("optimizer."));
        let moments = if has_moments {
            let mut first = params.zeros_like();
            let mut second = params.zeros_like();
            fill(&mut first, &archive, "optimizer.m.")?;
            fill(&mut second, &archive, "optimizer.v.")?;
            Some(Moments { first, second })
        } else {
            None
        };
        Ok(Checkpoint {
            meta,
            params,
            moments,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_meta(bytes: &[u8]) -> Result<CheckpointMeta> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let record = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(METADATA_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("missing `{METADATA_KEY}` metadata record")))?;
    serde_json::from_str(record).map_err(|e| Error::Checkpoint(format!("bad metadata record: {e}")))
}

fn fill(params: &mut ModelParams, archive: &SafeTensors<'_>, prefix: &str) -> Result<()> {
    let mismatches = check_tensors(params, archive, prefix);
    if !mismatches.is_empty() {
        return Err(mismatch_error(&mismatches));
    }
    for t in params.tensors_mut() {
        let view = archive
            .tensor(&format!("{prefix}{}", t.name))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        for (dst, chunk) in t.data.iter_mut().zip(view.data().chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    Ok(())
}

/// Human-readable description of every tensor whose name, dtype or shape disagrees.
fn check_tensors(params: &ModelParams, archive: &SafeTensors<'_>, prefix: &str) -> Vec<String> {
    let mut out = Vec::new();
    for t in params.tensors() {
        let name = format!("{prefix}{}", t.name);
        match archive.tensor(&name) {
            Err(_) => out.push(format!("`{name}` is missing (expected shape {:?})", t.shape)),
            Ok(view) if view.dtype() != Dtype::F64 => {
                out.push(format!("`{name}` has dtype {:?}, expected F64", view.dtype()))
            }
            Ok(view) if view.shape() != t.shape.as_slice() => out.push(format!(
                "`{name}` has shape {:?}, expected {:?}",
                view.shape(),
                t.shape
            )),
            Ok(_) => {}
        }
    }
    out
}

fn mismatch_error(mismatches: &[String]) -> Error {
    Error::Checkpoint(format!(
        "first mismatched tensor: {}; {} mismatch(es) in total: [{}]",
        mismatches[0],
        mismatches.len(),
        mismatches.join(", ")
    ))
}

/// Overwrites `params` with the parameter tensors stored at `path`.
///
/// Names and shapes must match exactly; the archive's own model config and
/// any optimizer state are ignored.
pub fn load_pretrained_into(params: &mut ModelParams, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let archive = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fill(params, &archive, "")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Preset};

    fn tiny(d: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: d,
            ..ModelConfig::preset(Preset::Tiny, (16, 16), 8, 2, 1).unwrap()
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let params = init_params(&tiny(8), 3, None).unwrap();
        let mut ckpt = Checkpoint::new(params.clone());
        ckpt.meta.step = 17;
        ckpt.moments = Some(Moments {
            first: init_params(&tiny(8), 4, None).unwrap(),
            second: init_params(&tiny(8), 5, None).unwrap(),
        });
        let bytes = ckpt.to_bytes().unwrap();
        assert_eq!(bytes, ckpt.to_bytes().unwrap());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn wrong_embed_dim_names_the_first_bad_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("other.ckpt");
        Checkpoint::new(init_params(&tiny(12), 0, None).unwrap())
            .save(&path)
            .unwrap();
        let err = init_params(&tiny(8), 0, Some(&path)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("first mismatched tensor: `patch_embed.weight`"), "{msg}");
        assert!(msg.contains("mask_token"), "{msg}");
    }

    #[test]
    fn pretrained_weights_are_loaded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let source = init_params(&tiny(8), 11, None).unwrap();
        Checkpoint::new(source.clone()).save(&path).unwrap();
        let loaded = init_params(&tiny(8), 99, Some(&path)).unwrap();
        assert_eq!(loaded, source);
    }

    #[test]
    fn metadata_record_carries_format_version() {
        let bytes = Checkpoint::new(init_params(&tiny(8), 0, None).unwrap())
            .to_bytes()
            .unwrap();
        let meta = read_meta(&bytes).unwrap();
        assert_eq!(meta.format_version, "1");
        assert_eq!(meta.model, tiny(8));
    }
}
