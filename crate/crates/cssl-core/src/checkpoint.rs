//! Self-describing checkpoint container.
//!
//! Layout on disk:
//!
//! ```text
//! magic  "CSSLCKP1"                      8 bytes
//! header length (u32, little-endian)    4 bytes
//! header JSON                           stage, model config, tensor table,
//!                                       optional classifier head dims
//! payload (f64 little-endian)           model parameters in layout order,
//!                                       then head weight then head bias
//! ```
//!
//! Round trips are bit-exact. Loading against an unexpected model
//! configuration is an explicit error, not a silent reinterpretation.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

const MAGIC: &[u8; 8] = b"CSSLCKP1";

/// Which pipeline step produced the checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage3,
    Finetuned,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Stage1 => write!(f, "stage1"),
            Stage::Stage3 => write!(f, "stage3"),
            Stage::Finetuned => write!(f, "finetuned"),
        }
    }
}

/// Linear classification head over pooled encoder features.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `d_enc × classes`, row-major.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub classes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorDesc {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    stage: Stage,
    config: ModelConfig,
    tensors: Vec<TensorDesc>,
    head_classes: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    pub params: ModelParams,
    pub head: Option<HeadParams>,
}

impl Checkpoint {
    pub fn new(stage: Stage, params: ModelParams) -> Self {
        Checkpoint {
            stage,
            params,
            head: None,
        }
    }

    /// Error if the stored model configuration differs from `expected`.
    pub fn ensure_config(&self, expected: &ModelConfig) -> Result<()> {
        if self.params.config() != expected {
            return Err(Error::CheckpointMismatch(format!(
                "stored config {:?} != expected {:?}",
                self.params.config(),
                expected
            )));
        }
        Ok(())
    }
}

pub fn save(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let params = &checkpoint.params;
    let header = Header {
        stage: checkpoint.stage,
        config: *params.config(),
        tensors: params
            .layout()
            .specs()
            .iter()
            .map(|s| TensorDesc {
                name: s.name.clone(),
                shape: s.shape.clone(),
            })
            .collect(),
        head_classes: checkpoint.head.as_ref().map(|h| h.classes),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::parse(path, e.to_string()))?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
    file.write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    file.write_all(&header_json).map_err(|e| Error::io(path, e))?;
    let mut write_f64s = |values: &[f64]| -> Result<()> {
        let mut bytes = Vec::with_capacity(values.len() * 8);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&bytes).map_err(|e| Error::io(path, e))
    };
    write_f64s(&params.data)?;
    if let Some(head) = &checkpoint.head {
        write_f64s(&head.w)?;
        write_f64s(&head.b)?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::parse(path, "not a checkpoint file (bad magic)"));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|e| Error::io(path, e))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)
        .map_err(|e| Error::io(path, e))?;
    let header: Header =
        serde_json::from_slice(&header_json).map_err(|e| Error::parse(path, e.to_string()))?;

    let mut payload = Vec::new();
    file.read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    if payload.len() % 8 != 0 {
        return Err(Error::parse(path, "truncated parameter payload"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let params = ModelParams::from_data(
        header.config,
        values
            .get(0..crate::model::Layout::build(&header.config).total_len())
            .ok_or_else(|| Error::parse(path, "parameter payload shorter than layout"))?
            .to_vec(),
    )?;
    // Cross-check the stored tensor table against the rebuilt layout.
    let layout = params.layout();
    if header.tensors.len() != layout.specs().len()
        || header
            .tensors
            .iter()
            .zip(layout.specs().iter())
            .any(|(a, b)| a.name != b.name || a.shape != b.shape)
    {
        return Err(Error::CheckpointMismatch(
            "stored tensor table does not match the layout for the stored config".into(),
        ));
    }
    let head = match header.head_classes {
        None => None,
        Some(classes) => {
            let d_enc = header.config.d_enc;
            let expected = params.len() + d_enc * classes + classes;
            if values.len() != expected {
                return Err(Error::parse(
                    path,
                    format!("payload has {} values, expected {expected}", values.len()),
                ));
            }
            let w = values[params.len()..params.len() + d_enc * classes].to_vec();
            let b = values[params.len() + d_enc * classes..].to_vec();
            Some(HeadParams { w, b, classes })
        }
    };
    if head.is_none() && values.len() != params.len() {
        return Err(Error::parse(
            path,
            format!(
                "payload has {} values, layout expects {}",
                values.len(),
                params.len()
            ),
        ));
    }
    Ok(Checkpoint {
        stage: header.stage,
        params,
        head,
    })
}

/// Load a checkpoint or report which subcommand would produce it.
pub fn load_required(path: &Path, produced_by: &str) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            produced_by: produced_by.to_string(),
        });
    }
    load(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = ModelParams::init(ModelConfig::tiny(), 42).unwrap();
        let ckpt = Checkpoint::new(Stage::Stage1, params);
        save(&path, &ckpt).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.stage, Stage::Stage1);
        assert!(loaded.params.bits_equal(&ckpt.params));
        assert!(loaded.head.is_none());
    }

    #[test]
    fn roundtrip_with_head() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("classifier.ckpt");
        let params = ModelParams::init(ModelConfig::tiny(), 1).unwrap();
        let head = HeadParams {
            w: (0..64 * 2).map(|i| i as f64 * 0.25).collect(),
            b: vec![0.5, -0.5],
            classes: 2,
        };
        let ckpt = Checkpoint {
            stage: Stage::Finetuned,
            params,
            head: Some(head.clone()),
        };
        save(&path, &ckpt).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.stage, Stage::Finetuned);
        assert_eq!(loaded.head.as_ref().unwrap(), &head);
    }

    #[test]
    fn config_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = ModelParams::init(ModelConfig::tiny(), 2).unwrap();
        save(&path, &Checkpoint::new(Stage::Stage1, params)).unwrap();
        let loaded = load(&path).unwrap();
        let mut other = ModelConfig::tiny();
        other.d_enc = 128;
        let err = loaded.ensure_config(&other).unwrap_err();
        assert!(matches!(err, Error::CheckpointMismatch(_)));
    }

    #[test]
    fn missing_artifact_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_required(&dir.path().join("m1.ckpt"), "pretrain").unwrap_err();
        assert!(err.to_string().contains("pretrain"), "{err}");
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(load(&path).is_err());
    }
}
