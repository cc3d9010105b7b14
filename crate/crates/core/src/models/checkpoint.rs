//! Single-file checkpoint container.
//!
//! Byte layout, little-endian throughout:
//!
//! | offset | size | content                                   |
//! |--------|------|-------------------------------------------|
//! | 0      | 8    | magic `CONDRCK1`                          |
//! | 8      | 4    | format version (u32)                      |
//! | 12     | 8    | header length `n` (u64)                   |
//! | 20     | n    | JSON header: config, metadata, tensor index |
//! | 20+n   | ...  | tensor data as f64, in index order        |

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CONDRCK1";
const VERSION: u32 = 1;

/// Training provenance stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    #[serde(default)]
    pub val_psnr: Option<f64>,
    #[serde(default)]
    pub val_ssim: Option<f64>,
    #[serde(default)]
    pub train_loss: Option<f64>,
    /// Scheduler strategy used for λ during training, if any.
    #[serde(default)]
    pub lambda_strategy: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.model.config().hash()
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub(crate) fn encode(model: &Model, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config().clone(),
        meta: meta.clone(),
        tensors: model
            .params()
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + model.params().scalar_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.params().iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |reason: &str| Error::format("checkpoint", reason.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let data_start = 20usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("header extends past end of file"))?;
    let header: Header = serde_json::from_slice(&bytes[20..data_start])?;

    let mut params = ModelParams::default();
    let mut cursor = data_start;
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = cursor + n * 8;
        if end > bytes.len() {
            return Err(bad("tensor data truncated"));
        }
        let data = bytes[cursor..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(entry.name, Tensor::new(entry.shape, data));
        cursor = end;
    }
    if cursor != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    let model = Model::new(header.config, params)?;
    Ok(Checkpoint {
        model,
        meta: header.meta,
    })
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode(model, meta)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid("path", "checkpoint path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
