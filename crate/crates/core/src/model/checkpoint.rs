//! Binary checkpoints.
//!
//! Layout: magic `QCP1`, u32 LE format version, u32 LE config length, the
//! model config as JSON, then every parameter as f32 LE in
//! [`ModelParams::flatten`] order. Parameters are stored exactly as held in
//! memory, so a load reproduces forward passes bit for bit.

use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelError, ModelParams};

const MAGIC: &[u8; 4] = b"QCP1";
const VERSION: u32 = 1;

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let io_err = |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    };
    let cfg_json = serde_json::to_vec(params.config()).map_err(|e| ModelError::Format {
        path: path.display().to_string(),
        reason: format!("config serialization failed: {e}"),
    })?;
    let flat = params.flatten();
    let mut buf = Vec::with_capacity(12 + cfg_json.len() + flat.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg_json);
    for v in flat {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let fail = |reason: String| ModelError::Format {
        path: path.display().to_string(),
        reason,
    };
    let buf = fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if buf.len() < 12 {
        return Err(fail("file shorter than header".into()));
    }
    if &buf[0..4] != MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let cfg_len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let data_start = 12 + cfg_len;
    if buf.len() < data_start {
        return Err(fail("truncated config block".into()));
    }
    let cfg: ModelConfig = serde_json::from_slice(&buf[12..data_start])
        .map_err(|e| fail(format!("config parse failed: {e}")))?;
    cfg.validate().map_err(|e| fail(e.to_string()))?;

    let payload = &buf[data_start..];
    if payload.len() % 4 != 0 {
        return Err(fail("parameter payload not a multiple of 4 bytes".into()));
    }
    let flat: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ModelParams::from_flat(&cfg, &flat).map_err(|e| match e {
        ModelError::ParamCount { expected, got } => {
            fail(format!("expected {expected} parameters, found {got}"))
        }
        other => other,
    })
}
