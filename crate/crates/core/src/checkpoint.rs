//! Checkpoint files: a JSON header followed by a raw little-endian f64
//! payload holding all parameters and optimizer state. Round-trips are
//! bit-exact, so resumed training matches an uninterrupted run.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ModelState, TrainConfig};

const MAGIC: &[u8; 8] = b"MRCKPT\x00\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: TrainConfig,
    epoch: usize,
    num_params: usize,
    adam_t: u64,
    /// Total f64 count of the payload: params + adam m + adam v.
    payload_len: usize,
}

fn push_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize the model, optimizer state and config snapshot.
pub fn save(path: &Path, state: &ModelState, cfg: &TrainConfig) -> Result<()> {
    let mut params = Vec::with_capacity(state.num_params());
    state.write_params(&mut params);
    let header = Header {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        epoch: state.epoch,
        num_params: params.len(),
        adam_t: state.adam.t,
        payload_len: params.len() + state.adam.m.len() + state.adam.v.len(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(16 + header_json.len() + header.payload_len * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    push_f64s(&mut buf, &params);
    push_f64s(&mut buf, &state.adam.m);
    push_f64s(&mut buf, &state.adam.v);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Load a checkpoint; rebuilds the model from the stored config snapshot.
/// Returns the state and the training config it was saved with.
pub fn load(path: &Path) -> Result<(ModelState, TrainConfig)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let fail = |message: String| Error::FileFormat {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint file (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + hlen {
        return Err(fail("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])
        .map_err(|e| fail(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(fail(format!(
            "unsupported format version {} (expected {})",
            header.format_version, FORMAT_VERSION
        )));
    }
    let payload = &bytes[16 + hlen..];
    if payload.len() != header.payload_len * 8 {
        return Err(fail(format!(
            "payload holds {} bytes, header promises {}",
            payload.len(),
            header.payload_len * 8
        )));
    }
    let vals: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut state = ModelState::init(&header.config);
    if state.num_params() != header.num_params
        || header.payload_len != 3 * header.num_params
    {
        return Err(fail(format!(
            "parameter count mismatch: config builds {}, file stores {}",
            state.num_params(),
            header.num_params
        )));
    }
    let n = header.num_params;
    state.read_params(&mut vals[..n].iter().copied());
    state.adam.m.copy_from_slice(&vals[n..2 * n]);
    state.adam.v.copy_from_slice(&vals[2 * n..3 * n]);
    state.adam.t = header.adam_t;
    state.epoch = header.epoch;
    Ok((state, header.config))
}
