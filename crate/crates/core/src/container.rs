//! Binary container shared by dataset files and checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes
//! version    u32
//! header_len u64, then header_len bytes of JSON
//! count      u64, then count f64 values
//! sha256     32 bytes over everything above
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cvnn::{ModelKind, NetConfig, NetParams};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const DATASET_MAGIC: [u8; 8] = *b"CVFLDATA";
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"CVFLCKPT";

pub fn encode<H: Serialize>(magic: [u8; 8], header: &H, payload: &[f64]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + 4 + 16 + json.len() + 8 * payload.len() + 32);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated file".into()))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn u64_at(bytes: &[u8], at: &mut usize) -> Result<u64> {
    Ok(u64::from_le_bytes(take(bytes, at, 8)?.try_into().expect("8 bytes")))
}

pub fn decode<H: DeserializeOwned>(magic: [u8; 8], bytes: &[u8]) -> Result<(H, Vec<f64>)> {
    if bytes.len() < 8 + 4 + 8 + 8 + 32 {
        return Err(Error::Format("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format("checksum mismatch".into()));
    }
    let mut at = 0;
    let got = take(body, &mut at, 8)?;
    if got != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(got)
        )));
    }
    let version = u32::from_le_bytes(take(body, &mut at, 4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let hlen = u64_at(body, &mut at)? as usize;
    let header =
        serde_json::from_slice(take(body, &mut at, hlen)?).map_err(|e| Error::Format(format!("header: {e}")))?;
    let count = u64_at(body, &mut at)? as usize;
    let raw = take(
        body,
        &mut at,
        count
            .checked_mul(8)
            .ok_or_else(|| Error::Format("payload size overflow".into()))?,
    )?;
    if at != body.len() {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let payload = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, payload))
}

/// Writes through a temporary file in the target directory and renames it
/// into place. Missing parent directories are created.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub model: ModelKind,
    pub net: NetConfig,
    /// Free-form provenance such as the iteration count.
    #[serde(default)]
    pub note: serde_json::Value,
}

pub fn encode_checkpoint(params: &NetParams, net: &NetConfig, note: serde_json::Value) -> Result<Vec<u8>> {
    params.check_layout(net)?;
    let header = CheckpointHeader {
        schema_version: FORMAT_VERSION,
        model: params.kind,
        net: net.clone(),
        note,
    };
    let mut payload = params.real_part();
    payload.extend(params.imag_part());
    encode(CHECKPOINT_MAGIC, &header, &payload)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, NetParams)> {
    let (header, payload): (CheckpointHeader, Vec<f64>) = decode(CHECKPOINT_MAGIC, bytes)?;
    header.net.validate()?;
    let template = NetParams::zeros(&header.net, header.model)?;
    let split = template.real_part().len();
    if payload.len() != split + template.imag_part().len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} values, the configured network needs {}",
            payload.len(),
            split + template.imag_part().len()
        )));
    }
    let params = template.recombine(&payload[..split], &payload[split..])?;
    Ok((header, params))
}

pub fn save_checkpoint(path: &Path, params: &NetParams, net: &NetConfig, note: serde_json::Value) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params, net, note)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, NetParams)> {
    decode_checkpoint(&fs::read(path)?)
}
