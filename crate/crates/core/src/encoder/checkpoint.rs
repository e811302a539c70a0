//! Binary checkpoint: `LCTXCKPT`, a little-endian u64 header length, a JSON
//! header describing the config and every array, then the raw f64 data.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::numeric::{DiffArray, ParamStore};

const MAGIC: &[u8; 8] = b"LCTXCKPT";
const FORMAT: &str = "longctx-encoder";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: EncoderConfig,
    arrays: Vec<ArrayEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn to_bytes(model: &EncoderModel) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    let mut offset = 0;
    for (name, arr) in model.params().iter() {
        arrays.push(ArrayEntry {
            name: name.to_string(),
            shape: arr.shape().to_vec(),
            offset,
            len: arr.len(),
        });
        offset += arr.len();
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config().clone(),
        arrays,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, arr) in model.params().iter() {
        for v in arr.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<EncoderModel> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| bad(format!("unreadable header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(bad(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let data = &bytes[data_start..];
    let total: usize = header.arrays.iter().map(|a| a.len).sum();
    if data.len() != total * 8 {
        return Err(bad(format!(
            "data section holds {} bytes, header describes {}",
            data.len(),
            total * 8
        )));
    }
    let mut store = ParamStore::new();
    for a in &header.arrays {
        if a.offset + a.len > total {
            return Err(bad(format!("array `{}` runs past the data section", a.name)));
        }
        let vals = data[a.offset * 8..(a.offset + a.len) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let arr = DiffArray::new(&a.shape, vals).map_err(|e| bad(format!("array `{}`: {e}", a.name)))?;
        store.insert(a.name.clone(), arr);
    }
    EncoderModel::from_params(header.config, store)
}

pub fn save(model: &EncoderModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<EncoderModel> {
    from_bytes(&fs::read(path)?)
}
