//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header, then the tensor
//! payload as little-endian `f32`. The header lists every tensor by name with its shape and
//! element offset into the payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::Mat;

pub const MAGIC: &[u8; 8] = b"AFCKPT\x00\x01";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// Writes `path` atomically: the bytes go to a sibling temp file which is then renamed.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn encode(meta: Value, tensors: &[(String, &Mat<f32>)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, m) in tensors {
        entries.push(TensorEntry { name: name.clone(), shape: [m.rows(), m.cols()], offset });
        offset += m.data().len();
    }
    let header = serde_json::to_vec(&Header { meta, tensors: entries })?;
    let mut out = Vec::with_capacity(16 + header.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, m) in tensors {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub struct Decoded {
    pub meta: Value,
    pub tensors: BTreeMap<String, Mat<f32>>,
}

pub fn decode(bytes: &[u8]) -> Result<Decoded> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let payload = &bytes[16 + hlen..];
    let mut tensors = BTreeMap::new();
    for e in header.tensors {
        let n = e.shape[0] * e.shape[1];
        let raw = payload.get(4 * e.offset..4 * (e.offset + n)).ok_or_else(|| bad(&format!("tensor {} runs past the payload", e.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if tensors.insert(e.name.clone(), Mat::from_vec(e.shape[0], e.shape[1], data)).is_some() {
            return Err(bad(&format!("duplicate tensor {}", e.name)));
        }
    }
    Ok(Decoded { meta: header.meta, tensors })
}

pub fn read(path: &Path) -> Result<Decoded> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Copies tensors named `prefix.*` into `target`, checking that names and shapes match exactly.
pub fn restore<P: Params<f32>>(target: &mut P, prefix: &str, tensors: &mut BTreeMap<String, Mat<f32>>) -> Result<()> {
    let mut err = None;
    target.visit_mut(prefix, &mut |name, m| {
        if err.is_some() {
            return;
        }
        match tensors.remove(&name) {
            Some(t) if t.shape() == m.shape() => *m = t,
            Some(t) => err = Some(Error::ShapeMismatch(format!("{name}: checkpoint {:?}, model {:?}", t.shape(), m.shape()))),
            None => err = Some(Error::Checkpoint(format!("missing tensor {name}"))),
        }
    });
    err.map_or(Ok(()), Err)
}
