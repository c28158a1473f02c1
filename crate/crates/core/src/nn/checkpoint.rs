//! Versioned binary checkpoint container: a JSON header describing named
//! f64 tensors and arbitrary model metadata, followed by raw little-endian
//! tensor data in header order.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DDETCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

/// In-memory checkpoint: a kind tag, free-form JSON metadata (config,
/// config hash, seed), and named tensors.
#[derive(Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header = Header {
        kind: ckpt.kind.clone(),
        meta: ckpt.meta.clone(),
        tensors: ckpt
            .tensors
            .iter()
            .map(|(name, arr)| TensorInfo { name: name.clone(), shape: arr.shape().to_vec() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::data(format!("checkpoint header encode: {e}")))?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let io_err = |e| Error::io(path.display().to_string(), e);
    f.write_all(MAGIC).map_err(io_err)?;
    f.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes()).map_err(io_err)?;
    f.write_all(&header_bytes).map_err(io_err)?;
    let mut buf = Vec::new();
    for (_, arr) in &ckpt.tensors {
        for v in arr.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    f.write_all(&buf).map_err(io_err)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::data(format!("{}: not a checkpoint file", path.display())));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf).map_err(io_err)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(Error::data(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let mut u64buf = [0u8; 8];
    f.read_exact(&mut u64buf).map_err(io_err)?;
    let header_len = u64::from_le_bytes(u64buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes).map_err(io_err)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::data(format!("checkpoint header decode: {e}")))?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for info in header.tensors {
        let n: usize = info.shape.iter().product();
        let mut data = vec![0u8; n * 8];
        f.read_exact(&mut data).map_err(io_err)?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&info.shape), values)
            .map_err(|e| Error::data(format!("checkpoint tensor '{}': {e}", info.name)))?;
        tensors.push((info.name, arr));
    }
    Ok(Checkpoint { kind: header.kind, meta: header.meta, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let ckpt = Checkpoint {
            kind: "stage1".to_string(),
            meta: serde_json::json!({"seed": 7, "config_hash": "abc"}),
            tensors: vec![
                ("a.w".to_string(), ArrayD::from_shape_fn(IxDyn(&[2, 3]), |i| (i[0] * 3 + i[1]) as f64)),
                ("a.b".to_string(), ArrayD::from_elem(IxDyn(&[3]), -0.5)),
            ],
        };
        save(&p, &ckpt).unwrap();
        let loaded = load(&p).unwrap();
        assert_eq!(loaded.kind, "stage1");
        assert_eq!(loaded.meta["seed"], 7);
        assert_eq!(loaded.tensors.len(), 2);
        assert_eq!(loaded.tensors[0].1, ckpt.tensors[0].1);
        assert_eq!(loaded.tensors[1].1, ckpt.tensors[1].1);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.ckpt");
        std::fs::write(&p, b"not a checkpoint at all").unwrap();
        assert!(load(&p).is_err());
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = Checkpoint {
            kind: "stage2".to_string(),
            meta: serde_json::json!({"x": 1}),
            tensors: vec![("t".to_string(), ArrayD::from_elem(IxDyn(&[4]), 1.25))],
        };
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save(&p1, &ckpt).unwrap();
        save(&p2, &ckpt).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
