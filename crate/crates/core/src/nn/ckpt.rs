//! CKPT1 checkpoint format: ASCII magic "CKPT1", u32 LE JSON length, a JSON
//! architecture description, then all parameters as little-endian f32 in
//! declaration order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

const CKPT_MAGIC: &[u8; 5] = b"CKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkptTensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkptHeader {
    /// Network family and hyperparameters, as serialized `NetConfig`.
    pub arch: serde_json::Value,
    pub scale: usize,
    pub seed: u64,
    pub tensors: Vec<CkptTensorMeta>,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    header: &CkptHeader,
    params: &[Tensor<f32>],
) -> Result<()> {
    let path = path.as_ref();
    if header.tensors.len() != params.len() {
        return Err(Error::invalid(format!(
            "checkpoint header lists {} tensors but {} were given",
            header.tensors.len(),
            params.len()
        )));
    }
    for (meta, p) in header.tensors.iter().zip(params) {
        if meta.shape != p.shape() {
            return Err(Error::invalid(format!(
                "tensor {} shape {:?} does not match header {:?}",
                meta.name,
                p.shape(),
                meta.shape
            )));
        }
    }
    let header_bytes = serde_json::to_vec(header).expect("header serialization");
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let put = |w: &mut BufWriter<File>, b: &[u8]| w.write_all(b).map_err(|e| Error::io(path, e));
    put(&mut w, CKPT_MAGIC)?;
    put(&mut w, &(header_bytes.len() as u32).to_le_bytes())?;
    put(&mut w, &header_bytes)?;
    for p in params {
        for v in p.to_vec() {
            put(&mut w, &v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CkptHeader, Vec<Vec<f32>>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(path, 0, "truncated before magic"))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected \"CKPT1\""));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)
        .map_err(|_| Error::format(path, 5, "truncated header length"))?;
    let hlen = u32::from_le_bytes(len) as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes)
        .map_err(|_| Error::format(path, 9, "truncated JSON header"))?;
    let header: CkptHeader = serde_json::from_slice(&hbytes)
        .map_err(|e| Error::format(path, 9, format!("bad JSON header: {e}")))?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut offset = 9 + hlen as u64;
    for meta in &header.tensors {
        let n: usize = meta.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf).map_err(|_| {
                Error::format(path, offset, format!("truncated parameters for {}", meta.name))
            })?;
            data.push(f32::from_le_bytes(buf));
            offset += 4;
        }
        tensors.push(data);
    }
    Ok((header, tensors))
}
