//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "DRSM"
//! version  u32      currently 1
//! hash     u64      FNV-1a-64 of the metadata bytes
//! meta_len u32
//! metadata meta_len bytes of UTF-8 (JSON: variant, architecture, training info)
//! records  until EOF, each:
//!   name_len u32, name (UTF-8), ndims u32, dims u32 x ndims,
//!   payload: f32 (little-endian) x product(dims)
//! ```
//!
//! Round-trips are bit-exact: writing a loaded checkpoint reproduces the
//! original file byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::CheckpointError;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DRSM";
pub const VERSION: u32 = 1;

/// 64-bit FNV-1a; used for checkpoint config hashes and dataset manifests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// In-memory checkpoint: a metadata string plus named parameter tensors in a
/// fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub params: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn config_hash(&self) -> u64 {
        fnv1a64(self.metadata.as_bytes())
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&ckpt.config_hash().to_le_bytes())?;
    let meta = ckpt.metadata.as_bytes();
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta)?;
    for (name, tensor) in &ckpt.params {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(tensor.dims().len() as u32).to_le_bytes())?;
        for &d in tensor.dims() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let stored_hash = read_u64(&mut r, "config hash")?;
    let meta_len = read_u32(&mut r, "metadata length")? as usize;
    let mut meta = vec![0u8; meta_len];
    read_exact(&mut r, &mut meta, "metadata")?;
    let metadata = String::from_utf8(meta)
        .map_err(|e| CheckpointError::Malformed(format!("metadata is not UTF-8: {e}")))?;
    let computed = fnv1a64(metadata.as_bytes());
    if computed != stored_hash {
        return Err(CheckpointError::HashMismatch {
            stored: stored_hash,
            computed,
        });
    }
    let mut params = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read(&mut len_buf)? {
            0 => break,
            4 => {}
            n => {
                // A partial length prefix means the file was cut mid-record.
                let mut rest = [0u8; 4];
                let extra = r.read(&mut rest[..4 - n])?;
                if n + extra < 4 {
                    return Err(CheckpointError::Truncated(
                        "parameter record name length".to_string(),
                    ));
                }
                len_buf[n..].copy_from_slice(&rest[..4 - n]);
            }
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name, "parameter name")?;
        let name = String::from_utf8(name)
            .map_err(|e| CheckpointError::Malformed(format!("parameter name: {e}")))?;
        let ndims = read_u32(&mut r, "parameter rank")? as usize;
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(read_u32(&mut r, "parameter dims")? as usize);
        }
        let numel: usize = dims.iter().product();
        let mut payload = vec![0u8; numel * 4];
        read_exact(&mut r, &mut payload, "parameter payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(dims, data)
            .map_err(|e| CheckpointError::Malformed(format!("parameter `{name}`: {e}")))?;
        params.push((name, tensor));
    }
    Ok(Checkpoint { metadata, params })
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated(what.to_string())
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, what)?;
    Ok(u64::from_le_bytes(buf))
}
