//! Named-tensor checkpoint container.
//!
//! ```text
//! SEGVG-CKPT v1\n
//! { <name>\n f32\n <rank>\n <e0> <e1> ...\n <numel * 4 bytes, f32 LE, row-major> }*
//! <CRC32 (IEEE) of all payload bytes, u32 LE>
//! ```
//!
//! The record list ends where exactly four bytes (the checksum) remain.

use std::fs;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &str = "SEGVG-CKPT v1";

pub fn encode(tensors: &[(&str, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut crc = crc32fast::Hasher::new();
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    for (name, t) in tensors {
        if name.is_empty() || name.contains('\n') {
            return Err(Error::Checkpoint(format!("invalid tensor name {name:?}")));
        }
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(b"\nf32\n");
        out.extend_from_slice(format!("{}\n", t.rank()).as_bytes());
        let extents: Vec<String> = t.shape().iter().map(|e| e.to_string()).collect();
        out.extend_from_slice(extents.join(" ").as_bytes());
        out.push(b'\n');
        let start = out.len();
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        crc.update(&out[start..]);
    }
    out.extend_from_slice(&crc.finalize().to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.buf[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("truncated header line".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Checkpoint("non-UTF-8 header".into()))
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated payload".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.line()? != MAGIC {
        return Err(Error::Checkpoint("bad magic line".into()));
    }
    let mut crc = crc32fast::Hasher::new();
    let mut out = Vec::new();
    while r.remaining() > 4 {
        let name = r.line()?.to_string();
        let dtype = r.line()?;
        if dtype != "f32" {
            return Err(Error::Checkpoint(format!("{name}: unsupported dtype {dtype}")));
        }
        let rank: usize = r
            .line()?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("{name}: bad rank")))?;
        let shape: Vec<usize> = r
            .line()?
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Checkpoint(format!("{name}: bad extents")))?;
        if shape.len() != rank {
            return Err(Error::Checkpoint(format!("{name}: rank {rank} but {} extents", shape.len())));
        }
        let numel: usize = shape.iter().product();
        let payload = r.bytes(numel * 4)?;
        crc.update(payload);
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((
            name.clone(),
            Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?,
        ));
    }
    let tail = r.bytes(4)?;
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc.finalize();
    if stored != computed {
        return Err(Error::Checkpoint(format!(
            "CRC mismatch: stored {stored:08x}, computed {computed:08x}"
        )));
    }
    Ok(out)
}

pub fn save_store(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    let named: Vec<(&str, &Tensor<f32>)> = store
        .entries()
        .iter()
        .map(|e| (e.name.as_str(), &e.value))
        .collect();
    fs::write(path, encode(&named)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Overwrites every parameter of `store` from the checkpoint, requiring an
/// exact name and shape match.
pub fn load_into(store: &mut ParamStore<f32>, tensors: Vec<(String, Tensor<f32>)>) -> Result<()> {
    if tensors.len() != store.len() {
        let missing = store
            .entries()
            .iter()
            .find(|e| !tensors.iter().any(|(n, _)| n == &e.name))
            .map(|e| e.name.clone());
        return Err(Error::Checkpoint(match missing {
            Some(name) => format!("checkpoint lacks tensor `{name}`"),
            None => format!("checkpoint has {} tensors, model has {}", tensors.len(), store.len()),
        }));
    }
    for (name, t) in tensors {
        let id = store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
        let expected = store.get(id).shape().to_vec();
        if expected != t.shape() {
            return Err(Error::CheckpointMismatch {
                name,
                expected,
                found: t.shape().to_vec(),
            });
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}
