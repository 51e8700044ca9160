//! Checkpoints: "STCK" magic, format version, then named tensors in a fixed
//! order, closed by an FNV-1a64 checksum of everything before it. Entry
//! order is preserved so saves are reproducible byte for byte.

use std::fs;
use std::path::Path;

use super::{fnv1a64, fnv1a64_update, FNV_OFFSET};
use crate::error::{Error, Result};
use crate::scalar::{num, Scalar};
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"STCK";
const VERSION: u32 = 1;

fn malformed(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        format: "checkpoint",
        offset,
        msg: msg.into(),
    }
}

/// Dims are stored as (n,c,h,w) with leading 1s dropped, so a rank printed
/// here survives a round trip even though tensors are always 4-d in memory.
fn dims_of(s: Shape) -> Vec<u32> {
    let full = [s.n as u32, s.c as u32, s.h as u32, s.w as u32];
    let skip = full.iter().take_while(|&&d| d == 1).count().min(3);
    full[skip..].to_vec()
}

fn shape_of(dims: &[u32]) -> Option<Shape> {
    if dims.is_empty() || dims.len() > 4 {
        return None;
    }
    let mut full = [1usize; 4];
    for (slot, &d) in full[4 - dims.len()..].iter_mut().zip(dims) {
        *slot = d as usize;
    }
    Some(Shape::new(full[0], full[1], full[2], full[3]))
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    entries: &[(String, Tensor<T>)],
) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let dims = dims_of(tensor.shape());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in &dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v.to_f64().unwrap_or(0.0) as f32).to_le_bytes());
        }
    }
    let checksum = fnv1a64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<T>)>> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(malformed(path, 0, "missing STCK magic"));
    }
    if buf.len() < 20 {
        return Err(malformed(path, buf.len(), "file truncated"));
    }
    let body = &buf[..buf.len() - 8];
    let stored = u64::from_le_bytes(buf[buf.len() - 8..].try_into().unwrap());
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }

    let mut pos = 4;
    let take_u32 = |pos: &mut usize| -> Result<u32> {
        if *pos + 4 > body.len() {
            return Err(malformed(path, *pos, "truncated u32"));
        }
        let v = u32::from_le_bytes(body[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };

    let version = take_u32(&mut pos)?;
    if version != VERSION {
        return Err(malformed(path, 4, format!("unsupported version {version}")));
    }
    let count = take_u32(&mut pos)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = take_u32(&mut pos)? as usize;
        if pos + name_len > body.len() {
            return Err(malformed(path, pos, "truncated name"));
        }
        let name = std::str::from_utf8(&body[pos..pos + name_len])
            .map_err(|_| malformed(path, pos, "name is not UTF-8"))?
            .to_string();
        pos += name_len;
        let rank = take_u32(&mut pos)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(take_u32(&mut pos)?);
        }
        let shape = shape_of(&dims)
            .ok_or_else(|| malformed(path, pos, format!("bad rank {rank} for {name}")))?;
        let numel = shape.numel();
        if pos + numel * 4 > body.len() {
            return Err(malformed(path, pos, format!("truncated payload for {name}")));
        }
        let data: Vec<T> = body[pos..pos + numel * 4]
            .chunks_exact(4)
            .map(|b| num::<T>(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        pos += numel * 4;
        entries.push((name, Tensor::new(shape, data)?));
    }
    if pos != body.len() {
        return Err(malformed(path, pos, "trailing bytes after last entry"));
    }
    Ok(entries)
}

/// Checksum of a tensor list without touching disk; used to fingerprint
/// parameter state in logs.
pub fn state_fingerprint<T: Scalar>(entries: &[(String, Tensor<T>)]) -> u64 {
    let mut h = FNV_OFFSET;
    for (name, t) in entries {
        h = fnv1a64_update(h, name.as_bytes());
        for &v in t.data() {
            h = fnv1a64_update(h, &(v.to_f64().unwrap_or(0.0) as f32).to_le_bytes());
        }
    }
    h
}
