//! Raw planar float maps: magic "STFR", u32 width/height/channels, then
//! channel-major f32 planes. Round-trips bit-exactly, so it carries
//! intermediate artifacts that PPM quantization would corrupt.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{num, Scalar};
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"STFR";

fn malformed(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        format: "stfr",
        offset,
        msg: msg.into(),
    }
}

pub fn write_stfr<T: Scalar>(path: impl AsRef<Path>, map: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let s = map.shape();
    if s.n != 1 {
        return Err(Error::invalid("write_stfr", format!("expected batch 1, got {s}")));
    }
    let mut out = Vec::with_capacity(16 + s.numel() * 4);
    out.extend_from_slice(MAGIC);
    for dim in [s.w, s.h, s.c] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &v in map.data() {
        out.extend_from_slice(&(v.to_f64().unwrap_or(0.0) as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_stfr<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(malformed(path, 0, "missing STFR magic"));
    }
    if buf.len() < 16 {
        return Err(malformed(path, buf.len(), "header truncated"));
    }
    let dim = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (w, h, c) = (dim(0), dim(1), dim(2));
    if w == 0 || h == 0 || c == 0 {
        return Err(malformed(path, 4, "zero dimension"));
    }
    let need = c * h * w * 4;
    let payload = &buf[16..];
    if payload.len() != need {
        return Err(malformed(
            path,
            buf.len(),
            format!("payload is {} bytes, header implies {need}", payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| num::<T>(f32::from_le_bytes(b.try_into().unwrap()) as f64))
        .collect();
    Tensor::new(Shape::new(1, c, h, w), data)
}
