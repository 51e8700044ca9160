//! Binary PPM (P6), maxval 255. Images map to tensors of shape (1,3,h,w)
//! with values in [0,1]; writing rounds to the nearest 8-bit level.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{num, Scalar};
use crate::tensor::{Shape, Tensor};

fn malformed(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        format: "ppm",
        offset,
        msg: msg.into(),
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    /// Skip whitespace and '#' comments (which run to end of line).
    fn skip_separators(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn read_uint(&mut self, path: &Path, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(malformed(path, start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed(path, start, format!("bad {what}")))
    }
}

pub fn read_ppm<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 2 || &buf[..2] != b"P6" {
        return Err(malformed(path, 0, "missing P6 magic"));
    }
    let mut cur = Cursor { buf: &buf, pos: 2 };
    let w = cur.read_uint(path, "width")?;
    let h = cur.read_uint(path, "height")?;
    let maxval = cur.read_uint(path, "maxval")?;
    if maxval != 255 {
        return Err(malformed(path, cur.pos, format!("maxval {maxval}, only 255 supported")));
    }
    if cur.pos >= buf.len() || !buf[cur.pos].is_ascii_whitespace() {
        return Err(malformed(path, cur.pos, "expected whitespace after maxval"));
    }
    cur.pos += 1;
    if w == 0 || h == 0 {
        return Err(malformed(path, 2, "zero dimension"));
    }
    let need = w * h * 3;
    let pixels = &buf[cur.pos..];
    if pixels.len() < need {
        return Err(malformed(
            path,
            buf.len(),
            format!("pixel data truncated: need {need} bytes, have {}", pixels.len()),
        ));
    }
    let mut data = vec![T::zero(); need];
    let plane = w * h;
    for (i, px) in pixels[..need].chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = num::<T>(px[ch] as f64 / 255.0);
        }
    }
    Tensor::new(Shape::new(1, 3, h, w), data)
}

pub fn write_ppm<T: Scalar>(path: impl AsRef<Path>, img: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let s = img.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::invalid("write_ppm", format!("expected shape (1,3,h,w), got {s}")));
    }
    let plane = s.h * s.w;
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.reserve(plane * 3);
    let data = img.data();
    for i in 0..plane {
        for ch in 0..3 {
            let v = data[ch * plane + i].to_f64().unwrap_or(0.0);
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
