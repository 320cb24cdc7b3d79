//! Binary PPM/PGM images and atomic file output.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format {
                offset: start as u64,
                msg: format!("{what} out of range"),
            })
    }
}

/// Parses a binary 8-bit PPM (`P6`) into a `(1, 3, h, w)` tensor in [0, 1].
pub fn ppm_decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut hd = Header { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(hd.err("not a binary PPM (expected magic P6)"));
    }
    hd.pos = 2;
    let w = hd.number("width")?;
    let h = hd.number("height")?;
    let maxval = hd.number("maxval")?;
    if maxval > 255 {
        return Err(Error::Unsupported(format!("16-bit PPM (maxval {maxval})")));
    }
    if maxval != 255 {
        return Err(Error::Unsupported(format!(
            "PPM maxval {maxval}, only 255 is supported"
        )));
    }
    if w == 0 || h == 0 {
        return Err(hd.err("image has zero size"));
    }
    match bytes.get(hd.pos) {
        Some(b' ' | b'\t' | b'\n' | b'\r') => hd.pos += 1,
        _ => return Err(hd.err("expected a single whitespace before pixel data")),
    }
    let need = w * h * 3;
    let data = &bytes[hd.pos..];
    if data.len() < need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated pixel data: need {need} bytes, have {}", data.len()),
        });
    }
    let inv = 1.0 / 255.0;
    Ok(Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        T::of(data[(y * w + x) * 3 + c] as f64 * inv)
    }))
}

fn to_byte<T: Scalar>(v: T) -> u8 {
    (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Encodes sample 0 of a 3-channel tensor as binary PPM, clamping to [0, 1].
pub fn ppm_encode<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.c != 3 || s.n < 1 {
        return Err(Error::Shape(format!("PPM needs a 3-channel image, got {:?}", s)));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.reserve(s.h * s.w * 3);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                out.push(to_byte(img.at(0, c, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn ppm_read<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ppm_decode(&bytes).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

pub fn ppm_write<T: Scalar>(path: impl AsRef<Path>, img: &Tensor<T>) -> Result<()> {
    write_atomic(path, &ppm_encode(img)?)
}

/// Grayscale binary PGM from row-major values in [0, 1].
pub fn pgm_encode(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}
