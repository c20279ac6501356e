//! Binary portable pixmap (P6) and graymap (P5) files, 8-bit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        text.parse().map_err(|_| Error::Parse {
            offset: start,
            msg: format!("{what} out of range"),
        })
    }
}

/// Decodes a P5 or P6 file into `[1,H,W]` or `[3,H,W]` values in `[0,1]`.
pub fn decode_pnm<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut c = Cursor { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(c.err("expected magic P5 or P6")),
    };
    c.pos = 2;
    let w = c.number("width")?;
    let h = c.number("height")?;
    let maxval = c.number("maximum value")?;
    if w == 0 || h == 0 {
        return Err(c.err("image extents must be positive"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(c.err(format!("only 8-bit images are supported (maximum value {maxval})")));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(c.err("expected a single whitespace byte before the pixel data")),
    }
    let need = channels * h * w;
    let payload = &bytes[c.pos..];
    if payload.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("truncated payload: expected {need} bytes, found {}", payload.len()),
        });
    }
    let maxval = maxval as f64;
    let mut data = vec![T::zero(); need];
    // Interleaved RGB on disk, planar channels in memory.
    for (i, &v) in payload[..need].iter().enumerate() {
        let (pix, ch) = (i / channels, i % channels);
        data[ch * h * w + pix] = T::lit(v as f64 / maxval);
    }
    Tensor::new(&[channels, h, w], data)
}

fn quantize<T: Real>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode<T: Real>(t: &Tensor<T>, magic: &str, channels: usize) -> Result<Vec<u8>> {
    let (c, h, w) = t.chw("encode_pnm")?;
    if c != channels {
        return Err(Error::dim("encode_pnm", "channels", channels, c));
    }
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    out.reserve(c * plane);
    let d = t.data();
    for pix in 0..plane {
        for ch in 0..c {
            out.push(quantize(d[ch * plane + pix]));
        }
    }
    Ok(out)
}

/// Encodes a `[1,H,W]` map in `[0,1]` as P5 with `round(255 v)`.
pub fn encode_pgm<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    encode(t, "P5", 1)
}

/// Encodes a `[3,H,W]` image in `[0,1]` as P6.
pub fn encode_ppm<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    encode(t, "P6", 3)
}

pub fn load_image<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Parse { offset, msg } => Error::Parse {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

fn write(path: &Path, bytes: Vec<u8>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_image<T: Real>(path: impl AsRef<Path>, image: &Tensor<T>) -> Result<()> {
    write(path.as_ref(), encode_ppm(image)?)
}

/// Writes a `[1,H,W]` map in `[0,1]` as 8-bit grayscale.
pub fn save_gray<T: Real>(path: impl AsRef<Path>, map: &Tensor<T>) -> Result<()> {
    write(path.as_ref(), encode_pgm(map)?)
}

/// Writes a binary `[1,H,W]` mask as `{0,255}` grayscale.
pub fn save_mask<T: Real>(path: impl AsRef<Path>, mask: &Tensor<T>) -> Result<()> {
    if let Some(v) = mask.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::Domain {
            op: "save_mask",
            msg: format!("mask must be binary, found {v}"),
        });
    }
    save_gray(path, mask)
}
