//! Binary portable pixmaps (P6, maxval 255).
//!
//! Pixel values map as `round((x + 1)·127.5)` clamped to `[0, 255]`;
//! decoding uses `p / 127.5 − 1`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub fn to_byte(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn from_byte(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

/// Encodes a `3×H×W` tensor.
pub fn encode_image(x: &Tensor) -> Result<Vec<u8>> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::Shape(format!("expected C×H×W, got {:?}", x.shape())));
    };
    if c != 3 {
        return Err(Error::Shape(format!("pixmaps need 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..3 {
            out.push(to_byte(x.data()[ch * plane + p]));
        }
    }
    Ok(out)
}

fn header_token<'a>(buf: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    loop {
        match buf.get(*pos) {
            Some(b'#') => {
                while buf.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Format("truncated pixmap header".into())),
        }
    }
    let start = *pos;
    while buf.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    std::str::from_utf8(&buf[start..*pos]).map_err(|_| Error::Format("non-ASCII pixmap header".into()))
}

pub fn decode_image(buf: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    if header_token(buf, &mut pos)? != "P6" {
        return Err(Error::Format("not a binary pixmap (P6)".into()));
    }
    let mut dim = || -> Result<usize> {
        header_token(buf, &mut pos)?
            .parse::<usize>()
            .map_err(|_| Error::Format("malformed pixmap header".into()))
    };
    let (w, h, maxval) = (dim()?, dim()?, dim()?);
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format("empty pixmap".into()));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let plane = w * h;
    let raster = buf
        .get(start..)
        .filter(|r| r.len() == 3 * plane)
        .ok_or_else(|| Error::Format(format!("expected {} raster bytes", 3 * plane)))?;
    let mut data = vec![0.0; 3 * plane];
    for (p, px) in raster.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * plane + p] = from_byte(px[ch]);
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn write_image(path: impl AsRef<Path>, x: &Tensor) -> Result<()> {
    fs::write(path, encode_image(x)?)?;
    Ok(())
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_image(&fs::read(path)?)
}
