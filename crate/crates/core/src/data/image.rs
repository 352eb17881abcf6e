//! Binary PGM (`P5`, grayscale) and PPM (`P6`, RGB) images.
//!
//! Pixels load as `[C, H, W]` tensors scaled to `[0, 1]`; saving rounds
//! to the nearest 8-bit level.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some(m) => {
            return Err(Error::Format(format!(
                "magic `{}` is not binary PGM (P5) or PPM (P6)",
                String::from_utf8_lossy(m)
            )))
        }
        None => return Err(Error::Format("file too short for a PNM header".into())),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        // whitespace and comments between fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("malformed PNM header near byte {start}")))?;
    }
    // exactly one whitespace byte before the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("missing separator after PNM header".into()));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("unsupported PNM geometry {width}x{height}, maxval {maxval}")));
    }
    Ok(Header {
        channels,
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes)?;
    let bpp = if h.maxval > 255 { 2 } else { 1 };
    let n = h.channels * h.width * h.height;
    let raster = bytes
        .get(h.data_start..h.data_start + n * bpp)
        .ok_or_else(|| Error::Format("PNM raster is truncated".into()))?;
    let hw = h.width * h.height;
    let mut data = vec![0.0; n];
    for i in 0..n {
        let v = if bpp == 2 {
            u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as usize
        } else {
            raster[i] as usize
        };
        // interleaved RGB -> planar
        let (p, c) = (i / h.channels, i % h.channels);
        data[c * hw + p] = v.min(h.maxval) as f64 / h.maxval as f64;
    }
    Tensor::new(&[h.channels, h.height, h.width], data)
}

/// Encodes a 1-channel tensor as P5 or a 3-channel tensor as P6.
pub fn encode_pnm(t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = t.dims3()?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::Format(format!("cannot store {c} channels as PGM/PPM"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let hw = h * w;
    for p in 0..hw {
        for ci in 0..c {
            out.push(quantize(t.data()[ci * hw + p]));
        }
    }
    Ok(out)
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    decode_pnm(&fs::read(path)?)
}

pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode_pnm(t)?)?;
    Ok(())
}
