use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn token(bytes: &[u8], pos: &mut usize) -> Result<(usize, u32)> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while !matches!(bytes.get(*pos), None | Some(b'\n')) {
                    *pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(format_err(start, "expected a decimal header field"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .expect("ascii digits")
        .parse()
        .map(|v| (start, v))
        .map_err(|_| format_err(start, "header field out of range"))
}

/// Decodes a binary PGM (`P5`) or PPM (`P6`) into a `C x H x W` tensor with
/// values in `[0, 1]`. 16-bit samples (maxval above 255) are big-endian.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(format_err(0, "expected a binary PGM (P5) or PPM (P6) header")),
    };
    let mut pos = 2;
    let (_, w) = token(bytes, &mut pos)?;
    let (_, h) = token(bytes, &mut pos)?;
    let (at, maxval) = token(bytes, &mut pos)?;
    if w == 0 || h == 0 {
        return Err(format_err(2, "image has zero size"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(at, format!("invalid maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(pos, "expected whitespace after maxval"));
    }
    pos += 1;
    let (w, h) = (w as usize, h as usize);
    let wide = maxval > 255;
    let need = channels * h * w * if wide { 2 } else { 1 };
    let body = &bytes[pos..];
    if body.len() != need {
        return Err(format_err(
            bytes.len(),
            format!("expected {need} sample bytes, found {}", body.len()),
        ));
    }
    let scale = maxval as f32;
    let samples: Vec<f32> = if wide {
        body.chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / scale)
            .collect()
    } else {
        body.iter().map(|&b| b as f32 / scale).collect()
    };
    if samples.iter().any(|&v| v > 1.0) {
        return Err(format_err(pos, "sample exceeds maxval"));
    }
    // interleaved HWC to planar CHW
    Ok(Tensor::from_fn(&[channels, h, w], |i| {
        samples[(i[1] * w + i[2]) * channels + i[0]]
    }))
}

pub fn load_pnm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    decode_pnm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
