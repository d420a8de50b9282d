use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 5 x 7 bitmap digits, one row per byte, most significant of 5 bits on the left.
const FONT: [[u8; 7]; 10] = [
    [0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e],
    [0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e],
    [0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f],
    [0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e],
    [0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02],
    [0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e],
    [0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e],
    [0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
    [0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e],
    [0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c],
];

/// A clean `1 x size x size` image of `digit`, drawn from a built-in bitmap
/// font scaled to about three quarters of the height and centred.
pub fn digit_glyph(digit: usize, size: usize) -> Result<Tensor<f32>> {
    let rows = FONT.get(digit).ok_or(Error::Index {
        index: digit,
        limit: FONT.len(),
    })?;
    let scale = size * 3 / 4 / 7;
    if scale == 0 {
        return Err(Error::Input(format!("image size {size} too small for a glyph")));
    }
    let (gh, gw) = (7 * scale, 5 * scale);
    let (top, left) = ((size - gh) / 2, (size - gw) / 2);
    Ok(Tensor::from_fn(&[1, size, size], |i| {
        let (y, x) = (i[1], i[2]);
        if y < top || x < left || y >= top + gh || x >= left + gw {
            return 0.0;
        }
        let (r, c) = ((y - top) / scale, (x - left) / scale);
        if rows[r] >> (4 - c) & 1 == 1 {
            1.0
        } else {
            0.0
        }
    }))
}
