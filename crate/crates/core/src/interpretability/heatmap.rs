use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Percentile `q` in `[0, 100]` with linear interpolation between order
/// statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Colour of `value` on a red-white-blue scale saturating at `+-limit`.
pub fn heatmap_colour(value: f64, limit: f64) -> [u8; 3] {
    if !(limit > 0.0) {
        return [255; 3];
    }
    let t = (value / limit).clamp(-1.0, 1.0);
    let fade = (255.0 * (1.0 - t.abs())).round() as u8;
    if t >= 0.0 {
        [255, fade, fade]
    } else {
        [fade, fade, 255]
    }
}

/// Binary PPM of an `H x W` map, scaled to the 99.75th percentile of `|map|`.
pub fn heatmap_ppm<S: Scalar>(map: &Tensor<S>) -> Result<Vec<u8>> {
    let [h, w] = map.shape()[..] else {
        return Err(Error::shape("heatmap", map.shape(), &[]));
    };
    if !map.is_finite() {
        return Err(Error::Input("heatmap values must be finite".into()));
    }
    let abs: Vec<f64> = map.data().iter().map(|v| v.as_f64().abs()).collect();
    let limit = percentile(&abs, 99.75);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for v in map.data() {
        out.extend_from_slice(&heatmap_colour(v.as_f64(), limit));
    }
    Ok(out)
}

pub fn render_heatmap<S: Scalar>(map: &Tensor<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, heatmap_ppm(map)?).map_err(|e| Error::io(path, e))
}
