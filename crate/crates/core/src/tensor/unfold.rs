use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Spatial geometry of a square-kernel convolution over a `C x H x W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

fn out_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if padded < kernel || !(padded - kernel).is_multiple_of(stride) {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    /// Validates the geometry. Output extents must be exact: a stride that
    /// does not tile the padded input is rejected rather than floored.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Geometry(format!(
                "kernel ({kernel}) and stride ({stride}) must be at least 1"
            )));
        }
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Geometry(format!("empty input {channels}x{height}x{width}")));
        }
        let g = ConvGeometry {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
        };
        for (name, extent) in [("height", height), ("width", width)] {
            if out_extent(extent, kernel, stride, padding).is_none() {
                return Err(Error::Geometry(format!(
                    "{name} {extent} with kernel {kernel}, stride {stride}, padding {padding} \
                     does not give an integral output size"
                )));
            }
        }
        Ok(g)
    }

    pub fn out_height(&self) -> usize {
        out_extent(self.height, self.kernel, self.stride, self.padding).expect("validated")
    }

    pub fn out_width(&self) -> usize {
        out_extent(self.width, self.kernel, self.stride, self.padding).expect("validated")
    }

    /// Number of output locations `H' * W'`.
    pub fn locations(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Length of one flattened patch, `C * k * k`.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Input offset read by patch row `p` at output location `(oh, ow)`, or
    /// `None` when it falls into the zero padding.
    #[inline]
    pub fn source(&self, p: usize, oh: usize, ow: usize) -> Option<usize> {
        let kk = self.kernel * self.kernel;
        let c = p / kk;
        let ki = (p % kk) / self.kernel;
        let kj = p % self.kernel;
        let h = (oh * self.stride + ki).checked_sub(self.padding)?;
        let w = (ow * self.stride + kj).checked_sub(self.padding)?;
        if h >= self.height || w >= self.width {
            return None;
        }
        Some((c * self.height + h) * self.width + w)
    }
}

/// Slice-level unfold: `input` is `C*H*W`, `out` is `patch_dim * locations`.
pub(crate) fn unfold_into<S: Scalar>(g: &ConvGeometry, input: &[S], out: &mut [S]) {
    let (oh_n, ow_n) = (g.out_height(), g.out_width());
    let l = oh_n * ow_n;
    let kk = g.kernel * g.kernel;
    for p in 0..g.patch_dim() {
        let c = p / kk;
        let ki = (p % kk) / g.kernel;
        let kj = p % g.kernel;
        let row = &mut out[p * l..(p + 1) * l];
        for oh in 0..oh_n {
            let h = (oh * g.stride + ki) as isize - g.padding as isize;
            let dst = &mut row[oh * ow_n..(oh + 1) * ow_n];
            if h < 0 || h as usize >= g.height {
                dst.fill(S::zero());
                continue;
            }
            let base = (c * g.height + h as usize) * g.width;
            for (ow, d) in dst.iter_mut().enumerate() {
                let w = (ow * g.stride + kj) as isize - g.padding as isize;
                *d = if w < 0 || w as usize >= g.width {
                    S::zero()
                } else {
                    input[base + w as usize]
                };
            }
        }
    }
}

/// Slice-level adjoint of [`unfold_into`]: accumulates patch columns back
/// onto the input grid (`out += fold(cols)`).
pub(crate) fn fold_add<S: Scalar>(g: &ConvGeometry, cols: &[S], out: &mut [S]) {
    let (oh_n, ow_n) = (g.out_height(), g.out_width());
    let l = oh_n * ow_n;
    let kk = g.kernel * g.kernel;
    for p in 0..g.patch_dim() {
        let c = p / kk;
        let ki = (p % kk) / g.kernel;
        let kj = p % g.kernel;
        let row = &cols[p * l..(p + 1) * l];
        for oh in 0..oh_n {
            let h = (oh * g.stride + ki) as isize - g.padding as isize;
            if h < 0 || h as usize >= g.height {
                continue;
            }
            let base = (c * g.height + h as usize) * g.width;
            for (ow, &v) in row[oh * ow_n..(oh + 1) * ow_n].iter().enumerate() {
                let w = (ow * g.stride + kj) as isize - g.padding as isize;
                if w >= 0 && (w as usize) < g.width {
                    out[base + w as usize] += v;
                }
            }
        }
    }
}

/// Extracts zero-padded `k x k` patches of a `C x H x W` tensor into the
/// columns of a `(C*k*k) x (H'*W')` matrix. Rows are ordered channel-major,
/// then kernel row, then kernel column; columns are output locations in
/// row-major order.
pub fn unfold<S: Scalar>(input: &Tensor<S>, kernel: usize, stride: usize, padding: usize) -> Result<Tensor<S>> {
    let [c, h, w] = input.shape()[..] else {
        return Err(Error::shape("unfold", input.shape(), &[]));
    };
    let g = ConvGeometry::new(c, h, w, kernel, stride, padding)?;
    let mut out = vec![S::zero(); g.patch_dim() * g.locations()];
    unfold_into(&g, input.data(), &mut out);
    Tensor::new(&[g.patch_dim(), g.locations()], out)
}

/// Adjoint of [`unfold`] for a batch of column matrices:
/// `[m, C*k*k, H'*W'] -> [m, C, H, W]`, summing overlapping contributions.
pub fn fold<S: Scalar>(cols: &Tensor<S>, g: &ConvGeometry) -> Result<Tensor<S>> {
    let m = match cols.shape()[..] {
        [m, p, l] if p == g.patch_dim() && l == g.locations() => m,
        _ => return Err(Error::shape("fold", cols.shape(), &[g.patch_dim(), g.locations()])),
    };
    let (per_in, per_col) = (g.input_len(), g.patch_dim() * g.locations());
    let mut out = vec![S::zero(); m * per_in];
    for i in 0..m {
        fold_add(
            g,
            &cols.data()[i * per_col..(i + 1) * per_col],
            &mut out[i * per_in..(i + 1) * per_in],
        );
    }
    Tensor::new(&[m, g.channels, g.height, g.width], out)
}
