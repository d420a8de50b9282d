use crate::error::{Error, Result};
use crate::tensor::{fold_add, ConvGeometry, Scalar, Tensor};

/// The linear map a layer applies to its (vectorised) input for one fixed
/// input, i.e. `W_l(a_{l-1})` with `a_l = W_l(a_{l-1}) a_{l-1}`.
///
/// Row `j*L + l` belongs to unit `j` at output location `l` and is non-zero
/// only on the in-bounds input positions of patch `l`. The matrix is kept in
/// that patch-sparse form and only densified on request.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerLinearMap<S: Scalar> {
    repr: Repr<S>,
}

#[derive(Clone, Debug, PartialEq)]
enum Repr<S: Scalar> {
    Patchwise {
        geometry: ConvGeometry,
        /// `f x D x L`
        weights: Tensor<S>,
    },
    SumPool {
        channels: usize,
        height: usize,
        width: usize,
    },
    Dense(Tensor<S>),
}

impl<S: Scalar> LayerLinearMap<S> {
    pub(crate) fn patchwise(geometry: ConvGeometry, weights: Tensor<S>) -> Result<Self> {
        match weights.shape() {
            &[_, d, l] if d == geometry.patch_dim() && l == geometry.locations() => {}
            s => {
                return Err(Error::shape(
                    "LayerLinearMap",
                    s,
                    &[geometry.patch_dim(), geometry.locations()],
                ))
            }
        }
        Ok(LayerLinearMap {
            repr: Repr::Patchwise { geometry, weights },
        })
    }

    /// Global sum pooling of an `f x H x W` map as an `f x (f*H*W)` 0/1 matrix.
    pub fn sum_pool(channels: usize, height: usize, width: usize) -> Self {
        LayerLinearMap {
            repr: Repr::SumPool {
                channels,
                height,
                width,
            },
        }
    }

    pub fn dense(matrix: Tensor<S>) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::shape("LayerLinearMap::dense", matrix.shape(), &[]));
        }
        Ok(LayerLinearMap {
            repr: Repr::Dense(matrix),
        })
    }

    /// Geometry of the producing convolution, if any.
    pub fn geometry(&self) -> Option<ConvGeometry> {
        match &self.repr {
            Repr::Patchwise { geometry, .. } => Some(*geometry),
            _ => None,
        }
    }

    pub fn rows(&self) -> usize {
        match &self.repr {
            Repr::Patchwise { geometry, weights } => weights.shape()[0] * geometry.locations(),
            Repr::SumPool { channels, .. } => *channels,
            Repr::Dense(m) => m.shape()[0],
        }
    }

    pub fn cols(&self) -> usize {
        match &self.repr {
            Repr::Patchwise { geometry, .. } => geometry.input_len(),
            Repr::SumPool {
                channels,
                height,
                width,
            } => channels * height * width,
            Repr::Dense(m) => m.shape()[1],
        }
    }

    /// `W x` for a vectorised input.
    pub fn apply(&self, x: &[S]) -> Result<Vec<S>> {
        if x.len() != self.cols() {
            return Err(Error::shape(
                "LayerLinearMap::apply",
                &[self.rows(), self.cols()],
                &[x.len()],
            ));
        }
        Ok(match &self.repr {
            Repr::Patchwise { geometry, weights } => {
                let [f, d, l] = weights.shape()[..] else { unreachable!() };
                let wo = geometry.out_width();
                let mut out = vec![S::zero(); f * l];
                for j in 0..f {
                    for i in 0..d {
                        let wrow = &weights.data()[(j * d + i) * l..(j * d + i + 1) * l];
                        for (loc, &w) in wrow.iter().enumerate() {
                            if let Some(src) = geometry.source(i, loc / wo, loc % wo) {
                                out[j * l + loc] += w * x[src];
                            }
                        }
                    }
                }
                out
            }
            Repr::SumPool { channels, .. } => {
                let per = x.len() / channels.max(&1);
                x.chunks(per.max(1)).map(|c| c.iter().copied().sum()).collect()
            }
            Repr::Dense(m) => {
                let n = m.shape()[1];
                m.data()
                    .chunks(n.max(1))
                    .map(|row| row.iter().zip(x).map(|(&a, &b)| a * b).sum())
                    .collect()
            }
        })
    }

    /// `R W` for a stack of row vectors `R: [m, rows]`; returns `[m, cols]`.
    pub fn left_mul(&self, r: &Tensor<S>) -> Result<Tensor<S>> {
        let m = match r.shape() {
            &[m, n] if n == self.rows() => m,
            s => return Err(Error::shape("LayerLinearMap::left_mul", s, &[self.rows()])),
        };
        let (rows, cols) = (self.rows(), self.cols());
        let mut out = vec![S::zero(); m * cols];
        match &self.repr {
            Repr::Patchwise { geometry, weights } => {
                let [f, d, l] = weights.shape()[..] else { unreachable!() };
                let mut pulled = vec![S::zero(); d * l];
                for mi in 0..m {
                    pulled.fill(S::zero());
                    let rrow = &r.data()[mi * rows..(mi + 1) * rows];
                    for j in 0..f {
                        let rj = &rrow[j * l..(j + 1) * l];
                        for i in 0..d {
                            let wrow = &weights.data()[(j * d + i) * l..(j * d + i + 1) * l];
                            for ((p, &a), &w) in pulled[i * l..(i + 1) * l].iter_mut().zip(rj).zip(wrow) {
                                *p += a * w;
                            }
                        }
                    }
                    fold_add(geometry, &pulled, &mut out[mi * cols..(mi + 1) * cols]);
                }
            }
            Repr::SumPool { .. } => {
                let per = cols / rows.max(1);
                for mi in 0..m {
                    for c in 0..rows {
                        let v = r.data()[mi * rows + c];
                        out[mi * cols + c * per..mi * cols + (c + 1) * per].fill(v);
                    }
                }
            }
            Repr::Dense(w) => return r.matmul(w),
        }
        Tensor::new(&[m, cols], out)
    }

    /// Dense `rows x cols` matrix.
    pub fn to_dense(&self) -> Tensor<S> {
        match &self.repr {
            Repr::Dense(m) => m.clone(),
            _ => self
                .left_mul(&Tensor::eye(self.rows()))
                .expect("identity has matching rows"),
        }
    }

    /// Number of structurally non-zero entries in `row` (its patch support).
    pub fn row_support(&self, row: usize) -> Result<usize> {
        if row >= self.rows() {
            return Err(Error::Index {
                index: row,
                limit: self.rows(),
            });
        }
        Ok(match &self.repr {
            Repr::Patchwise { geometry, .. } => {
                let loc = row % geometry.locations();
                let wo = geometry.out_width();
                (0..geometry.patch_dim())
                    .filter(|&i| geometry.source(i, loc / wo, loc % wo).is_some())
                    .count()
            }
            Repr::SumPool { .. } => self.cols() / self.rows(),
            Repr::Dense(m) => m.row(row)?.iter().filter(|v| **v != S::zero()).count(),
        })
    }

    /// Multiplies one row of the map by `factor`.
    ///
    /// Exists for fault-injection tests of the collapse checks; a scaled row
    /// breaks the identity between the map and the layer it came from.
    #[doc(hidden)]
    pub fn scale_row(&mut self, row: usize, factor: S) -> Result<()> {
        if row >= self.rows() {
            return Err(Error::Index {
                index: row,
                limit: self.rows(),
            });
        }
        if let Repr::Patchwise { geometry, weights } = &mut self.repr {
            let l = geometry.locations();
            let d = geometry.patch_dim();
            let (j, loc) = (row / l, row % l);
            for i in 0..d {
                weights.data_mut()[(j * d + i) * l + loc] *= factor;
            }
            return Ok(());
        }
        let mut dense = self.to_dense();
        let n = dense.shape()[1];
        for v in &mut dense.data_mut()[row * n..(row + 1) * n] {
            *v *= factor;
        }
        self.repr = Repr::Dense(dense);
        Ok(())
    }
}
