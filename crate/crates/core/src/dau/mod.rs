//! Dynamic Alignment Units and convolutional DAU layers.
//!
//! A DAU maps an input `x` to `w(x)^T x` with `w(x) = g(A B x + b)`, where
//! `g` rescales norms so that `||w(x)|| <= 1`. A convolutional layer applies
//! `f` such units to every `k x k` patch of its input. The projection `B`
//! (rank `r`) is shared by all units of a layer; `A` and `b` are per unit.
//!
//! The layer is evaluated exactly as two convolutions followed by a
//! per-location weighted sum over unfolded patches:
//!
//! 1. `reduced = B * unfold(x)`: `r x L`
//! 2. `pre = A * reduced + b`: `f*D x L`, viewed as `f x D x L`
//! 3. `weights = g(pre)` along the patch axis `D = C*k*k`
//! 4. `out[j, l] = weights[j, :, l] . patch_l`

mod linear_map;

pub use linear_map::LayerLinearMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Nonlinearity, Var};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Rng, Scalar, Tensor};

/// A single fully-connected DAU over `d`-dimensional inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dau<S: Scalar = f64> {
    /// `d x r`
    pub a: Tensor<S>,
    /// `r x d`
    pub b: Tensor<S>,
    /// `d`
    pub bias: Tensor<S>,
    pub nonlinearity: Nonlinearity,
}

/// Scalar output and dynamic weight vector of one DAU evaluation.
#[derive(Clone, Debug)]
pub struct DauOutput<S: Scalar> {
    pub output: S,
    pub weights: Tensor<S>,
}

impl<S: Scalar> Dau<S> {
    pub fn new(a: Tensor<S>, b: Tensor<S>, bias: Tensor<S>, nonlinearity: Nonlinearity) -> Result<Self> {
        let (d, r) = match a.shape() {
            &[d, r] => (d, r),
            s => return Err(Error::shape("Dau A", s, &[])),
        };
        if b.shape() != [r, d] {
            return Err(Error::shape("Dau B", b.shape(), &[r, d]));
        }
        if bias.shape() != [d] {
            return Err(Error::shape("Dau bias", bias.shape(), &[d]));
        }
        Ok(Dau {
            a,
            b,
            bias,
            nonlinearity,
        })
    }

    /// Random unit with the same initialisation as [`DauConvLayer::new`].
    pub fn random(d: usize, rank: usize, nonlinearity: Nonlinearity, rng: &mut Rng) -> Self {
        let b = rng.normal(&[rank, d], 0.0, 1.0 / (d as f64).sqrt());
        let a = rng.normal(&[d, rank], 0.0, 1.0 / (rank as f64).sqrt());
        Dau {
            a,
            b,
            bias: Tensor::zeros(&[d]),
            nonlinearity,
        }
    }

    pub fn dim(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    /// Builds the unit on a graph. `x` must be a `d x 1` column.
    /// Returns `(output, weights)` nodes.
    pub fn forward_graph(&self, g: &mut Graph<S>, a: Var, b: Var, bias: Var, x: Var) -> Result<(Var, Var)> {
        let d = self.dim();
        if g.value(x).shape() != [d, 1] {
            return Err(Error::shape("dau_forward", g.value(x).shape(), &[d, 1]));
        }
        let bx = g.matmul(b, x)?;
        let u = g.matmul(a, bx)?;
        let u = g.add_row_bias(u, bias)?;
        let w = g.rescale(u, 0, self.nonlinearity)?;
        let y = g.mul(w, x)?;
        let y = g.sum(y);
        Ok((y, w))
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<DauOutput<S>> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::shape("dau_forward", x.shape(), &[d]));
        }
        let mut g = Graph::new();
        let a = g.constant(self.a.clone());
        let b = g.constant(self.b.clone());
        let bias = g.constant(self.bias.clone());
        let xv = g.constant(x.clone().reshape(&[d, 1])?);
        let (y, w) = self.forward_graph(&mut g, a, b, bias, xv)?;
        Ok(DauOutput {
            output: g.value(y).item()?,
            weights: g.value(w).clone().reshape(&[d])?,
        })
    }

    /// `A B` as a dense `d x d` matrix.
    pub fn transform(&self) -> Tensor<S> {
        self.a.matmul(&self.b).expect("validated shapes")
    }
}

/// Geometry and hyper-parameters of one convolutional DAU layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    /// Number of DAUs `f`.
    pub out_channels: usize,
    pub rank: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub nonlinearity: Nonlinearity,
}

impl LayerSpec {
    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.rank == 0 {
            return Err(Error::Config(format!("degenerate layer {self:?}")));
        }
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Geometry(format!(
                "kernel {} / stride {} must be at least 1",
                self.kernel, self.stride
            )));
        }
        if self.rank > self.patch_dim() {
            return Err(Error::Config(format!(
                "rank {} exceeds patch dimension {}",
                self.rank,
                self.patch_dim()
            )));
        }
        Ok(())
    }

    pub fn geometry(&self, height: usize, width: usize) -> Result<ConvGeometry> {
        ConvGeometry::new(self.in_channels, height, width, self.kernel, self.stride, self.padding)
    }
}

/// Convolutional layer of `f` DAUs sharing one rank-`r` projection.
#[derive(Clone, Debug, PartialEq)]
pub struct DauConvLayer<S: Scalar = f32> {
    pub spec: LayerSpec,
    /// Shared projection `B`: `r x D`.
    pub b_proj: Tensor<S>,
    /// Stacked `A_j`: `f*D x r`, unit `j` owning rows `j*D..(j+1)*D`.
    pub a: Tensor<S>,
    /// Per-unit bias: `f x D`.
    pub bias: Tensor<S>,
}

/// Graph nodes holding one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub b_proj: Var,
    pub a: Var,
    pub bias: Var,
}

/// Nodes produced by one layer during a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    pub geometry: ConvGeometry,
    /// Unfolded input, `D x L`.
    pub patches: Var,
    /// Dynamic weights, `f x D x L`.
    pub weights: Var,
    /// `f x H' x W'`.
    pub output: Var,
}

/// Output map and dynamic weights of [`DauConvLayer::conv_forward`].
#[derive(Clone, Debug)]
pub struct ConvOutput<S: Scalar> {
    /// `f x H' x W'`
    pub output: Tensor<S>,
    /// `D x f x H' x W'`: the weight vector of unit `j` at `(h, w)` is
    /// `weights[:, j, h, w]`.
    pub weights: Tensor<S>,
}

impl<S: Scalar> DauConvLayer<S> {
    /// Fresh layer: entries of `A` and `B` drawn from
    /// `Normal(0, 1/sqrt(fan_in))` where `fan_in` is the dimension each matrix
    /// maps from (`D` for `B`, `r` for `A`); bias zero.
    pub fn new(spec: LayerSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let (d, r, f) = (spec.patch_dim(), spec.rank, spec.out_channels);
        let b_proj = rng.normal(&[r, d], 0.0, 1.0 / (d as f64).sqrt());
        let a = rng.normal(&[f * d, r], 0.0, 1.0 / (r as f64).sqrt());
        Ok(DauConvLayer {
            spec,
            b_proj,
            a,
            bias: Tensor::zeros(&[f, d]),
        })
    }

    pub fn from_parts(spec: LayerSpec, b_proj: Tensor<S>, a: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        spec.validate()?;
        let (d, r, f) = (spec.patch_dim(), spec.rank, spec.out_channels);
        if b_proj.shape() != [r, d] {
            return Err(Error::shape("layer B", b_proj.shape(), &[r, d]));
        }
        if a.shape() != [f * d, r] {
            return Err(Error::shape("layer A", a.shape(), &[f * d, r]));
        }
        if bias.shape() != [f, d] {
            return Err(Error::shape("layer bias", bias.shape(), &[f, d]));
        }
        Ok(DauConvLayer { spec, b_proj, a, bias })
    }

    pub fn patch_dim(&self) -> usize {
        self.spec.patch_dim()
    }

    /// Parameters in a fixed order: `B`, `A`, bias.
    pub fn params(&self) -> [&Tensor<S>; 3] {
        [&self.b_proj, &self.a, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<S>; 3] {
        [&mut self.b_proj, &mut self.a, &mut self.bias]
    }

    pub fn cast<T: Scalar>(&self) -> DauConvLayer<T> {
        DauConvLayer {
            spec: self.spec,
            b_proj: self.b_proj.cast(),
            a: self.a.cast(),
            bias: self.bias.cast(),
        }
    }

    /// Places the parameters on `g`, tracked or constant.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> LayerVars {
        LayerVars {
            b_proj: g.leaf(self.b_proj.clone(), trainable),
            a: g.leaf(self.a.clone(), trainable),
            bias: g.leaf(self.bias.clone(), trainable),
        }
    }

    /// Differentiable forward pass of a `C x H x W` node.
    pub fn forward_graph(&self, g: &mut Graph<S>, x: Var, p: &LayerVars) -> Result<LayerTrace> {
        let shape = g.value(x).shape().to_vec();
        let [c, h, w] = shape[..] else {
            return Err(Error::shape("conv_forward", &shape, &[self.spec.in_channels]));
        };
        if c != self.spec.in_channels {
            return Err(Error::Input(format!(
                "channel mismatch: layer expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let geometry = self.spec.geometry(h, w)?;
        let (f, d, l) = (self.spec.out_channels, geometry.patch_dim(), geometry.locations());
        let patches = g.unfold(x, geometry)?;
        let reduced = g.matmul(p.b_proj, patches)?;
        let pre = g.matmul(p.a, reduced)?;
        let bias = g.reshape(p.bias, &[f * d])?;
        let pre = g.add_row_bias(pre, bias)?;
        let pre = g.reshape(pre, &[f, d, l])?;
        let weights = g.rescale(pre, 1, self.spec.nonlinearity)?;
        let out = g.dynamic_apply(weights, patches)?;
        let output = g.reshape(out, &[f, geometry.out_height(), geometry.out_width()])?;
        Ok(LayerTrace {
            geometry,
            patches,
            weights,
            output,
        })
    }

    fn eval(&self, input: &Tensor<S>) -> Result<(Graph<S>, LayerTrace)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        let trace = self.forward_graph(&mut g, x, &p)?;
        Ok((g, trace))
    }

    /// Forward pass returning the output map and the dynamic weights.
    pub fn conv_forward(&self, input: &Tensor<S>) -> Result<ConvOutput<S>> {
        let (g, t) = self.eval(input)?;
        let w = g.value(t.weights);
        let (f, d, l) = (self.spec.out_channels, t.geometry.patch_dim(), t.geometry.locations());
        let mut permuted = vec![S::zero(); d * f * l];
        for j in 0..f {
            for i in 0..d {
                permuted[(i * f + j) * l..(i * f + j + 1) * l]
                    .copy_from_slice(&w.data()[(j * d + i) * l..(j * d + i + 1) * l]);
            }
        }
        let (ho, wo) = (t.geometry.out_height(), t.geometry.out_width());
        Ok(ConvOutput {
            output: g.value(t.output).clone(),
            weights: Tensor::new(&[d, f, ho, wo], permuted)?,
        })
    }

    /// The input-dependent matrix `W_l(x)` with `W_l(x) vec(x) = vec(out)`.
    pub fn layer_matrix(&self, input: &Tensor<S>) -> Result<LayerLinearMap<S>> {
        let (g, t) = self.eval(input)?;
        LayerLinearMap::patchwise(t.geometry, g.value(t.weights).clone())
    }
}
