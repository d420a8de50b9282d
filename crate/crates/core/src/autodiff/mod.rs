//! Reverse-mode differentiation over the small operation set the networks
//! need.
//!
//! A [`Graph`] is a tape: every operation evaluates eagerly, appends a node
//! and returns a [`Var`] handle. Nodes can only reference earlier nodes, so
//! insertion order is a topological order and [`Graph::backward`] simply walks
//! the tape in reverse. One graph is built per forward evaluation and thrown
//! away afterwards.

pub mod gradcheck;
mod rescale;

pub use rescale::Nonlinearity;

use crate::error::{Error, Result};
use crate::tensor::{fold_add, gemm, unfold_into};
use crate::tensor::{ConvGeometry, MatRef, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    MatMul(Var, Var),
    SumAll(Var),
    SumAxis(Var, usize),
    Sigmoid(Var),
    BceWithLogits(Var, Tensor<S>),
    AbsMean(Var),
    Rescale(Var, usize, Nonlinearity),
    Reshape(Var),
    Unfold(Var, ConvGeometry),
    Fold(Var, ConvGeometry),
    AddRowBias(Var, Var),
    DynamicApply(Var, Var),
    DynamicApplyT(Var, Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Splits `shape` around `axis` into `(outer, n, inner)`.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Reverse-mode tape over tensors of precision `S`.
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Same value as `v`, but no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).add(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).sub(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("elementwise_mul", a, b)?;
        let v = self.value(a).mul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let v = self.value(a).scale(c);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(v, Op::SumAll(a), ng)
    }

    /// Sum along `axis`, which is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::shape("sum_axis", x.shape(), &[axis]));
        }
        let (outer, n, inner) = around(x.shape(), axis);
        let mut out = vec![S::zero(); outer * inner];
        let d = x.data();
        for o in 0..outer {
            for k in 0..n {
                let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::new(&shape, out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::SumAxis(a, axis), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(&[a]);
        self.push(v, Op::Sigmoid(a), ng)
    }

    /// Binary cross-entropy of `sigmoid(logits)` against `target`, summed over
    /// all entries, evaluated in the numerically stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<S>) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != target.shape() {
            return Err(Error::shape("bce_with_logits", z.shape(), target.shape()));
        }
        let loss: S = z
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| z.max(S::zero()) - z * y + (S::one() + (-z.abs()).exp()).ln())
            .sum();
        let ng = self.ng(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits(logits, target.clone()), ng))
    }

    /// Mean of absolute values of all entries.
    pub fn abs_mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Contract("abs_mean of an empty tensor".into()));
        }
        let m = x.data().iter().map(|v| v.abs()).sum::<S>() / S::of(x.len() as f64);
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::scalar(m), Op::AbsMean(a), ng))
    }

    /// Rescales every vector running along `axis` with the non-linearity `g`.
    pub fn rescale(&mut self, a: Var, axis: usize, g: Nonlinearity) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::shape("rescale", x.shape(), &[axis]));
        }
        let (outer, n, inner) = around(x.shape(), axis);
        let d = x.data();
        let mut out = vec![S::zero(); d.len()];
        let mut norms = vec![S::zero(); inner];
        for o in 0..outer {
            norms.fill(S::zero());
            let block = &d[o * n * inner..(o + 1) * n * inner];
            for k in 0..n {
                for (acc, &v) in norms.iter_mut().zip(&block[k * inner..(k + 1) * inner]) {
                    *acc += v * v;
                }
            }
            for acc in norms.iter_mut() {
                *acc = g.factor(acc.sqrt());
            }
            let dst = &mut out[o * n * inner..(o + 1) * n * inner];
            for k in 0..n {
                for ((o, &v), &s) in dst[k * inner..(k + 1) * inner]
                    .iter_mut()
                    .zip(&block[k * inner..(k + 1) * inner])
                    .zip(&norms)
                {
                    *o = v * s;
                }
            }
        }
        let v = Tensor::new(x.shape(), out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Rescale(a, axis, g), ng))
    }

    /// `x / (||x|| + eps)` along `axis`.
    pub fn l2_rescale(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.rescale(a, axis, Nonlinearity::L2)
    }

    /// Squashing along `axis`.
    pub fn sq_rescale(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.rescale(a, axis, Nonlinearity::Sq)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    /// Patch extraction `[C, H, W] -> [C*k*k, H'*W']`.
    pub fn unfold(&mut self, a: Var, geom: ConvGeometry) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != [geom.channels, geom.height, geom.width] {
            return Err(Error::shape(
                "unfold",
                x.shape(),
                &[geom.channels, geom.height, geom.width],
            ));
        }
        let mut out = vec![S::zero(); geom.patch_dim() * geom.locations()];
        unfold_into(&geom, x.data(), &mut out);
        let v = Tensor::new(&[geom.patch_dim(), geom.locations()], out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Unfold(a, geom), ng))
    }

    /// Adjoint of [`Graph::unfold`] over a batch: `[m, C*k*k, H'*W'] -> [m, C, H, W]`.
    pub fn fold(&mut self, a: Var, geom: ConvGeometry) -> Result<Var> {
        let v = crate::tensor::fold(self.value(a), &geom)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Fold(a, geom), ng))
    }

    /// `x[i, l] + b[i]` for `x: [n, L]`, `b: [n]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let [n, l] = xv.shape()[..] else {
            return Err(Error::shape("add_row_bias", xv.shape(), bv.shape()));
        };
        if bv.shape() != [n] {
            return Err(Error::shape("add_row_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.data().to_vec();
        for (row, &bias) in out.chunks_mut(l.max(1)).zip(bv.data()) {
            for v in row {
                *v += bias;
            }
        }
        let v = Tensor::new(&[n, l], out)?;
        let ng = self.ng(&[x, b]);
        Ok(self.push(v, Op::AddRowBias(x, b), ng))
    }

    /// Applies per-location weight vectors to patches:
    /// `out[j, l] = sum_i w[j, i, l] * p[i, l]` for `w: [f, D, L]`, `p: [D, L]`.
    pub fn dynamic_apply(&mut self, w: Var, p: Var) -> Result<Var> {
        let (wv, pv) = (self.value(w), self.value(p));
        let (f, d, l) = match (wv.shape(), pv.shape()) {
            (&[f, d, l], &[d2, l2]) if d == d2 && l == l2 => (f, d, l),
            (ws, ps) => return Err(Error::shape("dynamic_apply", ws, ps)),
        };
        let (wd, pd) = (wv.data(), pv.data());
        let mut out = vec![S::zero(); f * l];
        for j in 0..f {
            let acc = &mut out[j * l..(j + 1) * l];
            for i in 0..d {
                let wrow = &wd[(j * d + i) * l..(j * d + i + 1) * l];
                let prow = &pd[i * l..(i + 1) * l];
                for ((a, &wv), &pv) in acc.iter_mut().zip(wrow).zip(prow) {
                    *a += wv * pv;
                }
            }
        }
        let v = Tensor::new(&[f, l], out)?;
        let ng = self.ng(&[w, p]);
        Ok(self.push(v, Op::DynamicApply(w, p), ng))
    }

    /// Pulls row vectors back through per-location weights (the transpose of
    /// [`Graph::dynamic_apply`] in its patch argument):
    /// `out[m, i, l] = sum_j r[m, j, l] * w[j, i, l]` for `r: [M, f, L]`.
    pub fn dynamic_apply_t(&mut self, r: Var, w: Var) -> Result<Var> {
        let (rv, wv) = (self.value(r), self.value(w));
        let (m, f, d, l) = match (rv.shape(), wv.shape()) {
            (&[m, f, l], &[f2, d, l2]) if f == f2 && l == l2 => (m, f, d, l),
            (rs, ws) => return Err(Error::shape("dynamic_apply_t", rs, ws)),
        };
        let (rd, wd) = (rv.data(), wv.data());
        let mut out = vec![S::zero(); m * d * l];
        for mi in 0..m {
            for j in 0..f {
                let rrow = &rd[(mi * f + j) * l..(mi * f + j + 1) * l];
                if rrow.iter().all(|&v| v == S::zero()) {
                    continue;
                }
                for i in 0..d {
                    let wrow = &wd[(j * d + i) * l..(j * d + i + 1) * l];
                    let acc = &mut out[(mi * d + i) * l..(mi * d + i + 1) * l];
                    for ((a, &rv), &wv) in acc.iter_mut().zip(rrow).zip(wrow) {
                        *a += rv * wv;
                    }
                }
            }
        }
        let v = Tensor::new(&[m, d, l], out)?;
        let ng = self.ng(&[r, w]);
        Ok(self.push(v, Op::DynamicApplyT(r, w), ng))
    }

    /// Gradients of the scalar `root` with respect to every node that
    /// depends on a tracked leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::ones(rv.shape()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[i];
        let wants = |v: &Var| self.nodes[v.0].needs_grad;
        let mut send = |v: Var, t: Tensor<S>| accumulate(grads, v, t);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(a) {
                    send(*a, g.clone());
                }
                if wants(b) {
                    send(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    send(*a, g.clone());
                }
                if wants(b) {
                    send(*b, g.scale(-S::one()));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    send(*a, g.mul(self.value(*b)).expect("shape"));
                }
                if wants(b) {
                    send(*b, g.mul(self.value(*a)).expect("shape"));
                }
            }
            Op::Scale(a, c) => {
                if wants(a) {
                    send(*a, g.scale(*c));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if wants(a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm(
                        S::one(),
                        MatRef::new(g.data(), m, n),
                        MatRef::t(bv.data(), n, k),
                        S::zero(),
                        &mut da,
                    );
                    send(*a, Tensor::new(&[m, k], da).expect("shape"));
                }
                if wants(b) {
                    let mut db = vec![S::zero(); k * n];
                    gemm(
                        S::one(),
                        MatRef::t(av.data(), k, m),
                        MatRef::new(g.data(), m, n),
                        S::zero(),
                        &mut db,
                    );
                    send(*b, Tensor::new(&[k, n], db).expect("shape"));
                }
            }
            Op::SumAll(a) => {
                if wants(a) {
                    let s = g.data()[0];
                    send(*a, Tensor::full(self.value(*a).shape(), s));
                }
            }
            Op::SumAxis(a, axis) => {
                if wants(a) {
                    let shape = self.value(*a).shape();
                    let (outer, n, inner) = around(shape, *axis);
                    let mut out = vec![S::zero(); outer * n * inner];
                    for o in 0..outer {
                        let src = &g.data()[o * inner..(o + 1) * inner];
                        for k in 0..n {
                            out[(o * n + k) * inner..(o * n + k + 1) * inner].copy_from_slice(src);
                        }
                    }
                    send(*a, Tensor::new(shape, out).expect("shape"));
                }
            }
            Op::Sigmoid(a) => {
                if wants(a) {
                    let d = g.zip_map(&node.value, |g, y| g * y * (S::one() - y)).expect("shape");
                    send(*a, d);
                }
            }
            Op::BceWithLogits(z, y) => {
                if wants(z) {
                    let s = g.data()[0];
                    let d = self.value(*z).zip_map(y, |z, y| s * (sigmoid(z) - y)).expect("shape");
                    send(*z, d);
                }
            }
            Op::AbsMean(a) => {
                if wants(a) {
                    let x = self.value(*a);
                    let c = g.data()[0] / S::of(x.len() as f64);
                    send(
                        *a,
                        x.map(|v| {
                            if v > S::zero() {
                                c
                            } else if v < S::zero() {
                                -c
                            } else {
                                S::zero()
                            }
                        }),
                    );
                }
            }
            Op::Rescale(a, axis, nl) => {
                if wants(a) {
                    send(*a, rescale_vjp(self.value(*a), g, *axis, *nl));
                }
            }
            Op::Reshape(a) => {
                if wants(a) {
                    let shape = self.value(*a).shape();
                    send(*a, g.clone().reshape(shape).expect("shape"));
                }
            }
            Op::Unfold(a, geom) => {
                if wants(a) {
                    let mut dx = vec![S::zero(); geom.input_len()];
                    fold_add(geom, g.data(), &mut dx);
                    send(
                        *a,
                        Tensor::new(&[geom.channels, geom.height, geom.width], dx).expect("shape"),
                    );
                }
            }
            Op::Fold(a, geom) => {
                if wants(a) {
                    let shape = self.value(*a).shape();
                    let (per_in, per_col) = (geom.input_len(), geom.patch_dim() * geom.locations());
                    let mut dx = vec![S::zero(); shape[0] * per_col];
                    for m in 0..shape[0] {
                        unfold_into(
                            geom,
                            &g.data()[m * per_in..(m + 1) * per_in],
                            &mut dx[m * per_col..(m + 1) * per_col],
                        );
                    }
                    send(*a, Tensor::new(shape, dx).expect("shape"));
                }
            }
            Op::AddRowBias(x, b) => {
                if wants(x) {
                    send(*x, g.clone());
                }
                if wants(b) {
                    let l = g.shape()[1].max(1);
                    let db: Vec<S> = g.data().chunks(l).map(|row| row.iter().copied().sum()).collect();
                    send(*b, Tensor::new(self.value(*b).shape(), db).expect("shape"));
                }
            }
            Op::DynamicApply(w, p) => {
                let (wv, pv) = (self.value(*w), self.value(*p));
                let [f, d, l] = wv.shape()[..] else { unreachable!() };
                let (wd, pd, gd) = (wv.data(), pv.data(), g.data());
                if wants(w) {
                    let mut dw = vec![S::zero(); f * d * l];
                    for j in 0..f {
                        let grow = &gd[j * l..(j + 1) * l];
                        for i in 0..d {
                            let prow = &pd[i * l..(i + 1) * l];
                            for ((o, &gv), &pv) in
                                dw[(j * d + i) * l..(j * d + i + 1) * l].iter_mut().zip(grow).zip(prow)
                            {
                                *o = gv * pv;
                            }
                        }
                    }
                    send(*w, Tensor::new(&[f, d, l], dw).expect("shape"));
                }
                if wants(p) {
                    let mut dp = vec![S::zero(); d * l];
                    for j in 0..f {
                        let grow = &gd[j * l..(j + 1) * l];
                        for i in 0..d {
                            let wrow = &wd[(j * d + i) * l..(j * d + i + 1) * l];
                            for ((o, &gv), &wv) in dp[i * l..(i + 1) * l].iter_mut().zip(grow).zip(wrow) {
                                *o += gv * wv;
                            }
                        }
                    }
                    send(*p, Tensor::new(&[d, l], dp).expect("shape"));
                }
            }
            Op::DynamicApplyT(r, w) => {
                let (rv, wv) = (self.value(*r), self.value(*w));
                let [m, f, l] = rv.shape()[..] else { unreachable!() };
                let d = wv.shape()[1];
                let (rd, wd, gd) = (rv.data(), wv.data(), g.data());
                if wants(r) {
                    let mut dr = vec![S::zero(); m * f * l];
                    for mi in 0..m {
                        for j in 0..f {
                            let acc = &mut dr[(mi * f + j) * l..(mi * f + j + 1) * l];
                            for i in 0..d {
                                let grow = &gd[(mi * d + i) * l..(mi * d + i + 1) * l];
                                let wrow = &wd[(j * d + i) * l..(j * d + i + 1) * l];
                                for ((a, &gv), &wv) in acc.iter_mut().zip(grow).zip(wrow) {
                                    *a += gv * wv;
                                }
                            }
                        }
                    }
                    send(*r, Tensor::new(&[m, f, l], dr).expect("shape"));
                }
                if wants(w) {
                    let mut dw = vec![S::zero(); f * d * l];
                    for mi in 0..m {
                        for j in 0..f {
                            let rrow = &rd[(mi * f + j) * l..(mi * f + j + 1) * l];
                            if rrow.iter().all(|&v| v == S::zero()) {
                                continue;
                            }
                            for i in 0..d {
                                let grow = &gd[(mi * d + i) * l..(mi * d + i + 1) * l];
                                for ((a, &gv), &rv) in
                                    dw[(j * d + i) * l..(j * d + i + 1) * l].iter_mut().zip(grow).zip(rrow)
                                {
                                    *a += gv * rv;
                                }
                            }
                        }
                    }
                    send(*w, Tensor::new(&[f, d, l], dw).expect("shape"));
                }
            }
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, t: Tensor<S>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&t).expect("gradient shape"),
        slot @ None => *slot = Some(t),
    }
}

fn rescale_vjp<S: Scalar>(x: &Tensor<S>, g: &Tensor<S>, axis: usize, nl: Nonlinearity) -> Tensor<S> {
    let (outer, n, inner) = around(x.shape(), axis);
    let (xd, gd) = (x.data(), g.data());
    let mut out = vec![S::zero(); xd.len()];
    let mut sq = vec![S::zero(); inner];
    let mut dot = vec![S::zero(); inner];
    for o in 0..outer {
        sq.fill(S::zero());
        dot.fill(S::zero());
        let base = o * n * inner;
        for k in 0..n {
            let r = base + k * inner..base + (k + 1) * inner;
            for ((s, d), (&xv, &gv)) in sq.iter_mut().zip(dot.iter_mut()).zip(xd[r.clone()].iter().zip(&gd[r])) {
                *s += xv * xv;
                *d += xv * gv;
            }
        }
        // reuse: sq <- s(n), dot <- (u.g) s'(n)/n
        for (s, d) in sq.iter_mut().zip(dot.iter_mut()) {
            let norm = s.sqrt();
            *d = if norm > S::zero() {
                *d * nl.dfactor_over_n(norm)
            } else {
                S::zero()
            };
            *s = nl.factor(norm);
        }
        for k in 0..n {
            let r = base + k * inner..base + (k + 1) * inner;
            for (((o, &xv), &gv), (&s, &d)) in out[r.clone()]
                .iter_mut()
                .zip(&xd[r.clone()])
                .zip(&gd[r])
                .zip(sq.iter().zip(&dot))
            {
                *o = gv * s + xv * d;
            }
        }
    }
    Tensor::new(x.shape(), out).expect("shape")
}

/// Result of [`Graph::backward`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the root with respect to `v`, or `None` when `v` does not
    /// influence the root through tracked nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
