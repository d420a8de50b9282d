//! Whole CoDA networks: input encoding, the DAU layer stack followed by a
//! global sum pool and a temperature, the collapse of the network into one
//! input-dependent matrix `W_{0->L}(x)`, contribution maps and the training
//! objective.

mod config;

pub use config::{LambdaClasses, LayerConfig, NetConfig, OutputBias};

use crate::autodiff::{Graph, Var};
use crate::dau::{DauConvLayer, LayerLinearMap, LayerTrace, LayerVars};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

/// Encodes an image with values in `[0, 1]` for the first layer.
///
/// Grayscale (`1 x H x W`) input is replicated to three channels. With
/// `negative` the result is `[r, g, b, 1-r, 1-g, 1-b]`, otherwise `[r, g, b]`.
pub fn encode_input<S: Scalar>(image: &Tensor<S>, negative: bool) -> Result<Tensor<S>> {
    let [c, h, w] = image.shape()[..] else {
        return Err(Error::Input(format!(
            "expected a C x H x W image, got shape {:?}",
            image.shape()
        )));
    };
    if c != 1 && c != 3 {
        return Err(Error::Input(format!("expected 1 or 3 channels, got {c}")));
    }
    if let Some((i, v)) = image
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v >= S::zero() && **v <= S::one()))
    {
        return Err(Error::Input(format!("pixel {i} has value {v}, outside [0, 1]")));
    }
    let hw = h * w;
    let channels = if negative { 6 } else { 3 };
    let mut out = Vec::with_capacity(channels * hw);
    for ch in 0..3 {
        let src = if c == 1 { 0 } else { ch };
        out.extend_from_slice(&image.data()[src * hw..(src + 1) * hw]);
    }
    if negative {
        for i in 0..3 * hw {
            out.push(S::one() - out[i]);
        }
    }
    Tensor::new(&[channels, h, w], out)
}

/// Signed contributions of every encoded input dimension to one class logit.
#[derive(Clone, Debug, PartialEq)]
pub struct ContributionMap<S: Scalar = f32> {
    pub class_index: usize,
    /// `C_in x H x W`.
    pub values: Tensor<S>,
    /// The class logit (after the temperature, before `b0`).
    pub logit: S,
}

impl<S: Scalar> ContributionMap<S> {
    pub fn total(&self) -> S {
        self.values.sum()
    }

    /// Per-pixel contributions, summed over channels: `H x W`.
    pub fn spatial(&self) -> Tensor<S> {
        let [c, h, w] = self.values.shape()[..] else {
            unreachable!()
        };
        let hw = h * w;
        let mut out = vec![S::zero(); hw];
        for ch in 0..c {
            for (o, &v) in out.iter_mut().zip(&self.values.data()[ch * hw..(ch + 1) * hw]) {
                *o += v;
            }
        }
        Tensor::new(&[h, w], out).expect("sizes agree")
    }
}

/// Graph nodes of one network forward pass.
#[derive(Clone, Debug)]
pub struct NetTrace {
    pub input: Var,
    pub layers: Vec<LayerTrace>,
    /// Sum-pooled last-layer output, `k`.
    pub pooled: Var,
    /// `pooled / T`.
    pub logits: Var,
}

/// Scalar terms of the objective for one sample.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub bce: Var,
    pub regulariser: Option<Var>,
    pub logits: Var,
}

/// Worst case of `|DAU output| / ||patch||` seen in a forward probe.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BoundProbe {
    pub evaluations: usize,
    /// Largest `|out| - ||p||`, relative to `max(||p||, 1)`.
    pub worst_excess: f64,
}

/// A convolutional dynamic alignment network.
#[derive(Clone, Debug, PartialEq)]
pub struct CodaNet<S: Scalar = f32> {
    config: NetConfig,
    layers: Vec<DauConvLayer<S>>,
}

impl<S: Scalar> CodaNet<S> {
    /// Fresh network with randomly initialised layers.
    pub fn new(config: NetConfig, rng: &mut Rng) -> Result<Self> {
        let layers = config
            .layer_specs()?
            .into_iter()
            .map(|spec| DauConvLayer::new(spec, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(CodaNet { config, layers })
    }

    pub fn from_layers(config: NetConfig, layers: Vec<DauConvLayer<S>>) -> Result<Self> {
        let specs = config.layer_specs()?;
        if specs.len() != layers.len() {
            return Err(Error::Config(format!(
                "config has {} layers, got {}",
                specs.len(),
                layers.len()
            )));
        }
        for (i, (s, l)) in specs.iter().zip(&layers).enumerate() {
            if *s != l.spec {
                return Err(Error::Config(format!(
                    "layer {i} does not match the config: {:?} vs {:?}",
                    l.spec, s
                )));
            }
        }
        Ok(CodaNet { config, layers })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[DauConvLayer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DauConvLayer<S>] {
        &mut self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn temperature(&self) -> f64 {
        self.config.temperature
    }

    pub fn set_temperature(&mut self, t: f64) -> Result<()> {
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {t}")));
        }
        self.config.temperature = t;
        Ok(())
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
        }
        self.config.lambda = lambda;
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> CodaNet<T> {
        CodaNet {
            config: self.config.clone(),
            layers: self.layers.iter().map(|l| l.cast()).collect(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().flat_map(|l| l.params()).map(|t| t.len()).sum()
    }

    /// Replaces layer `index` by a freshly initialised one.
    pub fn reinit_layer(&mut self, index: usize, rng: &mut Rng) -> Result<()> {
        let n = self.layers.len();
        let layer = self.layers.get_mut(index).ok_or(Error::Index { index, limit: n })?;
        *layer = DauConvLayer::new(layer.spec, rng)?;
        Ok(())
    }

    pub fn encode(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        encode_input(image, self.config.encode_negative)
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes() {
            return Err(Error::Index {
                index: class,
                limit: self.num_classes(),
            });
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Vec<LayerVars> {
        self.layers.iter().map(|l| l.bind(g, trainable)).collect()
    }

    /// Forward pass of an encoded input node on `g`.
    pub fn forward_graph(&self, g: &mut Graph<S>, input: Var, vars: &[LayerVars]) -> Result<NetTrace> {
        let mut a = input;
        let mut traces = Vec::with_capacity(self.layers.len());
        for (layer, v) in self.layers.iter().zip(vars) {
            let t = layer.forward_graph(g, a, v)?;
            a = t.output;
            traces.push(t);
        }
        let shape = g.value(a).shape().to_vec();
        let flat = g.reshape(a, &[shape[0], shape[1] * shape[2]])?;
        let pooled = g.sum_axis(flat, 1)?;
        let logits = g.scale(pooled, S::of(1.0 / self.config.temperature));
        Ok(NetTrace {
            input,
            layers: traces,
            pooled,
            logits,
        })
    }

    fn eval(&self, x_enc: &Tensor<S>) -> Result<(Graph<S>, NetTrace)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(x_enc.clone());
        let trace = self.forward_graph(&mut g, x, &vars)?;
        Ok((g, trace))
    }

    /// Class logits `T^-1 * sumpool(layers(x))` for an already encoded input.
    pub fn forward_encoded(&self, x_enc: &Tensor<S>) -> Result<Tensor<S>> {
        let (g, t) = self.eval(x_enc)?;
        Ok(g.value(t.logits).clone())
    }

    /// Class logits for an image with values in `[0, 1]`.
    pub fn forward(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        self.forward_encoded(&self.encode(image)?)
    }

    pub fn predict(&self, image: &Tensor<S>) -> Result<usize> {
        let logits = self.forward(image)?;
        Ok(argmax(logits.data()))
    }

    /// Activations `a_0 (encoded input), a_1, ..., a_L`.
    pub fn activations(&self, image: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let x = self.encode(image)?;
        let (g, t) = self.eval(&x)?;
        let mut out = vec![x];
        out.extend(t.layers.iter().map(|l| g.value(l.output).clone()));
        Ok(out)
    }

    /// The per-layer maps `W_l(a_{l-1})` of one forward pass, followed by the
    /// sum pool.
    pub fn layer_maps(&self, image: &Tensor<S>) -> Result<Vec<LayerLinearMap<S>>> {
        let x = self.encode(image)?;
        let (g, t) = self.eval(&x)?;
        let mut maps = Vec::with_capacity(t.layers.len() + 1);
        for l in &t.layers {
            maps.push(LayerLinearMap::patchwise(l.geometry, g.value(l.weights).clone())?);
        }
        let out = g.value(t.layers.last().expect("non-empty").output);
        let [f, h, w] = out.shape()[..] else { unreachable!() };
        maps.push(LayerLinearMap::sum_pool(f, h, w));
        Ok(maps)
    }

    /// `W_{0->L}(x) = Pool * W_L * ... * W_1` as a `k x (C*H*W)` matrix over the
    /// encoded input. The temperature is not included.
    pub fn collapse_full(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        let maps = self.layer_maps(image)?;
        Self::collapse_maps(&maps, &Tensor::eye(self.num_classes()))
    }

    /// `R * M_n * ... * M_1` for row vectors `R` over the last map's outputs.
    pub fn collapse_maps(maps: &[LayerLinearMap<S>], rows: &Tensor<S>) -> Result<Tensor<S>> {
        maps.iter().rev().try_fold(rows.clone(), |r, m| m.left_mul(&r))
    }

    /// Dense `W_{l1->l2}` mapping activation `a_{l1}` to `a_{l2}`
    /// (`0 <= l1 <= l2 <= L`; index `L + 1` is the pooled output).
    pub fn collapse_between(&self, image: &Tensor<S>, l1: usize, l2: usize) -> Result<Tensor<S>> {
        let maps = self.layer_maps(image)?;
        if l1 > l2 || l2 > maps.len() {
            return Err(Error::Index {
                index: l2.max(l1),
                limit: maps.len() + 1,
            });
        }
        let n = if l2 == 0 { maps[0].cols() } else { maps[l2 - 1].rows() };
        Self::collapse_maps(&maps[l1..l2], &Tensor::eye(n))
    }

    /// Selected rows of `W_{0->L}` as graph nodes `[m, C, H, W]`.
    ///
    /// Unit basis rows of the pooled output are propagated down through the
    /// dynamic weights of `trace`, one layer at a time. The rows are linear in
    /// those weights, so they are differentiable with respect to the layer
    /// parameters without differentiating twice.
    pub fn collapse_rows_graph(&self, g: &mut Graph<S>, trace: &NetTrace, classes: &[usize]) -> Result<Var> {
        for &c in classes {
            self.check_class(c)?;
        }
        if classes.is_empty() {
            return Err(Error::Input("no classes requested".into()));
        }
        let last = trace.layers.last().expect("non-empty");
        let (k, l) = (self.num_classes(), last.geometry.locations());
        let m = classes.len();
        let mut seed = vec![S::zero(); m * k * l];
        for (i, &c) in classes.iter().enumerate() {
            seed[(i * k + c) * l..(i * k + c + 1) * l].fill(S::one());
        }
        let mut r = g.constant(Tensor::new(&[m, k, l], seed)?);
        for t in trace.layers.iter().rev() {
            let geom = t.geometry;
            let pulled = g.dynamic_apply_t(r, t.weights)?;
            let folded = g.fold(pulled, geom)?;
            r = g.reshape(folded, &[m, geom.channels, geom.height * geom.width])?;
        }
        let first = trace.layers[0].geometry;
        g.reshape(r, &[m, first.channels, first.height, first.width])
    }

    /// Selected rows of `W_{0->L}`: `[m, C*H*W]`.
    pub fn collapse_rows(&self, image: &Tensor<S>, classes: &[usize]) -> Result<Tensor<S>> {
        let x = self.encode(image)?;
        let (mut g, t) = self.eval(&x)?;
        let rows = self.collapse_rows_graph(&mut g, &t, classes)?;
        let n = x.len();
        g.value(rows).clone().reshape(&[classes.len(), n])
    }

    /// Contributions of the encoded input to every class logit.
    pub fn contribution_maps(&self, image: &Tensor<S>) -> Result<Vec<ContributionMap<S>>> {
        let x = self.encode(image)?;
        let w = self.collapse_full(image)?;
        let logits = self.forward_encoded(&x)?;
        let inv_t = S::of(1.0 / self.config.temperature);
        (0..self.num_classes())
            .map(|j| {
                let values = Tensor::new(
                    x.shape(),
                    w.row(j)?.iter().zip(x.data()).map(|(&a, &b)| a * b * inv_t).collect(),
                )?;
                Ok(ContributionMap {
                    class_index: j,
                    values,
                    logit: logits.data()[j],
                })
            })
            .collect()
    }

    /// Contributions `[W_{0->L}(x)]_j * x / T` to the logit of class `j`.
    pub fn contributions(&self, image: &Tensor<S>, class: usize) -> Result<ContributionMap<S>> {
        self.check_class(class)?;
        let x = self.encode(image)?;
        let (mut g, t) = self.eval(&x)?;
        let rows = self.collapse_rows_graph(&mut g, &t, &[class])?;
        let inv_t = S::of(1.0 / self.config.temperature);
        let values = Tensor::new(
            x.shape(),
            g.value(rows)
                .data()
                .iter()
                .zip(x.data())
                .map(|(&a, &b)| a * b * inv_t)
                .collect(),
        )?;
        Ok(ContributionMap {
            class_index: class,
            values,
            logit: g.value(t.logits).data()[class],
        })
    }

    /// Builds the objective for one encoded sample on `g`.
    ///
    /// `target` is one-hot over the classes. The regulariser uses the true
    /// class and one incorrect class drawn from `rng`, or every class,
    /// depending on the configuration; it is skipped when `lambda` is zero.
    pub fn loss_graph(
        &self,
        g: &mut Graph<S>,
        vars: &[LayerVars],
        x_enc: Var,
        target: &Tensor<S>,
        rng: &mut Rng,
    ) -> Result<LossTerms> {
        let class = one_hot_class(target, self.num_classes())?;
        let trace = self.forward_graph(g, x_enc, vars)?;
        let b0 = Tensor::new(&[self.num_classes()], self.config.b0().into_iter().map(S::of).collect())?;
        let b0 = g.constant(b0);
        let shifted = g.add(trace.logits, b0)?;
        let bce = g.bce_with_logits(shifted, target)?;
        if self.config.lambda == 0.0 {
            return Ok(LossTerms {
                total: bce,
                bce,
                regulariser: None,
                logits: trace.logits,
            });
        }
        let classes = self.regularised_classes(class, rng);
        let rows = self.collapse_rows_graph(g, &trace, &classes)?;
        let reg = g.abs_mean(rows)?;
        let scaled = g.scale(reg, S::of(self.config.lambda));
        let total = g.add(bce, scaled)?;
        Ok(LossTerms {
            total,
            bce,
            regulariser: Some(reg),
            logits: trace.logits,
        })
    }

    /// Classes whose rows enter the regulariser for a sample of class `class`.
    pub fn regularised_classes(&self, class: usize, rng: &mut Rng) -> Vec<usize> {
        match self.config.lambda_classes {
            LambdaClasses::All => (0..self.num_classes()).collect(),
            LambdaClasses::Pair => {
                let other = rng.below(self.num_classes() - 1);
                vec![class, if other >= class { other + 1 } else { other }]
            }
        }
    }

    /// Value of the objective for one image and one-hot target.
    pub fn loss(&self, image: &Tensor<S>, target: &Tensor<S>, rng: &mut Rng) -> Result<S> {
        let x = self.encode(image)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xv = g.constant(x);
        let terms = self.loss_graph(&mut g, &vars, xv, target, rng)?;
        g.value(terms.total).item()
    }

    /// Checks every DAU output of every layer against the norm of its patch.
    pub fn bound_probe(&self, image: &Tensor<S>) -> Result<BoundProbe> {
        let x = self.encode(image)?;
        let (g, t) = self.eval(&x)?;
        let mut probe = BoundProbe::default();
        for l in &t.layers {
            let (p, out) = (g.value(l.patches), g.value(l.output));
            let [d, locs] = p.shape()[..] else { unreachable!() };
            let mut norms = vec![0.0f64; locs];
            for i in 0..d {
                for (n, &v) in norms.iter_mut().zip(&p.data()[i * locs..(i + 1) * locs]) {
                    *n += v.as_f64() * v.as_f64();
                }
            }
            for (idx, &o) in out.data().iter().enumerate() {
                let n = norms[idx % locs].sqrt();
                let excess = (o.as_f64().abs() - n) / n.max(1.0);
                probe.worst_excess = probe.worst_excess.max(excess);
                probe.evaluations += 1;
            }
        }
        Ok(probe)
    }
}

/// Index of the 1 in a one-hot vector.
pub fn one_hot_class<S: Scalar>(target: &Tensor<S>, classes: usize) -> Result<usize> {
    if target.shape() != [classes] {
        return Err(Error::Input(format!(
            "target has shape {:?}, expected [{classes}]",
            target.shape()
        )));
    }
    let ones: Vec<usize> = (0..classes).filter(|&i| target.data()[i] == S::one()).collect();
    let zeros = target.data().iter().filter(|&&v| v == S::zero()).count();
    if ones.len() != 1 || zeros != classes - 1 {
        return Err(Error::Input("target is not one-hot".into()));
    }
    Ok(ones[0])
}

pub fn one_hot<S: Scalar>(class: usize, classes: usize) -> Tensor<S> {
    Tensor::from_fn(&[classes], |i| if i[0] == class { S::one() } else { S::zero() })
}

/// Index of the largest entry; the first one on ties.
pub fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `||a - b|| / ||a||`, or `||a - b||` when `a` is zero.
pub fn normalized_distance<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    let diff = a.sub(b)?.norm().as_f64();
    let base = a.norm().as_f64();
    Ok(if base > 0.0 { diff / base } else { diff })
}

#[cfg(test)]
mod tests;
