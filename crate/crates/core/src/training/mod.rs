//! Adam, the learning-rate schedule, the training loop and checkpoints.

mod checkpoint;

pub use checkpoint::{
    checkpoint_precision, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    FORMAT_VERSION,
};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::datasets::LabeledImageSet;
use crate::error::{Error, Result};
use crate::network::{argmax, one_hot, CodaNet, NetConfig};
use crate::tensor::{Rng, Scalar, Tensor};

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S: Scalar = f32> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<S: Scalar> AdamState<S> {
    /// Zero moments for parameters of the given shapes.
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor<S>> = shapes.into_iter().map(Tensor::zeros).collect();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_net(net: &CodaNet<S>) -> Self {
        Self::new(net.layers().iter().flat_map(|l| l.params()).map(|t| t.shape()))
    }

    /// One update `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn update(&mut self, params: &mut [&mut Tensor<S>], grads: &[Tensor<S>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Input(format!(
                "adam tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (b1s, b2s) = (S::of(b1), S::of(b2));
        let (nb1, nb2) = (S::of(1.0 - b1), S::of(1.0 - b2));
        let step = S::of(lr / c1);
        let sc2 = S::of(1.0 / c2);
        let eps = S::of(self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((p, &g), (m, v)) in iter {
                *m = b1s * *m + nb1 * g;
                *v = b2s * *v + nb2 * g * g;
                *p -= step * *m / ((*v * sc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warm-up from the base rate to `peak_lr` over the first `epochs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Warmup {
    pub epochs: usize,
    pub peak_lr: f64,
}

/// Optimisation settings (the `[train]` section of a run config).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    /// Epochs between decays.
    pub lr_decay_every: usize,
    pub seed: u64,
    /// 32 or 64.
    pub precision: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup: Option<Warmup>,
    /// Use only the first `n` training images.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 16,
            base_lr: 2.5e-4,
            lr_decay_factor: 2.0,
            lr_decay_every: 60,
            seed: 0,
            precision: 32,
            warmup: None,
            limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_decay_every == 0 {
            return Err(Error::Config(
                "epochs, batch_size and lr_decay_every must be positive".into(),
            ));
        }
        if !(self.lr_decay_factor > 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor must exceed 1, got {}",
                self.lr_decay_factor
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::Config(format!("invalid base_lr {}", self.base_lr)));
        }
        if self.precision != 32 && self.precision != 64 {
            return Err(Error::Config(format!(
                "precision must be 32 or 64, got {}",
                self.precision
            )));
        }
        if let Some(w) = self.warmup {
            if w.epochs == 0 || !(w.peak_lr.is_finite() && w.peak_lr >= 0.0) {
                return Err(Error::Config("warmup needs positive epochs and a valid peak_lr".into()));
            }
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch.
    ///
    /// Without warm-up: `base_lr / factor^floor(epoch / decay_every)`. With
    /// warm-up the rate ramps linearly from `base_lr` to `peak_lr` over the
    /// warm-up epochs and `peak_lr` replaces `base_lr` in the decay.
    pub fn lr(&self, epoch: usize) -> f64 {
        let (start, exp) = (self.base_lr, (epoch / self.lr_decay_every) as i32);
        match self.warmup {
            Some(w) if epoch < w.epochs => start + (w.peak_lr - start) * epoch as f64 / w.epochs as f64,
            Some(w) => w.peak_lr / self.lr_decay_factor.powi(exp),
            None => start / self.lr_decay_factor.powi(exp),
        }
    }
}

/// Network plus optimisation settings: one TOML file with the network keys at
/// the top level and an optional `[train]` table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub net: NetConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn new(net: NetConfig, train: TrainConfig) -> Self {
        RunConfig { net, train }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let bad = |e: toml::de::Error| Error::Config(e.to_string());
        let mut table: toml::Table = text.parse().map_err(bad)?;
        let train = match table.remove("train") {
            Some(t) => t.try_into().map_err(bad)?,
            None => TrainConfig::default(),
        };
        let cfg = RunConfig {
            net: table.try_into().map_err(bad)?,
            train,
        };
        cfg.net.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-sample objective.
    pub loss: f64,
    /// Training accuracy of the predictions made during the epoch.
    pub accuracy: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} lr={:e} loss={:.6} acc={:.4}",
            self.epoch, self.lr, self.loss, self.accuracy
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl fmt::Display for TrainLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.epochs {
            writeln!(f, "{e}")?;
        }
        Ok(())
    }
}

/// Gradient of the mean objective over one batch, plus the summed loss and
/// the number of correct predictions.
///
/// Sample `k` of the batch draws its regularised classes from
/// `rng.fork(k)`, and per-sample results are reduced in batch order, so the
/// result does not depend on how many threads run.
pub fn batch_gradients<S: Scalar>(
    net: &CodaNet<S>,
    data: &LabeledImageSet,
    batch: &[usize],
    rng: &Rng,
) -> Result<(Vec<Tensor<S>>, f64, usize)> {
    let k = net.num_classes();
    let per_sample = crate::parallel::par_map(batch, |pos, &i| -> Result<_> {
        let label = data.label(i);
        let x = net.encode(&data.image::<S>(i))?;
        let mut g = Graph::new();
        let vars = net.bind(&mut g, true);
        let xv = g.constant(x);
        let terms = net.loss_graph(&mut g, &vars, xv, &one_hot(label, k), &mut rng.fork(pos as u64))?;
        let loss = g.value(terms.total).item()?.as_f64();
        let correct = argmax(g.value(terms.logits).data()) == label;
        let mut grads = g.backward(terms.total)?;
        let leaves: Vec<Option<Tensor<S>>> = vars
            .iter()
            .flat_map(|v| [v.b_proj, v.a, v.bias])
            .map(|v| grads.take(v))
            .collect();
        Ok((leaves, loss, correct))
    })?;
    let mut sum: Vec<Tensor<S>> = net
        .layers()
        .iter()
        .flat_map(|l| l.params())
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let (mut loss, mut correct) = (0.0, 0);
    for (leaves, l, ok) in per_sample {
        loss += l;
        correct += ok as usize;
        for (acc, gr) in sum.iter_mut().zip(leaves) {
            if let Some(gr) = gr {
                acc.add_assign(&gr)?;
            }
        }
    }
    let inv = S::of(1.0 / batch.len() as f64);
    for t in &mut sum {
        for v in t.data_mut() {
            *v *= inv;
        }
    }
    Ok((sum, loss, correct))
}

/// Trains `net` in place. Batches are drawn from a per-epoch shuffle seeded
/// by `cfg.seed`; `on_epoch` sees each epoch's log line as it completes.
pub fn train<S: Scalar>(
    net: &mut CodaNet<S>,
    adam: &mut AdamState<S>,
    data: &LabeledImageSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainLog> {
    cfg.validate()?;
    let n = cfg.limit.map_or(data.len(), |l| l.min(data.len()));
    if n == 0 {
        return Err(Error::Input("training set is empty".into()));
    }
    if data.num_classes() > net.num_classes() {
        return Err(Error::Input(format!(
            "dataset has {} classes, network {}",
            data.num_classes(),
            net.num_classes()
        )));
    }
    let root = Rng::new(cfg.seed);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        root.fork(2 * epoch as u64).shuffle(&mut order);
        let pick = root.fork(2 * epoch as u64 + 1);
        let (mut total, mut correct) = (0.0, 0);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (grads, loss, ok) = batch_gradients(net, data, batch, &pick.fork(b as u64))?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    epoch: epoch + 1,
                    batch: b,
                    value: loss,
                });
            }
            total += loss;
            correct += ok;
            let mut params: Vec<&mut Tensor<S>> = net.layers_mut().iter_mut().flat_map(|l| l.params_mut()).collect();
            adam.update(&mut params, &grads, lr)?;
        }
        let e = EpochLog {
            epoch: epoch + 1,
            lr,
            loss: total / n as f64,
            accuracy: correct as f64 / n as f64,
        };
        on_epoch(&e);
        log.epochs.push(e);
    }
    Ok(log)
}

/// Fraction of `data` classified correctly, and the logits of every image.
pub fn evaluate<S: Scalar>(net: &CodaNet<S>, data: &LabeledImageSet) -> Result<(f64, Vec<Tensor<S>>)> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let logits = crate::parallel::par_map(&idx, |_, &i| net.forward(&data.image::<S>(i)))?;
    let correct = logits
        .iter()
        .zip(data.labels())
        .filter(|(l, &y)| argmax(l.data()) == y)
        .count();
    Ok((correct as f64 / data.len().max(1) as f64, logits))
}
