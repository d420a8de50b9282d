//! Self-checks of the core invariants, runnable from the command line.
//!
//! Each suite draws random networks and inputs from a seed and reports the
//! worst error of every check next to its tolerance.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::gradcheck::{check, GradReport};
use crate::autodiff::{Graph, Nonlinearity, Var};
use crate::dau::{Dau, LayerVars};
use crate::error::{Error, Result};
use crate::network::{one_hot, CodaNet, LayerConfig, NetConfig};
use crate::tensor::{ConvGeometry, Rng, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Linearity,
    Bounds,
    Gradients,
    Collapse,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 5] = ["linearity", "bounds", "gradients", "collapse", "all"];

    fn expand(self) -> Vec<Suite> {
        match self {
            Suite::All => vec![Suite::Linearity, Suite::Bounds, Suite::Gradients, Suite::Collapse],
            s => vec![s],
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linearity" => Ok(Suite::Linearity),
            "bounds" => Ok(Suite::Bounds),
            "gradients" => Ok(Suite::Gradients),
            "collapse" => Ok(Suite::Collapse),
            "all" => Ok(Suite::All),
            _ => Err(Error::Input(format!(
                "unknown suite {s:?} (expected one of {})",
                Suite::NAMES.join(", ")
            ))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = [
            Suite::Linearity,
            Suite::Bounds,
            Suite::Gradients,
            Suite::Collapse,
            Suite::All,
        ]
        .iter()
        .position(|s| s == self)
        .expect("listed");
        f.write_str(Suite::NAMES[i])
    }
}

/// Scales row `row` of layer `layer`'s linear map inside the collapse suite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fault {
    pub layer: usize,
    pub row: usize,
    pub factor: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random (network, input) draws for the linearity and collapse suites.
    pub draws: usize,
    /// DAU evaluations per nonlinearity in the bound suite.
    pub dau_evaluations: usize,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            draws: 100,
            dau_evaluations: 10_000,
            fault: None,
        }
    }
}

/// Worst observed error of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
    pub samples: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst < self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}: {}", self.suite, if self.passed() { "pass" } else { "FAIL" })?;
        for c in &self.checks {
            writeln!(
                f,
                "  {:<4} {:<40} worst={:.3e} tol={:.0e} n={}",
                if c.passed() { "ok" } else { "FAIL" },
                c.name,
                c.worst,
                c.tolerance,
                c.samples
            )?;
        }
        Ok(())
    }
}

pub fn run(suite: Suite, opts: &VerifyOptions) -> Result<Vec<SuiteReport>> {
    suite
        .expand()
        .into_iter()
        .map(|s| {
            let checks = match s {
                Suite::Linearity => linearity(opts)?,
                Suite::Bounds => bounds(opts)?,
                Suite::Gradients => gradients(opts)?,
                Suite::Collapse => collapse(opts)?,
                Suite::All => unreachable!(),
            };
            Ok(SuiteReport { suite: s, checks })
        })
        .collect()
}

struct Worst {
    name: String,
    worst: f64,
    tolerance: f64,
    samples: usize,
}

impl Worst {
    fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Worst {
            name: name.into(),
            worst: 0.0,
            tolerance,
            samples: 0,
        }
    }

    fn see(&mut self, err: f64) {
        self.samples += 1;
        self.worst = if err.is_nan() || self.worst.is_nan() {
            f64::NAN
        } else {
            self.worst.max(err)
        };
    }

    fn done(self) -> CheckResult {
        CheckResult {
            name: self.name,
            worst: self.worst,
            tolerance: self.tolerance,
            samples: self.samples,
        }
    }
}

/// Presets of depth 1, 3 and 9, with input sizes each accepts.
const DRAW_PRESETS: [(&str, &[usize]); 3] = [
    ("tiny-1", &[5, 8, 13, 20, 32]),
    ("tiny-3", &[8, 12, 16, 24, 32]),
    ("s-coda", &[9, 17]),
];

/// A random network from one of the draw presets, with non-zero biases,
/// plus a random 3-channel image it accepts.
fn draw(i: usize, rng: &mut Rng) -> Result<(CodaNet<f64>, Tensor<f64>)> {
    let (name, sizes) = DRAW_PRESETS[i % DRAW_PRESETS.len()];
    let size = sizes[rng.below(sizes.len())];
    let mut cfg = NetConfig::preset(name)?;
    cfg.nonlinearity = if rng.below(2) == 0 {
        Nonlinearity::L2
    } else {
        Nonlinearity::Sq
    };
    let mut net = CodaNet::<f64>::new(cfg, rng)?;
    let bias_std = rng.uniform() * 0.5;
    for l in net.layers_mut() {
        let shape = l.bias.shape().to_vec();
        l.bias = rng.normal(&shape, 0.0, bias_std);
    }
    let image = Tensor::from_fn(&[3, size, size], |_| rng.uniform());
    Ok((net, image))
}

fn max_abs_diff<A: Scalar, B: Scalar>(a: &[A], b: &[B]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

/// `T^-1 W x` for a collapsed `W` of shape `[k, n]`.
fn apply_rows<S: Scalar>(w: &Tensor<S>, x: &Tensor<S>, temperature: f64) -> Result<Vec<f64>> {
    let k = w.shape()[0];
    (0..k)
        .map(|j| {
            let dot: f64 = w
                .row(j)?
                .iter()
                .zip(x.data())
                .map(|(a, b)| a.as_f64() * b.as_f64())
                .sum();
            Ok(dot / temperature)
        })
        .collect()
}

fn linearity(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(opts.seed).fork(1);
    let mut full64 = Worst::new("forward == W x / T (64-bit)", 1e-8);
    let mut full32 = Worst::new("forward == W x / T (32-bit)", 1e-3);
    let mut layer64 = Worst::new("layer output == W_l a_l (64-bit)", 1e-8);
    let mut between = Worst::new("W_{l1->l2} a_l1 == a_l2 (64-bit)", 1e-8);
    for i in 0..opts.draws {
        let (net, image) = draw(i, &mut rng)?;
        let x = net.encode(&image)?;
        let t = net.temperature();
        let logits = net.forward(&image)?;
        let w = net.collapse_full(&image)?;
        full64.see(max_abs_diff(logits.data(), &apply_rows(&w, &x, t)?));

        let net32: CodaNet<f32> = net.cast();
        let image32: Tensor<f32> = image.cast();
        let logits32 = net32.forward(&image32)?;
        let w32 = net32.collapse_full(&image32)?;
        full32.see(max_abs_diff(logits32.data(), &apply_rows(&w32, &x.cast::<f32>(), t)?));

        let acts = net.activations(&image)?;
        for (layer, io) in net.layers().iter().zip(acts.windows(2)) {
            let y = layer.layer_matrix(&io[0])?.apply(io[0].data())?;
            layer64.see(max_abs_diff(&y, io[1].data()));
        }
        let depth = acts.len() - 1;
        let l1 = rng.below(depth);
        let l2 = l1 + 1 + rng.below(depth - l1);
        let m = net.collapse_between(&image, l1, l2)?;
        between.see(max_abs_diff(&apply_rows(&m, &acts[l1], 1.0)?, acts[l2].data()));
    }
    Ok(vec![full64.done(), full32.done(), layer64.done(), between.done()])
}

fn bounds(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(opts.seed).fork(2);
    let mut out = Vec::new();
    for nl in [Nonlinearity::L2, Nonlinearity::Sq] {
        let mut output = Worst::new(format!("|DAU output| <= |x| ({})", nl.name()), 1e-6);
        let mut weight = Worst::new(format!("|w| <= 1 ({})", nl.name()), 1e-6);
        for _ in 0..opts.dau_evaluations {
            let d = 1 + rng.below(24);
            let r = 1 + rng.below(d.min(6));
            let scale = [1e-3, 0.1, 1.0, 10.0, 1e3][rng.below(5)];
            let mut dau = Dau::<f64>::random(d, r, nl, &mut rng);
            let bias_std = rng.uniform() * scale;
            dau.bias = rng.normal(&[d], 0.0, bias_std);
            let x: Tensor<f64> = rng.normal(&[d], 0.0, scale);
            let o = dau.forward(&x)?;
            let xn = x.norm();
            output.see((o.output.abs() - xn) / xn.max(1.0));
            weight.see(o.weights.norm() - 1.0);
        }
        out.push(output.done());
        out.push(weight.done());
    }
    let mut layers = Worst::new("network DAU outputs <= |patch|", 1e-6);
    for i in 0..opts.draws.min(30) {
        let (net, image) = draw(i, &mut rng)?;
        let probe = net.bound_probe(&image)?;
        layers.see(probe.worst_excess);
    }
    out.push(layers.done());
    Ok(out)
}

const FD_STEP: f64 = 1e-5;

/// Sums `v` against a fixed random tensor so every entry reaches the root.
fn probe(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let w = g.constant(Rng::new(seed).normal(&shape, 0.0, 1.0));
    let m = g.mul(v, w)?;
    Ok(g.sum(m))
}

type OpCheck = fn(&mut Rng, u64) -> Result<GradReport>;

fn op_checks() -> Vec<(&'static str, OpCheck)> {
    vec![
        ("add/sub/mul/scale", |rng, s| {
            let (a, b) = (rng.normal(&[3, 4], 0.0, 1.0), rng.normal(&[3, 4], 0.0, 1.0));
            check(&[a, b], FD_STEP, |g, v| {
                let x = g.add(v[0], v[1])?;
                let x = g.sub(x, v[1])?;
                let x = g.mul(x, v[1])?;
                let x = g.scale(x, -1.3);
                probe(g, x, s)
            })
        }),
        ("matmul", |rng, s| {
            let (m, k, n) = (1 + rng.below(4), 1 + rng.below(5), 1 + rng.below(4));
            let (a, b) = (rng.normal(&[m, k], 0.0, 1.0), rng.normal(&[k, n], 0.0, 1.0));
            check(&[a, b], FD_STEP, |g, v| {
                let c = g.matmul(v[0], v[1])?;
                probe(g, c, s)
            })
        }),
        ("sum/sum_axis/reshape", |rng, s| {
            let x = rng.normal(&[2, 3, 4], 0.0, 1.0);
            let axis = rng.below(3);
            check(&[x], FD_STEP, |g, v| {
                let r = g.reshape(v[0], &[6, 4])?;
                let r = g.reshape(r, &[2, 3, 4])?;
                let a = g.sum_axis(r, axis)?;
                let a = probe(g, a, s)?;
                let b = g.sum(v[0]);
                g.add(a, b)
            })
        }),
        ("sigmoid", |rng, s| {
            let x = rng.normal(&[6], 0.0, 3.0);
            check(&[x], FD_STEP, |g, v| {
                let y = g.sigmoid(v[0]);
                probe(g, y, s)
            })
        }),
        ("bce_with_logits", |rng, _| {
            let x = rng.normal(&[5], 0.0, 3.0);
            let y = one_hot(rng.below(5), 5);
            check(&[x], FD_STEP, |g, v| g.bce_with_logits(v[0], &y))
        }),
        ("abs_mean", |rng, _| {
            let x = rng
                .normal::<f64>(&[4, 5], 0.0, 1.0)
                .map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
            check(&[x], FD_STEP, |g, v| g.abs_mean(v[0]))
        }),
        ("rescale (L2)", |rng, s| {
            let std = [0.05, 1.0, 4.0][rng.below(3)];
            let x = rng.normal(&[3, 5, 4], 0.0, std);
            let axis = rng.below(3);
            check(&[x], FD_STEP, |g, v| {
                let y = g.rescale(v[0], axis, Nonlinearity::L2)?;
                probe(g, y, s)
            })
        }),
        ("rescale (SQ)", |rng, s| {
            let std = [0.05, 1.0, 4.0][rng.below(3)];
            let x = rng.normal(&[3, 5, 4], 0.0, std);
            let axis = rng.below(3);
            check(&[x], FD_STEP, |g, v| {
                let y = g.rescale(v[0], axis, Nonlinearity::Sq)?;
                probe(g, y, s)
            })
        }),
        ("unfold/fold/add_row_bias", |rng, s| {
            let geom = ConvGeometry::new(2, 5, 5, 3, 2, 1)?;
            let x = rng.normal(&[2, 5, 5], 0.0, 1.0);
            let cols = rng.normal(&[2, geom.patch_dim(), geom.locations()], 0.0, 1.0);
            let b = rng.normal(&[geom.patch_dim()], 0.0, 1.0);
            check(&[x, cols, b], FD_STEP, |g, v| {
                let u = g.unfold(v[0], geom)?;
                let u = g.add_row_bias(u, v[2])?;
                let f = g.fold(v[1], geom)?;
                let a = probe(g, u, s)?;
                let c = probe(g, f, s + 1)?;
                g.add(a, c)
            })
        }),
        ("dynamic_apply/dynamic_apply_t", |rng, s| {
            let w = rng.normal(&[3, 4, 5], 0.0, 1.0);
            let p = rng.normal(&[4, 5], 0.0, 1.0);
            let r = rng.normal(&[2, 3, 5], 0.0, 1.0);
            check(&[w, p, r], FD_STEP, |g, v| {
                let o = g.dynamic_apply(v[0], v[1])?;
                let t = g.dynamic_apply_t(v[2], v[0])?;
                let a = probe(g, o, s)?;
                let b = probe(g, t, s + 1)?;
                g.add(a, b)
            })
        }),
    ]
}

/// Central-difference check of the full objective w.r.t. every parameter
/// of a small random network.
pub fn loss_gradient_report(net: &CodaNet<f64>, image: &Tensor<f64>, class: usize, seed: u64) -> Result<GradReport> {
    let x = net.encode(image)?;
    let target = one_hot(class, net.num_classes());
    let inputs: Vec<Tensor<f64>> = net.layers().iter().flat_map(|l| l.params()).cloned().collect();
    check(&inputs, FD_STEP, |g, v| {
        let vars: Vec<LayerVars> = v
            .chunks(3)
            .map(|c| LayerVars {
                b_proj: c[0],
                a: c[1],
                bias: c[2],
            })
            .collect();
        let xv = g.constant(x.clone());
        let mut rng = Rng::new(seed);
        Ok(net.loss_graph(g, &vars, xv, &target, &mut rng)?.total)
    })
}

fn gradients(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(opts.seed).fork(3);
    let mut out = Vec::new();
    for (name, op) in op_checks() {
        let mut w = Worst::new(format!("op {name}"), 1e-4);
        for s in 0..10u64 {
            w.see(op(&mut rng, opts.seed.wrapping_add(s))?.max_rel_err);
        }
        out.push(w.done());
    }
    let mut full = Worst::new("full objective (BCE + regulariser)", 1e-3);
    for s in 0..4u64 {
        let nl = if s % 2 == 0 { Nonlinearity::Sq } else { Nonlinearity::L2 };
        let mut cfg = NetConfig::new(
            3,
            2.0,
            nl,
            vec![LayerConfig::new(3, 2, 3, 1), LayerConfig::new(3, 2, 3, 2)],
        );
        cfg.lambda = 0.5;
        let mut net = CodaNet::<f64>::new(cfg, &mut rng)?;
        for l in net.layers_mut() {
            let shape = l.bias.shape().to_vec();
            l.bias = rng.normal(&shape, 0.0, 0.3);
        }
        let image = Tensor::from_fn(&[1, 5, 5], |_| rng.uniform());
        full.see(loss_gradient_report(&net, &image, rng.below(3), s)?.max_rel_err);
    }
    out.push(full.done());
    Ok(out)
}

fn collapse(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(opts.seed).fork(4);
    let mut complete64 = Worst::new("sum of contributions == logit (64-bit)", 1e-8);
    let mut complete32 = Worst::new("sum of contributions == logit (32-bit)", 1e-3);
    let mut routes = Worst::new("map chain == graph rows (64-bit)", 1e-8);
    for i in 0..opts.draws {
        let (net, image) = draw(i, &mut rng)?;
        let x = net.encode(&image)?;
        let k = net.num_classes();
        let mut maps = net.layer_maps(&image)?;
        if let Some(f) = opts.fault {
            let n = maps.len();
            maps.get_mut(f.layer)
                .ok_or(Error::Index {
                    index: f.layer,
                    limit: n,
                })?
                .scale_row(f.row, f.factor)?;
        }
        let eye = Tensor::<f64>::eye(k);
        let w = CodaNet::collapse_maps(&maps, &eye)?;
        let logits = net.forward(&image)?;
        complete64.see(max_abs_diff(logits.data(), &apply_rows(&w, &x, net.temperature())?));
        let classes: Vec<usize> = (0..k).collect();
        let rows = net.collapse_rows(&image, &classes)?;
        routes.see(max_abs_diff(w.data(), rows.data()) / w.max_abs().max(1.0));

        let net32: CodaNet<f32> = net.cast();
        let image32: Tensor<f32> = image.cast();
        let logits32 = net32.forward(&image32)?;
        let j = rng.below(k);
        let c = net32.contributions(&image32, j)?;
        complete32.see((c.total() - logits32.data()[j]).abs() as f64);
    }
    Ok(vec![complete64.done(), complete32.done(), routes.done()])
}
