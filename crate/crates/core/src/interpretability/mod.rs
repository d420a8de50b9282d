//! Attribution maps, localisation and faithfulness metrics, the cascading
//! randomisation check, DAU eigenvectors and heatmap rendering.

mod eigen;
mod heatmap;

pub use eigen::{
    dau_eigenvectors, eigen_recovery, maximise_output, subspace_cosine, EigenPair, EigenRecovery, OutputMaxConfig,
};
pub use heatmap::{heatmap_colour, heatmap_ppm, percentile, render_heatmap};

use std::fmt;
use std::str::FromStr;

use crate::autodiff::Graph;
use crate::datasets::{make_grids, GridSample, LabeledImageSet};
use crate::error::{Error, Result};
use crate::network::{normalized_distance, one_hot, CodaNet, ContributionMap};
use crate::parallel::par_map;
use crate::tensor::{Rng, Scalar, Tensor};

/// How a per-pixel explanation is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttributionMethod {
    /// The model-inherent contribution map.
    Coda,
    /// Gradient of the class logit w.r.t. the encoded input.
    Grad,
    /// Gradient times encoded input.
    Ixg,
    /// Logit drop when a `size x size` patch of the encoded input is zeroed.
    Occlusion { size: usize, stride: usize },
}

impl AttributionMethod {
    pub const OCCLUSION_STRIDE: usize = 2;
}

impl fmt::Display for AttributionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttributionMethod::Coda => f.write_str("coda"),
            AttributionMethod::Grad => f.write_str("grad"),
            AttributionMethod::Ixg => f.write_str("ixg"),
            AttributionMethod::Occlusion { size, stride } => write!(f, "occ{size}s{stride}"),
        }
    }
}

impl FromStr for AttributionMethod {
    type Err = Error;

    /// `coda`, `grad`, `ixg`, `occ` (patch 5), `occK` or `occKsS`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Input(format!(
                "unknown attribution method {s:?} (expected coda, grad, ixg, occ[K[sS]])"
            ))
        };
        match s {
            "coda" => Ok(AttributionMethod::Coda),
            "grad" => Ok(AttributionMethod::Grad),
            "ixg" => Ok(AttributionMethod::Ixg),
            _ => {
                let rest = s.strip_prefix("occ").ok_or_else(bad)?;
                let (size, stride) = match rest.split_once('s') {
                    Some((k, st)) => (k, st),
                    None => (rest, ""),
                };
                let size = if size.is_empty() {
                    5
                } else {
                    size.parse().map_err(|_| bad())?
                };
                let stride = if stride.is_empty() {
                    Self::OCCLUSION_STRIDE
                } else {
                    stride.parse().map_err(|_| bad())?
                };
                if size == 0 || stride == 0 {
                    return Err(bad());
                }
                Ok(AttributionMethod::Occlusion { size, stride })
            }
        }
    }
}

/// Per-pixel attribution `H x W` of `image` for class `class`.
pub fn attribute<S: Scalar>(
    method: AttributionMethod,
    net: &CodaNet<S>,
    image: &Tensor<S>,
    class: usize,
) -> Result<Tensor<S>> {
    if class >= net.num_classes() {
        return Err(Error::Index {
            index: class,
            limit: net.num_classes(),
        });
    }
    match method {
        AttributionMethod::Coda => Ok(net.contributions(image, class)?.spatial()),
        AttributionMethod::Grad => {
            let (grad, _) = input_gradient(net, image, class)?;
            Ok(channel_sum(&grad))
        }
        AttributionMethod::Ixg => {
            let (grad, x) = input_gradient(net, image, class)?;
            Ok(channel_sum(&grad.mul(&x)?))
        }
        AttributionMethod::Occlusion { size, stride } => occlusion(net, image, class, size, stride),
    }
}

/// Gradient of logit `class` w.r.t. the encoded input, and that input.
pub fn input_gradient<S: Scalar>(net: &CodaNet<S>, image: &Tensor<S>, class: usize) -> Result<(Tensor<S>, Tensor<S>)> {
    let x = net.encode(image)?;
    let mut g = Graph::new();
    let vars = net.bind(&mut g, false);
    let xv = g.leaf(x.clone(), true);
    let trace = net.forward_graph(&mut g, xv, &vars)?;
    let pick = g.constant(one_hot(class, net.num_classes()));
    let picked = g.mul(trace.logits, pick)?;
    let logit = g.sum(picked);
    let mut grads = g.backward(logit)?;
    let grad = grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((grad, x))
}

/// Sums a `C x H x W` tensor over channels.
pub fn channel_sum<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let [c, h, w] = t.shape()[..] else {
        panic!("channel_sum expects a rank-3 tensor, got {:?}", t.shape());
    };
    let hw = h * w;
    Tensor::from_fn(&[h, w], |i| {
        let p = i[0] * w + i[1];
        (0..c).fold(S::zero(), |acc, ch| acc + t.data()[ch * hw + p])
    })
}

fn occlusion<S: Scalar>(
    net: &CodaNet<S>,
    image: &Tensor<S>,
    class: usize,
    size: usize,
    stride: usize,
) -> Result<Tensor<S>> {
    let x = net.encode(image)?;
    let [c, h, w] = x.shape()[..] else { unreachable!() };
    if size == 0 || stride == 0 || size > h.min(w) {
        return Err(Error::Geometry(format!(
            "occlusion patch {size} with stride {stride} does not fit a {h}x{w} image"
        )));
    }
    let base = net.forward_encoded(&x)?.data()[class];
    let ys: Vec<usize> = (0..=h - size).step_by(stride).collect();
    let xs: Vec<usize> = (0..=w - size).step_by(stride).collect();
    let mut drops = vec![0.0f64; ys.len() * xs.len()];
    for (iy, &y0) in ys.iter().enumerate() {
        for (ix, &x0) in xs.iter().enumerate() {
            let mut occ = x.clone();
            let data = occ.data_mut();
            for ch in 0..c {
                for y in y0..y0 + size {
                    let row = (ch * h + y) * w;
                    data[row + x0..row + x0 + size].fill(S::zero());
                }
            }
            let logit = net.forward_encoded(&occ)?.data()[class];
            drops[iy * xs.len() + ix] = (base - logit).as_f64();
        }
    }
    // Patch centres carry the drops; pixels interpolate between them.
    let half = (size as f64 - 1.0) / 2.0;
    let cy: Vec<f64> = ys.iter().map(|&y| y as f64 + half).collect();
    let cx: Vec<f64> = xs.iter().map(|&x| x as f64 + half).collect();
    Ok(Tensor::from_fn(&[h, w], |i| {
        let (y0, y1, ty) = bracket(&cy, i[0] as f64);
        let (x0, x1, tx) = bracket(&cx, i[1] as f64);
        let at = |a: usize, b: usize| drops[a * cx.len() + b];
        let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
        let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
        S::of(top * (1.0 - ty) + bottom * ty)
    }))
}

/// Neighbouring knots of `p` in the sorted `knots` and the blend weight,
/// clamped to the ends.
fn bracket(knots: &[f64], p: f64) -> (usize, usize, f64) {
    let last = knots.len() - 1;
    if p <= knots[0] {
        return (0, 0, 0.0);
    }
    if p >= knots[last] {
        return (last, last, 0.0);
    }
    let hi = knots.partition_point(|&k| k <= p).min(last);
    let lo = hi - 1;
    (lo, hi, (p - knots[lo]) / (knots[hi] - knots[lo]))
}

/// Share of positive attribution that falls in the cell of `class`.
///
/// `attr` covers the whole `n*H x n*W` grid image. Returns `1/n^2` when no
/// attribution is positive.
pub fn pointing_score<S: Scalar>(attr: &Tensor<S>, grid: &GridSample, class: usize) -> Result<f64> {
    let n = grid.n;
    let (gh, gw) = (grid.image.shape()[1], grid.image.shape()[2]);
    if attr.shape() != [gh, gw] {
        return Err(Error::shape("pointing_score", attr.shape(), &[gh, gw]));
    }
    let cell = grid
        .cell_of(class)
        .ok_or_else(|| Error::Input(format!("class {class} does not appear in the grid")))?;
    let (ch, cw) = (gh / n, gw / n);
    let (mut inside, mut total) = (0.0, 0.0);
    for y in 0..gh {
        for x in 0..gw {
            let v = attr.data()[y * gw + x].as_f64();
            if v > 0.0 {
                total += v;
                if (y / ch) * n + x / cw == cell {
                    inside += v;
                }
            }
        }
    }
    if total == 0.0 {
        return Ok(1.0 / (n * n) as f64);
    }
    Ok(inside / total)
}

/// Order in which pixels are removed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RemovalOrder {
    LeastFirst,
    MostFirst,
    /// Uniformly random order from the given seed.
    Random(u64),
}

impl fmt::Display for RemovalOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RemovalOrder::LeastFirst => f.write_str("least-first"),
            RemovalOrder::MostFirst => f.write_str("most-first"),
            RemovalOrder::Random(seed) => write!(f, "random({seed})"),
        }
    }
}

/// Class logit as a growing fraction of pixels is removed.
#[derive(Clone, Debug, PartialEq)]
pub struct RemovalCurve {
    pub order: RemovalOrder,
    /// Strictly increasing, starting at 0.
    pub fractions: Vec<f64>,
    pub logits: Vec<f64>,
}

impl RemovalCurve {
    /// Trapezoidal area under the curve.
    pub fn area(&self) -> f64 {
        self.fractions
            .windows(2)
            .zip(self.logits.windows(2))
            .map(|(f, l)| (f[1] - f[0]) * (l[0] + l[1]) / 2.0)
            .sum()
    }
}

/// Largest removed fraction.
pub const MAX_REMOVED: f64 = 0.25;

/// Pixel positions sorted for removal. Ties keep row-major order.
pub fn removal_order<S: Scalar>(ranking: &Tensor<S>, order: RemovalOrder) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..ranking.len()).collect();
    let key = |i: &usize| ranking.data()[*i].as_f64();
    match order {
        RemovalOrder::LeastFirst => idx.sort_by(|a, b| key(a).total_cmp(&key(b))),
        RemovalOrder::MostFirst => idx.sort_by(|a, b| key(b).total_cmp(&key(a))),
        RemovalOrder::Random(seed) => Rng::new(seed).shuffle(&mut idx),
    }
    idx
}

/// Zeroes all encoded channels of pixels in `ranking` order and records the
/// logit of `class` at `steps + 1` evenly spaced fractions up to 25%.
pub fn pixel_removal_curve<S: Scalar>(
    net: &CodaNet<S>,
    image: &Tensor<S>,
    class: usize,
    ranking: &Tensor<S>,
    order: RemovalOrder,
    steps: usize,
) -> Result<RemovalCurve> {
    let mut x = net.encode(image)?;
    let [c, h, w] = x.shape()[..] else { unreachable!() };
    if ranking.shape() != [h, w] {
        return Err(Error::shape("pixel_removal_curve", ranking.shape(), &[h, w]));
    }
    if class >= net.num_classes() {
        return Err(Error::Index {
            index: class,
            limit: net.num_classes(),
        });
    }
    if steps == 0 {
        return Err(Error::Input("pixel removal needs at least one step".into()));
    }
    let pixels = removal_order(ranking, order);
    let hw = h * w;
    let mut fractions = Vec::with_capacity(steps + 1);
    let mut logits = Vec::with_capacity(steps + 1);
    let mut removed = 0;
    for s in 0..=steps {
        let frac = MAX_REMOVED * s as f64 / steps as f64;
        let target = (frac * hw as f64).round() as usize;
        for &p in &pixels[removed..target] {
            for ch in 0..c {
                x.data_mut()[ch * hw + p] = S::zero();
            }
        }
        removed = target;
        fractions.push(frac);
        logits.push(net.forward_encoded(&x)?.data()[class].as_f64());
    }
    Ok(RemovalCurve {
        order,
        fractions,
        logits,
    })
}

/// Contribution maps as layers are re-initialised one at a time, deepest
/// first. Entry `i` holds the map after layers `L-1-i ..= L-1` were reset.
pub fn sanity_randomization<S: Scalar>(
    net: &CodaNet<S>,
    image: &Tensor<S>,
    class: usize,
    rng: &mut Rng,
) -> Result<Vec<(usize, ContributionMap<S>)>> {
    let mut work = net.clone();
    let mut out = Vec::with_capacity(net.layers().len());
    for l in (0..net.layers().len()).rev() {
        work.reinit_layer(l, rng)?;
        out.push((l, work.contributions(image, class)?));
    }
    Ok(out)
}

/// Cumulative path length of successive maps, relative to the first:
/// `D_i = sum_{k<=i} |m_k - m_{k-1}| / |m_0|` for `i >= 1`.
pub fn cumulative_distances<S: Scalar>(original: &Tensor<S>, maps: &[Tensor<S>]) -> Result<Vec<f64>> {
    let mut prev = original;
    let mut acc = 0.0;
    let norm = original.norm().as_f64();
    let mut out = Vec::with_capacity(maps.len());
    for m in maps {
        let step = m.sub(prev)?.norm().as_f64();
        acc += if norm > 0.0 { step / norm } else { step };
        out.push(acc);
        prev = m;
    }
    Ok(out)
}

/// Distance of each randomised map from the original, `|m_i - m_0| / |m_0|`.
pub fn distances_from_original<S: Scalar>(original: &Tensor<S>, maps: &[Tensor<S>]) -> Result<Vec<f64>> {
    maps.iter().map(|m| normalized_distance(original, m)).collect()
}

/// Logit of the labelled class for every image; ranks grid candidates.
pub fn true_class_logits<S: Scalar>(net: &CodaNet<S>, set: &LabeledImageSet) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    par_map(&idx, |_, &i| {
        Ok(net.forward(&set.image::<S>(i))?.data()[set.label(i)].as_f64())
    })
}

/// Pointing scores on `count` grids of `n x n` images, one list per method
/// holding the score of every cell of every grid (grid-major). All methods
/// see the same grids.
pub fn pointing_game<S: Scalar>(
    net: &CodaNet<S>,
    set: &LabeledImageSet,
    methods: &[AttributionMethod],
    n: usize,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>> {
    let scores = true_class_logits(net, set)?;
    let grids = make_grids(set, &scores, n, count, rng)?;
    let per_grid = par_map(&grids, |_, grid| -> Result<Vec<Vec<f64>>> {
        let image: Tensor<S> = grid.image.cast();
        methods
            .iter()
            .map(|&m| {
                grid.cells
                    .iter()
                    .map(|&c| pointing_score(&attribute(m, net, &image, c)?, grid, c))
                    .collect()
            })
            .collect()
    })?;
    let mut out = vec![Vec::with_capacity(count * n * n); methods.len()];
    for g in per_grid {
        for (acc, s) in out.iter_mut().zip(g) {
            acc.extend(s);
        }
    }
    Ok(out)
}

/// Removal-curve areas for one image and its labelled class: least-first
/// under the inherent ranking, and the mean over `random_orders` random
/// orders seeded `seed, seed + 1, ...`.
pub fn removal_areas<S: Scalar>(
    net: &CodaNet<S>,
    image: &Tensor<S>,
    class: usize,
    steps: usize,
    random_orders: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let ranking = attribute(AttributionMethod::Coda, net, image, class)?;
    let least = pixel_removal_curve(net, image, class, &ranking, RemovalOrder::LeastFirst, steps)?.area();
    let mut random = 0.0;
    for k in 0..random_orders as u64 {
        random += pixel_removal_curve(net, image, class, &ranking, RemovalOrder::Random(seed + k), steps)?.area();
    }
    Ok((least, random / random_orders.max(1) as f64))
}

/// Cumulative distances of the cascading randomisation maps from the
/// original map, deepest layer first.
pub fn sanity_distances<S: Scalar>(
    net: &CodaNet<S>,
    image: &Tensor<S>,
    class: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let original = net.contributions(image, class)?.values;
    let maps: Vec<Tensor<S>> = sanity_randomization(net, image, class, rng)?
        .into_iter()
        .map(|(_, m)| m.values)
        .collect();
    cumulative_distances(&original, &maps)
}

/// Key-value metric summary, one `key=value` per line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricSummary {
    pub entries: Vec<(String, String)>,
}

impl MetricSummary {
    pub fn push(&mut self, key: impl Into<String>, value: impl fmt::Display) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut s = MetricSummary::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("line {}: expected key=value", i + 1)))?;
            s.push(k.trim(), v.trim());
        }
        Ok(s)
    }
}

impl fmt::Display for MetricSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}
