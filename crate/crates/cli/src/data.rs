use std::path::{Path, PathBuf};
use std::str::FromStr;

use coda::datasets::{self, digit_glyph, make_noisy_digits, LabeledImageSet};
use coda::{Error, Result, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Where images come from: an MNIST directory, a CIFAR-10 batch directory or
/// single `.bin` file, or the synthetic noisy-digit set.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Mnist(PathBuf),
    CifarDir(PathBuf),
    CifarFile(PathBuf),
    Noisy(NoisySpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisySpec {
    pub n: usize,
    pub noise: f64,
    pub size: usize,
    pub digits: Vec<usize>,
    pub seed: u64,
}

impl Default for NoisySpec {
    fn default() -> Self {
        NoisySpec {
            n: datasets::NOISY_DIGITS_DEFAULT_N,
            noise: datasets::NOISY_DIGITS_DEFAULT_NOISE,
            size: 16,
            digits: vec![0, 1, 7],
            seed: 0,
        }
    }
}

fn parse_digits(s: &str) -> Result<Vec<usize>, String> {
    let digits: Vec<usize> = s
        .split([',', '+'])
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| format!("bad digit {t:?}")))
        .collect::<Result<_, _>>()?;
    if digits.is_empty() || digits.iter().any(|&d| d > 9) {
        return Err(format!("digits must be 0-9, got {s:?}"));
    }
    Ok(digits)
}

impl FromStr for DataSource {
    type Err = String;

    /// `noisy-digits[:key=value,...]` with keys `n`, `noise`, `size`,
    /// `digits` (e.g. `0+1+7`) and `seed`; otherwise a path, which is only
    /// checked when loaded.
    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(rest) = s.strip_prefix("noisy-digits") {
            let mut spec = NoisySpec::default();
            let rest = match rest.strip_prefix(':') {
                Some(r) => r,
                None if rest.is_empty() => "",
                None => return Err(format!("unknown data source {s:?}")),
            };
            for kv in rest.split(',').filter(|t| !t.is_empty()) {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| format!("expected key=value, got {kv:?}"))?;
                let bad = || format!("bad value for {k}: {v:?}");
                match k {
                    "n" => spec.n = v.parse().map_err(|_| bad())?,
                    "noise" => spec.noise = v.parse().map_err(|_| bad())?,
                    "size" => spec.size = v.parse().map_err(|_| bad())?,
                    "seed" => spec.seed = v.parse().map_err(|_| bad())?,
                    "digits" => spec.digits = parse_digits(v)?,
                    _ => return Err(format!("unknown noisy-digits key {k:?}")),
                }
            }
            return Ok(DataSource::Noisy(spec));
        }
        let path = PathBuf::from(s);
        if path.is_dir() && (path.join("data_batch_1.bin").exists() || path.join("test_batch.bin").exists()) {
            Ok(DataSource::CifarDir(path))
        } else if path.extension().is_some_and(|e| e == "bin") {
            Ok(DataSource::CifarFile(path))
        } else {
            Ok(DataSource::Mnist(path))
        }
    }
}

fn concat(sets: Vec<LabeledImageSet>) -> Result<LabeledImageSet> {
    let first = sets.first().ok_or_else(|| Error::Input("no image files".into()))?;
    let (c, h, w) = first.image_shape();
    let names = first.class_names().to_vec();
    let n: usize = sets.iter().map(LabeledImageSet::len).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for s in &sets {
        data.extend_from_slice(s.images().data());
        labels.extend_from_slice(s.labels());
    }
    LabeledImageSet::new(Tensor::new(&[n, c, h, w], data)?, labels, names)
}

fn cifar_dir(dir: &Path, split: Split) -> Result<LabeledImageSet> {
    match split {
        Split::Train => concat(
            (1..=5)
                .map(|i| datasets::load_cifar10_bin(dir.join(format!("data_batch_{i}.bin"))))
                .collect::<Result<_>>()?,
        ),
        Split::Test => datasets::load_cifar10_bin(dir.join("test_batch.bin")),
    }
}

impl DataSource {
    pub fn load(&self, split: Split) -> Result<LabeledImageSet> {
        match self {
            DataSource::Mnist(dir) => datasets::load_mnist(dir, split == Split::Train),
            DataSource::CifarDir(dir) => cifar_dir(dir, split),
            DataSource::CifarFile(path) => datasets::load_cifar10_bin(path),
            DataSource::Noisy(spec) => {
                let bases = spec
                    .digits
                    .iter()
                    .map(|&d| digit_glyph(d, spec.size))
                    .collect::<Result<Vec<_>>>()?;
                let stream = match split {
                    Split::Train => 0,
                    Split::Test => 1,
                };
                let mut set = make_noisy_digits(&bases, spec.n, spec.noise, &mut Rng::new(spec.seed).fork(stream))?;
                // blocks of one class are interleaved so that prefixes are balanced
                let k = bases.len();
                let per = spec.n / k;
                let order: Vec<usize> = (0..spec.n).map(|i| (i % k) * per + i / k).collect();
                set = set.subset(&order)?;
                Ok(set)
            }
        }
    }
}
