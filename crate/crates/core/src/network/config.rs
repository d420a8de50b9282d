use serde::{Deserialize, Serialize};

use crate::autodiff::Nonlinearity;
use crate::dau::LayerSpec;
use crate::error::{Error, Result};

/// One `[[layer]]` entry: the columns of an architecture table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub daus: usize,
    pub rank: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    /// Defaults to `(kernel - 1) / 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
}

fn one() -> usize {
    1
}

impl LayerConfig {
    pub const fn new(daus: usize, rank: usize, kernel: usize, stride: usize) -> Self {
        LayerConfig {
            daus,
            rank,
            kernel,
            stride,
            padding: None,
        }
    }

    pub fn padding(&self) -> usize {
        self.padding.unwrap_or(self.kernel.saturating_sub(1) / 2)
    }
}

/// Fixed output bias: one value for every class, or one per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OutputBias {
    Shared(f64),
    PerClass(Vec<f64>),
}

/// Which rows of `W_{0->L}` enter the regulariser.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaClasses {
    /// True class plus one incorrect class drawn per image.
    #[default]
    Pair,
    All,
}

/// Network architecture and objective hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub num_classes: usize,
    #[serde(default = "default_nonlinearity")]
    pub nonlinearity: Nonlinearity,
    pub temperature: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "yes")]
    pub encode_negative: bool,
    /// Defaults to `ln(1 / (k - 1))` for every class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b0: Option<OutputBias>,
    #[serde(default)]
    pub lambda_classes: LambdaClasses,
    #[serde(rename = "layer")]
    pub layers: Vec<LayerConfig>,
}

fn default_name() -> String {
    "coda".into()
}

fn default_nonlinearity() -> Nonlinearity {
    Nonlinearity::Sq
}

fn yes() -> bool {
    true
}

impl NetConfig {
    pub fn new(num_classes: usize, temperature: f64, nonlinearity: Nonlinearity, layers: Vec<LayerConfig>) -> Self {
        NetConfig {
            name: default_name(),
            num_classes,
            nonlinearity,
            temperature,
            lambda: 0.0,
            encode_negative: true,
            b0: None,
            lambda_classes: LambdaClasses::Pair,
            layers,
        }
    }

    pub fn input_channels(&self) -> usize {
        if self.encode_negative {
            6
        } else {
            3
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("at least one [[layer]] is required".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        let last = self.layers.last().expect("non-empty").daus;
        if last != self.num_classes {
            return Err(Error::Config(format!(
                "last layer has {last} DAUs but num_classes is {}",
                self.num_classes
            )));
        }
        if let Some(OutputBias::PerClass(v)) = &self.b0 {
            if v.len() != self.num_classes {
                return Err(Error::Config(format!(
                    "b0 has {} entries for {} classes",
                    v.len(),
                    self.num_classes
                )));
            }
        }
        for spec in self.layer_specs_unchecked() {
            spec.validate()?;
        }
        Ok(())
    }

    fn layer_specs_unchecked(&self) -> Vec<LayerSpec> {
        let mut c = self.input_channels();
        self.layers
            .iter()
            .map(|l| {
                let spec = LayerSpec {
                    in_channels: c,
                    out_channels: l.daus,
                    rank: l.rank,
                    kernel: l.kernel,
                    stride: l.stride,
                    padding: l.padding(),
                    nonlinearity: self.nonlinearity,
                };
                c = l.daus;
                spec
            })
            .collect()
    }

    /// Per-layer specs with channels chained from the input encoding.
    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        Ok(self.layer_specs_unchecked())
    }

    /// Output bias per class.
    pub fn b0(&self) -> Vec<f64> {
        match &self.b0 {
            Some(OutputBias::Shared(v)) => vec![*v; self.num_classes],
            Some(OutputBias::PerClass(v)) => v.clone(),
            None => vec![(1.0 / (self.num_classes as f64 - 1.0)).ln(); self.num_classes],
        }
    }

    /// Spatial size after all layers for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (mut h, mut w) = (h, w);
        for spec in self.layer_specs()? {
            let g = spec.geometry(h, w)?;
            (h, w) = (g.out_height(), g.out_width());
        }
        Ok((h, w))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: NetConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Named architectures. `s-coda` and `m-coda` are CIFAR-10 nets, `l-coda`
    /// has 100 classes and `xl-coda` 200; the rest are small desk-scale nets.
    pub fn preset(name: &str) -> Result<Self> {
        let l = LayerConfig::new;
        let (classes, t, layers) = match name {
            "s-coda" => (
                10,
                1000.0,
                vec![
                    l(16, 32, 3, 1),
                    l(16, 32, 3, 1),
                    l(32, 64, 3, 2),
                    l(32, 64, 3, 1),
                    l(32, 64, 3, 1),
                    l(64, 64, 3, 2),
                    l(64, 64, 3, 1),
                    l(64, 64, 3, 1),
                    l(10, 64, 1, 1),
                ],
            ),
            "m-coda" => (
                10,
                1000.0,
                vec![
                    l(16, 54, 3, 1),
                    l(16, 64, 3, 1),
                    l(32, 128, 3, 2),
                    l(32, 128, 3, 1),
                    l(32, 128, 3, 1),
                    l(64, 256, 3, 2),
                    l(64, 256, 3, 1),
                    l(64, 256, 3, 1),
                    l(10, 64, 1, 1),
                ],
            ),
            "l-coda" => (
                100,
                1e5,
                vec![
                    l(16, 64, 7, 3),
                    l(32, 64, 3, 1),
                    l(32, 64, 3, 1),
                    l(64, 128, 3, 2),
                    l(64, 128, 3, 1),
                    l(64, 128, 3, 1),
                    l(64, 256, 3, 2),
                    l(64, 256, 3, 1),
                    l(100, 256, 3, 1),
                ],
            ),
            "xl-coda" => (
                200,
                6400.0,
                vec![
                    l(16, 64, 5, 1),
                    l(32, 64, 3, 1),
                    l(32, 128, 3, 2),
                    l(64, 128, 3, 1),
                    l(64, 128, 3, 1),
                    l(64, 256, 3, 2),
                    l(64, 256, 3, 1),
                    l(64, 256, 3, 1),
                    l(200, 256, 3, 2),
                ],
            ),
            "tiny-1" => (3, 8.0, vec![l(3, 8, 3, 1)]),
            "tiny-3" => (
                3,
                16.0,
                vec![
                    l(8, 8, 3, 1),
                    LayerConfig {
                        padding: Some(1),
                        ..l(8, 8, 4, 2)
                    },
                    l(3, 8, 3, 1),
                ],
            ),
            "mnist-4" => (
                10,
                64.0,
                vec![
                    LayerConfig {
                        padding: Some(1),
                        ..l(16, 8, 4, 2)
                    },
                    LayerConfig {
                        padding: Some(1),
                        ..l(32, 16, 4, 2)
                    },
                    l(32, 16, 3, 2),
                    l(10, 16, 3, 1),
                ],
            ),
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset '{name}' (known: {})",
                    Self::PRESETS.join(", ")
                )))
            }
        };
        let mut cfg = NetConfig::new(classes, t, Nonlinearity::Sq, layers);
        cfg.name = name.into();
        Ok(cfg)
    }

    pub const PRESETS: [&'static str; 7] = ["s-coda", "m-coda", "l-coda", "xl-coda", "tiny-1", "tiny-3", "mnist-4"];
}
