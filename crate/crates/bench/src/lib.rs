//! Shared fixtures for the benchmarks.

use coda::datasets::{digit_glyph, make_noisy_digits, LabeledImageSet};
use coda::network::LayerConfig;
use coda::{CodaNet, NetConfig, Rng, Tensor};

/// A preset network with random parameters and a uniform random image.
pub fn preset_net(name: &str, size: usize, seed: u64) -> (CodaNet<f32>, Tensor<f32>) {
    let cfg = NetConfig::preset(name).expect("known preset");
    let mut rng = Rng::new(seed);
    let channels = cfg.input_channels() / if cfg.encode_negative { 2 } else { 1 };
    let net = CodaNet::new(cfg, &mut rng).expect("valid preset");
    let image = Tensor::<f64>::from_fn(&[channels, size, size], |_| rng.uniform()).cast();
    (net, image)
}

/// Small three-class net on 10 x 10 noisy digits.
pub fn digit_fixture(n: usize) -> (CodaNet<f32>, LabeledImageSet) {
    let cfg = NetConfig::new(
        3,
        8.0,
        coda::Nonlinearity::Sq,
        vec![
            LayerConfig::new(8, 8, 3, 1),
            LayerConfig {
                padding: Some(1),
                ..LayerConfig::new(3, 8, 4, 2)
            },
        ],
    );
    let bases: Vec<_> = [0, 1, 7].iter().map(|&d| digit_glyph(d, 10).expect("glyph")).collect();
    let mut rng = Rng::new(0);
    let set = make_noisy_digits(&bases, n, 0.25, &mut rng).expect("divisible");
    (CodaNet::new(cfg, &mut rng).expect("valid config"), set)
}
