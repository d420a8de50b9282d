use super::*;
use crate::autodiff::gradcheck::check;
use crate::autodiff::Nonlinearity;
use crate::dau::LayerSpec;

fn image<S: Scalar>(rng: &mut Rng, c: usize, h: usize, w: usize) -> Tensor<S> {
    let t: Tensor<f64> = Tensor::from_fn(&[c, h, w], |_| rng.uniform());
    t.cast()
}

fn with_bias(mut net: CodaNet<f64>, rng: &mut Rng) -> CodaNet<f64> {
    for l in net.layers_mut() {
        let shape = l.bias.shape().to_vec();
        l.bias = rng.normal(&shape, 0.0, 0.2);
    }
    net
}

fn small_net(layers: Vec<LayerConfig>, classes: usize, t: f64, rng: &mut Rng) -> CodaNet<f64> {
    let cfg = NetConfig::new(classes, t, Nonlinearity::Sq, layers);
    with_bias(CodaNet::new(cfg, rng).unwrap(), rng)
}

#[test]
fn encoding_examples() {
    let zeros = Tensor::<f64>::zeros(&[3, 2, 2]);
    let e = encode_input(&zeros, true).unwrap();
    assert_eq!(e.shape(), &[6, 2, 2]);
    assert!(e.data()[..12].iter().all(|&v| v == 0.0));
    assert!(e.data()[12..].iter().all(|&v| v == 1.0));
    let half = Tensor::<f64>::full(&[3, 2, 2], 0.5);
    assert!(encode_input(&half, true).unwrap().data().iter().all(|&v| v == 0.5));
    let gray = Tensor::<f64>::from_fn(&[1, 2, 3], |i| (i[1] * 3 + i[2]) as f64 / 8.0);
    let e = encode_input(&gray, true).unwrap();
    for c in 0..3 {
        assert_eq!(e.index_axis0(c).unwrap().data(), gray.data());
        let neg = e.index_axis0(c + 3).unwrap();
        for (n, g) in neg.data().iter().zip(gray.data()) {
            assert_eq!(*n, 1.0 - g);
        }
    }
    assert_eq!(encode_input(&gray, false).unwrap().shape(), &[3, 2, 3]);
    assert!(matches!(
        encode_input(&Tensor::<f64>::full(&[3, 1, 1], 1.5), true),
        Err(Error::Input(_))
    ));
    assert!(matches!(
        encode_input(&Tensor::<f64>::zeros(&[2, 1, 1]), true),
        Err(Error::Input(_))
    ));
}

#[test]
fn encoded_pixel_norm_is_symmetric() {
    let mut rng = Rng::new(1);
    let img: Tensor<f64> = image(&mut rng, 3, 4, 4);
    let flipped = img.map(|v| 1.0 - v);
    let (a, b) = (encode_input(&img, true).unwrap(), encode_input(&flipped, true).unwrap());
    for p in 0..16 {
        let na: f64 = (0..6).map(|c| a.data()[c * 16 + p].powi(2)).sum();
        let nb: f64 = (0..6).map(|c| b.data()[c * 16 + p].powi(2)).sum();
        assert!((na - nb).abs() < 1e-12);
        assert!(na > 0.0);
    }
}

#[test]
fn doubling_temperature_halves_logits_exactly() {
    let mut rng = Rng::new(2);
    let net = small_net(NetConfig::preset("tiny-3").unwrap().layers, 3, 16.0, &mut rng);
    let img = image(&mut rng, 3, 8, 8);
    let a = net.forward(&img).unwrap();
    for k in [1, 3] {
        let mut hot = net.clone();
        hot.set_temperature(16.0 * 2f64.powi(k)).unwrap();
        let b = hot.forward(&img).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, y * 2f64.powi(k));
        }
    }
}

#[test]
fn forward_matches_collapsed_matrix() {
    let mut rng = Rng::new(3);
    for _ in 0..5 {
        let net = small_net(NetConfig::preset("tiny-3").unwrap().layers, 3, 16.0, &mut rng);
        let img = image(&mut rng, 3, 8, 8);
        let w = net.collapse_full(&img).unwrap();
        assert_eq!(w.shape(), &[3, 6 * 64]);
        let x = net.encode(&img).unwrap().reshape(&[384, 1]).unwrap();
        let via = w.matmul(&x).unwrap().scale(1.0 / 16.0).reshape(&[3]).unwrap();
        assert!(via.max_abs_diff(&net.forward(&img).unwrap()).unwrap() < 1e-8);

        let net32: CodaNet<f32> = net.cast();
        let img32: Tensor<f32> = img.cast();
        let w = net32.collapse_full(&img32).unwrap();
        let x = net32.encode(&img32).unwrap().reshape(&[384, 1]).unwrap();
        let via = w.matmul(&x).unwrap().scale(1.0 / 16.0).reshape(&[3]).unwrap();
        assert!(via.max_abs_diff(&net32.forward(&img32).unwrap()).unwrap() < 1e-3);
    }
}

#[test]
fn single_layer_collapse_is_pool_times_layer_matrix() {
    let mut rng = Rng::new(4);
    let net = small_net(vec![LayerConfig::new(3, 4, 3, 1)], 3, 8.0, &mut rng);
    let img = image(&mut rng, 3, 5, 5);
    let x = net.encode(&img).unwrap();
    let m = net.layers()[0].layer_matrix(&x).unwrap().to_dense();
    let pool = LayerLinearMap::<f64>::sum_pool(3, 5, 5).to_dense();
    let expect = pool.matmul(&m).unwrap();
    assert!(net.collapse_full(&img).unwrap().max_abs_diff(&expect).unwrap() < 1e-12);
}

#[test]
fn intermediate_collapse_maps_activations() {
    let mut rng = Rng::new(5);
    let net = small_net(NetConfig::preset("tiny-3").unwrap().layers, 3, 16.0, &mut rng);
    let img = image(&mut rng, 3, 8, 8);
    let acts = net.activations(&img).unwrap();
    let n = acts.len();
    for l1 in 0..n {
        for l2 in l1..n {
            let w = net.collapse_between(&img, l1, l2).unwrap();
            let a1 = acts[l1].clone();
            let len = a1.len();
            let got = w.matmul(&a1.reshape(&[len, 1]).unwrap()).unwrap();
            let want = acts[l2].clone();
            let len2 = want.len();
            assert!(
                got.max_abs_diff(&want.reshape(&[len2, 1]).unwrap()).unwrap() < 1e-9,
                "{l1}->{l2}"
            );
        }
    }
    let pooled = net.collapse_between(&img, 0, n).unwrap();
    assert!(pooled.max_abs_diff(&net.collapse_full(&img).unwrap()).unwrap() < 1e-12);
    assert!(net.collapse_between(&img, 2, 1).is_err());
}

#[test]
fn collapse_rows_match_full_collapse() {
    let mut rng = Rng::new(6);
    let net = small_net(NetConfig::preset("tiny-3").unwrap().layers, 3, 16.0, &mut rng);
    let img = image(&mut rng, 3, 8, 8);
    let full = net.collapse_full(&img).unwrap();
    let all = net.collapse_rows(&img, &[0, 1, 2]).unwrap();
    assert!(all.max_abs_diff(&full).unwrap() < 1e-8);
    let one = net.collapse_rows(&img, &[2]).unwrap();
    let row = Tensor::new(&[1, full.shape()[1]], full.row(2).unwrap().to_vec()).unwrap();
    assert!(one.max_abs_diff(&row).unwrap() < 1e-8);
    assert!(matches!(net.collapse_rows(&img, &[3]), Err(Error::Index { .. })));
}

/// Builds a net whose layers use the given graph nodes as parameters.
fn vars_from(v: &[Var]) -> Vec<LayerVars> {
    v.chunks(3)
        .map(|c| LayerVars {
            b_proj: c[0],
            a: c[1],
            bias: c[2],
        })
        .collect()
}

fn two_layer(rng: &mut Rng, lambda: f64) -> CodaNet<f64> {
    let mut net = small_net(
        vec![LayerConfig::new(4, 3, 3, 1), LayerConfig::new(3, 3, 3, 1)],
        3,
        4.0,
        rng,
    );
    net.set_lambda(lambda).unwrap();
    net
}

#[test]
fn regulariser_is_differentiable_in_parameters() {
    let mut rng = Rng::new(7);
    let net = two_layer(&mut rng, 1.0);
    let x = net.encode(&image(&mut rng, 3, 6, 6)).unwrap();
    let params: Vec<Tensor<f64>> = net.layers().iter().flat_map(|l| l.params()).cloned().collect();
    let report = check(&params, 1e-5, |g, v| {
        let vars = vars_from(v);
        let xv = g.constant(x.clone());
        let trace = net.forward_graph(g, xv, &vars)?;
        let rows = net.collapse_rows_graph(g, &trace, &[0, 2])?;
        g.abs_mean(rows)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-3, "{report:?}");
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let mut rng = Rng::new(80 + seed);
        let net = two_layer(&mut rng, 0.5);
        let img = image(&mut rng, 3, 6, 6);
        let x = net.encode(&img).unwrap();
        let target = one_hot(1, 3);
        let mut params: Vec<Tensor<f64>> = net.layers().iter().flat_map(|l| l.params()).cloned().collect();
        params.push(x);
        let report = check(&params, 1e-5, |g, v| {
            let vars = vars_from(&v[..6]);
            let mut pick = Rng::new(99);
            Ok(net.loss_graph(g, &vars, v[6], &target, &mut pick)?.total)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }
}

#[test]
fn contributions_are_complete() {
    let mut rng = Rng::new(9);
    let net = small_net(NetConfig::preset("tiny-3").unwrap().layers, 3, 16.0, &mut rng);
    let net32: CodaNet<f32> = net.cast();
    for _ in 0..5 {
        let img = image(&mut rng, 3, 8, 8);
        let logits = net.forward(&img).unwrap();
        let maps = net.contribution_maps(&img).unwrap();
        for (j, m) in maps.iter().enumerate() {
            assert!((m.total() - logits.data()[j]).abs() < 1e-8);
            assert_eq!(m.logit, logits.data()[j]);
            let single = net.contributions(&img, j).unwrap();
            assert!(single.values.max_abs_diff(&m.values).unwrap() < 1e-10);
            assert!((m.spatial().sum() - m.total()).abs() < 1e-10);
        }
        let img32: Tensor<f32> = img.cast();
        for j in 0..3 {
            let m = net32.contributions(&img32, j).unwrap();
            assert!((m.total() - m.logit).abs() < 1e-3);
        }
    }
    assert!(net.contributions(&image(&mut rng, 3, 8, 8), 3).is_err());
}

#[test]
fn static_single_layer_contributions() {
    let mut rng = Rng::new(10);
    let (h, w) = (4, 4);
    let spec = LayerSpec {
        in_channels: 6,
        out_channels: 2,
        rank: 2,
        kernel: 4,
        stride: 1,
        padding: 0,
        nonlinearity: Nonlinearity::L2,
    };
    let d = spec.patch_dim();
    let bias = rng.normal::<f64>(&[2, d], 0.0, 1.0);
    let layer = DauConvLayer::from_parts(
        spec,
        rng.normal(&[2, d], 0.0, 1.0),
        Tensor::zeros(&[2 * d, 2]),
        bias.clone(),
    )
    .unwrap();
    let mut cfg = NetConfig::new(2, 3.0, Nonlinearity::L2, vec![LayerConfig::new(2, 2, 4, 1)]);
    cfg.layers[0].padding = Some(0);
    let net = CodaNet::from_layers(cfg, vec![layer]).unwrap();
    let img = image(&mut rng, 3, h, w);
    let x = net.encode(&img).unwrap();
    for j in 0..2 {
        let gb = Nonlinearity::L2.apply(bias.row(j).unwrap());
        let expect: Vec<f64> = gb.iter().zip(x.data()).map(|(a, b)| a * b / 3.0).collect();
        let m = net.contributions(&img, j).unwrap();
        for (a, b) in m.values.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

#[test]
fn contributions_differ_from_input_times_gradient() {
    let mut rng = Rng::new(11);
    for _ in 0..5 {
        let net = small_net(NetConfig::preset("tiny-3").unwrap().layers, 3, 16.0, &mut rng);
        let img = image(&mut rng, 3, 8, 8);
        let x = net.encode(&img).unwrap();
        let mut g = Graph::new();
        let vars = net.bind(&mut g, false);
        let xv = g.param(x.clone());
        let t = net.forward_graph(&mut g, xv, &vars).unwrap();
        let pick = g.constant(one_hot(0, 3));
        let prod = g.mul(t.logits, pick).unwrap();
        let root = g.sum(prod);
        let grads = g.backward(root).unwrap();
        let ixg = grads.get(xv).unwrap().mul(&x).unwrap();
        let coda = net.contributions(&img, 0).unwrap().values;
        assert!(ixg.max_abs_diff(&coda).unwrap() > 1e-6);
    }
}

#[test]
fn loss_without_regulariser_is_bce_over_shifted_logits() {
    let mut rng = Rng::new(12);
    let net = small_net(NetConfig::preset("tiny-3").unwrap().layers, 3, 16.0, &mut rng);
    let img = image(&mut rng, 3, 8, 8);
    let logits = net.forward(&img).unwrap();
    let b0 = (0.5f64).ln();
    let y = one_hot::<f64>(2, 3);
    let mut expect = 0.0;
    for j in 0..3 {
        let p = 1.0 / (1.0 + (-(logits.data()[j] + b0)).exp());
        expect -= if j == 2 { p.ln() } else { (1.0 - p).ln() };
    }
    let got = net.loss(&img, &y, &mut rng).unwrap();
    assert!((got - expect).abs() < 1e-12);
    assert!(matches!(
        net.loss(&img, &Tensor::full(&[3], 0.5), &mut rng),
        Err(Error::Input(_))
    ));
    assert!(net.loss(&img, &Tensor::zeros(&[3]), &mut rng).is_err());
}

#[test]
fn regulariser_matches_full_collapse() {
    let mut rng = Rng::new(13);
    let base = small_net(NetConfig::preset("tiny-3").unwrap().layers, 3, 16.0, &mut rng);
    let img = image(&mut rng, 3, 8, 8);
    let y = one_hot::<f64>(1, 3);
    let full = base.collapse_full(&img).unwrap();
    let plain = base.loss(&img, &y, &mut rng).unwrap();
    for (mode, seed) in [
        (LambdaClasses::All, 0),
        (LambdaClasses::Pair, 5),
        (LambdaClasses::Pair, 6),
    ] {
        let mut cfg = base.config().clone();
        cfg.lambda = 0.3;
        cfg.lambda_classes = mode;
        let net = CodaNet::from_layers(cfg, base.layers().to_vec()).unwrap();
        let classes = net.regularised_classes(1, &mut Rng::new(seed));
        match mode {
            LambdaClasses::All => assert_eq!(classes, vec![0, 1, 2]),
            LambdaClasses::Pair => assert!(classes.len() == 2 && classes[0] == 1 && classes[1] != 1),
        }
        let mut sum = 0.0;
        let mut count = 0;
        for &c in &classes {
            sum += full.row(c).unwrap().iter().map(|v| v.abs()).sum::<f64>();
            count += full.shape()[1];
        }
        let got = net.loss(&img, &y, &mut Rng::new(seed)).unwrap();
        assert!((got - plain - 0.3 * sum / count as f64).abs() < 1e-10);
    }
}

#[test]
fn incorrect_class_is_never_the_true_class() {
    let mut rng = Rng::new(14);
    let net = small_net(NetConfig::preset("tiny-3").unwrap().layers, 3, 16.0, &mut rng);
    let mut seen = [false; 3];
    for _ in 0..200 {
        let c = net.regularised_classes(1, &mut rng);
        assert_eq!(c[0], 1);
        assert_ne!(c[1], 1);
        seen[c[1]] = true;
    }
    assert!(seen[0] && seen[2]);
}

#[test]
fn confident_loss_decreases_to_zero() {
    let spec = LayerSpec {
        in_channels: 6,
        out_channels: 2,
        rank: 1,
        kernel: 2,
        stride: 1,
        padding: 0,
        nonlinearity: Nonlinearity::L2,
    };
    let img = Tensor::<f64>::from_fn(&[3, 2, 2], |i| 0.1 + 0.2 * i[0] as f64 + 0.05 * (i[1] + i[2]) as f64);
    let x = encode_input(&img, true).unwrap();
    let mut bias = Tensor::zeros(&[2, 24]);
    for i in 0..24 {
        bias.set(&[0, i], x.data()[i]).unwrap();
        bias.set(&[1, i], -x.data()[i]).unwrap();
    }
    let layer = DauConvLayer::from_parts(spec, Tensor::zeros(&[1, 24]), Tensor::zeros(&[48, 1]), bias).unwrap();
    let mut cfg = NetConfig::new(2, 1.0, Nonlinearity::L2, vec![LayerConfig::new(2, 1, 2, 1)]);
    cfg.layers[0].padding = Some(0);
    cfg.b0 = Some(OutputBias::Shared(0.0));
    let mut net = CodaNet::from_layers(cfg, vec![layer]).unwrap();
    let y = one_hot(0, 2);
    let mut prev = f64::INFINITY;
    let mut rng = Rng::new(0);
    for t in [8.0, 4.0, 2.0, 1.0, 0.5, 0.25, 0.1] {
        net.set_temperature(t).unwrap();
        let l = net.loss(&img, &y, &mut rng).unwrap();
        assert!(l < prev);
        prev = l;
    }
    assert!(prev < 1e-5);
}

#[test]
fn every_dau_respects_its_bound() {
    let mut rng = Rng::new(15);
    for name in ["tiny-1", "tiny-3", "mnist-4"] {
        let mut cfg = NetConfig::preset(name).unwrap();
        cfg.nonlinearity = if name == "tiny-3" {
            Nonlinearity::L2
        } else {
            Nonlinearity::Sq
        };
        let net = with_bias(CodaNet::<f64>::new(cfg, &mut rng).unwrap(), &mut rng);
        let img = image(&mut rng, 1, 28, 28);
        let probe = net.bound_probe(&img).unwrap();
        assert!(probe.evaluations > 0);
        assert!(probe.worst_excess <= 1e-6, "{name}: {}", probe.worst_excess);
    }
}

#[test]
fn reinitialising_one_layer_changes_contributions() {
    let mut rng = Rng::new(16);
    let (mut probes, mut moved) = (0, 0);
    for _ in 0..8 {
        let net = small_net(NetConfig::preset("tiny-3").unwrap().layers, 3, 16.0, &mut rng);
        let img = image(&mut rng, 3, 8, 8);
        let j = rng.below(3);
        let before = net.contributions(&img, j).unwrap().values;
        for l in 0..3 {
            let mut other = net.clone();
            other.reinit_layer(l, &mut rng).unwrap();
            let after = other.contributions(&img, j).unwrap().values;
            probes += 1;
            if normalized_distance(&before, &after).unwrap() > 0.1 {
                moved += 1;
            }
        }
    }
    assert!(moved * 100 >= probes * 95, "{moved}/{probes}");
    assert!(CodaNet::<f64>::new(NetConfig::preset("tiny-1").unwrap(), &mut rng)
        .unwrap()
        .reinit_layer(1, &mut rng)
        .is_err());
}

#[test]
fn geometry_mismatch_is_an_error() {
    let mut rng = Rng::new(17);
    let net = CodaNet::<f64>::new(NetConfig::preset("mnist-4").unwrap(), &mut rng).unwrap();
    assert!(matches!(
        net.forward(&Tensor::zeros(&[1, 27, 27])),
        Err(Error::Geometry(_))
    ));
    assert_eq!(net.forward(&Tensor::zeros(&[1, 28, 28])).unwrap().shape(), &[10]);
}

#[test]
fn helpers() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    assert_eq!(one_hot_class(&one_hot::<f32>(2, 4), 4).unwrap(), 2);
    assert!(one_hot_class(&one_hot::<f32>(2, 4), 3).is_err());
    let a = Tensor::<f64>::new(&[2], vec![3.0, 4.0]).unwrap();
    assert_eq!(normalized_distance(&a, &Tensor::zeros(&[2])).unwrap(), 1.0);
}
