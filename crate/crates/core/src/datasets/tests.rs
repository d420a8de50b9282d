use super::*;

fn idx_images(n: u32, h: u32, w: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 3];
    for v in [n, h, w] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 1];
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

#[test]
fn idx_fixture_round_trips() {
    // four 2x3 images
    let pixels: Vec<u8> = (0..24).map(|i| (i * 11) as u8).collect();
    let images = idx_images(4, 2, 3, &pixels);
    assert_eq!(&images[..8], &[0x00, 0x00, 0x08, 0x03, 0x00, 0x00, 0x00, 0x04]);
    let labels = idx_labels(&[7, 0, 3, 9]);
    let set = decode_idx(&images, &labels).unwrap();
    assert_eq!(set.len(), 4);
    assert_eq!(set.image_shape(), (1, 2, 3));
    assert_eq!(set.labels(), &[7, 0, 3, 9]);
    for (i, &p) in pixels.iter().enumerate() {
        let v = set.images().data()[i];
        assert_eq!(v, p as f32 / 255.0);
        assert_eq!((v * 255.0).round() as u8, p);
    }
    assert_eq!(set.image::<f32>(2).data(), &set.images().data()[12..18]);
}

#[test]
fn idx_degenerate_and_broken_inputs() {
    let empty = decode_idx(&idx_images(0, 28, 28, &[]), &idx_labels(&[])).unwrap();
    assert!(empty.is_empty());
    assert_eq!(empty.image_shape(), (1, 28, 28));

    let images = idx_images(2, 1, 1, &[1, 2]);
    assert!(matches!(
        decode_idx(&images, &idx_labels(&[1, 2, 3])),
        Err(Error::Input(_))
    ));

    let mut bad = images.clone();
    bad[3] = 0x01;
    assert!(matches!(
        decode_idx(&bad, &idx_labels(&[1, 2])),
        Err(Error::Format { offset: 0, .. })
    ));
    assert!(matches!(decode_idx(&images, &images), Err(Error::Format { .. })));

    let truncated = idx_images(3, 2, 2, &[0; 5]);
    match decode_idx(&truncated, &idx_labels(&[0, 0, 0])) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 16 + 5),
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_idx_images(&[0, 0, 8]), Err(Error::Format { .. })));
}

#[test]
fn idx_files_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("t10k-images-idx3-ubyte"),
        idx_images(1, 1, 2, &[0, 255]),
    )
    .unwrap();
    std::fs::write(dir.path().join("t10k-labels-idx1-ubyte"), idx_labels(&[4])).unwrap();
    let set = load_mnist(dir.path(), false).unwrap();
    assert_eq!(set.images().data(), &[0.0, 1.0]);
    assert!(matches!(load_mnist(dir.path(), true), Err(Error::Io { .. })));
}

fn cifar_record(label: u8, f: impl Fn(usize) -> u8) -> Vec<u8> {
    let mut r = vec![label];
    r.extend((0..3072).map(f));
    r
}

#[test]
fn cifar_records_decode_exactly() {
    let mut bytes = cifar_record(3, |i| (i % 256) as u8);
    bytes.extend(cifar_record(9, |_| 255));
    let set = decode_cifar10(&bytes).unwrap();
    assert_eq!(set.len(), 2);
    assert_eq!(set.image_shape(), (3, 32, 32));
    assert_eq!(set.labels(), &[3, 9]);
    let first = set.image::<f32>(0);
    // channel-major: green channel starts at byte 1024
    assert_eq!(first.get(&[1, 0, 0]).unwrap(), 0.0);
    assert_eq!(first.get(&[0, 0, 5]).unwrap(), 5.0 / 255.0);
    assert_eq!(first.get(&[2, 31, 31]).unwrap(), 255.0 / 255.0);
    assert!(set.image::<f32>(1).data().iter().all(|&v| v == 1.0));
    assert_eq!(set.class_names()[3], "cat");
}

#[test]
fn cifar_guards() {
    let bytes = cifar_record(10, |_| 0);
    assert!(matches!(decode_cifar10(&bytes), Err(Error::Format { offset: 0, .. })));
    let mut two = cifar_record(1, |_| 0);
    two.extend(cifar_record(11, |_| 0));
    assert!(matches!(decode_cifar10(&two), Err(Error::Format { offset: 3073, .. })));
    assert!(matches!(decode_cifar10(&[0u8; 3074]), Err(Error::Format { .. })));
    assert!(decode_cifar10(&[]).unwrap().is_empty());
}

fn bases() -> Vec<Tensor<f32>> {
    [0, 1, 7].iter().map(|&d| digit_glyph(d, 28).unwrap()).collect()
}

#[test]
fn noiseless_digits_are_copies() {
    let b = bases();
    let set = make_noisy_digits(&b, 12, 0.0, &mut Rng::new(1)).unwrap();
    for i in 0..12 {
        assert_eq!(set.image::<f32>(i), b[set.label(i)]);
    }
    assert_eq!(set.labels().iter().filter(|&&l| l == 2).count(), 4);
    assert!(make_noisy_digits(&b, 10, 0.1, &mut Rng::new(1)).is_err());
}

#[test]
fn default_sample_count() {
    assert_eq!(NOISY_DIGITS_DEFAULT_N, 3072);
    let set = make_noisy_digits(&bases(), NOISY_DIGITS_DEFAULT_N, 0.25, &mut Rng::new(2)).unwrap();
    assert_eq!(set.len(), 3072);
    assert!(set.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn noisy_mean_approaches_base() {
    let b = bases();
    let (n, std) = (3072, 0.25);
    let set = make_noisy_digits(&b, n, std, &mut Rng::new(3)).unwrap();
    let per = n / 3;
    let d = 28.0 * 28.0f64;
    for (label, base) in b.iter().enumerate() {
        let mut mean = vec![0.0f64; 784];
        for i in (0..n).filter(|&i| set.label(i) == label) {
            for (m, &v) in mean.iter_mut().zip(set.image::<f32>(i).data()) {
                *m += v as f64 / per as f64;
            }
        }
        // clamping biases pixels at 0 and 1 inwards by std / sqrt(2 pi)
        let clamp_bias = std / (2.0 * std::f64::consts::PI).sqrt();
        let dist: f64 = mean
            .iter()
            .zip(base.data())
            .map(|(&m, &v)| {
                let target = if v == 0.0 { clamp_bias } else { 1.0 - clamp_bias };
                (m - target).powi(2)
            })
            .sum::<f64>()
            .sqrt();
        assert!(dist < 3.0 * std / (per as f64).sqrt() * d.sqrt(), "{dist}");
    }
}

#[test]
fn unclamped_noisy_mean_approaches_base() {
    let base = Tensor::<f32>::from_fn(&[1, 8, 8], |i| 0.3 + 0.05 * (i[1] % 4) as f32);
    let (n, std) = (3072, 0.05);
    let set = make_noisy_digits(std::slice::from_ref(&base), n, std, &mut Rng::new(10)).unwrap();
    let mut mean = vec![0.0f64; 64];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(set.image::<f32>(i).data()) {
            *m += v as f64 / n as f64;
        }
    }
    let dist = mean
        .iter()
        .zip(base.data())
        .map(|(&m, &v)| (m - v as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(dist < 3.0 * std / (n as f64).sqrt() * 8.0, "{dist}");
}

#[test]
fn noisy_digits_are_deterministic() {
    let a = make_noisy_digits(&bases(), 30, 0.3, &mut Rng::new(4)).unwrap();
    let b = make_noisy_digits(&bases(), 30, 0.3, &mut Rng::new(4)).unwrap();
    assert_eq!(a, b);
}

fn class_set(classes: usize, per: usize, side: usize) -> LabeledImageSet {
    let n = classes * per;
    let mut rng = Rng::new(5);
    let images: Tensor<f32> = Tensor::from_fn(&[n, 1, side, side], |_| rng.uniform() as f32);
    LabeledImageSet::new(
        images,
        (0..n).map(|i| i % classes).collect(),
        (0..classes).map(|c| c.to_string()).collect(),
    )
    .unwrap()
}

#[test]
fn single_cell_grid_is_the_image() {
    let set = class_set(3, 4, 5);
    let scores: Vec<f64> = (0..12).map(|i| i as f64).collect();
    let grids = make_grids(&set, &scores, 1, 3, &mut Rng::new(6)).unwrap();
    for g in &grids {
        assert_eq!(g.image, set.image::<f32>(g.sources[0]));
        assert_eq!(g.cells[0], set.label(g.sources[0]));
    }
}

#[test]
fn grids_never_repeat_classes_or_images() {
    let set = class_set(10, 1000, 2);
    let mut rng = Rng::new(7);
    let scores: Vec<f64> = (0..set.len()).map(|_| rng.uniform()).collect();
    let grids = make_grids(&set, &scores, 3, 1000, &mut rng).unwrap();
    let mut used = vec![false; set.len()];
    for g in &grids {
        let mut seen = [false; 10];
        for (&c, &s) in g.cells.iter().zip(&g.sources) {
            assert!(!seen[c], "class repeated");
            seen[c] = true;
            assert!(!used[s], "image reused");
            used[s] = true;
            assert_eq!(set.label(s), c);
        }
        assert_eq!(g.image.shape(), &[1, 6, 6]);
    }
}

#[test]
fn grids_take_most_confident_images_first() {
    let set = class_set(4, 5, 2);
    let scores: Vec<f64> = (0..20).map(|i| (i * 7 % 20) as f64).collect();
    let grids = make_grids(&set, &scores, 2, 2, &mut Rng::new(8)).unwrap();
    for class in 0..4 {
        let mut members: Vec<usize> = (0..20).filter(|&i| set.label(i) == class).collect();
        members.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let picked: Vec<usize> = grids
            .iter()
            .flat_map(|g| {
                g.cells
                    .iter()
                    .zip(&g.sources)
                    .filter(|(&c, _)| c == class)
                    .map(|(_, &s)| s)
            })
            .collect();
        assert_eq!(picked, members[..2]);
    }
    let g = &grids[0];
    let (cell, src) = (3, g.sources[3]);
    let img = set.image::<f32>(src);
    assert_eq!(g.image.get(&[0, 2 + 1, 2]).unwrap(), img.get(&[0, 1, 0]).unwrap());
    assert_eq!(g.cell_of(g.cells[cell]), Some(cell));
}

#[test]
fn grid_pool_exhaustion_reports_progress() {
    let set = class_set(10, 2, 2);
    let scores = vec![0.0; 20];
    match make_grids(&set, &scores, 3, 5, &mut Rng::new(9)) {
        Err(Error::PoolExhausted { built, .. }) => assert!((1..5).contains(&built)),
        other => panic!("{other:?}"),
    }
    let set = class_set(10, 60, 2);
    let scores = vec![0.0; 600];
    assert_eq!(make_grids(&set, &scores, 3, 50, &mut Rng::new(9)).unwrap().len(), 50);
}

#[test]
fn glyphs() {
    for d in 0..10 {
        let g = digit_glyph(d, 28).unwrap();
        assert_eq!(g.shape(), &[1, 28, 28]);
        assert!(g.sum() > 20.0);
    }
    assert_ne!(digit_glyph(1, 28).unwrap(), digit_glyph(7, 28).unwrap());
    assert!(digit_glyph(10, 28).is_err());
    assert!(digit_glyph(3, 6).is_err());
}

#[test]
fn set_validation_and_subsets() {
    let images = Tensor::<f32>::zeros(&[2, 1, 2, 2]);
    assert!(LabeledImageSet::new(images.clone(), vec![0, 2], vec!["a".into(), "b".into()]).is_err());
    assert!(LabeledImageSet::new(Tensor::full(&[1, 1, 1, 1], 2.0), vec![0], vec!["a".into()]).is_err());
    let set = class_set(3, 3, 2);
    let sub = set.subset(&[4, 0]).unwrap();
    assert_eq!(sub.labels(), &[1, 0]);
    assert_eq!(sub.image::<f64>(0), set.image::<f64>(4));
    assert!(set.subset(&[9]).is_err());
    assert_eq!(set.take(4).len(), 4);
}

#[test]
fn pgm_decodes_exactly() {
    let mut bytes = b"P5\n# comment\n3 2\n255\n".to_vec();
    bytes.extend_from_slice(&[0, 51, 102, 153, 204, 255]);
    let t = decode_pnm(&bytes).unwrap();
    assert_eq!(t.shape(), &[1, 2, 3]);
    let want: Vec<f32> = [0u8, 51, 102, 153, 204, 255]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    assert_eq!(t.data(), &want[..]);
}

#[test]
fn ppm_is_deinterleaved() {
    let mut bytes = b"P6 2 1 255 ".to_vec();
    bytes.extend_from_slice(&[255, 0, 51, 0, 255, 102]);
    let t = decode_pnm(&bytes).unwrap();
    assert_eq!(t.shape(), &[3, 1, 2]);
    assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0, 0.2, 0.4]);
}

#[test]
fn sixteen_bit_samples_are_big_endian() {
    let mut bytes = b"P5 2 1 1000\n".to_vec();
    bytes.extend_from_slice(&[0x01, 0xf4, 0x03, 0xe8]);
    let t = decode_pnm(&bytes).unwrap();
    assert_eq!(t.data(), &[0.5, 1.0]);
}

#[test]
fn pnm_errors_carry_offsets() {
    let offset = |b: &[u8]| match decode_pnm(b) {
        Err(Error::Format { offset, .. }) => offset,
        other => panic!("expected format error, got {other:?}"),
    };
    assert_eq!(offset(b"P3 1 1 255\n0 0 0"), 0);
    assert_eq!(offset(b"P5 x"), 3);
    assert_eq!(offset(b"P5 2 2 255\n\x00\x01\x02"), 14);
    assert_eq!(offset(b"P5 1 1 255\n\x00\x00"), 13);
    assert_eq!(offset(b"P5 1 1 0\n\x00"), 7);
    assert_eq!(offset(b"P5 1 1 100\n\xff"), 11);
}
