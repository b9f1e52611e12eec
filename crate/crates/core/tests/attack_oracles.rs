use fusionbench::attacks::{blur_region, fgsm, gaussian_kernel, transfer_attack, AttackConfig, PixelDomain};
use fusionbench::data::{BBox, Batch};
use fusionbench::model::{build_classifier, ArchConfig, ClassifierKind, Model};
use fusionbench::tensor::{one_hot, Tape, Tensor, Var};
use fusionbench::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Mirror by walking back and forth until the index lands in range.
fn bounce(mut i: i64, n: i64) -> i64 {
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i;
        }
    }
}

fn dense_blur_oracle(img: &Tensor, b: &BBox, sigma: f64) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let r = (3.0 * sigma).ceil() as i64;
    let g: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = g.iter().sum();
    let mut out = img.clone();
    for ch in 0..c {
        for y in 0..b.height as i64 {
            for x in 0..b.width as i64 {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sy = bounce(y + dy, b.height as i64) as usize + b.row;
                        let sx = bounce(x + dx, b.width as i64) as usize + b.col;
                        let wgt = g[(dy + r) as usize] * g[(dx + r) as usize] / (z * z);
                        acc += wgt * img.at(&[ch, sy, sx]) as f64;
                    }
                }
                out.data_mut()[ch * h * w + (b.row + y as usize) * w + b.col + x as usize] = acc as f32;
            }
        }
    }
    out
}

#[test]
fn blur_matches_dense_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (sigma, b) in [
        (1.0, BBox { row: 2, col: 3, height: 9, width: 7 }),
        (0.7, BBox { row: 0, col: 0, height: 16, width: 16 }),
        (2.5, BBox { row: 5, col: 1, height: 4, width: 11 }),
        (6.0, BBox { row: 3, col: 3, height: 3, width: 2 }),
    ] {
        let img = Tensor::from_fn(&[3, 16, 16], |_| rng.random::<f32>());
        let got = blur_region(&img, &b, sigma).unwrap();
        let want = dense_blur_oracle(&img, &b, sigma);
        for (i, (a, e)) in got.data().iter().zip(want.data()).enumerate() {
            let (y, x) = ((i / 16) % 16, i % 16);
            if b.contains(y, x) {
                assert!((a - e).abs() < 1e-5, "sigma {sigma} pixel {i}: {a} vs {e}");
            } else {
                assert_eq!(a.to_bits(), img.data()[i].to_bits());
            }
        }
    }
}

#[test]
fn kernel_is_delta_below_threshold() {
    assert_eq!(gaussian_kernel(0.0), vec![1.0]);
}

/// Flattening linear-softmax model for the analytic gradient check.
struct LinearSoftmax {
    w: Tensor,
    b: Tensor,
}

impl Model for LinearSoftmax {
    fn num_classes(&self) -> usize {
        self.b.len()
    }

    fn logits_on(&self, tape: &Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        let flat = tape.reshape(x, &[s[0], s[1..].iter().product()])?;
        let w = tape.constant(self.w.clone());
        let b = tape.constant(self.b.clone());
        tape.linear(flat, w, b)
    }
}

fn batch_from(images: Tensor, labels: Vec<usize>, classes: usize) -> Batch {
    let n = labels.len();
    Batch { targets: one_hot(&labels, classes).unwrap(), images, labels, bboxes: vec![BBox::full(1, 1); n] }
}

#[test]
fn fgsm_matches_analytic_softmax_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, d, c) = (6, 3 * 2 * 2, 4);
    let model = LinearSoftmax {
        w: Tensor::from_fn(&[d, c], |_| rng.random_range(-1.0..1.0)),
        b: Tensor::from_fn(&[c], |_| rng.random_range(-0.5..0.5)),
    };
    let images = Tensor::from_fn(&[n, 3, 2, 2], |_| rng.random_range(-1.0f32..1.0));
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let batch = batch_from(images.clone(), labels.clone(), c);
    let eps = 0.05;
    let adv = fgsm(&model, &batch, &PixelDomain::unbounded(), &AttackConfig::new(eps, "lin").unwrap()).unwrap();
    for s in 0..n {
        let x: Vec<f64> = images.data()[s * d..(s + 1) * d].iter().map(|&v| v as f64).collect();
        let z: Vec<f64> = (0..c)
            .map(|k| model.b.data()[k] as f64 + (0..d).map(|j| x[j] * model.w.at(&[j, k]) as f64).sum::<f64>())
            .collect();
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let tot: f64 = e.iter().sum();
        for j in 0..d {
            let g: f64 = (0..c)
                .map(|k| model.w.at(&[j, k]) as f64 * (e[k] / tot - if k == labels[s] { 1.0 } else { 0.0 }) / n as f64)
                .sum();
            let want = if g > 0.0 { eps } else if g < 0.0 { -eps } else { 0.0 };
            assert_eq!(adv.eta.data()[s * d + j], want, "sample {s} coord {j}");
            assert_eq!(adv.x_adv.data()[s * d + j], images.data()[s * d + j] + want);
        }
    }
}

fn tiny_arch() -> ArchConfig {
    ArchConfig { in_channels: 3, widths: vec![4], output_dim: 5, kernel: 3 }
}

#[test]
fn zero_epsilon_is_identity_and_transfer_equals_clean() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let images = Tensor::from_fn(&[10, 3, 8, 8], |_| rng.random_range(-1.0f32..1.0));
    let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
    let batch = batch_from(images.clone(), labels.clone(), 3);
    let fg = build_classifier(ClassifierKind::Foreground, &tiny_arch(), 3, 1).unwrap();
    let bg = build_classifier(ClassifierKind::Background, &tiny_arch(), 3, 2).unwrap();
    let joint = build_classifier(ClassifierKind::Joint, &tiny_arch(), 3, 3).unwrap();
    let dom = PixelDomain::normalized(&[0.5; 3], &[0.5; 3]);
    let cfg = AttackConfig::new(0.0, "fg").unwrap();
    let adv = fgsm(&fg, &batch, &dom, &cfg).unwrap();
    assert_eq!(adv.x_adv, images);
    let targets: [&dyn Model; 3] = [&fg, &bg, &joint];
    let acc = transfer_attack(&fg, &targets, &batch, &dom, &cfg).unwrap();
    for (t, a) in targets.iter().zip(&acc) {
        let clean = fusionbench::attacks::evaluate(*t, &images, &labels).unwrap();
        assert_eq!(*a, clean);
    }
    let rev: [&dyn Model; 3] = [&joint, &bg, &fg];
    let cfg = AttackConfig::new(0.2, "fg").unwrap();
    let a = transfer_attack(&fg, &targets, &batch, &dom, &cfg).unwrap();
    let b = transfer_attack(&fg, &rev, &batch, &dom, &cfg).unwrap();
    assert_eq!(a, vec![b[2], b[1], b[0]]);
    let other = build_classifier(ClassifierKind::Foreground, &tiny_arch(), 4, 1).unwrap();
    let bad: [&dyn Model; 1] = [&other];
    assert!(matches!(transfer_attack(&fg, &bad, &batch, &dom, &cfg), Err(fusionbench::Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fgsm_step_is_linf_bounded(seed in 0u64..1000, eps in 0.0f32..0.6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Tensor::from_fn(&[4, 3, 8, 8], |_| rng.random::<f32>());
        let mean = [0.4, 0.5, 0.45];
        let std = [0.2, 0.25, 0.3];
        let images = fusionbench::data::normalize(&raw, &mean, &std).unwrap();
        let batch = batch_from(images.clone(), vec![0, 1, 2, 1], 3);
        let clf = build_classifier(ClassifierKind::Foreground, &tiny_arch(), 3, seed).unwrap();
        let dom = PixelDomain::normalized(&mean, &std);
        let adv = fgsm(&clf, &batch, &dom, &AttackConfig::new(eps, "fg").unwrap()).unwrap();
        for (i, (&a, &x)) in adv.x_adv.data().iter().zip(images.data()).enumerate() {
            prop_assert!((a - x).abs() <= eps * (1.0 + 1e-6) + 1e-6);
            let ch = (i / 64) % 3;
            prop_assert!(a >= dom.lo[ch] && a <= dom.hi[ch]);
            prop_assert!(adv.eta.data()[i].abs() <= eps);
        }
    }

    #[test]
    fn blur_never_touches_outside_bbox(seed in 0u64..1000, sigma in 0.0f64..20.0,
                                       r in 0usize..10, c in 0usize..10, h in 0usize..8, w in 0usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::from_fn(&[3, 18, 18], |_| rng.random::<f32>());
        let b = BBox { row: r, col: c, height: h, width: w };
        let out = blur_region(&img, &b, sigma).unwrap();
        for (i, (a, x)) in out.data().iter().zip(img.data()).enumerate() {
            if !b.contains((i / 18) % 18, i % 18) {
                prop_assert_eq!(a.to_bits(), x.to_bits());
            }
        }
    }

    #[test]
    fn blur_of_constant_crop_stays_constant(v in 0.0f32..1.0, sigma in 0.0f64..45.0) {
        let mut img = Tensor::from_fn(&[3, 12, 12], |i| (i % 7) as f32 / 7.0);
        let b = BBox { row: 2, col: 3, height: 6, width: 5 };
        for ch in 0..3 {
            for y in 2..8 {
                for x in 3..8 {
                    img.data_mut()[ch * 144 + y * 12 + x] = v;
                }
            }
        }
        let out = blur_region(&img, &b, sigma).unwrap();
        prop_assert!(out.max_abs_diff(&img) < 1e-6);
    }
}
