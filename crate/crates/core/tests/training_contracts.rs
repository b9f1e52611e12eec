use fusionbench::attacks::evaluate;
use fusionbench::data::{BBox, ContextMode, Dataset, DatasetMeta, Sample};
use fusionbench::model::{build_classifier, ArchConfig, ClassifierKind, FusionHead, Model};
use fusionbench::pipeline::{fgsm_curve, pretrain_backbones, prepare_split, retrain_foreground, train_trio, DataSettings, Normalization, PretrainSettings};
use fusionbench::tensor::{one_hot, Tape, Tensor};
use fusionbench::training::{regularized_joint_loss, regularized_joint_loss_on, train, TrainConfig, TrainMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_arch() -> ArchConfig {
    ArchConfig { in_channels: 3, widths: vec![4, 8], output_dim: 8, kernel: 3 }
}

fn small_split(mode: ContextMode, classes: usize, n_per_class: usize) -> (Dataset, Dataset) {
    let settings = DataSettings { mode, classes, image_size: 16, n_per_class, ..DataSettings::default() };
    let (mean, std) = settings.generate().unwrap().channel_stats().unwrap();
    prepare_split(&settings, &Normalization { mean, std }).unwrap()
}

#[test]
fn head_only_training_leaves_streams_untouched() {
    let (tr, te) = small_split(ContextMode::Dissimilar, 4, 16);
    let cfg = TrainConfig { epochs: 2, batch_size: 16, mode: TrainMode::HeadOnly, ..TrainConfig::default() };
    let mut joint = build_classifier(ClassifierKind::Joint, &small_arch(), 4, 3).unwrap();
    assert!(train(&joint, &tr, Some(&te), &cfg).is_err(), "head-only needs frozen streams");

    joint.set_frozen(true);
    let (out, _) = train(&joint, &tr, Some(&te), &cfg).unwrap();
    assert_eq!(out.extractors(), joint.extractors());
    assert_ne!(out.fusion_head(), joint.fusion_head());

    let full = TrainConfig { mode: TrainMode::Full, ..cfg };
    let mut fg = build_classifier(ClassifierKind::Foreground, &small_arch(), 4, 4).unwrap();
    let (moved, _) = train(&fg, &tr, None, &full).unwrap();
    assert_ne!(moved.extractors(), fg.extractors());
    fg.set_frozen(true);
    let (kept, _) = train(&fg, &tr, None, &full).unwrap();
    assert_eq!(kept.extractors(), fg.extractors(), "frozen streams stay fixed in full mode too");
}

/// Two colour classes with pixel noise: separable by the channel means alone.
fn colour_toy(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let meta = DatasetMeta {
        num_classes: 2,
        class_supercategory: vec![0, 1],
        mode: ContextMode::Uniform,
        height: 8,
        width: 8,
        mean: [0.5; 3],
        std: [0.25; 3],
    };
    let samples = (0..n)
        .map(|i| {
            let label = i % 2;
            let image = Tensor::from_fn(&[3, 8, 8], |j| {
                let ch = j / 64;
                let base = if (ch == 0) == (label == 0) { 0.8 } else { 0.2 };
                base + rng.random_range(-0.1f32..0.1)
            });
            Sample { image, label, bbox: BBox::full(8, 8), context_id: 0, supercategory_id: label }
        })
        .collect();
    Dataset { meta, samples }
}

#[test]
fn separable_toy_converges() {
    let ds = colour_toy(64, 1);
    let clf = build_classifier(ClassifierKind::Foreground, &small_arch(), 2, 1).unwrap();
    let cfg = TrainConfig { epochs: 50, batch_size: 16, lr: 0.05, ..TrainConfig::default() };
    let (out, h) = train(&clf, &ds, None, &cfg).unwrap();
    let loss = h.final_train_loss().unwrap();
    assert!(loss < 0.1, "final loss {loss}");
    let b = ds.full_batch().unwrap();
    assert_eq!(evaluate(&out, &b.images, &b.labels).unwrap(), 1.0);
}

#[test]
fn penalty_gradient_touches_only_the_object_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, dfg, dbg, c) = (6, 5, 4, 3);
    let feats = Tensor::from_fn(&[n, dfg + dbg], |_| rng.random_range(-1.0f32..1.0));
    let w = Tensor::from_fn(&[dfg + dbg, c], |_| rng.random_range(-1.0f32..1.0));
    let b = Tensor::from_fn(&[c], |_| rng.random_range(-1.0f32..1.0));
    let targets: Tensor = one_hot(&[0, 1, 2, 0, 1, 2], c).unwrap();
    let grad = |alpha: f32| {
        let tape = Tape::new();
        let wv = tape.param(w.clone());
        let logits = tape.linear(tape.constant(feats.clone()), wv, tape.constant(b.clone())).unwrap();
        let loss = regularized_joint_loss_on(&tape, logits, &targets, wv, dfg, alpha).unwrap();
        tape.backward(loss).unwrap().take(wv).unwrap()
    };
    let ce = grad(0.0);
    for alpha in [0.1f32, 1.0, 10.0] {
        let g = grad(alpha);
        for i in 0..(dfg + dbg) * c {
            if i < dfg * c {
                let want = ce.data()[i] + 2.0 * alpha * w.data()[i];
                assert!((g.data()[i] - want).abs() <= 1e-5 * want.abs().max(1.0), "row-major entry {i}");
            } else {
                assert_eq!(g.data()[i].to_bits(), ce.data()[i].to_bits(), "context block entry {i}");
            }
        }
    }
}

#[test]
fn penalty_value_adds_alpha_times_object_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let head = FusionHead::new(&mut rng, 4, 3, 2);
    let logits = Tensor::from_fn(&[3, 2], |_| rng.random_range(-1.0f32..1.0));
    let targets: Tensor = one_hot(&[0, 1, 1], 2).unwrap();
    let base = regularized_joint_loss(&logits, &targets, &head, 0.0).unwrap();
    let norm: f32 = head.fg_block().iter().map(|v| v * v).sum();
    let with = regularized_joint_loss(&logits, &targets, &head, 2.5).unwrap();
    assert!((with - base - 2.5 * norm).abs() < 1e-5);
    assert!(regularized_joint_loss(&logits, &targets, &head, -1.0).is_err());
}

#[test]
fn context_stream_is_near_chance_without_informative_context() {
    let (tr, te) = small_split(ContextMode::Uniform, 8, 200);
    let (tr, te) = (tr.context_only(), te.context_only());
    let clf = build_classifier(ClassifierKind::Background, &small_arch(), 8, 5).unwrap();
    let cfg = TrainConfig { epochs: 5, batch_size: 64, ..TrainConfig::default() };
    let (out, _) = train(&clf, &tr, None, &cfg).unwrap();
    let b = te.full_batch().unwrap();
    let acc = evaluate(&out, &b.images, &b.labels).unwrap();
    assert!((acc - 0.125).abs() <= 0.05, "context-only accuracy {acc} on {} samples", b.len());
}

#[test]
fn adversarial_retraining_hardens_the_object_classifier() {
    let arch = ArchConfig::default();
    let data = DataSettings { n_per_class: 150, ..DataSettings::default() };
    let pre = PretrainSettings { n_per_class: 150, ..PretrainSettings::default() };
    let bb = pretrain_backbones(&data, &pre, &arch).unwrap();
    let (tr, te) = prepare_split(&data, &bb.norm).unwrap();
    let head = TrainConfig { mode: TrainMode::HeadOnly, ..TrainConfig::default() };
    let trio = train_trio(&bb, &tr, &te, &head).unwrap();
    let (rf, _) = retrain_foreground(&trio.fg, &tr, &te, 0.3, &head).unwrap();
    let before = fgsm_curve(&[("fg", &trio.fg as &dyn Model)], &trio.fg, &te, &bb.norm, &[0.3]).unwrap();
    let after = fgsm_curve(&[("fg", &rf as &dyn Model)], &rf, &te, &bb.norm, &[0.3]).unwrap();
    let (b, a) = (before.accuracy[0][0], after.accuracy[0][0]);
    assert!(a >= b + 0.10, "white-box accuracy at eps 0.3: original {b:.3}, retrained {a:.3}");
}
