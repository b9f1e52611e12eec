//! Experiment stages shared by the command line and the test suites.

use crate::analysis::{robustness_curve, subspace_shift, weight_stream_summary, Perturbation, RobustnessCurve, ShiftReport, WeightSummary};
use crate::attacks::{blur_dataset, BlurConfig, BlurRegion, PixelDomain};
use crate::data::{generate_synthetic_dataset, split, ContextMode, Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::model::{build_classifier, ArchConfig, Classifier, ClassifierKind, FeatureExtractor, Model};
use crate::training::{adversarial_retrain, train, train_regularized_joint, RegConfig, TrainConfig, TrainHistory, TrainMode};

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub mode: ContextMode,
    pub classes: usize,
    pub supercategories: usize,
    pub image_size: usize,
    pub n_per_class: usize,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            mode: ContextMode::Dissimilar,
            classes: 8,
            supercategories: 4,
            image_size: 32,
            n_per_class: 500,
            seed: 1,
            train_fraction: 0.75,
        }
    }
}

impl DataSettings {
    pub fn generate(&self) -> Result<Dataset> {
        let meta = DatasetMeta::synthetic(self.mode, self.classes, self.supercategories, self.image_size)?;
        generate_synthetic_dataset(&meta, self.n_per_class, self.seed)
    }
}

/// Pixel statistics every model input is normalized with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub fn apply(&self, mut ds: Dataset) -> Dataset {
        ds.meta.mean = self.mean;
        ds.meta.std = self.std;
        ds
    }

    pub fn domain(&self) -> PixelDomain {
        PixelDomain::normalized(&self.mean, &self.std)
    }

    pub fn to_text(&self) -> String {
        let f = |v: &[f32; 3]| v.iter().map(|x| format!("{:08x}", x.to_bits())).collect::<Vec<_>>().join(",");
        format!("mean_bits={}\nstd_bits={}\nmean={:?}\nstd={:?}\n", f(&self.mean), f(&self.std), self.mean, self.std)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut mean = None;
        let mut std = None;
        let parse = |v: &str| -> Result<[f32; 3]> {
            let parts: Vec<&str> = v.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::config(format!("expected three channel values, got '{v}'")));
            }
            let mut out = [0f32; 3];
            for (o, p) in out.iter_mut().zip(parts) {
                let bits = u32::from_str_radix(p.trim(), 16).map_err(|_| Error::config(format!("bad channel value '{p}'")))?;
                *o = f32::from_bits(bits);
            }
            Ok(out)
        };
        for line in text.lines() {
            if let Some(v) = line.strip_prefix("mean_bits=") {
                mean = Some(parse(v)?);
            } else if let Some(v) = line.strip_prefix("std_bits=") {
                std = Some(parse(v)?);
            }
        }
        match (mean, std) {
            (Some(mean), Some(std)) => Ok(Normalization { mean, std }),
            _ => Err(Error::config("normalization file lacks mean_bits/std_bits")),
        }
    }
}

/// Settings for the stream pretraining corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSettings {
    pub n_per_class: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings {
            n_per_class: 300,
            seed: 1000,
            train: TrainConfig { epochs: 12, mode: TrainMode::Full, ..TrainConfig::default() },
        }
    }
}

/// Frozen object and context streams plus the statistics they were trained with.
#[derive(Clone, Debug)]
pub struct Backbones {
    pub fg: Classifier,
    pub bg: Classifier,
    pub norm: Normalization,
    pub fg_history: TrainHistory,
    pub bg_history: TrainHistory,
}

impl Backbones {
    pub fn fg_extractor(&self) -> FeatureExtractor {
        self.fg.extractors()[0].clone()
    }

    pub fn bg_extractor(&self) -> FeatureExtractor {
        self.bg.extractors()[0].clone()
    }
}

/// Pretrains the two streams on a dissimilar-context corpus (where the class
/// and the context coincide): the object stream on object-only renderings,
/// the context stream on context-only renderings. Both come back frozen.
pub fn pretrain_backbones(data: &DataSettings, pre: &PretrainSettings, arch: &ArchConfig) -> Result<Backbones> {
    let corpus = DataSettings {
        mode: ContextMode::Dissimilar,
        n_per_class: pre.n_per_class,
        seed: pre.seed,
        ..data.clone()
    }
    .generate()?;
    let (mean, std) = corpus.channel_stats()?;
    let norm = Normalization { mean, std };
    let corpus = norm.apply(corpus);
    let (tr, te) = split(&corpus, data.train_fraction, pre.seed)?;
    let cfg = TrainConfig { mode: TrainMode::Full, ..pre.train.clone() };
    let fg0 = build_classifier(ClassifierKind::Foreground, arch, data.classes, pre.train.seed)?;
    let (mut fg, fg_history) = train(&fg0, &tr.object_only(), Some(&te.object_only()), &cfg)?;
    let bg0 = build_classifier(ClassifierKind::Background, arch, data.classes, pre.train.seed + 1)?;
    let (mut bg, bg_history) = train(&bg0, &tr.context_only(), Some(&te.context_only()), &cfg)?;
    fg.set_frozen(true);
    bg.set_frozen(true);
    Ok(Backbones { fg, bg, norm, fg_history, bg_history })
}

/// Generates the experiment set and splits it, normalized with the stream statistics.
pub fn prepare_split(data: &DataSettings, norm: &Normalization) -> Result<(Dataset, Dataset)> {
    let ds = norm.apply(data.generate()?);
    split(&ds, data.train_fraction, data.seed)
}

#[derive(Clone, Debug)]
pub struct Trio {
    pub fg: Classifier,
    pub bg: Classifier,
    pub joint: Classifier,
    pub histories: Vec<(String, TrainHistory)>,
}

impl Trio {
    pub fn named(&self) -> Vec<(&str, &dyn Model)> {
        vec![("foreground", &self.fg as &dyn Model), ("background", &self.bg), ("joint", &self.joint)]
    }

    pub fn get(&self, kind: ClassifierKind) -> &Classifier {
        match kind {
            ClassifierKind::Foreground => &self.fg,
            ClassifierKind::Background => &self.bg,
            ClassifierKind::Joint => &self.joint,
        }
    }
}

fn head_config(cfg: &TrainConfig, offset: u64) -> TrainConfig {
    TrainConfig { mode: TrainMode::HeadOnly, seed: cfg.seed + offset, ..cfg.clone() }
}

/// Fresh heads over the frozen streams, trained on full images.
pub fn train_trio(bb: &Backbones, train_set: &Dataset, test: &Dataset, head: &TrainConfig) -> Result<Trio> {
    let classes = train_set.meta.num_classes;
    let fg0 = Classifier::single_with_new_head(ClassifierKind::Foreground, bb.fg_extractor(), classes, head.seed + 11)?;
    let bg0 = Classifier::single_with_new_head(ClassifierKind::Background, bb.bg_extractor(), classes, head.seed + 12)?;
    let joint0 = fresh_joint(bb, classes, head.seed)?;
    let (fg, hf) = train(&fg0, train_set, Some(test), &head_config(head, 1))?;
    let (bg, hb) = train(&bg0, train_set, Some(test), &head_config(head, 2))?;
    let (joint, hj) = train(&joint0, train_set, Some(test), &head_config(head, 3))?;
    Ok(Trio {
        fg,
        bg,
        joint,
        histories: vec![("foreground".into(), hf), ("background".into(), hb), ("joint".into(), hj)],
    })
}

/// Untrained joint classifier over the frozen streams.
pub fn fresh_joint(bb: &Backbones, classes: usize, seed: u64) -> Result<Classifier> {
    Classifier::joint_with_new_head(bb.fg_extractor(), bb.bg_extractor(), classes, seed + 13)
}

/// α-regularized joint heads, one per α. From scratch unless `warm_start`
/// is given, in which case each run starts from that head.
pub fn alpha_sweep(
    bb: &Backbones,
    train_set: &Dataset,
    test: &Dataset,
    head: &TrainConfig,
    alphas: &[f32],
    warm_start: Option<&Classifier>,
) -> Result<Vec<(f32, Classifier, TrainHistory)>> {
    let start = match warm_start {
        Some(c) => c.clone(),
        None => fresh_joint(bb, train_set.meta.num_classes, head.seed)?,
    };
    alphas
        .iter()
        .map(|&a| {
            let (clf, h) = train_regularized_joint(&start, train_set, Some(test), &head_config(head, 3), &RegConfig::new(a)?)?;
            Ok((a, clf, h))
        })
        .collect()
}

/// FGSM retraining of the foreground classifier's head over its frozen stream.
pub fn retrain_foreground(fg: &Classifier, train_set: &Dataset, test: &Dataset, epsilon: f32, cfg: &TrainConfig) -> Result<(Classifier, TrainHistory)> {
    adversarial_retrain(fg, train_set, Some(test), epsilon, cfg)
}

pub fn blur_curve(models: &[(&str, &dyn Model)], test: &Dataset, sigmas: &[f64]) -> Result<RobustnessCurve> {
    robustness_curve(models, test, &Perturbation::Blur(BlurRegion::BBox), sigmas)
}

pub fn fgsm_curve(models: &[(&str, &dyn Model)], source: &dyn Model, test: &Dataset, norm: &Normalization, eps: &[f64]) -> Result<RobustnessCurve> {
    robustness_curve(models, test, &Perturbation::Fgsm { source, domain: norm.domain() }, eps)
}

/// Feature displacement of each stream when the object box is blurred.
#[derive(Clone, Debug)]
pub struct ShiftAnalysis {
    pub sigma: f64,
    pub fg: ShiftReport,
    pub bg: ShiftReport,
}

pub fn shift_analysis(bb: &Backbones, test: &Dataset, sigma: f64) -> Result<ShiftAnalysis> {
    let clean = test.full_batch()?;
    let blurred = blur_dataset(test, &BlurConfig::bbox(sigma))?.full_batch()?;
    let mut reports = Vec::new();
    for e in [bb.fg_extractor(), bb.bg_extractor()] {
        let a = e.features(&clean.images)?;
        let b = e.features(&blurred.images)?;
        reports.push(subspace_shift(&a, &b, &clean.labels)?);
    }
    let bg = reports.pop().expect("two reports");
    let fg = reports.pop().expect("two reports");
    Ok(ShiftAnalysis { sigma, fg, bg })
}

pub fn joint_weights(joint: &Classifier) -> Result<WeightSummary> {
    joint
        .fusion_head()
        .map(weight_stream_summary)
        .ok_or_else(|| Error::config("weight summary needs a joint classifier"))
}
