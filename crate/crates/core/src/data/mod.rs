//! Samples, datasets and batches, plus the synthetic generator and the binary
//! readers/writers.

mod cifar;
mod container;
mod synthetic;

pub use cifar::{parse_cifar10_batch, CIFAR_RECORD_BYTES};
pub use container::{load_container, read_container, save_container, write_container};
pub use synthetic::{generate_synthetic_dataset, glyph_covers, SHAPE_COUNT};

use crate::error::{Error, Result};
use crate::tensor::{one_hot, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Gray level used to blank out a stream's region.
pub const NEUTRAL_GRAY: f32 = 0.5;

/// Axis-aligned box in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.row + self.height <= h && self.col + self.width <= w
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.height && c >= self.col && c < self.col + self.width
    }

    pub fn full(h: usize, w: usize) -> Self {
        BBox { row: 0, col: 0, height: h, width: w }
    }
}

/// How scene context relates to the object class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ContextMode {
    /// One class per supercategory, one context per supercategory.
    Dissimilar,
    /// Several classes share a supercategory and its context pool.
    Similar,
    /// Context drawn independently of the class.
    Uniform,
    /// Perturbed copies produced by an attack.
    Adversarial,
}

impl ContextMode {
    pub fn code(self) -> u8 {
        match self {
            ContextMode::Dissimilar => 0,
            ContextMode::Similar => 1,
            ContextMode::Uniform => 2,
            ContextMode::Adversarial => 255,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ContextMode::Dissimilar,
            1 => ContextMode::Similar,
            2 => ContextMode::Uniform,
            255 => ContextMode::Adversarial,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ContextMode::Dissimilar => "dissimilar",
            ContextMode::Similar => "similar",
            ContextMode::Uniform => "uniform",
            ContextMode::Adversarial => "adversarial",
        }
    }
}

impl std::str::FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dissimilar" => Ok(ContextMode::Dissimilar),
            "similar" => Ok(ContextMode::Similar),
            "uniform" => Ok(ContextMode::Uniform),
            "adversarial" => Ok(ContextMode::Adversarial),
            other => Err(Error::config(format!("unknown context mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub num_classes: usize,
    /// Supercategory of each class.
    pub class_supercategory: Vec<usize>,
    pub mode: ContextMode,
    pub height: usize,
    pub width: usize,
    /// Per-channel normalization statistics.
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl DatasetMeta {
    /// Metadata for a synthetic set. `supercategories` only matters in similar mode.
    pub fn synthetic(mode: ContextMode, num_classes: usize, supercategories: usize, size: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {num_classes}")));
        }
        let class_supercategory = match mode {
            ContextMode::Similar => {
                if supercategories == 0 || supercategories > num_classes {
                    return Err(Error::config(format!(
                        "{supercategories} supercategories cannot partition {num_classes} classes"
                    )));
                }
                (0..num_classes).map(|c| c * supercategories / num_classes).collect()
            }
            _ => (0..num_classes).collect(),
        };
        Ok(DatasetMeta {
            num_classes,
            class_supercategory,
            mode,
            height: size,
            width: size,
            mean: [0.0; 3],
            std: [1.0; 3],
        })
    }

    pub fn num_supercategories(&self) -> usize {
        self.class_supercategory.iter().max().map_or(0, |m| m + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3 x H x W`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub bbox: BBox,
    pub context_id: usize,
    pub supercategory_id: usize,
}

impl Sample {
    /// Copy with every pixel outside the box replaced by neutral gray.
    pub fn object_only(&self) -> Sample {
        self.with_region(|inside| !inside)
    }

    /// Copy with every pixel inside the box replaced by neutral gray.
    pub fn context_only(&self) -> Sample {
        self.with_region(|inside| inside)
    }

    fn with_region(&self, blank: impl Fn(bool) -> bool) -> Sample {
        let mut out = self.clone();
        let (h, w) = (self.image.shape()[1], self.image.shape()[2]);
        for (i, v) in out.image.data_mut().iter_mut().enumerate() {
            let (r, c) = ((i / w) % h, i % w);
            if blank(self.bbox.contains(r, c)) {
                *v = NEUTRAL_GRAY;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

/// Model-ready slice of a dataset.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `N x 3 x H x W`, normalized.
    pub images: Tensor,
    /// `N x C` one-hot.
    pub targets: Tensor,
    pub labels: Vec<usize>,
    pub bboxes: Vec<BBox>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sub-batch of the given rows.
    pub fn select(&self, rows: &[usize]) -> Result<Batch> {
        Ok(Batch {
            images: self.images.select_leading(rows)?,
            targets: self.targets.select_leading(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            bboxes: rows.iter().map(|&r| self.bboxes[r]).collect(),
        })
    }

    pub fn with_images(&self, images: Tensor) -> Result<Batch> {
        if images.shape() != self.images.shape() {
            return Err(Error::dim(format!(
                "replacement images {:?} vs batch {:?}",
                images.shape(),
                self.images.shape()
            )));
        }
        Ok(Batch { images, ..self.clone() })
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Applies `f` to every sample, keeping metadata.
    pub fn map_samples(&self, f: impl Fn(&Sample) -> Sample) -> Dataset {
        Dataset {
            meta: self.meta.clone(),
            samples: self.samples.iter().map(f).collect(),
        }
    }

    pub fn object_only(&self) -> Dataset {
        self.map_samples(Sample::object_only)
    }

    pub fn context_only(&self) -> Dataset {
        self.map_samples(Sample::context_only)
    }

    /// Per-channel mean and standard deviation over all pixels.
    pub fn channel_stats(&self) -> Result<([f32; 3], [f32; 3])> {
        if self.samples.is_empty() {
            return Err(Error::config("cannot compute statistics of an empty dataset"));
        }
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut count = 0usize;
        for s in &self.samples {
            let plane = s.image.len() / 3;
            for (ch, chunk) in s.image.data().chunks(plane).enumerate() {
                for &v in chunk {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
            count += plane;
        }
        let mut mean = [0f32; 3];
        let mut std = [0f32; 3];
        for ch in 0..3 {
            let m = sum[ch] / count as f64;
            mean[ch] = m as f32;
            std[ch] = (sq[ch] / count as f64 - m * m).max(0.0).sqrt() as f32;
        }
        Ok((mean, std))
    }

    /// Stores this dataset's own channel statistics in its metadata.
    pub fn with_own_stats(mut self) -> Result<Dataset> {
        let (mean, std) = self.channel_stats()?;
        self.meta.mean = mean;
        self.meta.std = std;
        Ok(self)
    }

    /// Normalized batch of the given samples.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::config("batch needs at least one sample"));
        }
        let mut images = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        let mut bboxes = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::dim(format!("sample {i} out of range for {} samples", self.len())))?;
            images.push(&s.image);
            labels.push(s.label);
            bboxes.push(s.bbox);
        }
        let raw = Tensor::stack(&images)?;
        Ok(Batch {
            images: normalize(&raw, &self.meta.mean, &self.meta.std)?,
            targets: one_hot(&labels, self.meta.num_classes)?,
            labels,
            bboxes,
        })
    }

    pub fn full_batch(&self) -> Result<Batch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    /// Consecutive batches of at most `size` samples, in dataset order.
    pub fn chunked_batches(&self, size: usize) -> Result<Vec<Batch>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(size.max(1)).map(|c| self.batch(c)).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            meta: self.meta.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

fn check_std(std: &[f32; 3]) -> Result<()> {
    if let Some(ch) = std.iter().position(|&s| s <= 1e-8) {
        return Err(Error::config(format!(
            "standard deviation {} of channel {ch} is not positive",
            std[ch]
        )));
    }
    Ok(())
}

/// Per-channel `(x - mean) / std` over an `N x 3 x H x W` or `3 x H x W` tensor.
pub fn normalize(images: &Tensor, mean: &[f32; 3], std: &[f32; 3]) -> Result<Tensor> {
    check_std(std)?;
    per_channel(images, |ch, v| (v - mean[ch]) / std[ch])
}

/// Inverse of [`normalize`].
pub fn unnormalize(images: &Tensor, mean: &[f32; 3], std: &[f32; 3]) -> Result<Tensor> {
    check_std(std)?;
    per_channel(images, |ch, v| v * std[ch] + mean[ch])
}

fn per_channel(images: &Tensor, f: impl Fn(usize, f32) -> f32) -> Result<Tensor> {
    let s = images.shape();
    let ch_axis = match s.len() {
        3 => 0,
        4 => 1,
        _ => return Err(Error::dim(format!("expected image tensor, got {s:?}"))),
    };
    if s[ch_axis] != 3 {
        return Err(Error::dim(format!("expected 3 channels, got {s:?}")));
    }
    let plane = s[ch_axis + 1] * s[ch_axis + 2];
    let mut out = images.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ch = i % 3;
        for v in chunk {
            *v = f(ch, *v);
        }
    }
    Ok(out)
}

/// Stratified train/test split.
///
/// The train size is `floor(fraction * N)`. Each class contributes
/// `floor(fraction * n_c)` plus at most one extra sample, handed out by largest
/// fractional remainder (ties to the lower class index). Within a class the
/// members are shuffled with `seed` and the prefix goes to train. Both halves
/// keep the original sample order.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let c = dataset.meta.num_classes;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, s) in dataset.samples.iter().enumerate() {
        members
            .get_mut(s.label)
            .ok_or_else(|| Error::config(format!("sample {i} has label {} >= {c}", s.label)))?
            .push(i);
    }
    for (cls, m) in members.iter().enumerate() {
        if !m.is_empty() && m.len() < 2 {
            return Err(Error::config(format!("class {cls} has fewer than 2 samples")));
        }
    }

    let total = (train_fraction * dataset.len() as f64 + 1e-9).floor() as usize;
    let mut quota: Vec<usize> = members
        .iter()
        .map(|m| (train_fraction * m.len() as f64 + 1e-9).floor() as usize)
        .collect();
    let mut order: Vec<usize> = (0..c).collect();
    let frac = |cls: usize| train_fraction * members[cls].len() as f64 - quota[cls] as f64;
    let fracs: Vec<f64> = (0..c).map(frac).collect();
    order.sort_by(|&a, &b| fracs[b].total_cmp(&fracs[a]).then(a.cmp(&b)));
    let mut remaining = total.saturating_sub(quota.iter().sum());
    for &cls in order.iter().cycle().take(c * 2) {
        if remaining == 0 {
            break;
        }
        if fracs[cls] > 1e-9 && quota[cls] < members[cls].len() {
            quota[cls] += 1;
            remaining -= 1;
        }
    }
    // every populated class keeps at least one sample on each side
    for (cls, m) in members.iter().enumerate() {
        if !m.is_empty() {
            quota[cls] = quota[cls].clamp(1, m.len() - 1);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (cls, m) in members.iter().enumerate() {
        let mut shuffled = m.clone();
        shuffled.shuffle(&mut rng);
        train_idx.extend_from_slice(&shuffled[..quota[cls]]);
        test_idx.extend_from_slice(&shuffled[quota[cls]..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((dataset.subset(&train_idx), dataset.subset(&test_idx)))
}

/// Empirical mutual information (nats) between context id and label.
pub fn context_label_mutual_information(dataset: &Dataset) -> f64 {
    use std::collections::HashMap;
    let n = dataset.len() as f64;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut ctx: HashMap<usize, f64> = HashMap::new();
    let mut lab: HashMap<usize, f64> = HashMap::new();
    for s in &dataset.samples {
        *joint.entry((s.context_id, s.label)).or_default() += 1.0;
        *ctx.entry(s.context_id).or_default() += 1.0;
        *lab.entry(s.label).or_default() += 1.0;
    }
    joint
        .iter()
        .map(|(&(k, y), &cnt)| {
            let p = cnt / n;
            p * (p / ((ctx[&k] / n) * (lab[&y] / n))).ln()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(labels: &[usize], classes: usize) -> Dataset {
        let meta = DatasetMeta::synthetic(ContextMode::Dissimilar, classes, classes, 16).unwrap();
        Dataset {
            meta,
            samples: labels
                .iter()
                .enumerate()
                .map(|(i, &label)| Sample {
                    image: Tensor::full(&[3, 2, 2], i as f32 / labels.len() as f32),
                    label,
                    bbox: BBox { row: 0, col: 0, height: 1, width: 1 },
                    context_id: label,
                    supercategory_id: label,
                })
                .collect(),
        }
    }

    #[test]
    fn split_reference_sizes() {
        // 24 classes, 7500 samples: 12 classes of 313 and 12 of 312
        let labels: Vec<usize> = (0..7500).map(|i| i % 24).collect();
        let ds = toy(&labels, 24);
        let (train, test) = split(&ds, 0.75, 1).unwrap();
        assert_eq!((train.len(), test.len()), (5625, 1875));
    }

    #[test]
    fn split_is_a_stratified_partition() {
        let labels: Vec<usize> = (0..103).map(|i| (i * 7) % 5).collect();
        let ds = toy(&labels, 5);
        let (train, test) = split(&ds, 0.6, 9).unwrap();
        assert_eq!(train.len() + test.len(), ds.len());
        let key = |s: &Sample| s.image.data()[0].to_bits();
        let train_keys: std::collections::HashSet<u32> = train.samples.iter().map(key).collect();
        assert!(test.samples.iter().all(|s| !train_keys.contains(&key(s))));
        for cls in 0..5 {
            let n = labels.iter().filter(|&&l| l == cls).count() as f64;
            let got = train.samples.iter().filter(|s| s.label == cls).count() as f64;
            assert!((got - 0.6 * n).abs() <= 1.0, "class {cls}: {got} of {n}");
        }
        let (train2, _) = split(&ds, 0.6, 9).unwrap();
        assert_eq!(train, train2);
    }

    #[test]
    fn split_errors() {
        let ds = toy(&[0, 0, 1], 2);
        assert!(matches!(split(&ds, 0.5, 0), Err(Error::Config(_))));
        let ds = toy(&[0, 0, 1, 1], 2);
        assert!(split(&ds, 1.0, 0).is_err());
        assert!(split(&ds, 0.0, 0).is_err());
    }

    #[test]
    fn normalize_identity_and_inverse() {
        let x = Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f32 * 0.37).sin().abs());
        assert_eq!(normalize(&x, &[0.0; 3], &[1.0; 3]).unwrap(), x);
        let (m, s) = ([0.2, 0.5, 0.7], [0.3, 0.25, 0.1]);
        let back = unnormalize(&normalize(&x, &m, &s).unwrap(), &m, &s).unwrap();
        assert!(back.max_abs_diff(&x) <= 1e-6);
        assert!(matches!(normalize(&x, &m, &[0.1, 0.0, 0.1]), Err(Error::Config(_))));
    }

    #[test]
    fn normalizing_with_own_stats_centres_channels() {
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let mut ds = toy(&labels, 2);
        for (i, s) in ds.samples.iter_mut().enumerate() {
            for (j, v) in s.image.data_mut().iter_mut().enumerate() {
                *v = ((i * 13 + j * 7) % 17) as f32 / 17.0;
            }
        }
        let ds = ds.with_own_stats().unwrap();
        let b = ds.full_batch().unwrap();
        let plane = 4;
        for ch in 0..3 {
            let mut sum = 0f64;
            for n in 0..ds.len() {
                for p in 0..plane {
                    sum += b.images.data()[(n * 3 + ch) * plane + p] as f64;
                }
            }
            assert!((sum / (ds.len() * plane) as f64).abs() <= 1e-5);
        }
    }

    #[test]
    fn region_blanking() {
        let s = Sample {
            image: Tensor::full(&[3, 4, 4], 0.9),
            label: 0,
            bbox: BBox { row: 1, col: 1, height: 2, width: 2 },
            context_id: 0,
            supercategory_id: 0,
        };
        let o = s.object_only();
        let c = s.context_only();
        for ch in 0..3 {
            for r in 0..4 {
                for col in 0..4 {
                    let inside = s.bbox.contains(r, col);
                    let ov = o.image.at(&[ch, r, col]);
                    let cv = c.image.at(&[ch, r, col]);
                    assert_eq!(ov, if inside { 0.9 } else { NEUTRAL_GRAY });
                    assert_eq!(cv, if inside { NEUTRAL_GRAY } else { 0.9 });
                }
            }
        }
    }
}
