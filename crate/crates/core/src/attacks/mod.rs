//! Region-restricted Gaussian blur, FGSM and transfer evaluation.

use crate::data::{unnormalize, BBox, Batch, ContextMode, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{argmax_rows, Tape, Tensor};

/// Below this σ the blur kernel is the identity.
pub const MIN_SIGMA: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlurRegion {
    BBox,
    FullImage,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlurConfig {
    pub sigma: f64,
    pub region: BlurRegion,
}

impl BlurConfig {
    pub fn bbox(sigma: f64) -> Self {
        BlurConfig { sigma: sigma.max(0.0), region: BlurRegion::BBox }
    }
}

/// Normalized 1-D Gaussian taps over `[-r, r]` with `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let sigma = sigma.max(0.0);
    if sigma < MIN_SIGMA {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut w: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Mirror index into `[0, n)` without repeating the edge sample.
pub fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

fn convolve_line(src: &[f64], kernel: &[f64], dst: &mut [f64]) {
    let r = (kernel.len() / 2) as i64;
    let n = src.len();
    for (i, out) in dst.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, &w) in kernel.iter().enumerate() {
            acc += w * src[reflect_index(i as i64 + k as i64 - r, n)];
        }
        *out = acc;
    }
}

/// Blurs the `bbox` crop of a `C x H x W` image; everything outside the box is
/// copied through unchanged.
pub fn blur_region(image: &Tensor, bbox: &BBox, sigma: f64) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("blur expects a C x H x W image, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if !bbox.fits(h, w) {
        return Err(Error::dim(format!("bbox {bbox:?} outside {h}x{w} image")));
    }
    let kernel = gaussian_kernel(sigma);
    if bbox.area() == 0 || kernel.len() == 1 {
        return Ok(image.clone());
    }
    let (bh, bw) = (bbox.height, bbox.width);
    let mut out = image.clone();
    let data = out.data_mut();
    let mut crop = vec![0f64; bh * bw];
    let mut line_in = vec![0f64; bh.max(bw)];
    let mut line_out = vec![0f64; bh.max(bw)];
    for ch in 0..c {
        let plane = ch * h * w;
        for r in 0..bh {
            let row = plane + (bbox.row + r) * w + bbox.col;
            for (dst, &v) in line_in[..bw].iter_mut().zip(&data[row..row + bw]) {
                *dst = v as f64;
            }
            convolve_line(&line_in[..bw], &kernel, &mut crop[r * bw..(r + 1) * bw]);
        }
        for col in 0..bw {
            for r in 0..bh {
                line_in[r] = crop[r * bw + col];
            }
            convolve_line(&line_in[..bh], &kernel, &mut line_out[..bh]);
            for r in 0..bh {
                data[plane + (bbox.row + r) * w + bbox.col + col] = line_out[r] as f32;
            }
        }
    }
    Ok(out)
}

/// Applies the blur to every sample of a dataset (raw pixel space).
pub fn blur_dataset(ds: &Dataset, cfg: &BlurConfig) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let region = match cfg.region {
            BlurRegion::BBox => s.bbox,
            BlurRegion::FullImage => BBox::full(ds.meta.height, ds.meta.width),
        };
        let mut t = s.clone();
        t.image = blur_region(&s.image, &region, cfg.sigma)?;
        samples.push(t);
    }
    Ok(Dataset { meta: ds.meta.clone(), samples })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossId {
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f32,
    pub source: String,
    pub loss: LossId,
}

impl AttackConfig {
    pub fn new(epsilon: f32, source: impl Into<String>) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::config(format!("epsilon must be a non-negative number, got {epsilon}")));
        }
        Ok(AttackConfig { epsilon, source: source.into(), loss: LossId::CrossEntropy })
    }
}

/// Per-channel box of valid normalized pixel values (the image of `[0, 1]`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelDomain {
    pub lo: [f32; 3],
    pub hi: [f32; 3],
}

impl PixelDomain {
    pub fn normalized(mean: &[f32; 3], std: &[f32; 3]) -> Self {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for ch in 0..3 {
            lo[ch] = (0.0 - mean[ch]) / std[ch];
            hi[ch] = (1.0 - mean[ch]) / std[ch];
        }
        PixelDomain { lo, hi }
    }

    pub fn unbounded() -> Self {
        PixelDomain { lo: [f32::NEG_INFINITY; 3], hi: [f32::INFINITY; 3] }
    }
}

#[derive(Clone, Debug)]
pub struct AdversarialExample {
    /// Perturbed normalized images.
    pub x_adv: Tensor,
    /// `ε · sign(∇x J)` before clamping.
    pub eta: Tensor,
    pub source: String,
    pub epsilon: f32,
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the summed cross-entropy with respect to the input images,
/// with batchnorm in eval mode.
pub fn input_gradient<M: Model + ?Sized>(model: &M, images: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let n = images.shape().first().copied().unwrap_or(0);
    let tape = Tape::new();
    let x = tape.param(images.clone());
    let logits = model.logits_on(&tape, x)?;
    let loss = tape.softmax_cross_entropy(logits, targets)?;
    let total = tape.scale(loss, n as f32);
    let mut grads = tape.backward(total)?;
    grads.take(x).ok_or_else(|| Error::Contract("input gradient missing".into()))
}

/// One gradient-sign step of size ε on normalized images, clamped to `domain`.
pub fn fgsm<M: Model + ?Sized>(model: &M, batch: &Batch, domain: &PixelDomain, cfg: &AttackConfig) -> Result<AdversarialExample> {
    if !(cfg.epsilon >= 0.0) {
        return Err(Error::config(format!("epsilon must be non-negative, got {}", cfg.epsilon)));
    }
    if batch.targets.shape().get(1) != Some(&model.num_classes()) {
        return Err(Error::config(format!(
            "batch has {:?} target columns, model has {} classes",
            batch.targets.shape(),
            model.num_classes()
        )));
    }
    const CHUNK: usize = 128;
    let shape = batch.images.shape().to_vec();
    let n = shape[0];
    let plane = shape.iter().skip(2).product::<usize>();
    let channels = shape.get(1).copied().unwrap_or(0);
    let per_sample = batch.images.len() / n.max(1);
    let mut eta = Vec::with_capacity(batch.images.len());
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let g = if cfg.epsilon == 0.0 {
            Tensor::zeros(&[(end - start) * per_sample])
        } else {
            let x = batch.images.slice_leading(start, end)?;
            let t = batch.targets.slice_leading(start, end)?;
            input_gradient(model, &x, &t)?
        };
        eta.extend(g.data().iter().map(|&v| cfg.epsilon * sign(v)));
        start = end;
    }
    let mut x_adv = batch.images.clone();
    for (i, (x, &e)) in x_adv.data_mut().iter_mut().zip(&eta).enumerate() {
        if e != 0.0 {
            let ch = (i / plane) % channels.max(1);
            let (lo, hi) = if ch < 3 { (domain.lo[ch], domain.hi[ch]) } else { (f32::NEG_INFINITY, f32::INFINITY) };
            *x = (*x + e).clamp(lo, hi);
        }
    }
    Ok(AdversarialExample {
        x_adv,
        eta: Tensor::new(shape, eta)?,
        source: cfg.source.clone(),
        epsilon: cfg.epsilon,
    })
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let pred = argmax_rows(logits);
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

pub fn evaluate<M: Model + ?Sized>(model: &M, images: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(accuracy(&model.logits(images)?, labels))
}

/// Crafts FGSM examples against `source` once and scores every target on them.
/// Returns one accuracy per target, in target order.
pub fn transfer_attack(
    source: &dyn Model,
    targets: &[&dyn Model],
    batch: &Batch,
    domain: &PixelDomain,
    cfg: &AttackConfig,
) -> Result<Vec<f64>> {
    let classes = source.num_classes();
    if let Some(t) = targets.iter().find(|t| t.num_classes() != classes) {
        return Err(Error::config(format!("target has {} classes, source has {classes}", t.num_classes())));
    }
    let adv = fgsm(source, batch, domain, cfg)?;
    targets.iter().map(|t| evaluate(*t, &adv.x_adv, &batch.labels)).collect()
}

/// Packs adversarial images as a dataset (raw pixel space, mode `Adversarial`)
/// so they can be written to a container.
pub fn adversarial_dataset(clean: &Dataset, adv: &AdversarialExample) -> Result<Dataset> {
    if adv.x_adv.shape().first() != Some(&clean.len()) {
        return Err(Error::dim(format!("{:?} adversarial images for {} samples", adv.x_adv.shape(), clean.len())));
    }
    let raw = unnormalize(&adv.x_adv, &clean.meta.mean, &clean.meta.std)?;
    let mut out = clean.clone();
    out.meta.mode = ContextMode::Adversarial;
    for (i, s) in out.samples.iter_mut().enumerate() {
        s.image = raw.slice_leading(i, i + 1)?.reshape(s.image.shape())?;
    }
    Ok(out)
}
