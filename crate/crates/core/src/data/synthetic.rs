//! Procedural object-on-context scenes.
//!
//! Each image is a context texture (pattern and palette keyed by context id,
//! with per-sample jitter) with a rectangular object plate pasted inside the
//! bounding box. The plate carries a class-keyed glyph; plate and glyph colors
//! are random per sample, so the class is only recoverable from shape. The
//! whole object lives inside the box, which makes box blur remove object
//! evidence while leaving context untouched.

use super::{BBox, ContextMode, Dataset, DatasetMeta, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f32::consts::PI;

/// Number of distinct base glyphs; larger class counts reuse them with a cut-out variant.
pub const SHAPE_COUNT: usize = 8;

const MIN_AREA_FRACTION: f64 = 0.15;
const MAX_AREA_FRACTION: f64 = 0.5;
const PIXEL_NOISE: f32 = 0.04;

/// Generates `n_per_class` samples per class, class-major.
///
/// Sample `i` depends only on `(seed, i)`. Channel statistics of the result
/// are stored in the returned metadata.
pub fn generate_synthetic_dataset(meta: &DatasetMeta, n_per_class: usize, seed: u64) -> Result<Dataset> {
    if meta.num_classes < 2 {
        return Err(Error::config("synthetic data needs at least 2 classes"));
    }
    if meta.height < 16 || meta.width < 16 {
        return Err(Error::config(format!(
            "image {}x{} too small for a box covering 15-50% of the frame (minimum 16x16)",
            meta.height, meta.width
        )));
    }
    if meta.class_supercategory.len() != meta.num_classes {
        return Err(Error::config("class to supercategory map does not cover every class"));
    }
    if meta.mode == ContextMode::Adversarial {
        return Err(Error::config("adversarial mode is reserved for attack outputs"));
    }
    if n_per_class == 0 {
        return Err(Error::config("n_per_class must be positive"));
    }
    let pools = context_pools(meta);
    let samples = (0..meta.num_classes * n_per_class)
        .map(|i| render_sample(meta, &pools, i / n_per_class, seed, i as u64))
        .collect();
    Dataset { meta: meta.clone(), samples }.with_own_stats()
}

/// Context ids available to each supercategory.
fn context_pools(meta: &DatasetMeta) -> Vec<Vec<usize>> {
    let supers = meta.num_supercategories();
    match meta.mode {
        ContextMode::Similar => {
            (0..supers)
                .map(|s| {
                    let size = meta.class_supercategory.iter().filter(|&&x| x == s).count().max(1);
                    let start: usize = (0..s)
                        .map(|t| meta.class_supercategory.iter().filter(|&&x| x == t).count().max(1))
                        .sum();
                    (start..start + size).collect()
                })
                .collect()
        }
        _ => (0..supers).map(|s| vec![s]).collect(),
    }
}

fn render_sample(meta: &DatasetMeta, pools: &[Vec<usize>], label: usize, seed: u64, index: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let supercategory_id = meta.class_supercategory[label];
    let context_id = match meta.mode {
        ContextMode::Uniform => rng.random_range(0..meta.num_classes),
        _ => {
            let pool = &pools[supercategory_id];
            pool[rng.random_range(0..pool.len())]
        }
    };
    let (h, w) = (meta.height, meta.width);
    let bbox = sample_bbox(&mut rng, h, w);
    let mut image = vec![0f32; 3 * h * w];
    paint_context(&mut rng, &mut image, h, w, context_id);
    paint_object(&mut rng, &mut image, h, w, &bbox, label);
    for v in image.iter_mut() {
        *v = (*v + rng.random_range(-PIXEL_NOISE..PIXEL_NOISE)).clamp(0.0, 1.0);
    }
    Sample {
        image: Tensor::new(vec![3, h, w], image).expect("3xHxW"),
        label,
        bbox,
        context_id,
        supercategory_id,
    }
}

fn sample_bbox(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BBox {
    let total = (h * w) as f64;
    loop {
        let frac = rng.random_range(MIN_AREA_FRACTION..MAX_AREA_FRACTION);
        let aspect: f64 = rng.random_range(0.75..1.33);
        let area = frac * total;
        let bh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
        let bw = ((area / bh as f64).round() as usize).clamp(1, w);
        let a = (bh * bw) as f64;
        if a < MIN_AREA_FRACTION * total || a > MAX_AREA_FRACTION * total {
            continue;
        }
        let row = rng.random_range(0..=h - bh);
        let col = rng.random_range(0..=w - bw);
        return BBox { row, col, height: bh, width: bw };
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn paint_context(rng: &mut ChaCha8Rng, img: &mut [f32], h: usize, w: usize, context_id: usize) {
    let hue = (context_id as f32 * 0.618_034 + 0.05).fract();
    let pattern = context_id % 6;
    let base_freq = 2.0 + ((context_id / 6) % 3) as f32;
    let mut light = hsv(hue, 0.55, 0.85);
    let mut dark = hsv(hue + 0.08, 0.7, 0.35);
    for ch in 0..3 {
        light[ch] += rng.random_range(-0.05..0.05);
        dark[ch] += rng.random_range(-0.05..0.05);
    }
    let freq = base_freq * rng.random_range(0.85..1.15);
    let phase: f32 = rng.random_range(0.0..2.0 * PI);
    let (cy, cx) = (rng.random_range(0.3..0.7) * h as f32, rng.random_range(0.3..0.7) * w as f32);
    let plane = h * w;
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f32 / h as f32, c as f32 / w as f32);
            let t = match pattern {
                0 => 0.5 + 0.5 * (2.0 * PI * freq * y + phase).sin(),
                1 => 0.5 + 0.5 * (2.0 * PI * freq * x + phase).sin(),
                2 => {
                    let s = (2.0 * PI * freq * 0.5 * x + phase).sin() * (2.0 * PI * freq * 0.5 * y).sin();
                    if s >= 0.0 { 1.0 } else { 0.0 }
                }
                3 => 0.5 + 0.5 * (2.0 * PI * freq * (x + y) * 0.7 + phase).sin(),
                4 => {
                    let d = ((r as f32 - cy).powi(2) + (c as f32 - cx).powi(2)).sqrt() / h as f32;
                    0.5 + 0.5 * (2.0 * PI * freq * 1.5 * d + phase).sin()
                }
                _ => (y + 0.15 * (2.0 * PI * x * freq * 0.5 + phase).sin()).clamp(0.0, 1.0),
            };
            for ch in 0..3 {
                img[ch * plane + r * w + c] = dark[ch] + t * (light[ch] - dark[ch]);
            }
        }
    }
}

/// Whether the glyph of `label` covers normalized box coordinates `(u, v)` in `[-1, 1]`.
pub fn glyph_covers(label: usize, u: f32, v: f32) -> bool {
    let r = (u * u + v * v).sqrt();
    let base = match label % SHAPE_COUNT {
        0 => r < 0.8,
        1 => u.abs().max(v.abs()) < 0.65,
        2 => v > -0.75 && v < 0.75 && u.abs() < (0.75 - v) * 0.6,
        3 => (u.abs() < 0.25 && v.abs() < 0.85) || (v.abs() < 0.25 && u.abs() < 0.85),
        4 => r > 0.45 && r < 0.85,
        5 => u.abs() + v.abs() < 0.9,
        6 => v.abs() < 0.85 && u.abs() < 0.85 && ((v + 1.0) * 2.5).floor() as i32 % 2 == 0,
        _ => ((u - v).abs() < 0.3 || (u + v).abs() < 0.3) && u.abs().max(v.abs()) < 0.85,
    };
    match label / SHAPE_COUNT {
        0 => base,
        k => base != (r < 0.12 + 0.12 * k as f32),
    }
}

fn plate_channel(rng: &mut ChaCha8Rng) -> f32 {
    if rng.random_bool(0.5) {
        rng.random_range(0.05..0.3)
    } else {
        rng.random_range(0.7..0.95)
    }
}

fn paint_object(rng: &mut ChaCha8Rng, img: &mut [f32], h: usize, w: usize, bbox: &BBox, label: usize) {
    let plate = [plate_channel(rng), plate_channel(rng), plate_channel(rng)];
    let ink = [1.0 - plate[0], 1.0 - plate[1], 1.0 - plate[2]];
    let scale = rng.random_range(0.85..1.0);
    let (du, dv) = (rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08));
    let plane = h * w;
    for r in bbox.row..bbox.row + bbox.height {
        for c in bbox.col..bbox.col + bbox.width {
            let v = ((r - bbox.row) as f32 + 0.5) / bbox.height as f32 * 2.0 - 1.0;
            let u = ((c - bbox.col) as f32 + 0.5) / bbox.width as f32 * 2.0 - 1.0;
            let color = if glyph_covers(label, (u - du) / scale, (v - dv) / scale) { ink } else { plate };
            for ch in 0..3 {
                img[ch * plane + r * w + c] = color[ch];
            }
        }
    }
}
