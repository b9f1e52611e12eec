//! PCA, feature-shift scoring, fusion-weight statistics and robustness curves.

mod plot;

pub use plot::curve_svg;

use crate::attacks::{blur_dataset, transfer_attack, AttackConfig, BlurConfig, PixelDomain};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{FusionHead, Model};
use crate::tensor::{Real, Tensor};
use std::fmt::Write as _;

pub const PCA_TOLERANCE: f64 = 1e-9;
pub const PCA_MAX_ITERATIONS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    /// Variance along each component (sample covariance, `N - 1` denominator).
    pub variances: [f64; 2],
}

impl PcaModel {
    /// Projects rows of `features` (`N x D`) onto the two components.
    pub fn project<T: Real>(&self, features: &Tensor<T>) -> Result<Tensor<f64>> {
        let s = features.shape();
        if s.len() != 2 || s[1] != self.mean.len() {
            return Err(Error::dim(format!("cannot project {s:?} with a {}-d model", self.mean.len())));
        }
        let d = s[1];
        let mut out = Vec::with_capacity(s[0] * 2);
        for row in features.data().chunks(d) {
            for comp in &self.components {
                out.push(row.iter().zip(&self.mean).zip(comp).map(|((x, m), c)| (x.to_f64() - m) * c).sum());
            }
        }
        Tensor::new(vec![s[0], 2], out)
    }
}

fn mat_vec(c: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = c[i * d..(i + 1) * d].iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn remove_component(v: &mut [f64], u: &[f64]) {
    let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
    for (a, b) in v.iter_mut().zip(u) {
        *a -= p * b;
    }
}

/// Leading eigenvector of the PSD matrix `c` restricted to the complement of `against`.
fn power_iteration(c: &[f64], d: usize, against: Option<&[f64]>, scale: f64) -> Vec<f64> {
    let floor = 1e-12 * scale;
    // start from the largest column of c, or a basis vector when c vanishes there
    let mut v = vec![0.0; d];
    let best = (0..d)
        .max_by(|&a, &b| c[a * d + a].partial_cmp(&c[b * d + b]).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap_or(0);
    v.copy_from_slice(&c[best * d..(best + 1) * d]);
    if let Some(u) = against {
        remove_component(&mut v, u);
    }
    if norm(&v) < floor {
        v.fill(0.0);
        // basis vector least aligned with `against`
        let pick = match against {
            Some(u) => (0..d).min_by(|&a, &b| u[a].abs().partial_cmp(&u[b].abs()).unwrap()).unwrap_or(0),
            None => 0,
        };
        v[pick] = 1.0;
        if let Some(u) = against {
            remove_component(&mut v, u);
        }
    }
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    let mut next = vec![0.0; d];
    for _ in 0..PCA_MAX_ITERATIONS {
        mat_vec(c, &v, &mut next);
        if let Some(u) = against {
            remove_component(&mut next, u);
        }
        let n = norm(&next);
        if n < floor {
            break;
        }
        next.iter_mut().for_each(|x| *x /= n);
        let diff = v.iter().zip(&next).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        std::mem::swap(&mut v, &mut next);
        if diff < PCA_TOLERANCE {
            break;
        }
    }
    if let Some(u) = against {
        remove_component(&mut v, u);
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn rayleigh(c: &[f64], v: &[f64]) -> f64 {
    let mut cv = vec![0.0; v.len()];
    mat_vec(c, v, &mut cv);
    cv.iter().zip(v).map(|(a, b)| a * b).sum::<f64>().max(0.0)
}

fn fix_sign(v: &mut [f64]) {
    let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
    if big < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Top-two principal components by power iteration with deflation, and the
/// `N x 2` projection of the input.
pub fn pca2<T: Real>(features: &Tensor<T>) -> Result<(PcaModel, Tensor<f64>)> {
    let s = features.shape();
    if s.len() != 2 {
        return Err(Error::dim(format!("pca2 expects an N x D matrix, got {s:?}")));
    }
    let (n, d) = (s[0], s[1]);
    if n < 3 {
        return Err(Error::config(format!("pca2 needs at least 3 points, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for row in features.data().chunks(d) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x.to_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for row in features.data().chunks(d) {
        for ((c, x), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = x.to_f64() - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in 0..d {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    let total: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if total <= 1e-300 {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let mut v1 = power_iteration(&cov, d, None, total);
    let l1 = rayleigh(&cov, &v1);
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let mut v2 = power_iteration(&deflated, d, Some(&v1), total);
    let l2 = rayleigh(&cov, &v2).min(l1);
    fix_sign(&mut v1);
    fix_sign(&mut v2);
    let model = PcaModel { mean, components: [v1, v2], variances: [l1, l2] };
    let proj = model.project(features)?;
    Ok((model, proj))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftReport {
    /// `(class, ‖centroid_pert − centroid_clean‖)` for every class present.
    pub displacement: Vec<(usize, f64)>,
    pub spread: f64,
    pub score: f64,
}

impl ShiftReport {
    pub fn mean_displacement(&self) -> f64 {
        self.displacement.iter().map(|d| d.1).sum::<f64>() / self.displacement.len().max(1) as f64
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("score={:.6}\nspread={:.6}\nmean_displacement={:.6}\n", self.score, self.spread, self.mean_displacement());
        for (c, d) in &self.displacement {
            let _ = writeln!(out, "displacement.class{c}={d:.6}");
        }
        out
    }
}

/// Mean per-class centroid displacement divided by the mean clean within-class
/// standard deviation, in the full feature space.
pub fn subspace_shift<T: Real>(clean: &Tensor<T>, pert: &Tensor<T>, labels: &[usize]) -> Result<ShiftReport> {
    let s = clean.shape();
    if s.len() != 2 || pert.shape() != s || labels.len() != s[0] {
        return Err(Error::dim(format!(
            "subspace_shift: clean {s:?}, perturbed {:?}, {} labels",
            pert.shape(),
            labels.len()
        )));
    }
    let d = s[1];
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut count = vec![0usize; classes];
    let mut mc = vec![vec![0.0f64; d]; classes];
    let mut mp = vec![vec![0.0f64; d]; classes];
    for ((rc, rp), &l) in clean.data().chunks(d).zip(pert.data().chunks(d)).zip(labels) {
        count[l] += 1;
        for j in 0..d {
            mc[l][j] += rc[j].to_f64();
            mp[l][j] += rp[j].to_f64();
        }
    }
    for c in 0..classes {
        if count[c] > 0 {
            let k = count[c] as f64;
            mc[c].iter_mut().for_each(|v| *v /= k);
            mp[c].iter_mut().for_each(|v| *v /= k);
        }
    }
    let mut var = vec![0.0f64; classes];
    for (rc, &l) in clean.data().chunks(d).zip(labels) {
        var[l] += rc.iter().zip(&mc[l]).map(|(x, m)| (x.to_f64() - m).powi(2)).sum::<f64>();
    }
    let present: Vec<usize> = (0..classes).filter(|&c| count[c] > 0).collect();
    let spread = present.iter().map(|&c| (var[c] / (count[c] * d) as f64).sqrt()).sum::<f64>() / present.len().max(1) as f64;
    if !(spread >= 1e-9) {
        return Err(Error::Degenerate(format!("within-class spread {spread:e} is too small")));
    }
    let displacement: Vec<(usize, f64)> = present
        .iter()
        .map(|&c| (c, mc[c].iter().zip(&mp[c]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()))
        .collect();
    let mean_disp = displacement.iter().map(|x| x.1).sum::<f64>() / displacement.len() as f64;
    Ok(ShiftReport { displacement, spread, score: mean_disp / spread })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightSummary {
    pub avg_abs_fg: f64,
    pub avg_abs_bg: f64,
}

impl WeightSummary {
    pub fn to_text(&self) -> String {
        format!("avg_abs_fg={:.6}\navg_abs_bg={:.6}\n", self.avg_abs_fg, self.avg_abs_bg)
    }
}

fn mean_abs(v: &[f32]) -> f64 {
    v.iter().map(|x| x.abs() as f64).sum::<f64>() / v.len().max(1) as f64
}

/// Mean absolute weight of each row block (bias excluded).
pub fn weight_stream_summary(head: &FusionHead) -> WeightSummary {
    WeightSummary { avg_abs_fg: mean_abs(head.fg_block()), avg_abs_bg: mean_abs(head.bg_block()) }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurveAxis {
    Epsilon,
    Sigma,
}

impl CurveAxis {
    pub fn name(self) -> &'static str {
        match self {
            CurveAxis::Epsilon => "epsilon",
            CurveAxis::Sigma => "sigma",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessCurve {
    pub axis: CurveAxis,
    pub grid: Vec<f64>,
    pub models: Vec<String>,
    /// `accuracy[m][g]` for model `m` at grid point `g`.
    pub accuracy: Vec<Vec<f64>>,
    pub samples: usize,
}

impl RobustnessCurve {
    pub fn row(&self, model: &str) -> Option<&[f64]> {
        self.models.iter().position(|m| m == model).map(|i| self.accuracy[i].as_slice())
    }

    pub fn at(&self, model: &str, grid_index: usize) -> Option<f64> {
        self.row(model).and_then(|r| r.get(grid_index).copied())
    }

    /// `strength,<model>...` header, one row per grid value, 4 decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strength");
        for m in &self.models {
            out.push(',');
            out.push_str(m);
        }
        out.push('\n');
        for (g, v) in self.grid.iter().enumerate() {
            let _ = write!(out, "{v}");
            for row in &self.accuracy {
                let _ = write!(out, ",{:.4}", row[g]);
            }
            out.push('\n');
        }
        out
    }
}

/// Perturbation swept by a robustness curve.
pub enum Perturbation<'a> {
    /// Gaussian blur of the given region, σ taken from the grid.
    Blur(crate::attacks::BlurRegion),
    /// FGSM crafted on `source`, ε taken from the grid.
    Fgsm { source: &'a dyn Model, domain: PixelDomain },
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::config("robustness grid is empty"));
    }
    if grid.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config(format!("grid {grid:?} must be non-negative and strictly increasing")));
    }
    Ok(())
}

/// Accuracy of every model at every grid value. Each grid point perturbs the
/// dataset once and all models see the same perturbed inputs.
pub fn robustness_curve(models: &[(&str, &dyn Model)], dataset: &Dataset, perturbation: &Perturbation<'_>, grid: &[f64]) -> Result<RobustnessCurve> {
    check_grid(grid)?;
    if dataset.is_empty() || models.is_empty() {
        return Err(Error::config("robustness curve needs at least one model and one sample"));
    }
    let mut accuracy = vec![Vec::with_capacity(grid.len()); models.len()];
    let axis = match perturbation {
        Perturbation::Blur(_) => CurveAxis::Sigma,
        Perturbation::Fgsm { .. } => CurveAxis::Epsilon,
    };
    for &g in grid {
        let row = match perturbation {
            Perturbation::Blur(region) => {
                let blurred = blur_dataset(dataset, &BlurConfig { sigma: g, region: *region })?;
                let batch = blurred.full_batch()?;
                models
                    .iter()
                    .map(|(_, m)| crate::attacks::evaluate(*m, &batch.images, &batch.labels))
                    .collect::<Result<Vec<_>>>()?
            }
            Perturbation::Fgsm { source, domain } => {
                let batch = dataset.full_batch()?;
                let targets: Vec<&dyn Model> = models.iter().map(|(_, m)| *m).collect();
                let cfg = AttackConfig::new(g as f32, "source")?;
                transfer_attack(*source, &targets, &batch, domain, &cfg)?
            }
        };
        for (acc, v) in accuracy.iter_mut().zip(row) {
            acc.push(v);
        }
    }
    Ok(RobustnessCurve {
        axis,
        grid: grid.to_vec(),
        models: models.iter().map(|(n, _)| n.to_string()).collect(),
        accuracy,
        samples: dataset.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pca_line() {
        let pts = Tensor::<f64>::new(vec![5, 2], vec![0.0, 0.0, 1.0, 2.0, 2.0, 4.0, -1.0, -2.0, 3.0, 6.0]).unwrap();
        let (m, proj) = pca2(&pts).unwrap();
        let r5 = 5f64.sqrt();
        assert!((m.components[0][0] - 1.0 / r5).abs() < 1e-9);
        assert!((m.components[0][1] - 2.0 / r5).abs() < 1e-9);
        assert!(m.variances[1].abs() < 1e-9, "{m:?}");
        let dot: f64 = m.components[0].iter().zip(&m.components[1]).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-6);
        assert_eq!(proj.shape(), &[5, 2]);
    }

    #[test]
    fn pca_errors() {
        let two = Tensor::<f64>::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(pca2(&two), Err(Error::Config(_))));
        let same = Tensor::<f64>::full(&[4, 3], 1.5);
        assert!(matches!(pca2(&same), Err(Error::Degenerate(_))));
    }

    #[test]
    fn shift_identity_and_translation() {
        let clean = Tensor::<f64>::new(vec![4, 2], vec![0.0, 1.0, 2.0, 1.0, 5.0, 5.0, 7.0, 3.0]).unwrap();
        let labels = [0, 0, 1, 1];
        assert_eq!(subspace_shift(&clean, &clean, &labels).unwrap().score, 0.0);
        let moved = clean.map(|v| v + 0.0);
        let mut moved = moved;
        for r in 0..4 {
            moved.data_mut()[r * 2] += 3.0;
            moved.data_mut()[r * 2 + 1] += 4.0;
        }
        let rep = subspace_shift(&clean, &moved, &labels).unwrap();
        assert!((rep.mean_displacement() - 5.0).abs() < 1e-12);
        let flat = Tensor::<f64>::full(&[4, 2], 1.0);
        assert!(matches!(subspace_shift(&flat, &flat, &labels), Err(Error::Degenerate(_))));
    }

    #[test]
    fn weight_summary_cases() {
        let head = FusionHead::from_parts(Tensor::full(&[4, 2], 1.0), Tensor::full(&[2], 9.0), 2).unwrap();
        assert_eq!(weight_stream_summary(&head), WeightSummary { avg_abs_fg: 1.0, avg_abs_bg: 1.0 });
        let mut h = FusionHead::from_parts(Tensor::new(vec![3, 1], vec![1.0, -2.0, -3.0]).unwrap(), Tensor::zeros(&[1]), 1).unwrap();
        h.fg_block_mut().fill(0.0);
        assert_eq!(weight_stream_summary(&h), WeightSummary { avg_abs_fg: 0.0, avg_abs_bg: 2.5 });
    }

    #[test]
    fn curve_csv_format() {
        let c = RobustnessCurve {
            axis: CurveAxis::Sigma,
            grid: vec![0.0, 2.5],
            models: vec!["fg".into(), "joint".into()],
            accuracy: vec![vec![0.9, 0.5], vec![0.95, 0.81234]],
            samples: 10,
        };
        assert_eq!(c.to_csv(), "strength,fg,joint\n0,0.9000,0.9500\n2.5,0.5000,0.8123\n");
        assert_eq!(c.at("joint", 1), Some(0.81234));
    }

    #[test]
    fn grid_validation() {
        assert!(check_grid(&[]).is_err());
        assert!(check_grid(&[0.0, 0.0]).is_err());
        assert!(check_grid(&[0.0, 1.0, 5.0]).is_ok());
    }
}
