//! SGD training loops: plain, α-regularized fusion head, adversarial retraining.

use crate::attacks::{fgsm, AttackConfig, LossId, PixelDomain};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::{Classifier, ClassifierKind, FusionHead, Model};
use crate::tensor::{argmax_rows, Real, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Update every unfrozen extractor and the head.
    Full,
    /// Update the head only; extractors must be frozen.
    HeadOnly,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Full => "full",
            TrainMode::HeadOnly => "head_only",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TrainMode::Full),
            "head_only" => Ok(TrainMode::HeadOnly),
            other => Err(Error::config(format!("unknown train mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossId,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            epochs: 30,
            batch_size: 64,
            seed: 0,
            loss: LossId::CrossEntropy,
            mode: TrainMode::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegConfig {
    pub alpha: f32,
}

impl RegConfig {
    pub fn new(alpha: f32) -> Result<Self> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::config(format!("alpha must be non-negative, got {alpha}")));
        }
        Ok(RegConfig { alpha })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub metadata: Vec<(String, String)>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn set(&mut self, key: &str, value: impl ToString) {
        match self.metadata.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value.to_string(),
            None => self.metadata.push((key.to_string(), value.to_string())),
        }
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }

    /// `# key=value` lines, then `epoch,train_loss,train_acc,test_acc` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "# {k}={v}");
        }
        out.push_str("epoch,train_loss,train_acc,test_acc\n");
        for e in &self.epochs {
            let test = e.test_acc.map_or(String::new(), |a| format!("{a:.6}"));
            let _ = writeln!(out, "{},{:.6},{:.6},{}", e.epoch, e.train_loss, e.train_acc, test);
        }
        out
    }
}

/// SGD with heavy-ball momentum: `v = μv + g`, `p -= lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<Option<Vec<f32>>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Sgd { lr, momentum, velocity: Vec::new() }
    }

    /// `grads[i]` belongs to `params[i]`; `None` leaves the parameter alone.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Tensor>]) {
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        for (i, p) in params.into_iter().enumerate() {
            let Some(g) = grads.get(i).and_then(Option::as_ref) else { continue };
            let v = self.velocity[i].get_or_insert_with(|| vec![0.0; g.len()]);
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
    }
}

/// `CE(logits, targets) + α·Σ θ_fg²` on a tape, where θ_fg is the first
/// `fg_rows` rows of `head_weight`. The penalty is omitted entirely at α = 0.
pub fn regularized_joint_loss_on<T: Real>(
    tape: &Tape<T>,
    logits: Var,
    targets: &Tensor<T>,
    head_weight: Var,
    fg_rows: usize,
    alpha: T,
) -> Result<Var> {
    if !(alpha >= T::ZERO) {
        return Err(Error::config(format!("alpha must be non-negative, got {}", alpha.to_f64())));
    }
    let ce = tape.softmax_cross_entropy(logits, targets)?;
    if alpha == T::ZERO {
        return Ok(ce);
    }
    let theta_fg = tape.slice_rows(head_weight, 0, fg_rows)?;
    let penalty = tape.scale(tape.sum_squares(theta_fg), alpha);
    tape.add(ce, penalty)
}

/// Value of the regularized objective for fixed logits and head.
pub fn regularized_joint_loss(logits: &Tensor, targets: &Tensor, head: &FusionHead, alpha: f32) -> Result<f32> {
    let tape = Tape::no_grad();
    let l = tape.constant(logits.clone());
    let w = tape.constant(head.weight().clone());
    let loss = regularized_joint_loss_on(&tape, l, targets, w, head.fg_dim(), alpha)?;
    Ok(tape.value(loss).data()[0])
}

#[derive(Clone, Copy, Debug)]
enum Objective {
    Plain,
    Regularized(f32),
    Adversarial { epsilon: f32 },
}

/// Inputs for one step: either images or precomputed per-stream features.
enum StepInput {
    Images(Batch),
    Features(Vec<Tensor>, Tensor, Vec<usize>),
}

fn check_classes(clf: &Classifier, ds: &Dataset) -> Result<()> {
    if ds.meta.num_classes != clf.num_classes() {
        return Err(Error::config(format!(
            "dataset has {} classes, classifier has {}",
            ds.meta.num_classes,
            clf.num_classes()
        )));
    }
    if ds.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    Ok(())
}

fn test_accuracy(clf: &Classifier, test: &Dataset, features: Option<&[Tensor]>) -> Result<f64> {
    let labels = test.labels();
    let logits = match features {
        Some(f) => clf.head_logits(f)?,
        None => clf.logits(&test.full_batch()?.images)?,
    };
    let pred = argmax_rows(&logits);
    Ok(pred.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

fn fit(clf: &mut Classifier, train: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig, obj: Objective) -> Result<TrainHistory> {
    cfg.validate()?;
    check_classes(clf, train)?;
    if let Some(t) = test {
        check_classes(clf, t)?;
    }
    if cfg.mode == TrainMode::HeadOnly && !clf.all_frozen() {
        return Err(Error::config("head_only training needs frozen extractors"));
    }
    let frozen = clf.all_frozen();
    let adversarial = matches!(obj, Objective::Adversarial { .. });
    // With frozen streams the features never change, so compute them once.
    let train_feats = if frozen && !adversarial { Some(clf.forward_features(&train.full_batch()?.images)?) } else { None };
    let test_feats = match test {
        Some(t) if frozen => Some(clf.forward_features(&t.full_batch()?.images)?),
        _ => None,
    };
    let domain = PixelDomain::normalized(&train.meta.mean, &train.meta.std);
    let fg_rows = clf.fusion_head().map(FusionHead::fg_dim);

    let mut history = TrainHistory::default();
    history.set("classifier", clf.kind().name());
    history.set("lr", cfg.lr);
    history.set("momentum", cfg.momentum);
    history.set("epochs", cfg.epochs);
    history.set("batch_size", cfg.batch_size);
    history.set("seed", cfg.seed);
    history.set("mode", cfg.mode.name());
    history.set("loss", "cross_entropy");
    history.set("train_samples", train.len());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for rows in order.chunks(cfg.batch_size) {
            let input = match &train_feats {
                Some(f) => {
                    let feats = f.iter().map(|t| t.select_leading(rows)).collect::<Result<Vec<_>>>()?;
                    let labels: Vec<usize> = rows.iter().map(|&r| train.samples[r].label).collect();
                    let targets = crate::tensor::one_hot(&labels, clf.num_classes())?;
                    StepInput::Features(feats, targets, labels)
                }
                None => {
                    let mut batch = train.batch(rows)?;
                    if let Objective::Adversarial { epsilon } = obj {
                        batch = mix_adversarial(clf, batch, &domain, epsilon)?;
                    }
                    if frozen {
                        let feats = clf.forward_features(&batch.images)?;
                        StepInput::Features(feats, batch.targets, batch.labels)
                    } else {
                        StepInput::Images(batch)
                    }
                }
            };
            let (loss, hits) = step(clf, &mut sgd, input, obj, fg_rows)?;
            loss_sum += loss as f64 * rows.len() as f64;
            correct += hits;
        }
        let test_acc = match test {
            Some(t) => Some(test_accuracy(clf, t, test_feats.as_deref())?),
            None => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            test_acc,
        });
    }
    Ok(history)
}

/// Replaces the second half of the batch with FGSM examples crafted against
/// the current parameters.
fn mix_adversarial(clf: &Classifier, batch: Batch, domain: &PixelDomain, epsilon: f32) -> Result<Batch> {
    let n = batch.len();
    let split = n.div_ceil(2);
    if split == n {
        return Ok(batch);
    }
    let rows: Vec<usize> = (split..n).collect();
    let half = batch.select(&rows)?;
    let adv = fgsm(clf, &half, domain, &AttackConfig::new(epsilon, clf.kind().name())?)?;
    let mut images = batch.images.clone();
    let offset = split * (batch.images.len() / n);
    images.data_mut()[offset..].copy_from_slice(adv.x_adv.data());
    batch.with_images(images)
}

fn step(clf: &mut Classifier, sgd: &mut Sgd, input: StepInput, obj: Objective, fg_rows: Option<usize>) -> Result<(f32, usize)> {
    let tape = Tape::new();
    let (bound, logits, targets, labels, stats) = match &input {
        StepInput::Features(feats, targets, labels) => {
            let bound = clf.bind_head(&tape);
            let vars: Vec<Var> = feats.iter().map(|f| tape.constant(f.clone())).collect();
            let logits = clf.head_forward_bound(&tape, &bound, &vars)?;
            (bound, logits, targets, labels, Vec::new())
        }
        StepInput::Images(batch) => {
            let bound = clf.bind(&tape, true);
            let x = tape.constant(batch.images.clone());
            let (logits, stats) = clf.forward_bound(&tape, &bound, x, true)?;
            (bound, logits, &batch.targets, &batch.labels, stats)
        }
    };
    let loss = match (obj, fg_rows) {
        (Objective::Regularized(alpha), Some(rows)) => {
            regularized_joint_loss_on(&tape, logits, targets, bound.head_weight(), rows, alpha)?
        }
        (Objective::Regularized(_), None) => return Err(Error::config("regularized training needs a joint classifier")),
        _ => tape.softmax_cross_entropy(logits, targets)?,
    };
    let loss_value = tape.value(loss).data()[0];
    let pred = argmax_rows(&tape.value(logits));
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    let mut grads = tape.backward(loss)?;
    let mut params = clf.learnables_mut();
    let mut per_param: Vec<Option<Tensor>> = vec![None; params.len()];
    for &(index, var) in &bound.trainable {
        per_param[index] = grads.take(var);
    }
    sgd.step(std::mem::take(&mut params), &per_param);
    clf.absorb_stats(&stats);
    Ok((loss_value, hits))
}

/// Mini-batch SGD on cross-entropy. `test`, when given, is scored after every epoch.
pub fn train(clf: &Classifier, train_set: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<(Classifier, TrainHistory)> {
    let mut out = clf.clone();
    let mut h = fit(&mut out, train_set, test, cfg, Objective::Plain)?;
    h.set("objective", "plain");
    Ok((out, h))
}

/// Trains a joint head with the foreground-block L2 penalty.
pub fn train_regularized_joint(
    clf: &Classifier,
    train_set: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    reg: &RegConfig,
) -> Result<(Classifier, TrainHistory)> {
    if clf.kind() != ClassifierKind::Joint {
        return Err(Error::config(format!("regularized training needs a joint classifier, got {}", clf.kind().name())));
    }
    if !clf.all_frozen() {
        return Err(Error::config("regularized training needs frozen extractors"));
    }
    RegConfig::new(reg.alpha)?;
    let mut out = clf.clone();
    let mut h = fit(&mut out, train_set, test, cfg, Objective::Regularized(reg.alpha))?;
    h.set("objective", "regularized");
    h.set("alpha", reg.alpha);
    Ok((out, h))
}

/// Training on half-clean, half-FGSM mini-batches (examples recrafted each step).
pub fn adversarial_retrain(
    clf: &Classifier,
    train_set: &Dataset,
    test: Option<&Dataset>,
    epsilon_train: f32,
    cfg: &TrainConfig,
) -> Result<(Classifier, TrainHistory)> {
    if !(epsilon_train >= 0.0) {
        return Err(Error::config(format!("training epsilon must be non-negative, got {epsilon_train}")));
    }
    let mut out = clf.clone();
    let mut h = fit(&mut out, train_set, test, cfg, Objective::Adversarial { epsilon: epsilon_train })?;
    h.set("objective", "adversarial");
    h.set("epsilon_train", epsilon_train);
    Ok((out, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_quadratic_step() {
        let mut w = Tensor::scalar(0.0f32);
        let g = Tensor::scalar(w.data()[0] - 3.0);
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(vec![&mut w], &[Some(g)]);
        assert!((w.data()[0] - 0.3).abs() < 1e-7);
    }

    #[test]
    fn momentum_accumulates() {
        let mut w = Tensor::scalar(0.0f32);
        let mut opt = Sgd::new(1.0, 0.5);
        opt.step(vec![&mut w], &[Some(Tensor::scalar(1.0))]);
        opt.step(vec![&mut w], &[Some(Tensor::scalar(1.0))]);
        assert_eq!(w.data()[0], -2.5);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(RegConfig::new(-1.0).is_err());
        assert_eq!("head_only".parse::<TrainMode>().unwrap(), TrainMode::HeadOnly);
    }

    #[test]
    fn penalty_arithmetic() {
        let head = FusionHead::from_parts(
            Tensor::new(vec![3, 1], vec![0.5, -0.5, 7.0]).unwrap(),
            Tensor::new(vec![1], vec![100.0]).unwrap(),
            2,
        )
        .unwrap();
        let logits = Tensor::new(vec![1, 1], vec![0.3]).unwrap();
        let t = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let ce = regularized_joint_loss(&logits, &t, &head, 0.0).unwrap();
        assert_eq!(ce, 0.0);
        let reg = regularized_joint_loss(&logits, &t, &head, 2.0).unwrap();
        assert!((reg - ce - 1.0).abs() < 1e-7);
        assert!(regularized_joint_loss(&logits, &t, &head, -0.1).is_err());
        let zero = FusionHead::from_parts(Tensor::new(vec![3, 1], vec![0.0, 0.0, 7.0]).unwrap(), Tensor::zeros(&[1]), 2).unwrap();
        assert_eq!(regularized_joint_loss(&logits, &t, &zero, 5.0).unwrap(), ce);
    }

    #[test]
    fn history_csv_layout() {
        let mut h = TrainHistory::default();
        h.set("alpha", 0.1);
        h.epochs.push(EpochRecord { epoch: 1, train_loss: 0.5, train_acc: 0.75, test_acc: None });
        let csv = h.to_csv();
        assert_eq!(csv, "# alpha=0.1\nepoch,train_loss,train_acc,test_acc\n1,0.500000,0.750000,\n");
    }
}
