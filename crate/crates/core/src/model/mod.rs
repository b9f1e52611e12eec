//! Foreground, background and joint classifiers.

mod checkpoint;
mod extractor;
mod head;

pub use checkpoint::{deserialize_params, serialize_params, load_checkpoint, save_checkpoint};
pub use extractor::{ArchConfig, ConvBlock, FeatureExtractor, Pool, BN_MOMENTUM};
pub use head::{FusionHead, LinearHead};

use crate::error::{Error, Result};
use crate::tensor::{argmax_rows, BatchStats, Tape, Tensor, Var};
use extractor::BlockVars;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClassifierKind {
    Foreground,
    Background,
    Joint,
}

impl ClassifierKind {
    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::Foreground => "foreground",
            ClassifierKind::Background => "background",
            ClassifierKind::Joint => "joint",
        }
    }
}

/// Anything that maps a normalized image batch to class logits on a tape.
///
/// Attacks and evaluation are written against this trait so they work with
/// the full classifiers as well as with small closed-form models.
pub trait Model {
    fn num_classes(&self) -> usize;

    /// Eval-mode logits for input `x` (`N x 3 x H x W`). Parameters enter the
    /// tape as constants.
    fn logits_on(&self, tape: &Tape, x: Var) -> Result<Var>;

    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        const CHUNK: usize = 256;
        let n = images.shape()[0];
        let mut data = Vec::with_capacity(n * self.num_classes());
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let tape = Tape::no_grad();
            let x = tape.constant(images.slice_leading(start, end)?);
            let y = self.logits_on(&tape, x)?;
            data.extend_from_slice(tape.value(y).data());
            start = end;
        }
        Tensor::new(vec![n, self.num_classes()], data)
    }

    /// Logits and argmax labels (ties to the smallest class index).
    fn predict(&self, images: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let logits = self.logits(images)?;
        let labels = argmax_rows(&logits);
        Ok((logits, labels))
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Body {
    Single { extractor: FeatureExtractor, head: LinearHead },
    Joint { fg: FeatureExtractor, bg: FeatureExtractor, head: FusionHead },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    kind: ClassifierKind,
    body: Body,
}

/// Tape handles for a bound classifier, in learnable-parameter order.
pub(crate) struct BoundClassifier {
    streams: Vec<Vec<BlockVars>>,
    head_w: Var,
    head_b: Var,
    /// `(learnable index, var)` for the parameters that receive gradients.
    pub trainable: Vec<(usize, Var)>,
}

impl BoundClassifier {
    pub fn head_weight(&self) -> Var {
        self.head_w
    }
}

/// Initializes a classifier from `seed` (He-scaled weights, zero biases).
pub fn build_classifier(kind: ClassifierKind, arch: &ArchConfig, classes: usize, seed: u64) -> Result<Classifier> {
    arch.validate()?;
    if classes == 0 {
        return Err(Error::config("class count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body = match kind {
        ClassifierKind::Joint => {
            let fg = FeatureExtractor::new(arch, &mut rng)?;
            let bg = FeatureExtractor::new(arch, &mut rng)?;
            let head = FusionHead::new(&mut rng, fg.output_dim(), bg.output_dim(), classes);
            Body::Joint { fg, bg, head }
        }
        _ => {
            let extractor = FeatureExtractor::new(arch, &mut rng)?;
            let head = LinearHead::new(&mut rng, extractor.output_dim(), classes);
            Body::Single { extractor, head }
        }
    };
    Ok(Classifier { kind, body })
}

impl Classifier {
    pub fn single(kind: ClassifierKind, extractor: FeatureExtractor, head: LinearHead) -> Result<Self> {
        if kind == ClassifierKind::Joint {
            return Err(Error::config("a joint classifier needs two extractors"));
        }
        if head.inputs() != extractor.output_dim() {
            return Err(Error::dim(format!(
                "head expects {} features, extractor emits {}",
                head.inputs(),
                extractor.output_dim()
            )));
        }
        Ok(Classifier { kind, body: Body::Single { extractor, head } })
    }

    pub fn joint(fg: FeatureExtractor, bg: FeatureExtractor, head: FusionHead) -> Result<Self> {
        if head.fg_rows().len() != fg.output_dim() || head.bg_rows().len() != bg.output_dim() {
            return Err(Error::dim(format!(
                "fusion head partition {:?}/{:?} vs stream widths {}/{}",
                head.fg_rows(),
                head.bg_rows(),
                fg.output_dim(),
                bg.output_dim()
            )));
        }
        Ok(Classifier { kind: ClassifierKind::Joint, body: Body::Joint { fg, bg, head } })
    }

    /// Joint classifier over two existing streams with a freshly initialized head.
    pub fn joint_with_new_head(fg: FeatureExtractor, bg: FeatureExtractor, classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = FusionHead::new(&mut rng, fg.output_dim(), bg.output_dim(), classes);
        Self::joint(fg, bg, head)
    }

    /// Single-stream classifier over an existing stream with a fresh head.
    pub fn single_with_new_head(kind: ClassifierKind, extractor: FeatureExtractor, classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = LinearHead::new(&mut rng, extractor.output_dim(), classes);
        Self::single(kind, extractor, head)
    }

    pub fn kind(&self) -> ClassifierKind {
        self.kind
    }

    pub fn extractors(&self) -> Vec<&FeatureExtractor> {
        match &self.body {
            Body::Single { extractor, .. } => vec![extractor],
            Body::Joint { fg, bg, .. } => vec![fg, bg],
        }
    }

    pub fn extractors_mut(&mut self) -> Vec<&mut FeatureExtractor> {
        match &mut self.body {
            Body::Single { extractor, .. } => vec![extractor],
            Body::Joint { fg, bg, .. } => vec![fg, bg],
        }
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for e in self.extractors_mut() {
            e.frozen = frozen;
        }
    }

    pub fn all_frozen(&self) -> bool {
        self.extractors().iter().all(|e| e.frozen)
    }

    pub fn linear_head(&self) -> Option<&LinearHead> {
        match &self.body {
            Body::Single { head, .. } => Some(head),
            Body::Joint { .. } => None,
        }
    }

    pub fn fusion_head(&self) -> Option<&FusionHead> {
        match &self.body {
            Body::Joint { head, .. } => Some(head),
            Body::Single { .. } => None,
        }
    }

    pub fn fusion_head_mut(&mut self) -> Option<&mut FusionHead> {
        match &mut self.body {
            Body::Joint { head, .. } => Some(head),
            Body::Single { .. } => None,
        }
    }

    /// Head weight and bias regardless of kind.
    pub fn head_params(&self) -> (&Tensor, &Tensor) {
        match &self.body {
            Body::Single { head, .. } => (&head.weight, &head.bias),
            Body::Joint { head, .. } => (head.weight(), head.bias()),
        }
    }

    /// Eval-mode features of each stream (foreground first for joint models).
    pub fn forward_features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        self.extractors().iter().map(|e| e.features(images)).collect()
    }

    /// Applies the head to precomputed stream features.
    pub fn head_logits(&self, features: &[Tensor]) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let (w, b) = self.head_params();
        let (w, b) = (tape.constant(w.clone()), tape.constant(b.clone()));
        let inputs: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
        let h = self.head_input(&tape, &inputs)?;
        let y = tape.linear(h, w, b)?;
        Ok((*tape.value(y)).clone())
    }

    fn head_input(&self, tape: &Tape, features: &[Var]) -> Result<Var> {
        match (&self.body, features) {
            (Body::Single { .. }, [f]) => Ok(*f),
            (Body::Joint { .. }, [fg, bg]) => tape.concat(*fg, *bg),
            _ => Err(Error::dim(format!("{} features for a {} classifier", features.len(), self.kind.name()))),
        }
    }

    /// Learnable tensors: each stream's blocks (conv, gamma, beta), then head weight and bias.
    pub(crate) fn learnables_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.body {
            Body::Single { extractor, head } => {
                let mut v = extractor.learnables_mut();
                v.push(&mut head.weight);
                v.push(&mut head.bias);
                v
            }
            Body::Joint { fg, bg, head } => {
                let mut v = fg.learnables_mut();
                v.extend(bg.learnables_mut());
                let (w, b) = head.parts_mut();
                v.push(w);
                v.push(b);
                v
            }
        }
    }

    /// Puts the parameters on `tape`. Extractors receive gradients only when
    /// `train_extractors` is set and they are not frozen; the head always does.
    pub(crate) fn bind(&self, tape: &Tape, train_extractors: bool) -> BoundClassifier {
        let mut trainable = Vec::new();
        let mut streams = Vec::new();
        let mut index = 0;
        for e in self.extractors() {
            let learn = train_extractors && !e.frozen;
            let vars = e.bind(tape, learn);
            for v in &vars {
                for var in [v.conv, v.gamma, v.beta] {
                    if learn {
                        trainable.push((index, var));
                    }
                    index += 1;
                }
            }
            streams.push(vars);
        }
        let (w, b) = self.head_params();
        let head_w = tape.param(w.clone());
        let head_b = tape.param(b.clone());
        trainable.push((index, head_w));
        trainable.push((index + 1, head_b));
        BoundClassifier { streams, head_w, head_b, trainable }
    }

    /// Binds only the head; extractor learnables keep their index slots.
    pub(crate) fn bind_head(&self, tape: &Tape) -> BoundClassifier {
        let index: usize = self.extractors().iter().map(|e| 3 * e.blocks.len()).sum();
        let (w, b) = self.head_params();
        let head_w = tape.param(w.clone());
        let head_b = tape.param(b.clone());
        BoundClassifier { streams: Vec::new(), head_w, head_b, trainable: vec![(index, head_w), (index + 1, head_b)] }
    }

    /// Logits on the tape. Streams that are being trained use batch statistics;
    /// the others use running statistics.
    pub(crate) fn forward_bound(
        &self,
        tape: &Tape,
        bound: &BoundClassifier,
        x: Var,
        train_extractors: bool,
    ) -> Result<(Var, Vec<Vec<BatchStats>>)> {
        let mut feats = Vec::new();
        let mut stats = Vec::new();
        for (e, vars) in self.extractors().into_iter().zip(&bound.streams) {
            let train = train_extractors && !e.frozen;
            let (f, s) = e.forward_on(tape, vars, x, train)?;
            feats.push(f);
            stats.push(s);
        }
        let h = self.head_input(tape, &feats)?;
        Ok((tape.linear(h, bound.head_w, bound.head_b)?, stats))
    }

    /// Logits from a bound head over precomputed features.
    pub(crate) fn head_forward_bound(&self, tape: &Tape, bound: &BoundClassifier, features: &[Var]) -> Result<Var> {
        let h = self.head_input(tape, features)?;
        tape.linear(h, bound.head_w, bound.head_b)
    }

    pub(crate) fn absorb_stats(&mut self, stats: &[Vec<BatchStats>]) {
        for (e, s) in self.extractors_mut().into_iter().zip(stats) {
            if !s.is_empty() {
                e.absorb_stats(s);
            }
        }
    }
}

impl Model for Classifier {
    fn num_classes(&self) -> usize {
        self.head_params().1.len()
    }

    fn logits_on(&self, tape: &Tape, x: Var) -> Result<Var> {
        let mut feats = Vec::new();
        for e in self.extractors() {
            let vars = e.bind(tape, false);
            feats.push(e.forward_on(tape, &vars, x, false)?.0);
        }
        let h = self.head_input(tape, &feats)?;
        let (w, b) = self.head_params();
        let (w, b) = (tape.constant(w.clone()), tape.constant(b.clone()));
        tape.linear(h, w, b)
    }
}
