use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Running-statistics momentum for batchnorm.
pub const BN_MOMENTUM: f32 = 0.1;

/// Shape of a convolutional feature stream.
///
/// The stream is `widths.len() + 1` blocks of conv3x3 -> batchnorm -> relu ->
/// avgpool. Every block but the last pools 2x2; the last one averages over
/// its whole plane, so the stream emits `output_dim` features per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub output_dim: usize,
    pub kernel: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            in_channels: 3,
            widths: vec![8, 16],
            output_dim: 64,
            kernel: 3,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_dim == 0 {
            return Err(Error::config("output_dim must be positive"));
        }
        if self.in_channels == 0 || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::config("channel widths must be positive"));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::config(format!("kernel size {} must be odd", self.kernel)));
        }
        Ok(())
    }

    pub fn block_count(&self) -> usize {
        self.widths.len() + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    Window(usize),
    Global,
}

/// conv -> batchnorm -> relu -> pool.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    /// `F x C x k x k`, no bias (batchnorm supplies the shift).
    pub conv: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub pool: Pool,
}

impl ConvBlock {
    fn init(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize, pool: Pool) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        ConvBlock {
            conv: Tensor::from_fn(&[c_out, c_in, k, k], |_| normal.sample(rng) as f32),
            gamma: Tensor::full(&[c_out], 1.0),
            beta: Tensor::zeros(&[c_out]),
            running_mean: Tensor::zeros(&[c_out]),
            running_var: Tensor::full(&[c_out], 1.0),
            pool,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.conv.shape()[1]
    }

    fn kernel(&self) -> usize {
        self.conv.shape()[2]
    }
}

/// A stack of [`ConvBlock`]s producing `N x output_dim` features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub blocks: Vec<ConvBlock>,
    /// Frozen extractors are never updated by any training routine.
    pub frozen: bool,
}

/// Tape handles for one block's learnable parameters.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockVars {
    pub conv: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl FeatureExtractor {
    pub fn new(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let mut blocks = Vec::with_capacity(arch.block_count());
        let mut c_in = arch.in_channels;
        for &w in &arch.widths {
            blocks.push(ConvBlock::init(rng, c_in, w, arch.kernel, Pool::Window(2)));
            c_in = w;
        }
        blocks.push(ConvBlock::init(rng, c_in, arch.output_dim, arch.kernel, Pool::Global));
        Ok(FeatureExtractor { blocks, frozen: false })
    }

    pub fn output_dim(&self) -> usize {
        self.blocks.last().map_or(0, ConvBlock::out_channels)
    }

    pub fn in_channels(&self) -> usize {
        self.blocks.first().map_or(0, ConvBlock::in_channels)
    }

    pub(crate) fn bind(&self, tape: &Tape, trainable: bool) -> Vec<BlockVars> {
        self.blocks
            .iter()
            .map(|b| BlockVars {
                conv: tape.leaf(b.conv.clone(), trainable),
                gamma: tape.leaf(b.gamma.clone(), trainable),
                beta: tape.leaf(b.beta.clone(), trainable),
            })
            .collect()
    }

    /// Runs the stream on the tape. In train mode batchnorm uses batch
    /// statistics, which are returned per block.
    pub(crate) fn forward_on(
        &self,
        tape: &Tape,
        vars: &[BlockVars],
        x: Var,
        train: bool,
    ) -> Result<(Var, Vec<BatchStats>)> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != self.in_channels() {
            return Err(Error::dim(format!(
                "extractor expects N x {} x H x W input, got {shape:?}",
                self.in_channels()
            )));
        }
        let mut h = x;
        let mut stats = Vec::new();
        for (block, v) in self.blocks.iter().zip(vars) {
            h = tape.conv2d(h, v.conv, 1, block.kernel() / 2)?;
            h = if train {
                let (out, s) = tape.batchnorm2d_train(h, v.gamma, v.beta)?;
                stats.push(s);
                out
            } else {
                tape.batchnorm2d_eval(h, v.gamma, v.beta, block.running_mean.data(), block.running_var.data())?
            };
            h = tape.relu(h);
            h = match block.pool {
                Pool::Window(k) => tape.avg_pool2d(h, k)?,
                Pool::Global => {
                    let s = tape.shape(h);
                    tape.avg_pool2d_window(h, s[2], s[3])?
                }
            };
        }
        let s = tape.shape(h);
        let features = tape.reshape(h, &[s[0], s[1] * s[2] * s[3]])?;
        Ok((features, stats))
    }

    /// Eval-mode features without gradient bookkeeping, computed in chunks.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        const CHUNK: usize = 256;
        let n = *images.shape().first().ok_or_else(|| Error::dim("empty image tensor"))?;
        let mut data = Vec::with_capacity(n * self.output_dim());
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let tape = Tape::no_grad();
            let vars = self.bind(&tape, false);
            let x = tape.constant(images.slice_leading(start, end)?);
            let (f, _) = self.forward_on(&tape, &vars, x, false)?;
            data.extend_from_slice(tape.value(f).data());
            start = end;
        }
        Tensor::new(vec![n, self.output_dim()], data)
    }

    /// Folds batch statistics into the running estimates (unbiased variance).
    pub(crate) fn absorb_stats(&mut self, stats: &[BatchStats]) {
        for (block, s) in self.blocks.iter_mut().zip(stats) {
            let correction = if s.count > 1 { s.count as f32 / (s.count - 1) as f32 } else { 1.0 };
            for (rm, &m) in block.running_mean.data_mut().iter_mut().zip(&s.mean) {
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m;
            }
            for (rv, &v) in block.running_var.data_mut().iter_mut().zip(&s.var) {
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * v * correction;
            }
        }
    }

    /// Learnable tensors in binding order.
    pub(crate) fn learnables_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.conv, &mut b.gamma, &mut b.beta])
            .collect()
    }
}
