use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::ops::Range;

fn he_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / rows as f64).sqrt()).expect("finite std");
    Tensor::from_fn(&[rows, cols], |_| normal.sample(rng) as f32)
}

/// Dense `D -> C` classifier layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearHead {
    pub fn new(rng: &mut ChaCha8Rng, inputs: usize, classes: usize) -> Self {
        LinearHead {
            weight: he_matrix(rng, inputs, classes),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Linear layer over `[foreground | background]` features.
///
/// Rows `[0, fg_dim)` of the weight matrix read foreground features and rows
/// `[fg_dim, fg_dim + bg_dim)` read background features. The block accessors
/// borrow directly from the weight storage.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionHead {
    weight: Tensor,
    bias: Tensor,
    fg_dim: usize,
}

impl FusionHead {
    pub fn new(rng: &mut ChaCha8Rng, fg_dim: usize, bg_dim: usize, classes: usize) -> Self {
        FusionHead {
            weight: he_matrix(rng, fg_dim + bg_dim, classes),
            bias: Tensor::zeros(&[classes]),
            fg_dim,
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor, fg_dim: usize) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 2 || fg_dim == 0 || fg_dim >= s[0] || bias.shape() != [s[1]] {
            return Err(Error::dim(format!(
                "fusion head weight {s:?}, bias {:?}, fg rows {fg_dim}",
                bias.shape()
            )));
        }
        Ok(FusionHead { weight, bias, fg_dim })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Tensor {
        &mut self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut Tensor {
        &mut self.bias
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn fg_dim(&self) -> usize {
        self.fg_dim
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.weight, &mut self.bias)
    }

    pub fn fg_rows(&self) -> Range<usize> {
        0..self.fg_dim
    }

    pub fn bg_rows(&self) -> Range<usize> {
        self.fg_dim..self.weight.shape()[0]
    }

    fn flat(&self, rows: Range<usize>) -> Range<usize> {
        let c = self.classes();
        rows.start * c..rows.end * c
    }

    /// θ_fg: the foreground row block, row-major.
    pub fn fg_block(&self) -> &[f32] {
        &self.weight.data()[self.flat(self.fg_rows())]
    }

    pub fn fg_block_mut(&mut self) -> &mut [f32] {
        let r = self.flat(self.fg_rows());
        &mut self.weight.data_mut()[r]
    }

    /// θ_bg: the background row block, row-major.
    pub fn bg_block(&self) -> &[f32] {
        &self.weight.data()[self.flat(self.bg_rows())]
    }

    pub fn bg_block_mut(&mut self) -> &mut [f32] {
        let r = self.flat(self.bg_rows());
        &mut self.weight.data_mut()[r]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn partition_tiles_rows_and_views_alias_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = FusionHead::new(&mut rng, 3, 5, 2);
        assert_eq!(head.fg_rows(), 0..3);
        assert_eq!(head.bg_rows(), 3..8);
        assert_eq!(head.fg_block().len() + head.bg_block().len(), head.weight().len());
        head.fg_block_mut()[0] = 42.0;
        assert_eq!(head.weight().at(&[0, 0]), 42.0);
        head.bg_block_mut()[1] = -7.0;
        assert_eq!(head.weight().at(&[3, 1]), -7.0);
    }
}
