//! Small dense and convolutional networks with hand-written backpropagation.
//!
//! Parameters are exposed as flat blocks in a fixed order so optimizers and
//! finite-difference checks can treat every module uniformly.

mod backbone;
mod conv;
mod linear;
mod loss;
mod optim;

pub use backbone::{Backbone, BackboneCache, BackboneConfig, BackboneKind, Mlp, Network, NetworkCache};
pub use conv::{ConvLayer, ConvNet};
pub use linear::Linear;
pub use loss::{
    argmax_row, cross_entropy, log_softmax_rows, soft_cross_entropy, softmax_rows,
};
pub use optim::{Sgd, SgdConfig};

/// Gradient blocks, aligned with a module's parameter blocks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn extend(&mut self, other: Grads) {
        self.0.extend(other.0);
    }

    pub fn scale(&mut self, factor: f64) {
        for block in &mut self.0 {
            for g in block {
                *g *= factor;
            }
        }
    }

    /// Elementwise sum with a same-shaped gradient.
    pub fn add(&mut self, other: &Grads) {
        assert_eq!(self.0.len(), other.0.len(), "gradient block count mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|b| b.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }
}

/// Anything with trainable parameters.
pub trait Params {
    fn param_blocks(&self) -> Vec<&[f64]>;
    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.param_blocks().iter().map(|b| b.len()).sum()
    }
}

/// Rectifier that lets NaN through so divergence stays visible.
#[inline]
pub(crate) fn relu(v: f64) -> f64 {
    if v < 0.0 {
        0.0
    } else {
        v
    }
}
