use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Grads, Params};
use crate::seed::Rng;

/// Fully connected layer, `y = x·W + b` with `W` stored input-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    /// He-normal weights, zero bias.
    pub fn he(rng: &mut Rng, inputs: usize, outputs: usize) -> Linear {
        let std = (2.0 / inputs as f64).sqrt();
        Linear {
            w: Array2::from_shape_fn((inputs, outputs), |_| {
                std * rng.sample::<f64, _>(StandardNormal)
            }),
            b: Array1::zeros(outputs),
        }
    }

    /// All-zero layer; a zero head emits uniform class distributions.
    pub fn zeros(inputs: usize, outputs: usize) -> Linear {
        Linear {
            w: Array2::zeros((inputs, outputs)),
            b: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Returns parameter gradients and the gradient with respect to `x`.
    pub fn backward(&self, x: &Array2<f64>, grad_out: &Array2<f64>) -> (Grads, Array2<f64>) {
        let gw = x.t().dot(grad_out);
        let gb = grad_out.sum_axis(Axis(0));
        let gx = grad_out.dot(&self.w.t());
        (Grads(vec![gw.into_raw_vec_and_offset().0, gb.to_vec()]), gx)
    }
}

impl Params for Linear {
    fn param_blocks(&self) -> Vec<&[f64]> {
        vec![
            self.w.as_slice().expect("standard layout"),
            self.b.as_slice().expect("standard layout"),
        ]
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w.as_slice_mut().expect("standard layout"),
            self.b.as_slice_mut().expect("standard layout"),
        ]
    }
}
