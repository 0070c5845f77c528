//! Supervised correctness heads on frozen embedding features.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::nn::{cross_entropy, Linear, Params, Sgd, SgdConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedConfig {
    /// Full-batch iterations.
    pub iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Hinge-loss regularization strength of the max-margin head.
    pub svm_lambda: f64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            iterations: 500,
            learning_rate: 0.1,
            weight_decay: 5e-4,
            svm_lambda: 1e-3,
        }
    }
}

/// Standardized linear max-margin classifier; positive margin means "correct".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxMargin {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub w: Vec<f64>,
    pub b: f64,
}

impl MaxMargin {
    pub fn margins(&self, features: &Array2<f64>) -> Vec<f64> {
        let w = Array1::from(self.w.clone());
        features
            .rows()
            .into_iter()
            .map(|r| {
                let z: Array1<f64> = r
                    .iter()
                    .zip(self.mean.iter().zip(&self.scale))
                    .map(|(v, (m, s))| (v - m) / s)
                    .collect();
                z.dot(&w) + self.b
            })
            .collect()
    }
}

/// Single fully connected layer with a softmax over {incorrect, correct}.
pub fn train_softmax_head(features: &Array2<f64>, labels: &[usize], config: &SupervisedConfig) -> Linear {
    fit_linear_softmax(features, labels, 2, config)
}

/// Full-batch multinomial logistic regression.
pub fn fit_linear_softmax(
    features: &Array2<f64>,
    labels: &[usize],
    classes: usize,
    config: &SupervisedConfig,
) -> Linear {
    let mut head = Linear::zeros(features.ncols(), classes);
    let mut opt = Sgd::new(SgdConfig {
        learning_rate: config.learning_rate,
        momentum: 0.9,
        nesterov: true,
        weight_decay: config.weight_decay,
    });
    for _ in 0..config.iterations {
        let logits = head.forward(features);
        let (_, grad) = cross_entropy(&logits, labels, None);
        let (grads, _) = head.backward(features, &grad);
        opt.step(head.param_blocks_mut(), &grads);
    }
    head
}

/// Linear SVM: L2-regularized mean hinge loss, minimized by subgradient descent with a
/// decaying step on standardized features.
pub fn train_max_margin(features: &Array2<f64>, labels: &[usize], config: &SupervisedConfig) -> MaxMargin {
    let n = features.nrows() as f64;
    let mean = features.mean_axis(Axis(0)).expect("nonempty features");
    let scale = features
        .std_axis(Axis(0), 0.0)
        .mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let z = (features - &mean) / &scale;
    let t: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
    let d = z.ncols();
    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0;
    let (mut best_w, mut best_b, mut best_obj) = (w.clone(), b, f64::INFINITY);
    for it in 0..config.iterations.max(1) {
        let margins = z.dot(&w) + b;
        let mut gw = &w * config.svm_lambda;
        let mut gb = 0.0;
        let mut hinge = 0.0;
        for (i, (&m, &ti)) in margins.iter().zip(&t).enumerate() {
            let slack = 1.0 - ti * m;
            if slack > 0.0 {
                hinge += slack;
                gw.scaled_add(-ti / n, &z.row(i));
                gb -= ti / n;
            }
        }
        let obj = 0.5 * config.svm_lambda * w.dot(&w) + hinge / n;
        if obj < best_obj {
            best_obj = obj;
            best_w.assign(&w);
            best_b = b;
        }
        let step = config.learning_rate / (1.0 + it as f64).sqrt();
        w.scaled_add(-step, &gw);
        b -= step * gb;
    }
    MaxMargin {
        mean: mean.to_vec(),
        scale: scale.to_vec(),
        w: best_w.to_vec(),
        b: best_b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax_rows;

    fn separable() -> (Array2<f64>, Vec<usize>) {
        let x = Array2::from_shape_fn((40, 3), |(i, j)| {
            let side = if i % 2 == 0 { 1.0 } else { -1.0 };
            side * (1.0 + (i % 7) as f64 * 0.1) + j as f64 * 0.05 * ((i * 13 % 5) as f64 - 2.0)
        });
        let y = (0..40).map(|i| usize::from(i % 2 == 0)).collect();
        (x, y)
    }

    #[test]
    fn separable_features_are_fit_exactly() {
        let (x, y) = separable();
        let cfg = SupervisedConfig::default();
        let head = train_softmax_head(&x, &y, &cfg);
        let p = softmax_rows(&head.forward(&x));
        for (i, &t) in y.iter().enumerate() {
            assert_eq!(usize::from(p[[i, 1]] > p[[i, 0]]), t);
        }
        let svm = train_max_margin(&x, &y, &cfg);
        for (m, &t) in svm.margins(&x).iter().zip(&y) {
            assert_eq!(usize::from(*m > 0.0), t);
        }
    }
}
