use serde::{Deserialize, Serialize};

use super::Grads;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
        }
    }
}

/// Stochastic gradient descent with (Nesterov) momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Sgd {
        Sgd {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &Grads) {
        assert_eq!(params.len(), grads.0.len(), "parameter/gradient block mismatch");
        if self.velocity.is_empty() {
            self.velocity = grads.0.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        let SgdConfig {
            learning_rate: lr,
            momentum: mu,
            nesterov,
            weight_decay: wd,
        } = self.config;
        for ((p, g), v) in params.into_iter().zip(&grads.0).zip(&mut self.velocity) {
            assert_eq!(p.len(), g.len(), "parameter/gradient size mismatch");
            for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                let d = g + wd * *p;
                *v = mu * *v + d;
                let update = if nesterov { d + mu * *v } else { *v };
                *p -= lr * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Sgd::new(SgdConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..SgdConfig::default()
        });
        for _ in 0..200 {
            let g = Grads(vec![x.iter().map(|v| 2.0 * v).collect()]);
            opt.step(vec![&mut x[..]], &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-6));
    }
}
