use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::conv::ConvCache;
use super::{relu, ConvNet, Grads, Linear, Params};
use crate::dataset::PayloadShape;
use crate::seed::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// Convolutional for image payloads, perceptron for feature payloads.
    Auto,
    Mlp,
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub hidden: Vec<usize>,
    pub conv_filters: (usize, usize),
    /// Feature dimension `d`.
    pub features: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Auto,
            hidden: vec![64],
            conv_filters: (8, 16),
            features: 32,
        }
    }
}

/// Multi-layer perceptron; ReLU between layers, linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(rng: &mut Rng, inputs: usize, hidden: &[usize], outputs: usize) -> Mlp {
        let mut dims = vec![inputs];
        dims.extend_from_slice(hidden);
        dims.push(outputs);
        Mlp {
            layers: dims
                .windows(2)
                .map(|w| Linear::he(rng, w[0], w[1]))
                .collect(),
        }
    }

    /// Returns the output and every layer's input.
    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Vec<Array2<f64>>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&current);
            inputs.push(current);
            current = if i + 1 < self.layers.len() {
                z.mapv(relu)
            } else {
                z
            };
        }
        (current, inputs)
    }

    pub fn backward(&self, inputs: &[Array2<f64>], grad_out: &Array2<f64>) -> (Grads, Array2<f64>) {
        let mut blocks = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (gl, gx) = layer.backward(&inputs[i], &g);
            blocks.push(gl);
            g = if i > 0 {
                let mut gx = gx;
                gx.zip_mut_with(&inputs[i], |gv, &a| {
                    if a <= 0.0 {
                        *gv = 0.0;
                    }
                });
                gx
            } else {
                gx
            };
        }
        let mut grads = Grads::default();
        for gl in blocks.into_iter().rev() {
            grads.extend(gl);
        }
        (grads, g)
    }
}

impl Params for Mlp {
    fn param_blocks(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.param_blocks()).collect()
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.param_blocks_mut())
            .collect()
    }
}

/// Feature extractor `payload → R^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Backbone {
    Mlp(Mlp),
    Conv(ConvNet),
}

#[derive(Clone, Debug)]
pub enum BackboneCache {
    Mlp(Vec<Array2<f64>>),
    Conv(ConvCache),
}

impl Backbone {
    pub fn new(config: &BackboneConfig, shape: PayloadShape, seed: u64) -> Backbone {
        let mut rng = seed::rng_for(seed, "backbone");
        let kind = match (config.kind, shape) {
            (BackboneKind::Auto, PayloadShape::Image { .. }) => BackboneKind::Conv,
            (BackboneKind::Auto, PayloadShape::Features(_)) => BackboneKind::Mlp,
            (kind, _) => kind,
        };
        match (kind, shape) {
            (
                BackboneKind::Conv,
                PayloadShape::Image {
                    height,
                    width,
                    channels,
                },
            ) => Backbone::Conv(ConvNet::new(
                &mut rng,
                (height, width, channels),
                config.conv_filters,
                config.features,
            )),
            _ => Backbone::Mlp(Mlp::new(
                &mut rng,
                shape.len(),
                &config.hidden,
                config.features,
            )),
        }
    }

    pub fn input_len(&self) -> usize {
        match self {
            Backbone::Mlp(m) => m.layers[0].inputs(),
            Backbone::Conv(c) => c.height * c.width * c.channels,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Backbone::Mlp(m) => m.layers.last().expect("non-empty").outputs(),
            Backbone::Conv(c) => c.fc.outputs(),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, BackboneCache) {
        match self {
            Backbone::Mlp(m) => {
                let (out, inputs) = m.forward(x);
                (out, BackboneCache::Mlp(inputs))
            }
            Backbone::Conv(c) => {
                let (out, cache) = c.forward(x);
                (out, BackboneCache::Conv(cache))
            }
        }
    }

    /// Forward pass without keeping activations.
    pub fn features(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward(x).0
    }

    pub fn backward(&self, cache: &BackboneCache, grad_out: &Array2<f64>) -> Grads {
        match (self, cache) {
            (Backbone::Mlp(m), BackboneCache::Mlp(inputs)) => m.backward(inputs, grad_out).0,
            (Backbone::Conv(c), BackboneCache::Conv(cache)) => c.backward(cache, grad_out),
            _ => panic!("backbone cache does not match backbone"),
        }
    }
}

impl Params for Backbone {
    fn param_blocks(&self) -> Vec<&[f64]> {
        match self {
            Backbone::Mlp(m) => m.param_blocks(),
            Backbone::Conv(c) => c.param_blocks(),
        }
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Backbone::Mlp(m) => m.param_blocks_mut(),
            Backbone::Conv(c) => c.param_blocks_mut(),
        }
    }
}

/// Backbone followed by a linear classification head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub backbone: Backbone,
    pub head: Linear,
}

#[derive(Clone, Debug)]
pub struct NetworkCache {
    pub backbone: BackboneCache,
    pub features: Array2<f64>,
}

impl Network {
    /// He-initialized backbone, zero head (uniform initial predictions).
    pub fn new(config: &BackboneConfig, shape: PayloadShape, outputs: usize, seed: u64) -> Network {
        let backbone = Backbone::new(config, shape, seed);
        let head = Linear::zeros(backbone.feature_dim(), outputs);
        Network { backbone, head }
    }

    pub fn outputs(&self) -> usize {
        self.head.outputs()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, NetworkCache) {
        let (features, backbone) = self.backbone.forward(x);
        let logits = self.head.forward(&features);
        (logits, NetworkCache { backbone, features })
    }

    pub fn logits(&self, x: &Array2<f64>) -> Array2<f64> {
        self.head.forward(&self.backbone.features(x))
    }

    pub fn backward(&self, cache: &NetworkCache, grad_logits: &Array2<f64>) -> Grads {
        let (g_head, g_features) = self.head.backward(&cache.features, grad_logits);
        let mut grads = self.backbone.backward(&cache.backbone, &g_features);
        grads.extend(g_head);
        grads
    }
}

impl Params for Network {
    fn param_blocks(&self) -> Vec<&[f64]> {
        let mut v = self.backbone.param_blocks();
        v.extend(self.head.param_blocks());
        v
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.backbone.param_blocks_mut();
        v.extend(self.head.param_blocks_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn auto_picks_backbone_by_payload() {
        let cfg = BackboneConfig::default();
        assert!(matches!(
            Backbone::new(&cfg, PayloadShape::Features(5), 0),
            Backbone::Mlp(_)
        ));
        let img = PayloadShape::Image {
            height: 4,
            width: 4,
            channels: 1,
        };
        let b = Backbone::new(&cfg, img, 0);
        assert!(matches!(b, Backbone::Conv(_)));
        assert_eq!(b.feature_dim(), cfg.features);
        assert_eq!(b.input_len(), 16);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = seed::rng(3);
        let mut net = Network::new(
            &BackboneConfig {
                hidden: vec![6, 5],
                features: 4,
                ..BackboneConfig::default()
            },
            PayloadShape::Features(3),
            3,
            9,
        );
        // non-zero head so backbone gradients are non-trivial
        for v in net.head.w.iter_mut() {
            *v = rng.random::<f64>() - 0.5;
        }
        let x = Array2::from_shape_fn((4, 3), |_| rng.random::<f64>() * 2.0 - 1.0);
        let probe = Array2::from_shape_fn((4, 3), |_| rng.random::<f64>() - 0.5);
        let objective = |net: &Network| (&net.logits(&x) * &probe).sum();
        let (_, cache) = net.forward(&x);
        let analytic = net.backward(&cache, &probe).flatten();
        let sizes: Vec<usize> = net.param_blocks().iter().map(|b| b.len()).collect();
        let mut numeric = Vec::new();
        let eps = 1e-6;
        for (bi, len) in sizes.into_iter().enumerate() {
            for j in 0..len {
                let orig = net.param_blocks()[bi][j];
                net.param_blocks_mut()[bi][j] = orig + eps;
                let up = objective(&net);
                net.param_blocks_mut()[bi][j] = orig - eps;
                let down = objective(&net);
                net.param_blocks_mut()[bi][j] = orig;
                numeric.push((up - down) / (2.0 * eps));
            }
        }
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + a.abs()), "{a} vs {n}");
        }
    }
}
