use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Grads, Linear, Params};
use crate::seed::Rng;

/// 3×3 convolution, stride 1, zero padding 1, over H×W×C row-major samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    /// `(9·c_in) × c_out`, rows ordered (dy, dx, c_in).
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl ConvLayer {
    pub fn he(rng: &mut Rng, c_in: usize, c_out: usize) -> ConvLayer {
        let fan_in = 9 * c_in;
        let std = (2.0 / fan_in as f64).sqrt();
        ConvLayer {
            w: Array2::from_shape_fn((fan_in, c_out), |_| {
                std * rng.sample::<f64, _>(StandardNormal)
            }),
            b: Array1::zeros(c_out),
        }
    }

    pub fn c_in(&self) -> usize {
        self.w.nrows() / 9
    }

    pub fn c_out(&self) -> usize {
        self.w.ncols()
    }
}

fn im2col(x: &Array2<f64>, h: usize, w: usize, c: usize) -> Array2<f64> {
    let n = x.nrows();
    let mut cols = Array2::zeros((n * h * w, 9 * c));
    for s in 0..n {
        let sample = x.row(s);
        for i in 0..h {
            for j in 0..w {
                let row = (s * h + i) * w + j;
                let mut out = cols.row_mut(row);
                for dy in 0..3 {
                    let yi = i as isize + dy as isize - 1;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let xj = j as isize + dx as isize - 1;
                        if xj < 0 || xj >= w as isize {
                            continue;
                        }
                        let src = (yi as usize * w + xj as usize) * c;
                        let dst = (dy * 3 + dx) * c;
                        for ch in 0..c {
                            out[dst + ch] = sample[src + ch];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, n: usize, h: usize, w: usize, c: usize) -> Array2<f64> {
    let mut x = Array2::zeros((n, h * w * c));
    for s in 0..n {
        let mut sample = x.row_mut(s);
        for i in 0..h {
            for j in 0..w {
                let row = cols.row((s * h + i) * w + j);
                for dy in 0..3 {
                    let yi = i as isize + dy as isize - 1;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let xj = j as isize + dx as isize - 1;
                        if xj < 0 || xj >= w as isize {
                            continue;
                        }
                        let dst = (yi as usize * w + xj as usize) * c;
                        let src = (dy * 3 + dx) * c;
                        for ch in 0..c {
                            sample[dst + ch] += row[src + ch];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Small convolutional feature extractor: conv, ReLU, 2×2 average pool, conv, ReLU,
/// global average pool, linear projection to `d` features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvNet {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub fc: Linear,
}

#[derive(Clone, Debug)]
pub struct ConvCache {
    cols1: Array2<f64>,
    pre1: Array2<f64>,
    cols2: Array2<f64>,
    pre2: Array2<f64>,
    pooled_gap: Array2<f64>,
}

impl ConvNet {
    pub fn new(
        rng: &mut Rng,
        (height, width, channels): (usize, usize, usize),
        filters: (usize, usize),
        features: usize,
    ) -> ConvNet {
        ConvNet {
            height,
            width,
            channels,
            conv1: ConvLayer::he(rng, channels, filters.0),
            conv2: ConvLayer::he(rng, filters.0, filters.1),
            fc: Linear::he(rng, filters.1, features),
        }
    }

    fn pooled_dims(&self) -> (usize, usize) {
        ((self.height / 2).max(1), (self.width / 2).max(1))
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, ConvCache) {
        let n = x.nrows();
        let (h, w) = (self.height, self.width);
        let c1 = self.conv1.c_out();
        let cols1 = im2col(x, h, w, self.channels);
        let pre1 = cols1.dot(&self.conv1.w) + &self.conv1.b;
        let act1 = pre1.mapv(super::relu);

        let (h2, w2) = self.pooled_dims();
        let (sy, sx) = (h / h2, w / w2);
        let mut pooled = Array2::zeros((n, h2 * w2 * c1));
        let scale = 1.0 / (sy * sx) as f64;
        for s in 0..n {
            for i in 0..h2 {
                for j in 0..w2 {
                    for dy in 0..sy {
                        for dx in 0..sx {
                            let src = act1.row((s * h + i * sy + dy) * w + j * sx + dx);
                            let base = (i * w2 + j) * c1;
                            for ch in 0..c1 {
                                pooled[[s, base + ch]] += scale * src[ch];
                            }
                        }
                    }
                }
            }
        }

        let cols2 = im2col(&pooled, h2, w2, c1);
        let pre2 = cols2.dot(&self.conv2.w) + &self.conv2.b;
        let c2 = self.conv2.c_out();
        let positions = h2 * w2;
        let mut gap = Array2::zeros((n, c2));
        for s in 0..n {
            for p in 0..positions {
                let row = pre2.row(s * positions + p);
                for ch in 0..c2 {
                    gap[[s, ch]] += super::relu(row[ch]) / positions as f64;
                }
            }
        }
        let out = self.fc.forward(&gap);
        (
            out,
            ConvCache {
                cols1,
                pre1,
                cols2,
                pre2,
                pooled_gap: gap,
            },
        )
    }

    pub fn backward(&self, cache: &ConvCache, grad_out: &Array2<f64>) -> Grads {
        let n = grad_out.nrows();
        let (h, w) = (self.height, self.width);
        let (h2, w2) = self.pooled_dims();
        let (sy, sx) = (h / h2, w / w2);
        let c1 = self.conv1.c_out();
        let c2 = self.conv2.c_out();
        let positions = h2 * w2;

        let (g_fc, g_gap) = self.fc.backward(&cache.pooled_gap, grad_out);

        let mut g_pre2 = Array2::zeros(cache.pre2.raw_dim());
        for s in 0..n {
            for p in 0..positions {
                let r = s * positions + p;
                for ch in 0..c2 {
                    if cache.pre2[[r, ch]] > 0.0 {
                        g_pre2[[r, ch]] = g_gap[[s, ch]] / positions as f64;
                    }
                }
            }
        }
        let g_w2 = cache.cols2.t().dot(&g_pre2);
        let g_b2 = g_pre2.sum_axis(Axis(0));
        let g_cols2 = g_pre2.dot(&self.conv2.w.t());
        let g_pooled = col2im(&g_cols2, n, h2, w2, c1);

        let scale = 1.0 / (sy * sx) as f64;
        let mut g_pre1 = Array2::zeros(cache.pre1.raw_dim());
        for s in 0..n {
            for i in 0..h2 {
                for j in 0..w2 {
                    let base = (i * w2 + j) * c1;
                    for dy in 0..sy {
                        for dx in 0..sx {
                            let r = (s * h + i * sy + dy) * w + j * sx + dx;
                            for ch in 0..c1 {
                                if cache.pre1[[r, ch]] > 0.0 {
                                    g_pre1[[r, ch]] = scale * g_pooled[[s, base + ch]];
                                }
                            }
                        }
                    }
                }
            }
        }
        let g_w1 = cache.cols1.t().dot(&g_pre1);
        let g_b1 = g_pre1.sum_axis(Axis(0));

        let mut grads = Grads(vec![
            g_w1.into_raw_vec_and_offset().0,
            g_b1.to_vec(),
            g_w2.into_raw_vec_and_offset().0,
            g_b2.to_vec(),
        ]);
        grads.extend(g_fc);
        grads
    }
}

impl Params for ConvNet {
    fn param_blocks(&self) -> Vec<&[f64]> {
        let mut v = vec![
            self.conv1.w.as_slice().expect("standard layout"),
            self.conv1.b.as_slice().expect("standard layout"),
            self.conv2.w.as_slice().expect("standard layout"),
            self.conv2.b.as_slice().expect("standard layout"),
        ];
        v.extend(self.fc.param_blocks());
        v
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![
            self.conv1.w.as_slice_mut().expect("standard layout"),
            self.conv1.b.as_slice_mut().expect("standard layout"),
            self.conv2.w.as_slice_mut().expect("standard layout"),
            self.conv2.b.as_slice_mut().expect("standard layout"),
        ];
        v.extend(self.fc.param_blocks_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c
        let mut rng = seed::rng(5);
        let (n, h, w, c) = (2, 3, 4, 2);
        let x = Array2::from_shape_fn((n, h * w * c), |_| rng.random::<f64>());
        let cols = Array2::from_shape_fn((n * h * w, 9 * c), |_| rng.random::<f64>());
        let lhs = (&im2col(&x, h, w, c) * &cols).sum();
        let rhs = (&x * &col2im(&cols, n, h, w, c)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = seed::rng(11);
        let mut net = ConvNet::new(&mut rng, (4, 4, 2), (3, 4), 3);
        let x = Array2::from_shape_fn((2, 32), |_| rng.random::<f64>() - 0.3);
        let probe = Array2::from_shape_fn((2, 3), |_| rng.random::<f64>() - 0.5);
        let objective = |net: &ConvNet| (&net.forward(&x).0 * &probe).sum();
        let (_, cache) = net.forward(&x);
        let analytic = net.backward(&cache, &probe).flatten();
        let eps = 1e-6;
        let mut numeric = Vec::new();
        let blocks = net.param_blocks().iter().map(|b| b.len()).collect::<Vec<_>>();
        for (bi, len) in blocks.into_iter().enumerate() {
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
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
            + numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff / scale < 1e-6, "relative error {}", diff / scale);
    }
}
