//! Weak and strong input perturbations for consistency training.

use ndarray::{Array2, ArrayViewMut1};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::PayloadShape;
use crate::seed::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AugmentationPolicy {
    Identity,
    /// Feature payloads: Gaussian jitter; strong adds random feature occlusion.
    Noise {
        weak_sigma: f64,
        strong_sigma: f64,
        strong_dropout: f64,
    },
    /// Image payloads: flip + translation; strong adds intensity jitter and cutout.
    Image {
        height: usize,
        width: usize,
        channels: usize,
        max_shift: f64,
        cutout: f64,
        intensity: f64,
    },
}

impl AugmentationPolicy {
    pub fn default_for(shape: PayloadShape) -> AugmentationPolicy {
        match shape {
            PayloadShape::Features(_) => AugmentationPolicy::Noise {
                weak_sigma: 0.1,
                strong_sigma: 0.5,
                strong_dropout: 0.2,
            },
            PayloadShape::Image {
                height,
                width,
                channels,
            } => AugmentationPolicy::Image {
                height,
                width,
                channels,
                max_shift: 0.125,
                cutout: 0.5,
                intensity: 0.3,
            },
        }
    }

    pub fn weak(&self, x: &Array2<f64>, rng: &mut Rng) -> Array2<f64> {
        let mut out = x.clone();
        for row in out.rows_mut() {
            match *self {
                AugmentationPolicy::Identity => {}
                AugmentationPolicy::Noise { weak_sigma, .. } => jitter(row, weak_sigma, 0.0, rng),
                AugmentationPolicy::Image {
                    height,
                    width,
                    channels,
                    max_shift,
                    ..
                } => flip_shift(row, (height, width, channels), max_shift, rng),
            }
        }
        out
    }

    pub fn strong(&self, x: &Array2<f64>, rng: &mut Rng) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            match *self {
                AugmentationPolicy::Identity => {}
                AugmentationPolicy::Noise {
                    strong_sigma,
                    strong_dropout,
                    ..
                } => jitter(row, strong_sigma, strong_dropout, rng),
                AugmentationPolicy::Image {
                    height,
                    width,
                    channels,
                    max_shift,
                    cutout,
                    intensity,
                } => {
                    let dims = (height, width, channels);
                    flip_shift(row.view_mut(), dims, max_shift, rng);
                    let brightness = rng.random_range(-intensity..=intensity);
                    let contrast = 1.0 + rng.random_range(-intensity..=intensity) * 1.5;
                    let mean = row.mean().unwrap_or(0.0);
                    row.mapv_inplace(|v| ((v - mean) * contrast + mean + brightness).clamp(0.0, 1.0));
                    cut_out(row, dims, cutout, rng);
                }
            }
        }
        out
    }
}

fn jitter(mut row: ArrayViewMut1<'_, f64>, sigma: f64, dropout: f64, rng: &mut Rng) {
    for v in row.iter_mut() {
        if dropout > 0.0 && rng.random_bool(dropout) {
            *v = 0.0;
        } else if sigma > 0.0 {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn flip_shift(
    mut row: ArrayViewMut1<'_, f64>,
    (h, w, c): (usize, usize, usize),
    max_shift: f64,
    rng: &mut Rng,
) {
    let flip = rng.random_bool(0.5);
    let max_dy = (h as f64 * max_shift).floor() as i64;
    let max_dx = (w as f64 * max_shift).floor() as i64;
    let dy = rng.random_range(-max_dy..=max_dy) as isize;
    let dx = rng.random_range(-max_dx..=max_dx) as isize;
    let src = row.to_vec();
    for i in 0..h {
        for j in 0..w {
            let si = i as isize - dy;
            let sj0 = j as isize - dx;
            let sj = if flip { w as isize - 1 - sj0 } else { sj0 };
            for ch in 0..c {
                row[(i * w + j) * c + ch] =
                    if si >= 0 && si < h as isize && sj >= 0 && sj < w as isize {
                        src[(si as usize * w + sj as usize) * c + ch]
                    } else {
                        0.0
                    };
            }
        }
    }
}

fn cut_out(mut row: ArrayViewMut1<'_, f64>, (h, w, c): (usize, usize, usize), frac: f64, rng: &mut Rng) {
    let size_y = ((h as f64 * frac).round() as usize).max(1).min(h);
    let size_x = ((w as f64 * frac).round() as usize).max(1).min(w);
    let y0 = rng.random_range(0..=h - size_y);
    let x0 = rng.random_range(0..=w - size_x);
    for i in y0..y0 + size_y {
        for j in x0..x0 + size_x {
            for ch in 0..c {
                row[(i * w + j) * c + ch] = 0.5;
            }
        }
    }
}
