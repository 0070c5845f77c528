//! Semi-supervised training of the correctness head: FixMatch and CoMatch objectives.
//!
//! Both objectives share the supervised term (cross-entropy of the binary expert label
//! against the prediction on a weakly augmented labeled input) and a thresholded
//! consistency term on unlabeled inputs (pseudo-label from the weak view, prediction on
//! a strong view). CoMatch smooths pseudo-labels with a memory bank and adds a
//! contrastive term matching an embedding-similarity graph over two strong views to a
//! pseudo-label graph.

use std::collections::VecDeque;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationPolicy;
use crate::embedding::cosine_lr;
use crate::error::{Error, Result};
use crate::nn::{
    argmax_row, cross_entropy, log_softmax_rows, soft_cross_entropy, softmax_rows, Backbone,
    BackboneCache, Grads, Linear, Mlp, Params, Sgd, SgdConfig,
};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslConfig {
    /// Confidence threshold τ for keeping a pseudo-label.
    pub tau: f64,
    pub lambda_u: f64,
    /// Weight of the contrastive term (CoMatch only).
    pub lambda_c: f64,
    /// Unlabeled-to-labeled batch ratio μ.
    pub mu: usize,
    pub labeled_batch: usize,
    pub epochs: usize,
    /// Steps per epoch; defaults to one pass over the unlabeled set.
    pub steps_per_epoch: Option<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub cosine_schedule: bool,
    /// CoMatch memory bank capacity.
    pub memory_size: usize,
    /// Weight of the model's own prediction when smoothing with the memory bank.
    pub smoothing_weight: f64,
    pub memory_smoothing: bool,
    /// Use argmax pseudo-labels in CoMatch instead of soft ones.
    pub hard_pseudo_labels: bool,
    pub projection_hidden: usize,
    pub projection_dim: usize,
    /// Pseudo-label graph entries below this are dropped.
    pub contrast_threshold: f64,
    pub temperature: f64,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            tau: 0.95,
            lambda_u: 1.0,
            lambda_c: 1.0,
            mu: 7,
            labeled_batch: 16,
            epochs: 50,
            steps_per_epoch: None,
            learning_rate: 0.03,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            cosine_schedule: true,
            memory_size: 640,
            smoothing_weight: 0.9,
            memory_smoothing: true,
            hard_pseudo_labels: false,
            projection_hidden: 32,
            projection_dim: 16,
            contrast_threshold: 0.8,
            temperature: 0.2,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Precondition(format!("tau {} outside (0, 1]", self.tau)));
        }
        if self.lambda_u < 0.0 || self.lambda_c < 0.0 {
            return Err(Error::Precondition("loss weights must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.smoothing_weight) {
            return Err(Error::Precondition("smoothing weight outside [0, 1]".into()));
        }
        if self.temperature <= 0.0 || self.labeled_batch == 0 {
            return Err(Error::Precondition(
                "temperature and labeled batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SslMethod {
    FixMatch,
    CoMatch,
}

/// One step's inputs, already augmented.
#[derive(Clone, Debug)]
pub struct SslBatch {
    pub labeled_weak: Array2<f64>,
    /// Binary expert labels (1 = correct) of the labeled rows.
    pub labels: Vec<usize>,
    pub unlabeled_weak: Array2<f64>,
    pub unlabeled_strong: Array2<f64>,
    /// Second strong view for the contrastive term.
    pub unlabeled_strong2: Array2<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub supervised: f64,
    pub unsupervised: f64,
    pub contrastive: f64,
    pub total: f64,
    /// Fraction of unlabeled rows whose pseudo-label passed the threshold.
    pub mask_rate: f64,
}

/// Trainable pieces of an expertise model during SSL.
#[derive(Clone, Debug)]
pub struct SslModel {
    pub backbone: Backbone,
    pub train_backbone: bool,
    pub head: Linear,
    pub projection: Option<Mlp>,
}

impl SslModel {
    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        if self.train_backbone {
            v.extend(self.backbone.param_blocks_mut());
        }
        v.extend(self.head.param_blocks_mut());
        if let Some(p) = &mut self.projection {
            v.extend(p.param_blocks_mut());
        }
        v
    }

    fn zero_grads(&self) -> Grads {
        let mut blocks: Vec<Vec<f64>> = Vec::new();
        if self.train_backbone {
            blocks.extend(self.backbone.param_blocks().iter().map(|b| vec![0.0; b.len()]));
        }
        blocks.extend(self.head.param_blocks().iter().map(|b| vec![0.0; b.len()]));
        if let Some(p) = &self.projection {
            blocks.extend(p.param_blocks().iter().map(|b| vec![0.0; b.len()]));
        }
        Grads(blocks)
    }

    fn view(&self, x: &Array2<f64>, project: bool) -> View {
        let (features, cache) = self.backbone.forward(x);
        let logits = self.head.forward(&features);
        let projected = match (&self.projection, project) {
            (Some(p), true) => {
                let (raw, inputs) = p.forward(&features);
                Some((normalize_rows(&raw), raw, inputs))
            }
            _ => None,
        };
        View {
            features,
            cache,
            logits,
            projected,
        }
    }

    /// Adds this view's parameter gradients to `acc`.
    fn accumulate(
        &self,
        view: &View,
        grad_logits: Option<&Array2<f64>>,
        grad_embedding: Option<&Array2<f64>>,
        acc: &mut Grads,
    ) {
        let mut blocks = Vec::new();
        let mut g_features = Array2::zeros(view.features.raw_dim());
        let (g_head, gx) = match grad_logits {
            Some(g) => self.head.backward(&view.features, g),
            None => (
                Grads(self.head.param_blocks().iter().map(|b| vec![0.0; b.len()]).collect()),
                Array2::zeros(view.features.raw_dim()),
            ),
        };
        g_features += &gx;
        let mut g_proj = None;
        if let Some(p) = &self.projection {
            g_proj = Some(match (grad_embedding, &view.projected) {
                (Some(g), Some((unit, raw, inputs))) => {
                    let g_raw = normalize_backward(unit, raw, g);
                    let (gp, gx) = p.backward(inputs, &g_raw);
                    g_features += &gx;
                    gp
                }
                _ => Grads(p.param_blocks().iter().map(|b| vec![0.0; b.len()]).collect()),
            });
        }
        if self.train_backbone {
            blocks.extend(self.backbone.backward(&view.cache, &g_features).0);
        }
        blocks.extend(g_head.0);
        if let Some(gp) = g_proj {
            blocks.extend(gp.0);
        }
        acc.add(&Grads(blocks));
    }
}

struct View {
    features: Array2<f64>,
    cache: BackboneCache,
    logits: Array2<f64>,
    /// (unit embedding, raw projection output, projection layer inputs)
    projected: Option<(Array2<f64>, Array2<f64>, Vec<Array2<f64>>)>,
}

fn normalize_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / n);
    }
    out
}

fn normalize_backward(unit: &Array2<f64>, raw: &Array2<f64>, g_unit: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(raw.raw_dim());
    for i in 0..raw.nrows() {
        let n = raw.row(i).dot(&raw.row(i)).sqrt().max(1e-12);
        let u = unit.row(i);
        let g = g_unit.row(i);
        let proj = u.dot(&g);
        out.row_mut(i).assign(&((&g - &(&u * proj)) / n));
    }
    out
}

/// Thresholded consistency loss against targets; returns (loss, grad, mask rate).
fn consistency(
    strong_logits: &Array2<f64>,
    pseudo: &Array2<f64>,
    tau: f64,
    hard: bool,
) -> (f64, Array2<f64>, f64) {
    let n = pseudo.nrows();
    if n == 0 {
        return (0.0, Array2::zeros(strong_logits.raw_dim()), 0.0);
    }
    let mask: Vec<f64> = pseudo
        .rows()
        .into_iter()
        .map(|r| {
            let m = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            if m >= tau {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let rate = mask.iter().sum::<f64>() / n as f64;
    let (loss, grad) = if hard {
        let targets: Vec<usize> = pseudo.rows().into_iter().map(argmax_row).collect();
        cross_entropy(strong_logits, &targets, Some(&mask))
    } else {
        soft_cross_entropy(strong_logits, pseudo, Some(&mask))
    };
    (loss, grad, rate)
}

/// FixMatch objective `L_s + λ_u·L_u` on one batch, with gradients.
pub fn fixmatch_loss(model: &SslModel, batch: &SslBatch, config: &SslConfig) -> (LossTerms, Grads) {
    let mut grads = model.zero_grads();
    let lw = model.view(&batch.labeled_weak, false);
    let (ls, g_ls) = cross_entropy(&lw.logits, &batch.labels, None);
    model.accumulate(&lw, Some(&g_ls), None, &mut grads);

    let q = softmax_rows(&model.view(&batch.unlabeled_weak, false).logits);
    let us = model.view(&batch.unlabeled_strong, false);
    let (lu, g_lu, rate) = consistency(&us.logits, &q, config.tau, true);
    model.accumulate(&us, Some(&(g_lu * config.lambda_u)), None, &mut grads);

    (
        LossTerms {
            supervised: ls,
            unsupervised: lu,
            contrastive: 0.0,
            total: ls + config.lambda_u * lu,
            mask_rate: rate,
        },
        grads,
    )
}

/// Ring buffer of recent (class distribution, unit embedding) pairs.
#[derive(Clone, Debug, Default)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<(Array1<f64>, Array1<f64>)>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> MemoryBank {
        MemoryBank {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, probs: &Array2<f64>, embeddings: &Array2<f64>) {
        if self.capacity == 0 {
            return;
        }
        for (p, z) in probs.rows().into_iter().zip(embeddings.rows()) {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back((p.to_owned(), z.to_owned()));
        }
    }

    fn matrices(&self) -> (Array2<f64>, Array2<f64>) {
        let n = self.entries.len();
        let c = self.entries.front().map_or(0, |e| e.0.len());
        let d = self.entries.front().map_or(0, |e| e.1.len());
        let mut probs = Array2::zeros((n, c));
        let mut feats = Array2::zeros((n, d));
        for (i, (p, z)) in self.entries.iter().enumerate() {
            probs.row_mut(i).assign(p);
            feats.row_mut(i).assign(z);
        }
        (probs, feats)
    }

    /// `α·probs + (1-α)·A·P_mem`, with `A` the row-softmax of embedding similarities.
    pub fn smooth(
        &self,
        probs: &Array2<f64>,
        embeddings: &Array2<f64>,
        alpha: f64,
        temperature: f64,
    ) -> Array2<f64> {
        if self.is_empty() || probs.nrows() == 0 {
            return probs.clone();
        }
        let (mem_probs, mem_feats) = self.matrices();
        let affinity = softmax_rows(&(embeddings.dot(&mem_feats.t()) / temperature));
        probs * alpha + &(affinity.dot(&mem_probs) * (1.0 - alpha))
    }
}

/// Row-normalized pseudo-label graph `Ŵ^q` and embedding graph `Ŵ^z`.
pub fn comatch_graphs(
    pseudo: &Array2<f64>,
    strong1: &Array2<f64>,
    strong2: &Array2<f64>,
    config: &SslConfig,
) -> (Array2<f64>, Array2<f64>) {
    let mut wq = pseudo.dot(&pseudo.t());
    wq.diag_mut().fill(1.0);
    wq.mapv_inplace(|v| if v >= config.contrast_threshold { v } else { 0.0 });
    for mut row in wq.rows_mut() {
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    let wz = softmax_rows(&(strong1.dot(&strong2.t()) / config.temperature));
    (wq, wz)
}

/// Rows to push into the memory bank after a CoMatch step.
#[derive(Clone, Debug)]
pub struct MemoryUpdate {
    pub probs: Array2<f64>,
    pub embeddings: Array2<f64>,
}

/// CoMatch objective `L_s + λ_u·L_u + λ_c·L_c` on one batch, with gradients.
pub fn comatch_loss(
    model: &SslModel,
    batch: &SslBatch,
    memory: &MemoryBank,
    config: &SslConfig,
) -> (LossTerms, Grads, MemoryUpdate) {
    let mut grads = model.zero_grads();
    let lw = model.view(&batch.labeled_weak, true);
    let (ls, g_ls) = cross_entropy(&lw.logits, &batch.labels, None);
    model.accumulate(&lw, Some(&g_ls), None, &mut grads);

    let uw = model.view(&batch.unlabeled_weak, true);
    let raw_probs = softmax_rows(&uw.logits);
    let z_uw = uw
        .projected
        .as_ref()
        .map(|p| p.0.clone())
        .unwrap_or_else(|| Array2::zeros((raw_probs.nrows(), 0)));
    let probs = if config.memory_smoothing {
        memory.smooth(&raw_probs, &z_uw, config.smoothing_weight, config.temperature)
    } else {
        raw_probs.clone()
    };

    let us1 = model.view(&batch.unlabeled_strong, true);
    let (lu, g_lu, rate) = consistency(&us1.logits, &probs, config.tau, config.hard_pseudo_labels);

    let mut lc = 0.0;
    let mut g_z1 = None;
    let n = probs.nrows();
    if n > 0 && model.projection.is_some() {
        let us2 = model.view(&batch.unlabeled_strong2, true);
        let z1 = &us1.projected.as_ref().expect("projection").0;
        let z2 = &us2.projected.as_ref().expect("projection").0;
        let (wq, wz) = comatch_graphs(&probs, z1, z2, config);
        let log_wz = log_softmax_rows(&(z1.dot(&z2.t()) / config.temperature));
        lc = -(&wq * &log_wz).sum() / n as f64;
        if config.lambda_c > 0.0 {
            let g_s = (&wz - &wq) * (config.lambda_c / (n as f64 * config.temperature));
            g_z1 = Some(g_s.dot(z2));
            let g2 = g_s.t().dot(z1);
            model.accumulate(&us2, None, Some(&g2), &mut grads);
        }
    }
    model.accumulate(&us1, Some(&(g_lu * config.lambda_u)), g_z1.as_ref(), &mut grads);

    // labeled rows enter the memory with their one-hot labels
    let mut mem_probs = Array2::zeros((batch.labels.len() + n, raw_probs.ncols().max(2)));
    for (i, &t) in batch.labels.iter().enumerate() {
        mem_probs[[i, t]] = 1.0;
    }
    mem_probs
        .slice_mut(s![batch.labels.len().., ..])
        .assign(&probs);
    let z_lw = lw
        .projected
        .as_ref()
        .map(|p| p.0.clone())
        .unwrap_or_else(|| Array2::zeros((batch.labels.len(), 0)));
    let embeddings = ndarray::concatenate(Axis(0), &[z_lw.view(), z_uw.view()])
        .expect("matching embedding widths");

    (
        LossTerms {
            supervised: ls,
            unsupervised: lu,
            contrastive: lc,
            total: ls + config.lambda_u * lu + config.lambda_c * lc,
            mask_rate: rate,
        },
        grads,
        MemoryUpdate {
            probs: mem_probs,
            embeddings,
        },
    )
}

/// Per-epoch means of the loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub supervised: f64,
    pub unsupervised: f64,
    pub contrastive: f64,
    pub mask_rate: f64,
}

/// Cycles through a shuffled index list, reshuffling at the end of each pass.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize) -> Cycler {
        Cycler {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn take(&mut self, count: usize, rng: &mut seed::Rng) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.pos >= self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Runs FixMatch or CoMatch training; returns the model and per-epoch metrics.
#[allow(clippy::too_many_arguments)]
pub fn train_ssl(
    method: SslMethod,
    mut model: SslModel,
    labeled: &Array2<f64>,
    labels: &[usize],
    unlabeled: &Array2<f64>,
    policy: &AugmentationPolicy,
    config: &SslConfig,
    seed: u64,
) -> Result<(SslModel, Vec<EpochMetrics>)> {
    config.validate()?;
    if labeled.nrows() == 0 {
        return Err(Error::Precondition("no expert-labeled instances".into()));
    }
    let mut rng = seed::rng_for(seed, "ssl");
    let l_batch = config.labeled_batch.min(labeled.nrows());
    let u_batch = if unlabeled.nrows() == 0 {
        0
    } else {
        (config.mu * config.labeled_batch).min(unlabeled.nrows())
    };
    let steps = config.steps_per_epoch.unwrap_or_else(|| {
        if u_batch > 0 {
            unlabeled.nrows().div_ceil(u_batch)
        } else {
            labeled.nrows().div_ceil(l_batch)
        }
    });
    let steps = steps.max(1);
    let total = steps * config.epochs;
    let mut opt = Sgd::new(SgdConfig {
        learning_rate: config.learning_rate,
        momentum: config.momentum,
        nesterov: config.nesterov,
        weight_decay: config.weight_decay,
    });
    let mut memory = MemoryBank::new(config.memory_size);
    let mut lab = Cycler::new(labeled.nrows());
    let mut unl = Cycler::new(unlabeled.nrows());
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut sums = EpochMetrics {
            epoch,
            ..EpochMetrics::default()
        };
        for _ in 0..steps {
            if config.cosine_schedule {
                opt.set_learning_rate(cosine_lr(config.learning_rate, step, total));
            }
            let li = lab.take(l_batch, &mut rng);
            let ui = unl.take(u_batch, &mut rng);
            let xl = labeled.select(Axis(0), &li);
            let xu = unlabeled.select(Axis(0), &ui);
            let batch = SslBatch {
                labeled_weak: policy.weak(&xl, &mut rng),
                labels: li.iter().map(|&i| labels[i]).collect(),
                unlabeled_weak: policy.weak(&xu, &mut rng),
                unlabeled_strong: policy.strong(&xu, &mut rng),
                unlabeled_strong2: match method {
                    SslMethod::CoMatch => policy.strong(&xu, &mut rng),
                    SslMethod::FixMatch => Array2::zeros((0, xu.ncols())),
                },
            };
            let (terms, grads) = match method {
                SslMethod::FixMatch => fixmatch_loss(&model, &batch, config),
                SslMethod::CoMatch => {
                    let (t, g, update) = comatch_loss(&model, &batch, &memory, config);
                    memory.push(&update.probs, &update.embeddings);
                    (t, g)
                }
            };
            if !terms.total.is_finite() {
                return Err(Error::Divergence {
                    step,
                    loss: terms.total,
                });
            }
            opt.step(model.param_blocks_mut(), &grads);
            sums.supervised += terms.supervised;
            sums.unsupervised += terms.unsupervised;
            sums.contrastive += terms.contrastive;
            sums.mask_rate += terms.mask_rate;
            step += 1;
        }
        let s = steps as f64;
        sums.supervised /= s;
        sums.unsupervised /= s;
        sums.contrastive /= s;
        sums.mask_rate /= s;
        metrics.push(sums);
    }
    Ok((model, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PayloadShape;
    use crate::nn::BackboneConfig;
    use rand::Rng as _;

    fn model(train_backbone: bool, projection: bool, seed: u64) -> SslModel {
        let backbone = Backbone::new(
            &BackboneConfig {
                hidden: vec![8],
                features: 6,
                ..BackboneConfig::default()
            },
            PayloadShape::Features(4),
            seed,
        );
        let mut rng = seed::rng(seed);
        let mut head = Linear::he(&mut rng, 6, 2);
        head.b[1] = 0.3;
        SslModel {
            backbone,
            train_backbone,
            head,
            projection: projection.then(|| Mlp::new(&mut rng, 6, &[5], 3)),
        }
    }

    fn batch(seed: u64, l: usize, u: usize) -> SslBatch {
        let mut rng = seed::rng(seed);
        let mut m = |r: usize| Array2::from_shape_fn((r, 4), |_| rng.random::<f64>() * 2.0 - 1.0);
        let labeled_weak = m(l);
        let unlabeled_weak = m(u);
        let unlabeled_strong = m(u);
        let unlabeled_strong2 = m(u);
        SslBatch {
            labeled_weak,
            labels: (0..l).map(|i| i % 2).collect(),
            unlabeled_weak,
            unlabeled_strong,
            unlabeled_strong2,
        }
    }

    #[test]
    fn no_unlabeled_weight_means_supervised_only() {
        let m = model(false, false, 1);
        let b = batch(2, 6, 20);
        let cfg = SslConfig {
            lambda_u: 0.0,
            tau: 0.5,
            ..SslConfig::default()
        };
        let (terms, _) = fixmatch_loss(&m, &b, &cfg);
        assert_eq!(terms.total, terms.supervised);
    }

    #[test]
    fn unreachable_threshold_zeroes_unlabeled_term() {
        let m = model(false, false, 3);
        let b = batch(4, 6, 20);
        let cfg = SslConfig {
            tau: 1.0,
            ..SslConfig::default()
        };
        let (terms, _) = fixmatch_loss(&m, &b, &cfg);
        assert_eq!(terms.unsupervised, 0.0);
        assert_eq!(terms.mask_rate, 0.0);
    }

    #[test]
    fn graphs_are_row_stochastic() {
        let m = model(false, true, 5);
        let b = batch(6, 4, 12);
        let q = softmax_rows(&m.view(&b.unlabeled_weak, false).logits);
        let z1 = m.view(&b.unlabeled_strong, true).projected.unwrap().0;
        let z2 = m.view(&b.unlabeled_strong2, true).projected.unwrap().0;
        let (wq, wz) = comatch_graphs(&q, &z1, &z2, &SslConfig::default());
        for row in wq.rows().into_iter().chain(wz.rows()) {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    /// Compares analytic and central-difference gradients on blocks `first_block..`.
    /// Pseudo-labels are treated as constants, so only parameters that cannot move them
    /// (or move them only through a locally constant argmax) are checked.
    fn check_gradients(method: SslMethod, train_backbone: bool) {
        let mut m = model(train_backbone, method == SslMethod::CoMatch, 7);
        let b = batch(8, 5, 9);
        let cfg = SslConfig {
            tau: 0.5,
            memory_smoothing: false,
            ..SslConfig::default()
        };
        let loss = |m: &SslModel| match method {
            SslMethod::FixMatch => fixmatch_loss(m, &b, &cfg).0.total,
            SslMethod::CoMatch => comatch_loss(m, &b, &MemoryBank::new(0), &cfg).0.total,
        };
        let analytic = match method {
            SslMethod::FixMatch => fixmatch_loss(&m, &b, &cfg).1,
            SslMethod::CoMatch => comatch_loss(&m, &b, &MemoryBank::new(0), &cfg).1,
        }
        .flatten();
        let sizes: Vec<usize> = m.param_blocks_mut().iter().map(|b| b.len()).collect();
        let first_block = match method {
            SslMethod::FixMatch => 0,
            SslMethod::CoMatch => sizes.len() - 4,
        };
        let skip: usize = sizes[..first_block].iter().sum();
        let analytic = &analytic[skip..];
        let eps = 1e-6;
        let mut numeric = Vec::new();
        for (bi, len) in sizes.into_iter().enumerate().skip(first_block) {
            for j in 0..len {
                let orig = m.param_blocks_mut()[bi][j];
                m.param_blocks_mut()[bi][j] = orig + eps;
                let up = loss(&m);
                m.param_blocks_mut()[bi][j] = orig - eps;
                let down = loss(&m);
                m.param_blocks_mut()[bi][j] = orig;
                numeric.push((up - down) / (2.0 * eps));
            }
        }
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6 * (1.0 + a.abs()), "{method:?}: {a} vs {n}");
        }
    }

    #[test]
    fn fixmatch_gradients_match_finite_differences() {
        check_gradients(SslMethod::FixMatch, false);
        check_gradients(SslMethod::FixMatch, true);
    }

    #[test]
    fn comatch_gradients_match_finite_differences() {
        check_gradients(SslMethod::CoMatch, false);
        check_gradients(SslMethod::CoMatch, true);
    }

    #[test]
    fn comatch_without_extras_is_fixmatch() {
        let m = model(true, true, 11);
        let b = batch(12, 6, 14);
        let cfg = SslConfig {
            tau: 0.55,
            lambda_c: 0.0,
            memory_smoothing: false,
            hard_pseudo_labels: true,
            ..SslConfig::default()
        };
        let mut bank = MemoryBank::new(10);
        bank.push(&Array2::from_elem((3, 2), 0.5), &Array2::from_elem((3, 3), 0.3));
        let (fix, fix_grads) = fixmatch_loss(&SslModel { projection: None, ..m.clone() }, &b, &cfg);
        let (co, co_grads, _) = comatch_loss(&m, &b, &bank, &cfg);
        assert!(fix.mask_rate > 0.0);
        assert!((fix.total - co.total).abs() < 1e-6);
        let shared = fix_grads.0.len();
        for (a, c) in fix_grads.flatten().iter().zip(Grads(co_grads.0[..shared].to_vec()).flatten()) {
            assert!((a - c).abs() < 1e-9);
        }
    }

    #[test]
    fn memory_bank_is_a_ring() {
        let mut bank = MemoryBank::new(3);
        let p = Array2::from_shape_fn((2, 2), |(i, j)| (i + j) as f64);
        bank.push(&p, &p);
        bank.push(&p, &p);
        assert_eq!(bank.len(), 3);
        let probs = Array2::from_elem((1, 2), 0.5);
        let z = Array2::from_elem((1, 2), 0.1);
        let same = bank.smooth(&probs, &z, 1.0, 0.2);
        assert_eq!(same, probs);
    }
}
