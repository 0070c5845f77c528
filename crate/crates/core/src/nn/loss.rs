use ndarray::{Array2, ArrayView1, Axis};

/// Row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_row(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy of hard targets, with the gradient with respect to the logits.
///
/// `weights` scales each row's term (a zero weight masks the row); the mean is taken
/// over all rows regardless of weight.
pub fn cross_entropy(
    logits: &Array2<f64>,
    targets: &[usize],
    weights: Option<&[f64]>,
) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    assert_eq!(targets.len(), n, "one target per row");
    if n == 0 {
        return (0.0, logits.clone());
    }
    let logp = log_softmax_rows(logits);
    let mut grad = logp.mapv(f64::exp);
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        loss -= w * logp[[i, t]];
        grad[[i, t]] -= 1.0;
        grad.row_mut(i).mapv_inplace(|g| g * w / n as f64);
    }
    (loss / n as f64, grad)
}

/// Mean cross-entropy against soft target rows, with the logit gradient.
pub fn soft_cross_entropy(
    logits: &Array2<f64>,
    targets: &Array2<f64>,
    weights: Option<&[f64]>,
) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    if n == 0 {
        return (0.0, logits.clone());
    }
    let logp = log_softmax_rows(logits);
    let p = logp.mapv(f64::exp);
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for i in 0..n {
        let w = weights.map_or(1.0, |w| w[i]);
        let t = targets.row(i);
        let mass: f64 = t.sum();
        loss -= w * t.dot(&logp.row(i));
        let g = (&p.row(i) * mass - &t) * (w / n as f64);
        grad.row_mut(i).assign(&g);
    }
    (loss / n as f64, grad)
}
