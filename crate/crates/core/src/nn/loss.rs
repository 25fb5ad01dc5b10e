use crate::error::{Error, Result};
use crate::matrix::Matrix;

const BCE_EPS: f64 = 1e-12;

/// Logistic function, evaluated on the branch that cannot overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean binary cross-entropy with predictions clamped to `[1e-12, 1 - 1e-12]`.
pub fn bce_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            context: "bce_loss",
            expected: targets.len(),
            actual: predictions.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::Empty("bce_loss predictions"));
    }
    let total: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / predictions.len() as f64)
}

/// `log(1 + exp(-margin))`, the logistic loss of a signed margin.
pub fn binary_logistic_loss(margin: f64) -> f64 {
    if margin > 0.0 {
        (-margin).exp().ln_1p()
    } else {
        -margin + margin.exp().ln_1p()
    }
}

/// Mean softmax cross-entropy over all rows, with its gradient.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let rows: Vec<usize> = (0..logits.rows()).collect();
    softmax_cross_entropy_rows(logits, labels, &rows)
}

/// Mean softmax cross-entropy over the selected rows. `labels` is indexed by
/// row; the returned gradient is zero outside `rows`.
pub fn softmax_cross_entropy_rows(
    logits: &Matrix,
    labels: &[usize],
    rows: &[usize],
) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::DimensionMismatch {
            context: "softmax_cross_entropy labels",
            expected: logits.rows(),
            actual: labels.len(),
        });
    }
    if rows.is_empty() {
        return Err(Error::Empty("loss row set"));
    }
    let classes = logits.cols();
    let scale = 1.0 / rows.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), classes);
    let mut loss = 0.0;
    for &r in rows {
        let label = labels[r];
        if label >= classes {
            return Err(Error::LabelOutOfRange {
                row: r,
                label,
                num_classes: classes,
            });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        let g = grad.row_mut(r);
        for (c, gv) in g.iter_mut().enumerate() {
            let p = (row[c] - log_z).exp();
            *gv = scale * (p - if c == label { 1.0 } else { 0.0 });
        }
    }
    Ok((loss * scale, grad))
}
