use ndarray::{Array2, ArrayView2};

use crate::error::{check_dim, Error, Result};
use crate::scalar::{softmax, Scalar};

/// Mean softmax cross-entropy over rows, and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<S: Scalar>(
    logits: ArrayView2<S>,
    labels: &[usize],
) -> Result<(S, Array2<S>)> {
    check_dim("cross-entropy labels", logits.nrows(), labels.len())?;
    let n = S::from_usize_lossy(labels.len());
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = S::zero();
    for (i, (row, &y)) in logits.outer_iter().zip(labels).enumerate() {
        if y >= row.len() {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
        let p = softmax(&row.to_vec());
        total -= p[y].floored().ln();
        for (j, &pj) in p.iter().enumerate() {
            let indicator = if j == y { S::one() } else { S::zero() };
            grad[[i, j]] = (pj - indicator) / n;
        }
    }
    let loss = total / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, grad))
}

/// Sum over outputs, mean over rows, of `(pred - target)^2`.
pub fn squared_error<S: Scalar>(
    pred: ArrayView2<S>,
    target: ArrayView2<S>,
) -> Result<(S, Array2<S>)> {
    check_dim("squared-error rows", pred.nrows(), target.nrows())?;
    check_dim("squared-error cols", pred.ncols(), target.ncols())?;
    let n = S::from_usize_lossy(pred.nrows());
    let diff = &pred - &target;
    let loss = diff.iter().map(|&d| d * d).sum::<S>() / n;
    let grad = diff.mapv(|d| S::lit(2.0) * d / n);
    Ok((loss, grad))
}
