//! Softmax utilities and cross-entropy loss.
//!
//! All routines shift by the row maximum before exponentiating, so
//! arbitrarily large logits cannot overflow.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// log(sum(exp(v))) computed without overflow.
pub fn logsumexp(v: &ArrayView1<f64>) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // All -inf (empty rows are excluded by callers): the sum is 0.
        return max;
    }
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let lse = logsumexp(&row.view());
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Row-wise softmax.
pub fn softmax(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = log_softmax(logits);
    out.mapv_inplace(f64::exp);
    out
}

fn check_labels(logits: &ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows vs {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if logits.nrows() == 0 {
        return Err(Error::InvalidArgument("cross entropy of an empty batch".into()));
    }
    let k = logits.ncols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

/// Mean cross-entropy of integer labels under row-wise softmax.
pub fn cross_entropy(logits: &ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let logp = log_softmax(logits);
    let n = labels.len() as f64;
    Ok(-labels
        .iter()
        .enumerate()
        .map(|(i, &y)| logp[[i, y]])
        .sum::<f64>()
        / n)
}

/// Mean cross-entropy and its gradient w.r.t. the logits. The gradient
/// already carries the 1/n batch-mean factor.
pub fn cross_entropy_grad(logits: &ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    check_labels(logits, labels)?;
    let logp = log_softmax(logits);
    let n = labels.len() as f64;
    let loss = -labels
        .iter()
        .enumerate()
        .map(|(i, &y)| logp[[i, y]])
        .sum::<f64>()
        / n;
    let mut grad = logp.mapv(f64::exp);
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y]] -= 1.0;
    }
    grad.mapv_inplace(|g| g / n);
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn logsumexp_handles_huge_logits() {
        let v = array![1000.0, 0.0, 0.0];
        let out = logsumexp(&v.view());
        assert!(out.is_finite());
        assert!((out - 1000.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = array![[1.0, 2.0, 3.0], [-500.0, 0.0, 500.0]];
        let p = softmax(&logits.view());
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_k() {
        let logits = Array2::<f64>::zeros((4, 3));
        let loss = cross_entropy(&logits.view(), &[0, 1, 2, 0]).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_is_softmax_minus_onehot_over_n() {
        let logits = array![[0.0, 0.0], [2.0, -1.0]];
        let (_, grad) = cross_entropy_grad(&logits.view(), &[1, 0]).unwrap();
        // Row 0: softmax = (0.5, 0.5), label 1.
        assert!((grad[[0, 0]] - 0.25).abs() < 1e-12);
        assert!((grad[[0, 1]] + 0.25).abs() < 1e-12);
        // Gradient rows sum to zero.
        assert!(grad.row(1).sum().abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_errors() {
        let logits = array![[0.0, 0.0]];
        assert!(cross_entropy(&logits.view(), &[2]).is_err());
        assert!(cross_entropy(&logits.view(), &[0, 1]).is_err());
    }
}
