//! Softmax cross-entropy on logits.
//!
//! The loss is the batch mean of `-ln p[target]` with the softmax computed
//! under a log-sum-exp shift, and the returned gradient lives in logit space:
//! `(softmax(z) - onehot) / n`. Rows of the gradient therefore sum to zero.

use crate::error::{Error, Result};
use crate::ndnum::matrix::Matrix;

pub struct CrossEntropy {
    pub loss: f64,
    pub grad_logits: Matrix,
    pub probs: Matrix,
}

/// Mean softmax cross-entropy over rows of `logits` against integer targets.
pub fn softmax_cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<CrossEntropy> {
    if targets.len() != logits.rows() {
        return Err(Error::Shape {
            context: "softmax_cross_entropy",
            expected: format!("{} targets", logits.rows()),
            actual: format!("{}", targets.len()),
        });
    }
    let n = logits.rows();
    let k = logits.cols();
    for (r, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(Error::Bounds {
                context: "softmax_cross_entropy target",
                index: t,
                size: k,
            });
        }
        let _ = r;
    }
    let mut grad = Matrix::zeros(n, k);
    let mut probs = Matrix::zeros(n, k);
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    for r in 0..n {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let log_sum = max + sum.ln();
        loss += (log_sum - row[targets[r]]) * inv_n;
        for c in 0..k {
            let p = (row[c] - log_sum).exp();
            probs.set(r, c, p);
            let onehot = if c == targets[r] { 1.0 } else { 0.0 };
            grad.set(r, c, (p - onehot) * inv_n);
        }
    }
    Ok(CrossEntropy {
        loss,
        grad_logits: grad,
        probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln2() {
        let logits = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let ce = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!((ce.loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((ce.grad_logits.get(0, 0) + 0.5).abs() < 1e-12);
        assert!((ce.grad_logits.get(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_do_not_overflow() {
        let logits = Matrix::from_rows(&[vec![1000.0, 0.0]]).unwrap();
        let ce = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(ce.loss.is_finite());
        assert!(ce.loss < 1e-12);
        assert!(ce.grad_logits.is_finite());
    }

    #[test]
    fn grad_rows_sum_to_zero_and_probs_to_one() {
        let logits =
            Matrix::from_rows(&[vec![0.3, -1.2, 2.0], vec![5.0, 5.0, -5.0]]).unwrap();
        let ce = softmax_cross_entropy(&logits, &[2, 0]).unwrap();
        for r in 0..2 {
            let gsum: f64 = ce.grad_logits.row(r).iter().sum();
            let psum: f64 = ce.probs.row(r).iter().sum();
            assert!(gsum.abs() < 1e-10, "grad row sum {gsum}");
            assert!((psum - 1.0).abs() < 1e-12, "prob row sum {psum}");
        }
    }

    #[test]
    fn out_of_range_target_is_an_error() {
        let logits = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(softmax_cross_entropy(&logits, &[2]).is_err());
    }

    #[test]
    fn matches_finite_differences() {
        // Oracle: central finite differences of a scalar re-evaluation.
        let base = vec![0.7, -0.3, 1.1, 0.2, -2.0, 0.9];
        let targets = [2, 0];
        let eval = |flat: &[f64]| {
            let m = Matrix::from_vec(2, 3, flat.to_vec()).unwrap();
            softmax_cross_entropy(&m, &targets).unwrap().loss
        };
        let logits = Matrix::from_vec(2, 3, base.clone()).unwrap();
        let ce = softmax_cross_entropy(&logits, &targets).unwrap();
        let eps = 1e-6;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += eps;
            let mut minus = base.clone();
            minus[i] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let analytic = ce.grad_logits.data()[i];
            let rel = (analytic - fd).abs() / (analytic.abs() + fd.abs()).max(1e-8);
            assert!(rel < 1e-6, "coord {i}: analytic {analytic} fd {fd}");
        }
    }
}
