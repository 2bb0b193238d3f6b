//! Loss terms and their gradients with respect to the adapter outputs.
//!
//! Regression losses take a vector of `B` predictions; classification losses
//! take a `B x m` matrix of probabilities and return the gradient flattened
//! row-major.

use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Clamp inside logarithms.
pub const LOG_EPS: f64 = 1e-8;
const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// A loss value together with its gradient with respect to the predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossValue {
    pub fn zeros(len: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; len],
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::Numerical(format!("{what}[{i}] is not finite"))),
        None => Ok(()),
    }
}

fn argsort(xs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    idx
}

/// Batch 1-D Wasserstein distance between predictions and prior samples.
///
/// Both sets are sorted and matched in order; the value is the mean absolute
/// difference of matched pairs. The sort permutation is held fixed for the
/// gradient, which is `sign(pred - matched_sample) / B` with `sign(0) = 0`.
pub fn wasserstein_1d(pred: &[f64], prior_samples: &[f64]) -> Result<LossValue> {
    let b = pred.len();
    if b == 0 || b != prior_samples.len() {
        return Err(Error::Shape(format!(
            "wasserstein_1d needs equal non-empty sets, got {} and {}",
            b,
            prior_samples.len()
        )));
    }
    check_finite(pred, "pred")?;
    check_finite(prior_samples, "prior_samples")?;

    let order = argsort(pred);
    let mut targets = prior_samples.to_vec();
    targets.sort_by(f64::total_cmp);

    let scale = 1.0 / b as f64;
    let mut grad = vec![0.0; b];
    let mut total = 0.0;
    for (&i, &t) in order.iter().zip(&targets) {
        let diff = pred[i] - t;
        total += diff.abs();
        grad[i] = sign(diff) * scale;
    }
    Ok(LossValue {
        value: total * scale,
        grad,
    })
}

fn check_probs(pred: ArrayView2<'_, f64>) -> Result<()> {
    for (i, row) in pred.rows().into_iter().enumerate() {
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Numerical(format!("probability row {i} has invalid entries")));
        }
        let s = row.sum();
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::InvalidData(format!("probability row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// Batch-mean of the predicted class probabilities.
pub fn pooled_distribution(pred_probs: ArrayView2<'_, f64>) -> Vec<f64> {
    let b = pred_probs.nrows() as f64;
    pred_probs.sum_axis(ndarray::Axis(0)).mapv(|v| v / b).to_vec()
}

/// `KL(pooled predictions || prior)` over a batch of probability rows.
pub fn kl_batch(pred_probs: ArrayView2<'_, f64>, prior_probs: &[f64]) -> Result<LossValue> {
    let (b, m) = pred_probs.dim();
    if b == 0 {
        return Err(Error::EmptyDataset);
    }
    if m != prior_probs.len() {
        return Err(Error::Shape(format!(
            "predictions have {m} classes but prior has {}",
            prior_probs.len()
        )));
    }
    check_probs(pred_probs)?;
    let prior_sum: f64 = prior_probs.iter().sum();
    if prior_probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (prior_sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(Error::InvalidData(format!("prior sums to {prior_sum}")));
    }

    let pooled = pooled_distribution(pred_probs);
    let (value, dpooled) = kl_pooled(&pooled, prior_probs);
    let scale = 1.0 / b as f64;
    let mut grad = Vec::with_capacity(b * m);
    for _ in 0..b {
        grad.extend(dpooled.iter().map(|g| g * scale));
    }
    Ok(LossValue { value, grad })
}

/// `KL(pooled || prior)` and its gradient with respect to `pooled`.
///
/// Callers that pool predictions over several batches feed the pooled
/// distribution here and spread the gradient over the contributing rows.
pub fn kl_pooled(pooled: &[f64], prior_probs: &[f64]) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let grad = pooled
        .iter()
        .zip(prior_probs)
        .map(|(&q, &p)| {
            let ratio = ((q + LOG_EPS) / (p + LOG_EPS)).ln();
            value += q * ratio;
            ratio + q / (q + LOG_EPS)
        })
        .collect();
    (value, grad)
}

/// Mean absolute deviation from the zero-shot labels.
pub fn l1_labels(pred: &[f64], hard_labels: &[f64]) -> Result<LossValue> {
    let b = pred.len();
    if b == 0 || b != hard_labels.len() {
        return Err(Error::Shape(format!(
            "l1_labels needs equal non-empty sets, got {} and {}",
            b,
            hard_labels.len()
        )));
    }
    check_finite(pred, "pred")?;
    let scale = 1.0 / b as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(hard_labels)
        .map(|(p, y)| {
            value += (p - y).abs();
            sign(p - y) * scale
        })
        .collect();
    Ok(LossValue {
        value: value * scale,
        grad,
    })
}

/// Mean negative log-likelihood of the zero-shot class indices.
pub fn cross_entropy_labels(pred_probs: ArrayView2<'_, f64>, hard_index: &[usize]) -> Result<LossValue> {
    let (b, m) = pred_probs.dim();
    if b == 0 || b != hard_index.len() {
        return Err(Error::Shape(format!(
            "cross_entropy_labels got {b} rows and {} targets",
            hard_index.len()
        )));
    }
    if let Some(&bad) = hard_index.iter().find(|&&t| t >= m) {
        return Err(Error::Shape(format!("target index {bad} out of range for {m} classes")));
    }
    check_probs(pred_probs)?;
    let scale = 1.0 / b as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; b * m];
    for (i, &t) in hard_index.iter().enumerate() {
        let p = pred_probs[[i, t]] + LOG_EPS;
        value -= p.ln();
        grad[i * m + t] = -scale / p;
    }
    Ok(LossValue {
        value: value * scale,
        grad,
    })
}

/// `prior_loss + alpha * labels_loss`, gradients included.
pub fn combined(prior_loss: &LossValue, labels_loss: &LossValue, alpha: f64) -> Result<LossValue> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    if prior_loss.grad.len() != labels_loss.grad.len() {
        return Err(Error::Shape(format!(
            "gradient lengths differ: {} vs {}",
            prior_loss.grad.len(),
            labels_loss.grad.len()
        )));
    }
    Ok(LossValue {
        value: prior_loss.value + alpha * labels_loss.value,
        grad: prior_loss
            .grad
            .iter()
            .zip(&labels_loss.grad)
            .map(|(p, l)| p + alpha * l)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn wasserstein_identity() {
        let a = [3.0, -1.0, 7.5, 2.0];
        let b = [2.0, 7.5, 3.0, -1.0];
        let w = wasserstein_1d(&a, &b).unwrap();
        assert_eq!(w.value, 0.0);
        assert!(w.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn wasserstein_hand_example() {
        let w = wasserstein_1d(&[3.0, 1.0], &[2.0, 4.0]).unwrap();
        assert_eq!(w.value, 1.0);
        assert_eq!(w.grad, vec![-0.5, -0.5]);
    }

    #[test]
    fn wasserstein_routes_gradient_through_sort() {
        let w = wasserstein_1d(&[10.0, 0.0, 5.0], &[1.0, 6.0, 8.0]).unwrap();
        // Sorted pairs: (0,1), (5,6), (10,8).
        assert!((w.value - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(w.grad, vec![1.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0]);
    }

    #[test]
    fn wasserstein_shape_errors() {
        assert!(wasserstein_1d(&[1.0], &[1.0, 2.0]).is_err());
        assert!(wasserstein_1d(&[], &[]).is_err());
        assert!(matches!(wasserstein_1d(&[f64::NAN], &[1.0]), Err(Error::Numerical(_))));
    }

    #[test]
    fn kl_identity_and_hand_value() {
        let prior = [0.2, 0.5, 0.3];
        let rows = array![[0.2, 0.5, 0.3], [0.2, 0.5, 0.3]];
        assert!(kl_batch(rows.view(), &prior).unwrap().value <= 1e-7);

        let kl = kl_batch(array![[0.5, 0.5]].view(), &[0.25, 0.75]).unwrap();
        let expected = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((expected - 0.143_841_036_225_890_2).abs() < 1e-12);
        assert!((kl.value - expected).abs() < 1e-7);
    }

    #[test]
    fn kl_rejects_unnormalized_rows() {
        assert!(kl_batch(array![[0.5, 0.6]].view(), &[0.5, 0.5]).is_err());
        assert!(kl_batch(array![[0.5, 0.5]].view(), &[0.5, 0.4]).is_err());
        assert!(kl_batch(array![[0.5, 0.5]].view(), &[1.0]).is_err());
    }

    #[test]
    fn l1_values() {
        assert_eq!(l1_labels(&[1.0, 2.0], &[1.0, 2.0]).unwrap().value, 0.0);
        let l = l1_labels(&[1.0, 2.0], &[2.0, 4.0]).unwrap();
        assert_eq!(l.value, 1.5);
        assert_eq!(l.grad, vec![-0.5, -0.5]);
        assert!(l1_labels(&[1.0], &[]).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let one_hot = cross_entropy_labels(array![[0.0, 1.0, 0.0]].view(), &[1]).unwrap();
        assert!(one_hot.value < 1e-7);
        let ce = cross_entropy_labels(array![[0.7, 0.3]].view(), &[0]).unwrap();
        assert!((ce.value - 0.356_674_943_938_732_4).abs() < 1e-7);
        assert!(cross_entropy_labels(array![[0.7, 0.3]].view(), &[2]).is_err());
    }

    #[test]
    fn combined_weights() {
        let p = LossValue {
            value: 2.0,
            grad: vec![1.0, -1.0],
        };
        let l = LossValue {
            value: 3.0,
            grad: vec![0.5, 0.5],
        };
        assert_eq!(combined(&p, &l, 0.0).unwrap(), p);
        let c = combined(&p, &l, 1.0).unwrap();
        assert_eq!(c.value, 5.0);
        assert_eq!(c.grad, vec![1.5, -0.5]);
        assert!(combined(&p, &LossValue::zeros(3), 1.0).is_err());
        assert!(combined(&p, &l, -1.0).is_err());
    }
}
