use super::{NetError, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax - onehot) / batch`.
///
/// `logits` is `[N, K, ...]` with every trailing extent 1.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let batch = labels.len();
    if batch == 0 || !logits.len().is_multiple_of(batch) || logits.shape().first() != Some(&batch) {
        return Err(NetError::Shape {
            index: usize::MAX,
            expected: vec![batch],
            actual: logits.shape().to_vec(),
        });
    }
    let classes = logits.len() / batch;
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    let inv_batch = 1.0 / batch as f64;
    for (n, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(NetError::Label { label, classes });
        }
        let row = &logits.data()[n * classes..(n + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = max + sum.ln();
        loss += log_sum - row[label];
        let g = &mut grad[n * classes..(n + 1) * classes];
        for (k, (gk, &z)) in g.iter_mut().zip(row).enumerate() {
            let p = (z - log_sum).exp();
            *gk = (p - if k == label { 1.0 } else { 0.0 }) * inv_batch;
        }
    }
    Ok((loss * inv_batch, Tensor::new(logits.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let (loss, _) = softmax_cross_entropy(&Tensor::zeros(&[3, 7]), &[0, 3, 6]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_with_margin() {
        let mut last = f64::INFINITY;
        for margin in [1.0, 10.0, 100.0] {
            let logits = Tensor::new(vec![1, 3], vec![margin, 0.0, 0.0]).unwrap();
            let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
            assert!(loss < last && loss >= 0.0);
            last = loss;
        }
        assert!(last < 1e-40);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let data: Vec<f64> = (0..12).map(|i| ((i * 7) as f64 * 0.31).sin() * 2.0).collect();
        let logits = Tensor::new(vec![3, 4], data.clone()).unwrap();
        let labels = [2, 0, 3];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-6;
        for i in 0..12 {
            let mut plus = data.clone();
            plus[i] += h;
            let mut minus = data.clone();
            minus[i] -= h;
            let lp = softmax_cross_entropy(&Tensor::new(vec![3, 4], plus).unwrap(), &labels).unwrap().0;
            let lm = softmax_cross_entropy(&Tensor::new(vec![3, 4], minus).unwrap(), &labels).unwrap().0;
            let numeric = (lp - lm) / (2.0 * h);
            assert!((numeric - grad.data()[i]).abs() < 1e-6, "{i}: {numeric} vs {}", grad.data()[i]);
        }
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        assert!(matches!(
            softmax_cross_entropy(&Tensor::zeros(&[1, 3]), &[3]),
            Err(NetError::Label { label: 3, classes: 3 })
        ));
    }
}
