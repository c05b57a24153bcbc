use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax - onehot) / N` with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [n, classes] = logits.shape()[..] else {
        return Err(Error::dim("softmax_cross_entropy", logits.shape(), &[labels.len(), 0]));
    };
    if labels.len() != n {
        return Err(Error::dim("softmax_cross_entropy", logits.shape(), &[labels.len()]));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::Data(format!(
            "label {l} at batch position {i} is outside [0, {classes})"
        )));
    }
    let mut grad = Vec::with_capacity(n * classes);
    let mut total = 0.0;
    for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
        let norm: f64 = exps.iter().sum();
        total += norm.ln() - (row[label] - max);
        for (c, e) in exps.iter().enumerate() {
            let onehot = if c == label { 1.0 } else { 0.0 };
            grad.push((e / norm - onehot) / n as f64);
        }
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("cross-entropy loss is {loss}")));
    }
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Number of rows whose arg-max (first on ties) equals the label.
pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let classes = logits.row_len();
    logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == label
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_classes() {
        let (loss, _) = softmax_cross_entropy(&Tensor::zeros(&[3, 10]), &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn saturated_logits() {
        let logits = Tensor::from_rows(&[&[1000.0, 0.0]]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn two_class_gradient() {
        let (_, grad) = softmax_cross_entropy(&Tensor::zeros(&[1, 2]), &[1]).unwrap();
        assert_eq!(grad.data(), &[0.5, -0.5]);
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            softmax_cross_entropy(&Tensor::zeros(&[1, 2]), &[2]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn argmax_counting() {
        let logits = Tensor::from_rows(&[&[0.1, 0.9], &[2.0, -1.0], &[0.5, 0.5]]).unwrap();
        assert_eq!(count_correct(&logits, &[1, 1, 0]), 2);
    }
}
