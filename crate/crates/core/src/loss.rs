//! Loss functions with analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Mean squared error over all b*c*h*w elements plus its gradient with
/// respect to `pred`: grad = 2 (pred - target) / N.
pub fn mse_loss(pred: &Tensor4, target: &Tensor4) -> Result<(f32, Tensor4)> {
    if !pred.same_dims(target) {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            detail: format!("pred dims {:?} != target dims {:?}", pred.dims(), target.dims()),
        });
    }
    let n = pred.len() as f64;
    let mut sum = 0.0f64;
    let mut grad = pred.clone();
    let scale = (2.0 / n) as f32;
    for (g, &t) in grad.data_mut().iter_mut().zip(target.data()) {
        let d = *g - t;
        sum += (d as f64) * (d as f64);
        *g = scale * d;
    }
    Ok(((sum / n) as f32, grad))
}

/// Softmax cross-entropy, mean over the batch.
///
/// `logits` is row-major [batch][classes]; returns the loss and the gradient
/// with respect to the logits.
pub fn softmax_cross_entropy(
    logits: &[f32],
    num_classes: usize,
    labels: &[u16],
) -> Result<(f32, Vec<f32>)> {
    let batch = labels.len();
    if logits.len() != batch * num_classes {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            detail: format!(
                "logits length {} != batch {} x classes {}",
                logits.len(),
                batch,
                num_classes
            ),
        });
    }
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; logits.len()];
    let inv_b = 1.0 / batch as f32;
    for b in 0..batch {
        let row = &logits[b * num_classes..(b + 1) * num_classes];
        let label = labels[b] as usize;
        if label >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {num_classes} classes"
            )));
        }
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        for &v in row {
            denom += ((v - max) as f64).exp();
        }
        let log_denom = denom.ln();
        loss += log_denom - (row[label] - max) as f64;
        let grow = &mut grad[b * num_classes..(b + 1) * num_classes];
        for (c, g) in grow.iter_mut().enumerate() {
            let p = (((row[c] - max) as f64).exp() / denom) as f32;
            *g = (p - if c == label { 1.0 } else { 0.0 }) * inv_b;
        }
    }
    Ok(((loss / batch as f64) as f32, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_zero_when_equal() {
        let t = Tensor4::from_vec(1, 1, 1, 3, vec![1.0, -2.0, 3.0]).unwrap();
        let (loss, grad) = mse_loss(&t, &t).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mse_constant_offset() {
        let pred = Tensor4::from_vec(1, 1, 2, 2, vec![2.0; 4]).unwrap();
        let target = Tensor4::from_vec(1, 1, 2, 2, vec![1.0; 4]).unwrap();
        let (loss, grad) = mse_loss(&pred, &target).unwrap();
        assert!((loss - 1.0).abs() < 1e-7);
        // grad = 2*(1)/4 = 0.5
        assert!(grad.data().iter().all(|&g| (g - 0.5).abs() < 1e-7));
    }

    #[test]
    fn mse_hand_example() {
        // pred=(0,2), target=(1,0) -> (1+4)/2 = 2.5
        let pred = Tensor4::from_vec(1, 1, 1, 2, vec![0.0, 2.0]).unwrap();
        let target = Tensor4::from_vec(1, 1, 1, 2, vec![1.0, 0.0]).unwrap();
        let (loss, _) = mse_loss(&pred, &target).unwrap();
        assert!((loss - 2.5).abs() < 1e-7);
    }

    #[test]
    fn mse_rejects_dim_mismatch() {
        let a = Tensor4::zeros(1, 1, 2, 2);
        let b = Tensor4::zeros(1, 1, 2, 3);
        assert!(mse_loss(&a, &b).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        // all-zero logits over 4 classes: loss = ln 4 for any label.
        let (loss, grad) = softmax_cross_entropy(&[0.0; 4], 4, &[2]).unwrap();
        assert!((loss - (4.0f32).ln()).abs() < 1e-6);
        assert!((grad[2] - (0.25 - 1.0)).abs() < 1e-6);
        assert!((grad[0] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        assert!(softmax_cross_entropy(&[0.0; 4], 4, &[4]).is_err());
    }
}
