use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `max(0, x)` element-wise.
pub fn relu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

/// Adds `grad_out` masked by `x > 0` into `grad_in`; the subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(x: &[T], grad_out: &[T], grad_in: &mut [T]) -> Result<()> {
    if x.len() != grad_out.len() || x.len() != grad_in.len() {
        return Err(Error::contract("relu backward length mismatch"));
    }
    for ((d, &g), &v) in grad_in.iter_mut().zip(grad_out).zip(x) {
        if v > T::zero() {
            *d += g;
        }
    }
    Ok(())
}

/// Max-shifted softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let top = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - top).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax followed by negative log-likelihood of `label`.
///
/// The loss is computed as `logsumexp(z) - z[label]` so it stays finite for
/// very confident logits.
pub fn softmax_xent_forward<T: Scalar>(logits: &[T], label: usize) -> Result<(Vec<T>, T)> {
    if label >= logits.len() {
        return Err(Error::contract(format!(
            "label {label} outside [0, {})",
            logits.len()
        )));
    }
    let top = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = logits.iter().map(|&z| (z - top).exp()).sum();
    let loss = total.ln() - (logits[label] - top);
    Ok((softmax(logits), loss))
}

/// Gradient of the loss with respect to the logits: `dloss * (p - onehot)`.
pub fn softmax_xent_backward<T: Scalar>(probs: &[T], label: usize, dloss: T) -> Result<Vec<T>> {
    if label >= probs.len() {
        return Err(Error::contract(format!("label {label} outside [0, {})", probs.len())));
    }
    Ok(probs
        .iter()
        .enumerate()
        .map(|(k, &p)| dloss * if k == label { p - T::one() } else { p })
        .collect())
}

/// Classification head with a fixed class count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SoftmaxCrossEntropy {
    pub n_classes: usize,
}

impl Default for SoftmaxCrossEntropy {
    fn default() -> Self {
        Self { n_classes: 10 }
    }
}

impl SoftmaxCrossEntropy {
    pub fn forward<T: Scalar>(&self, logits: &[T], label: usize) -> Result<(Vec<T>, T)> {
        if logits.len() != self.n_classes {
            return Err(Error::contract(format!(
                "expected {} logits, got {}",
                self.n_classes,
                logits.len()
            )));
        }
        softmax_xent_forward(logits, label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        assert_eq!(relu_forward(&[-1.0f32, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        let mut g = vec![0.0; 3];
        relu_backward(&[-1.0f32, 0.0, 2.0], &[5.0, 5.0, 5.0], &mut g).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 5.0]);
    }

    #[test]
    fn uniform_logits_give_ln10() {
        let (p, loss) = SoftmaxCrossEntropy::default().forward(&[0.3f64; 10], 4).unwrap();
        assert!(p.iter().all(|&v| (v - 0.1).abs() < 1e-15));
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn huge_logit_does_not_overflow() {
        let mut z = [0.0f32; 10];
        z[0] = 1000.0;
        let (p, loss) = softmax_xent_forward(&z, 0).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-6);
        assert!(p.iter().all(|v| v.is_finite()));
        let (_, loss1) = softmax_xent_forward(&z, 1).unwrap();
        assert!((loss1 - 1000.0).abs() < 1e-3);
    }

    #[test]
    fn bad_label_and_length_rejected() {
        assert!(softmax_xent_forward(&[0.0f64; 10], 10).is_err());
        assert!(SoftmaxCrossEntropy::default().forward(&[0.0f64; 9], 0).is_err());
    }

    #[test]
    fn logit_gradient_matches_central_differences() {
        let z: Vec<f64> = (0..10).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.4).collect();
        let (p, _) = softmax_xent_forward(&z, 3).unwrap();
        let g = softmax_xent_backward(&p, 3, 1.0).unwrap();
        let eps = 1e-5;
        for k in 0..10 {
            let mut a = z.clone();
            a[k] += eps;
            let mut b = z.clone();
            b[k] -= eps;
            let fd = (softmax_xent_forward(&a, 3).unwrap().1 - softmax_xent_forward(&b, 3).unwrap().1) / (2.0 * eps);
            assert!((fd - g[k]).abs() < 1e-8, "k={k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn probabilities_normalised_for_large_logits() {
        let z: Vec<f64> = (0..10).map(|i| (i as f64 - 4.5) * 2.2e3).collect();
        let p = softmax(&z);
        assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}
