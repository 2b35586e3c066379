//! Mean softmax cross-entropy over a batch of [N,C,1,1] logits.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Returns (mean loss, softmax probabilities). Logits must be [N,C,1,1]
/// with one label per batch item; the log-sum-exp is max-shifted.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::shape("softmax_xent", "[N,C,1,1] logits", s));
    }
    if labels.len() != s.n {
        return Err(Error::shape(
            "softmax_xent",
            format!("{} labels", s.n),
            format!("{} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s.c) {
        return Err(Error::config(format!(
            "label {bad} out of range for {} classes",
            s.c
        )));
    }
    let mut probs = Tensor::zeros(s);
    let mut loss = T::zero();
    for n in 0..s.n {
        let mut mx = logits.at(n, 0, 0, 0);
        for c in 1..s.c {
            mx = mx.max(logits.at(n, c, 0, 0));
        }
        let mut denom = T::zero();
        for c in 0..s.c {
            denom = denom + (logits.at(n, c, 0, 0) - mx).exp();
        }
        let lse = mx + denom.ln();
        for c in 0..s.c {
            *probs.at_mut(n, c, 0, 0) = (logits.at(n, c, 0, 0) - lse).exp();
        }
        loss = loss + lse - logits.at(n, labels[n], 0, 0);
    }
    Ok((loss / T::from_f64(s.n as f64), probs))
}

/// d(mean loss)/d(logits) scaled by the upstream scalar gradient.
pub fn softmax_xent_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    upstream: T,
) -> Tensor<T> {
    let s = probs.shape();
    let inv_n = upstream / T::from_f64(s.n as f64);
    let mut d = probs.clone();
    for n in 0..s.n {
        let v = d.at_mut(n, labels[n], 0, 0);
        *v = *v - T::one();
    }
    d.map(|v| v * inv_n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Tensor::<f64>::zeros(Shape::new(2, 4, 1, 1));
        let (loss, probs) = softmax_xent(&logits, &[0, 3]).unwrap();
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);
        assert!(probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-12));
    }

    #[test]
    fn confident_correct_logit_drives_loss_down() {
        let mut logits = Tensor::<f64>::zeros(Shape::new(1, 3, 1, 1));
        *logits.at_mut(0, 1, 0, 0) = 10.0;
        let (loss, _) = softmax_xent(&logits, &[1]).unwrap();
        assert!(loss < 1e-3);
        let (loss_wrong, _) = softmax_xent(&logits, &[0]).unwrap();
        assert!(loss_wrong > 9.0);
    }

    #[test]
    fn large_logits_stay_finite() {
        let logits =
            Tensor::<f64>::from_vec(Shape::new(1, 2, 1, 1), vec![1e4, -1e4]).unwrap();
        let (loss, probs) = softmax_xent(&logits, &[0]).unwrap();
        assert!(loss.is_finite() && loss >= 0.0);
        assert!(probs.all_finite());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let logits = Tensor::<f64>::from_vec(
            Shape::new(2, 3, 1, 1),
            vec![0.3, -0.2, 0.9, -1.0, 0.4, 0.1],
        )
        .unwrap();
        let labels = [2, 1];
        let (_, probs) = softmax_xent(&logits, &labels).unwrap();
        let d = softmax_xent_backward(&probs, &labels, 1.0);
        let h = 1e-6;
        for i in 0..logits.numel() {
            let mut lp = logits.clone();
            lp.data_mut()[i] += h;
            let mut lm = logits.clone();
            lm.data_mut()[i] -= h;
            let num = (softmax_xent(&lp, &labels).unwrap().0
                - softmax_xent(&lm, &labels).unwrap().0)
                / (2.0 * h);
            assert!((d.data()[i] - num).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_bad_shapes_and_labels() {
        let logits = Tensor::<f64>::zeros(Shape::new(1, 3, 2, 2));
        assert!(softmax_xent(&logits, &[0]).is_err());
        let logits = Tensor::<f64>::zeros(Shape::new(1, 3, 1, 1));
        assert!(softmax_xent(&logits, &[3]).is_err());
        assert!(softmax_xent(&logits, &[0, 1]).is_err());
    }
}
