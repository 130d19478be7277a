//! Cross-entropy loss.

use crate::error::{Error, Result};

use super::{grad_slot, Scalar, Tape, TensorId};

impl<T: Scalar> Tape<T> {
    /// Mean over the batch of `-log softmax(logits)[label]` for `[B, K]`
    /// logits. Stabilized by max subtraction, so saturated logits do not
    /// overflow.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::invalid(
                "cross_entropy",
                format!("expected [B, K] logits, got {:?}", shape),
            ));
        }
        let (b_n, k_n) = (shape[0], shape[1]);
        if labels.len() != b_n {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{} labels for batch of {}", labels.len(), b_n),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k_n) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("label {} out of range for {} classes", bad, k_n),
            ));
        }
        let mut probs = vec![T::zero(); b_n * k_n];
        let mut total = T::zero();
        {
            let ld = self.data(logits);
            for b in 0..b_n {
                let row = &ld[b * k_n..(b + 1) * k_n];
                let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                let prow = &mut probs[b * k_n..(b + 1) * k_n];
                for (p, &v) in prow.iter_mut().zip(row) {
                    *p = (v - m).exp();
                    sum += *p;
                }
                for p in prow.iter_mut() {
                    *p /= sum;
                }
                // -log p[label] = log(sum) - (l - m)
                total += sum.ln() - (row[labels[b]] - m);
            }
        }
        let loss = total / T::from_f64(b_n as f64);
        let labels = labels.to_vec();
        let requires = self.requires_grad(logits);
        let backward = requires.then(|| {
            Box::new(move |_: &[super::Tensor<T>], g: &[T], grads: &mut super::GradStore<T>| {
                let inv_b = T::one() / T::from_f64(b_n as f64);
                let slot = grad_slot(grads, logits, b_n * k_n);
                for b in 0..b_n {
                    for k in 0..k_n {
                        let indicator = if k == labels[b] { T::one() } else { T::zero() };
                        slot[b * k_n + k] += g[0] * (probs[b * k_n + k] - indicator) * inv_b;
                    }
                }
            }) as super::BackwardFn<T>
        });
        Ok(self.push(vec![loss], vec![1], requires, backward))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![0.7; 3], &[1, 3], false).unwrap();
        let loss = tape.cross_entropy(x, &[1]).unwrap();
        assert!((tape.data(loss)[0] - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_do_not_overflow() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![1000.0, -1000.0], &[1, 2], false).unwrap();
        let loss = tape.cross_entropy(x, &[0]).unwrap();
        let v = tape.data(loss)[0];
        assert!(v.is_finite());
        assert!(v.abs() < 1e-9);
    }

    #[test]
    fn rejects_out_of_range_label() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![0.0; 6], &[2, 3], false).unwrap();
        assert!(tape.cross_entropy(x, &[0, 3]).is_err());
    }

    #[test]
    fn gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![0.0, 0.0], &[1, 2], true).unwrap();
        let loss = tape.cross_entropy(x, &[0]).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert!((g[0] - (-0.5)).abs() < 1e-12);
        assert!((g[1] - 0.5).abs() < 1e-12);
    }
}
