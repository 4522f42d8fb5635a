use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Bookkeeping of one cross-entropy evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossEntropyStats {
    pub valid_pixels: usize,
    /// Every pixel carried the ignore label; the loss is defined as 0.
    pub all_ignored: bool,
}

impl<T: Scalar> Graph<T> {
    /// Mean pixel-wise cross-entropy of `(B, K, H, W)` logits against `B·H·W`
    /// labels, skipping pixels labelled `ignore`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: Arc<Vec<u8>>,
        ignore: u8,
    ) -> Result<(Var, CrossEntropyStats)> {
        let (b, k, h, w) = self.value(logits).dims4()?;
        let plane = h * w;
        if labels.len() != b * plane {
            return Err(Error::shape(
                "cross_entropy",
                format!(
                    "{} labels for logits {:?}",
                    labels.len(),
                    self.shape(logits)
                ),
            ));
        }
        if let Some((i, &bad)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l != ignore && l as usize >= k)
        {
            let (bi, p) = (i / plane, i % plane);
            return Err(Error::Data(format!(
                "label {bad} at (batch {bi}, row {}, col {}) is not a class in 0..{k} nor ignore {ignore}",
                p / w,
                p % w
            )));
        }
        let valid = labels.iter().filter(|&&l| l != ignore).count();
        let stats = CrossEntropyStats {
            valid_pixels: valid,
            all_ignored: valid == 0,
        };

        let xd = self.value(logits).data();
        // softmax probabilities per pixel, stored class-major like the logits
        let mut probs = vec![T::zero(); xd.len()];
        let mut total = T::zero();
        for bi in 0..b {
            let base = bi * k * plane;
            for p in 0..plane {
                let m = (0..k)
                    .map(|c| xd[base + c * plane + p])
                    .fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for c in 0..k {
                    let e = (xd[base + c * plane + p] - m).exp();
                    probs[base + c * plane + p] = e;
                    z = z + e;
                }
                for c in 0..k {
                    probs[base + c * plane + p] = probs[base + c * plane + p] / z;
                }
                let l = labels[bi * plane + p];
                if l != ignore {
                    // −log softmax = log Σ e^(x−m) − (x_l − m)
                    total = total + z.ln() - (xd[base + l as usize * plane + p] - m);
                }
            }
        }
        let inv_n = if valid == 0 {
            T::zero()
        } else {
            T::one() / T::from_usize(valid).unwrap()
        };
        let value = Tensor::scalar(total * inv_n);
        let shape = [b, k, h, w];
        let var = self.record("cross_entropy", value, &[logits], move |g, _| {
            let scale = g.data()[0] * inv_n;
            let mut dx = probs.clone();
            for bi in 0..b {
                let base = bi * k * plane;
                for p in 0..plane {
                    let l = labels[bi * plane + p];
                    if l == ignore {
                        for c in 0..k {
                            dx[base + c * plane + p] = T::zero();
                        }
                    } else {
                        let at = base + l as usize * plane + p;
                        dx[at] = dx[at] - T::one();
                    }
                }
            }
            dx.iter_mut().for_each(|v| *v = *v * scale);
            vec![Some(Tensor::new(&shape, dx).unwrap())]
        });
        Ok((var, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let (l, s) = g.cross_entropy(x, Arc::new(vec![0, 1, 2, 3]), 255).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);
        assert_eq!(s.valid_pixels, 4);
    }

    #[test]
    fn all_ignored_is_zero_and_flagged() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[1, 4, 1, 2], |i| i as f64), true);
        let (l, s) = g.cross_entropy(x, Arc::new(vec![255, 255]), 255).unwrap();
        assert!(s.all_ignored);
        assert_eq!(g.value(l).data()[0], 0.0);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 1, 2]));
        let err = g.cross_entropy(x, Arc::new(vec![0, 7]), 255).unwrap_err();
        assert!(err.to_string().contains("label 7"));
    }
}
