use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::params::ParamStore;

/// Adam hyperparameters; defaults follow the training protocol (lr 1e-4).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter in the store's order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .values()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        Adam {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Restore from saved moments (e.g. a checkpoint).
    pub fn from_state(
        config: AdamConfig,
        step: u64,
        first: Vec<Tensor<T>>,
        second: Vec<Tensor<T>>,
    ) -> Self {
        Adam {
            config,
            step,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.first, &self.second)
    }

    /// One update. `grads[i]` belongs to parameter `i`; `None` leaves it untouched.
    /// A non-finite gradient aborts before any parameter changes.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(Error::Numeric(format!(
                "optimizer state covers {} parameters, store has {}, got {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != params.values()[i].shape() {
                    return Err(Error::Numeric(format!(
                        "gradient shape {:?} for parameter {} of shape {:?}",
                        g.shape(),
                        params.name(i),
                        params.values()[i].shape()
                    )));
                }
                if !g.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient for parameter {}",
                        params.name(i)
                    )));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let one = T::one();
        let corr1 = one - T::lit(c.beta1.powi(self.step as i32));
        let corr2 = one - T::lit(c.beta2.powi(self.step as i32));
        let (lr, eps, wd) = (T::lit(c.lr), T::lit(c.eps), T::lit(c.weight_decay));
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let theta = params.value_mut(i).data_mut();
            for (((t, m), v), &gv) in theta.iter_mut().zip(m).zip(v).zip(g.data()) {
                let gv = gv + wd * *t;
                *m = b1 * *m + (one - b1) * gv;
                *v = b2 * *v + (one - b2) * gv * gv;
                let mhat = *m / corr1;
                let vhat = *v / corr2;
                *t = *t - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamLayout};

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut layout = ParamLayout::default();
        layout.register("theta", &[1], Init::Constant(v));
        ParamStore::init(&layout, 0)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_store(0.0);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p, &[Some(Tensor::scalar(1.0))]).unwrap();
        let theta = p.values()[0].data()[0];
        // m̂ = v̂ = 1 → θ = −lr/(1+eps)
        assert!((theta + 1e-4 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = scalar_store(0.3);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        for _ in 0..3 {
            opt.step(&mut p, &[Some(Tensor::scalar(0.0))]).unwrap();
        }
        assert_eq!(p.values()[0].data()[0], 0.3);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = scalar_store(0.0);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let err = opt
            .step(&mut p, &[Some(Tensor::scalar(f64::NAN))])
            .unwrap_err();
        assert!(err.to_string().contains("theta"));
        assert_eq!(p.values()[0].data()[0], 0.0);
    }
}
