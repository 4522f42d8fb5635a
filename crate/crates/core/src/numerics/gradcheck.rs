//! Central finite-difference gradient checks in double precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{Graph, Tensor, Var};

/// Outcome of checking one scalar function.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    /// Worst relative error over the checked inputs.
    pub worst_rel_error: f64,
    pub threshold: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_error.is_finite() && self.worst_rel_error < self.threshold
    }
}

/// Settings of a check: FD step, pass threshold, and how many coordinates per
/// input tensor are probed (all of them when the tensor is small enough).
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    pub threshold: f64,
    pub max_coords_per_input: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-4,
            threshold: 1e-4,
            max_coords_per_input: 64,
            seed: 7,
        }
    }
}

/// Gradient norms below this are treated as structurally zero: the central
/// difference then only measures round-off.
pub const ABSOLUTE_FLOOR: f64 = 1e-6;
/// Fraction of the full gradient norm below which an input counts as zero.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`; exact zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    relative_error_floored(analytic, numeric, 0.0)
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, floor)`.
pub fn relative_error_floored(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric)).max(floor);
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

impl GradCheck {
    pub fn with_threshold(threshold: f64) -> Self {
        GradCheck {
            threshold,
            ..Default::default()
        }
    }

    /// Compare reverse-mode gradients of `build` against central differences.
    /// `build` receives one leaf per input and must return a scalar.
    pub fn run<F>(&self, name: &str, inputs: &[Tensor<f64>], build: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::<f64>::new();
        let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &leaves)?;
        g.backward(out)?;
        let analytic: Vec<Tensor<f64>> = leaves
            .iter()
            .zip(inputs)
            .map(|(&v, t)| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect();
        drop(g);

        let eval = |values: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::<f64>::inference();
            let leaves: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
            let out = build(&mut g, &leaves)?;
            Ok(g.value(out).data()[0])
        };

        // an input whose gradient is structurally zero is compared against a
        // small fraction of the whole gradient rather than its own round-off
        let total: f64 = analytic
            .iter()
            .flat_map(|t| t.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let floor = ABSOLUTE_FLOOR.max(RELATIVE_FLOOR * total);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut worst: f64 = 0.0;
        let mut coordinates = 0;
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        for (i, input) in inputs.iter().enumerate() {
            let n = input.numel();
            let picks: Vec<usize> = if n <= self.max_coords_per_input {
                (0..n).collect()
            } else {
                let mut p = sample(&mut rng, n, self.max_coords_per_input).into_vec();
                p.sort_unstable();
                p
            };
            let mut a = Vec::with_capacity(picks.len());
            let mut num = Vec::with_capacity(picks.len());
            for &k in &picks {
                let orig = input.data()[k];
                work[i].data_mut()[k] = orig + self.step;
                let plus = eval(&work)?;
                work[i].data_mut()[k] = orig - self.step;
                let minus = eval(&work)?;
                work[i].data_mut()[k] = orig;
                num.push((plus - minus) / (2.0 * self.step));
                a.push(analytic[i].data()[k]);
            }
            coordinates += picks.len();
            worst = worst.max(relative_error_floored(&a, &num, floor));
        }
        Ok(GradCheckReport {
            name: name.to_string(),
            worst_rel_error: worst,
            threshold: self.threshold,
            coordinates,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[1.1, 0.0]) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn product_passes() {
        let a = Tensor::from_f64(&[3], &[0.3, -1.2, 2.0]).unwrap();
        let b = Tensor::from_f64(&[3], &[1.5, 0.7, -0.4]).unwrap();
        let r = GradCheck::default()
            .run("mul", &[a, b], |g, v| {
                let p = g.mul(v[0], v[1])?;
                let q = g.mul(p, v[0])?;
                Ok(g.sum_all(q))
            })
            .unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.coordinates, 6);
    }
}
