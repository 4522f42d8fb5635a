//! Named parameter layout, deterministic initialisation, and binding onto a graph.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal(0, std) resampled outside ±2·std.
    TruncNormal {
        std: f64,
    },
    /// Uniform(±sqrt(6 / fan_in)).
    KaimingUniform {
        fan_in: usize,
    },
    Zeros,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered parameter declarations of a model. Order is fixed by construction,
/// which makes initialisation and checkpoints reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.specs.iter().all(|s| s.name != name),
            "duplicate parameter {name}"
        );
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn total(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn total_with_prefix(&self, prefix: &str) -> usize {
        self.specs
            .iter()
            .filter(|s| s.name.starts_with(prefix))
            .map(ParamSpec::numel)
            .sum()
    }
}

fn sample_init(init: Init, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Constant(v) => vec![v; n],
        Init::KaimingUniform { fan_in } => {
            let bound = (6.0 / fan_in.max(1) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            (0..n).map(|_| dist.sample(rng)).collect()
        }
        Init::TruncNormal { std } => {
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..n)
                .map(|_| loop {
                    let v: f64 = dist.sample(rng);
                    if v.abs() <= 2.0 * std {
                        break v;
                    }
                })
                .collect()
        }
    }
}

/// Parameter values for a [`ParamLayout`].
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    specs: Vec<ParamSpec>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    /// Draw every parameter from one seeded stream in layout order. Values are
    /// drawn in f64 and rounded, so f32 and f64 stores agree up to rounding.
    pub fn init(layout: &ParamLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = layout
            .specs
            .iter()
            .map(|s| {
                let v = sample_init(s.init, s.numel(), &mut rng);
                Tensor::new(&s.shape, v.into_iter().map(T::lit).collect()).expect("spec shape")
            })
            .collect();
        ParamStore {
            specs: layout.specs.clone(),
            values,
        }
    }

    pub fn from_values(layout: &ParamLayout, values: Vec<Tensor<T>>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors for {} parameters",
                values.len(),
                layout.len()
            )));
        }
        for (s, v) in layout.specs.iter().zip(&values) {
            if s.shape != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    v.shape(),
                    s.shape
                )));
            }
        }
        Ok(ParamStore {
            specs: layout.specs.clone(),
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn name(&self, i: usize) -> &str {
        &self.specs[i].name
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.values[i]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape(
                "set_param",
                format!(
                    "{} expects {:?}, got {:?}",
                    self.specs[id.0].name,
                    self.values[id.0].shape(),
                    value.shape()
                ),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn total(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            specs: self.specs.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Put every parameter on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound(
            self.values
                .iter()
                .map(|v| g.leaf(v.clone(), trainable))
                .collect(),
        )
    }

    /// Gradients of all parameters after `g.backward`.
    pub fn collect_grads(&self, g: &Graph<T>, bound: &Bound) -> Vec<Option<Tensor<T>>> {
        bound.0.iter().map(|&v| g.grad(v).cloned()).collect()
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Handles from an explicit list (one per parameter, layout order).
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let mut layout = ParamLayout::default();
        layout.register("w", &[64, 8], Init::TruncNormal { std: 0.02 });
        layout.register("k", &[4, 2, 3, 3], Init::KaimingUniform { fan_in: 18 });
        layout.register("b", &[4], Init::Zeros);
        let a = ParamStore::<f32>::init(&layout, 11);
        let b = ParamStore::<f32>::init(&layout, 11);
        assert_eq!(a.values(), b.values());
        assert!(a.values()[0].data().iter().all(|v| v.abs() <= 0.04));
        let bound = (6.0f32 / 18.0).sqrt();
        assert!(a.values()[1].data().iter().all(|v| v.abs() <= bound));
        assert!(a.values()[2].data().iter().all(|&v| v == 0.0));
        let c = ParamStore::<f32>::init(&layout, 12);
        assert_ne!(a.values()[0], c.values()[0]);
    }

    #[test]
    fn prefix_totals() {
        let mut layout = ParamLayout::default();
        layout.register("enc.a", &[2, 3], Init::Zeros);
        layout.register("enc.b", &[4], Init::Zeros);
        layout.register("dec.a", &[5], Init::Zeros);
        assert_eq!(layout.total(), 15);
        assert_eq!(layout.total_with_prefix("enc."), 10);
    }
}
