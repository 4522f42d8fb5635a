use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Pointwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    Gelu,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => sigmoid(x),
            Activation::Gelu => {
                let c = T::lit(GELU_C);
                let inner = c * (x + T::lit(0.044715) * x * x * x);
                T::lit(0.5) * x * (T::one() + inner.tanh())
            }
        }
    }

    /// Derivative w.r.t. the input `x` (subgradient 0 at the ReLU kink).
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::Gelu => {
                let c = T::lit(GELU_C);
                let a = T::lit(0.044715);
                let inner = c * (x + a * x * x * x);
                let t = inner.tanh();
                let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
                T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
            }
        }
    }

    fn op_name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Output shape of a same-rank broadcast, where each axis must match or be 1.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("rank mismatch {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(
                op,
                format!("cannot broadcast {a:?} with {b:?}"),
            )),
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_offset, a_offset, b_offset)` for every element of `out`.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut o = 0;
    for _ in 0..outer {
        let oa: usize = idx.iter().zip(sa).map(|(i, s)| i * s).sum();
        let ob: usize = idx.iter().zip(sb).map(|(i, s)| i * s).sum();
        for k in 0..inner {
            f(o, oa + k * ia, ob + k * ib);
            o += 1;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn broadcast_binary<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return Ok(a.zip_map(b, f));
    }
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut out = vec![T::zero(); out_shape.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
    Tensor::new(&out_shape, out)
}

/// Sum `grad` (broadcast output shape) down to `shape`.
pub(crate) fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out_shape = grad.shape();
    let s = broadcast_strides(shape, out_shape);
    let zeros = vec![0; out_shape.len()];
    let mut acc = vec![T::zero(); shape.iter().product()];
    let g = grad.data();
    for_each_broadcast(out_shape, &s, &zeros, |o, i, _| acc[i] = acc[i] + g[o]);
    Tensor::new(shape, acc).expect("reduced shape is valid")
}

impl<T: Scalar> Graph<T> {
    /// Broadcasting add; operands share rank and each axis matches or is 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        Ok(self.record("add", value, &[a, b], move |g, need| {
            vec![
                need[0].then(|| reduce_to_shape(g, &sa)),
                need[1].then(|| reduce_to_shape(g, &sb)),
            ]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        Ok(self.record("sub", value, &[a, b], move |g, need| {
            vec![
                need[0].then(|| reduce_to_shape(g, &sa)),
                need[1].then(|| reduce_to_shape(&g.map(|v| -v), &sb)),
            ]
        }))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        let value = broadcast_binary("mul", &ta, &tb, |x, y| x * y)?;
        Ok(self.record("mul", value, &[a, b], move |g, need| {
            vec![
                need[0].then(|| {
                    let full = broadcast_binary("mul", g, &tb, |x, y| x * y).unwrap();
                    reduce_to_shape(&full, ta.shape())
                }),
                need[1].then(|| {
                    let full = broadcast_binary("mul", g, &ta, |x, y| x * y).unwrap();
                    reduce_to_shape(&full, tb.shape())
                }),
            ]
        }))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.record("scale", value, &[a], move |g, _| {
            vec![Some(g.map(|v| v * factor))]
        })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let input = self.value(x).clone();
        let value = input.map(|v| kind.apply(v));
        let saved = self.any_requires_grad(&[x]).then_some(input);
        self.record(kind.op_name(), value, &[x], move |g, _| {
            let input = saved.as_ref().expect("saved input");
            vec![Some(g.zip_map(input, |gv, xv| gv * kind.derivative(xv)))]
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Scalar sum of all elements.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let value = Tensor::scalar(self.value(x).sum());
        self.record("sum", value, &[x], move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel()).unwrap();
        let s = self.sum_all(x);
        self.scale(s, T::one() / n)
    }

    /// Scalar `Σ x ⊙ w` for a fixed weight tensor; the standard probe for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != weights.shape() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{:?} vs {:?}", self.shape(x), weights.shape()),
            ));
        }
        let w = weights.clone();
        let value = Tensor::scalar(
            self.value(x)
                .data()
                .iter()
                .zip(w.data())
                .map(|(&a, &b)| a * b)
                .sum(),
        );
        Ok(self.record("weighted_sum", value, &[x], move |g, _| {
            let s = g.data()[0];
            vec![Some(w.map(|v| v * s))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_reference_values() {
        assert_eq!(Activation::Relu.apply(-1.0f64), 0.0);
        assert_eq!(Activation::Relu.apply(2.0f64), 2.0);
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        // 0.5·(1 + tanh(√(2/π)·1.044715))
        let expected = 0.5 * (1.0 + (GELU_C * 1.044715f64).tanh());
        assert!((Activation::Gelu.apply(1.0f64) - expected).abs() < 1e-15);
        assert!((Activation::Gelu.apply(1.0f64) - 0.8412).abs() < 1e-3);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(Activation::Sigmoid.apply(-1000.0f64), 0.0);
        assert_eq!(Activation::Sigmoid.apply(1000.0f64), 1.0);
        assert!(Activation::Sigmoid.apply(-80.0f32) > 0.0);
    }

    #[test]
    fn broadcast_mul_and_reduce() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[1, 2, 2, 3], |i| i as f64), true);
        let s = g.leaf(Tensor::from_f64(&[1, 2, 1, 1], &[2.0, -1.0]).unwrap(), true);
        let y = g.mul(x, s).unwrap();
        assert_eq!(g.value(y).at(&[0, 0, 1, 2]), 10.0);
        assert_eq!(g.value(y).at(&[0, 1, 0, 0]), -6.0);
        let l = g.sum_all(y);
        g.backward(l).unwrap();
        // d/ds_c = Σ x over channel c
        assert_eq!(g.grad(s).unwrap().data(), &[15.0, 51.0]);
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 3]));
        assert!(g.add(a, b).is_err());
    }
}
