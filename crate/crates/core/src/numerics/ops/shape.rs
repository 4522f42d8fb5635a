use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Marks an output element of [`Graph::gather`] that is zero (padding).
pub const GATHER_ZERO: usize = usize::MAX;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Source offsets realising `permute(shape, axes)`.
pub fn permute_index(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let n: usize = shape.iter().product();
    let mut index = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        index.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= out_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (index, out_shape)
}

impl<T: Scalar> Graph<T> {
    /// `out[i] = x[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    /// Padding, cropping, rolls, permutations and window partitions are all gathers.
    pub fn gather(
        &mut self,
        op: &'static str,
        x: Var,
        index: Arc<Vec<usize>>,
        out_shape: &[usize],
    ) -> Result<Var> {
        let n: usize = out_shape.iter().product();
        if index.len() != n {
            return Err(Error::shape(
                op,
                format!("index of {} for output {out_shape:?}", index.len()),
            ));
        }
        let src = self.value(x);
        let src_len = src.numel();
        if let Some(&bad) = index.iter().find(|&&i| i != GATHER_ZERO && i >= src_len) {
            return Err(Error::shape(
                op,
                format!("index {bad} outside input of {src_len}"),
            ));
        }
        let sd = src.data();
        let out: Vec<T> = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { T::zero() } else { sd[i] })
            .collect();
        let value = Tensor::new(out_shape, out)?;
        let in_shape = src.shape().to_vec();
        Ok(self.record(op, value, &[x], move |g, _| {
            let mut dx = vec![T::zero(); src_len];
            for (&i, &gv) in index.iter().zip(g.data()) {
                if i != GATHER_ZERO {
                    dx[i] = dx[i] + gv;
                }
            }
            vec![Some(Tensor::new(&in_shape, dx).unwrap())]
        }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let in_shape = self.shape(x).to_vec();
        Ok(self.record("reshape", value, &[x], move |g, _| {
            vec![Some(g.reshape(&in_shape).unwrap())]
        }))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..shape.len()).collect::<Vec<_>>() {
            return Err(Error::shape(
                "permute",
                format!("axes {axes:?} for rank {}", shape.len()),
            ));
        }
        let (index, out_shape) = permute_index(&shape, axes);
        self.gather("permute", x, Arc::new(index), &out_shape)
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *xs.first()
                    .ok_or_else(|| Error::shape("concat", "no inputs"))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} for rank {}", first.len()),
            ));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} vs {first:?} on axis {axis}"),
                ));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &sz) in xs.iter().zip(&sizes) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let value = Tensor::new(&out_shape, out)?;
        let shapes: Vec<Vec<usize>> = xs.iter().map(|&v| self.shape(v).to_vec()).collect();
        Ok(self.record("concat", value, xs, move |g, need| {
            let gd = g.data();
            let mut starts = Vec::with_capacity(sizes.len());
            let mut acc = 0;
            for &s in &sizes {
                starts.push(acc);
                acc += s;
            }
            sizes
                .iter()
                .zip(&starts)
                .zip(&shapes)
                .zip(need)
                .map(|(((&sz, &st), shape), &need)| {
                    need.then(|| {
                        let mut part = Vec::with_capacity(outer * sz * inner);
                        for o in 0..outer {
                            let base = (o * total + st) * inner;
                            part.extend_from_slice(&gd[base..base + sz * inner]);
                        }
                        Tensor::new(shape, part).unwrap()
                    })
                })
                .collect()
        }))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::shape(
                "narrow",
                format!("{start}+{len} on axis {axis} of {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            index.extend(base..base + len * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather("narrow", x, Arc::new(index), &out_shape)
    }

    /// Zero-pad the two trailing spatial axes of `(B, C, H, W)` at the bottom/right.
    pub fn pad_spatial(&mut self, x: Var, hp: usize, wp: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if hp < h || wp < w {
            return Err(Error::shape("pad_spatial", format!("{h}x{w} -> {hp}x{wp}")));
        }
        if (hp, wp) == (h, w) {
            return Ok(x);
        }
        let index = crop_or_pad_index(b * c, (h, w), (hp, wp));
        self.gather("pad", x, Arc::new(index), &[b, c, hp, wp])
    }

    /// Keep the top-left `ho × wo` window of a `(B, C, H, W)` tensor.
    pub fn crop_spatial(&mut self, x: Var, ho: usize, wo: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if ho > h || wo > w || ho == 0 || wo == 0 {
            return Err(Error::shape(
                "crop_spatial",
                format!("{h}x{w} -> {ho}x{wo}"),
            ));
        }
        if (ho, wo) == (h, w) {
            return Ok(x);
        }
        let index = crop_or_pad_index(b * c, (h, w), (ho, wo));
        self.gather("crop", x, Arc::new(index), &[b, c, ho, wo])
    }
}

fn crop_or_pad_index(planes: usize, from: (usize, usize), to: (usize, usize)) -> Vec<usize> {
    let mut index = Vec::with_capacity(planes * to.0 * to.1);
    for p in 0..planes {
        for y in 0..to.0 {
            for x in 0..to.1 {
                index.push(if y < from.0 && x < from.1 {
                    (p * from.0 + y) * from.1 + x
                } else {
                    GATHER_ZERO
                });
            }
        }
    }
    index
}
