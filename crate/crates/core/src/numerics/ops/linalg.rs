use crate::error::{Error, Result};
use crate::numerics::scalar::{gemm, MatRef};
use crate::numerics::{Graph, Scalar, Tensor, Var};

impl<T: Scalar> Graph<T> {
    /// Affine map over the last axis: `[..., D] × [E, D]ᵀ + [E] → [..., E]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 || ws[1] != d {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?} vs weight {ws:?}"),
            ));
        }
        let e = ws[0];
        if let Some(b) = bias {
            if self.shape(b) != [e] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?}, expected [{e}]", self.shape(b)),
                ));
            }
        }
        let n = self.value(x).numel() / d;
        let xt = self.value(x).clone();
        let wt = self.value(weight).clone();
        let mut out = vec![T::zero(); n * e];
        gemm(
            MatRef::new(xt.data(), n, d),
            MatRef::new(wt.data(), e, d).t(),
            &mut out,
            false,
        );
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in out.chunks_mut(e) {
                row.iter_mut().zip(bd).for_each(|(v, &bv)| *v = *v + bv);
            }
        }
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = e;
        let value = Tensor::new(&out_shape, out)?;
        let parents: Vec<Var> = [x, weight].into_iter().chain(bias).collect();
        Ok(self.record("linear", value, &parents, move |g, need| {
            let gm = MatRef::new(g.data(), n, e);
            let dx = need[0].then(|| {
                let mut dx = vec![T::zero(); n * d];
                gemm(gm, MatRef::new(wt.data(), e, d), &mut dx, false);
                Tensor::new(&xs, dx).unwrap()
            });
            let dw = need[1].then(|| {
                let mut dw = vec![T::zero(); e * d];
                gemm(gm.t(), MatRef::new(xt.data(), n, d), &mut dw, false);
                Tensor::new(&[e, d], dw).unwrap()
            });
            let mut grads = vec![dx, dw];
            if need.len() > 2 {
                grads.push(need[2].then(|| {
                    let mut db = vec![T::zero(); e];
                    for row in g.data().chunks(e) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                    Tensor::new(&[e], db).unwrap()
                }));
            }
            grads
        }))
    }

    /// Batched matrix product `[G, M, K] × [G, K, N] → [G, M, N]`; with
    /// `transpose_b` the right operand is `[G, N, K]`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (groups, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if kb != k {
            return Err(Error::shape(
                "bmm",
                format!("inner dims {k} vs {kb} ({sa:?} x {sb:?})"),
            ));
        }
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        fn b_mat<T>(data: &[T], k: usize, n: usize, transpose_b: bool) -> MatRef<'_, T> {
            if transpose_b {
                MatRef::new(data, n, k).t()
            } else {
                MatRef::new(data, k, n)
            }
        }
        let mut out = vec![T::zero(); groups * m * n];
        for gi in 0..groups {
            gemm(
                MatRef::new(&ta.data()[gi * m * k..(gi + 1) * m * k], m, k),
                b_mat(&tb.data()[gi * k * n..(gi + 1) * k * n], k, n, transpose_b),
                &mut out[gi * m * n..(gi + 1) * m * n],
                false,
            );
        }
        let value = Tensor::new(&[groups, m, n], out)?;
        Ok(self.record("bmm", value, &[a, b], move |g, need| {
            let gd = g.data();
            let da = need[0].then(|| {
                let mut da = vec![T::zero(); groups * m * k];
                for gi in 0..groups {
                    let gm = MatRef::new(&gd[gi * m * n..(gi + 1) * m * n], m, n);
                    gemm(
                        gm,
                        b_mat(&tb.data()[gi * k * n..(gi + 1) * k * n], k, n, transpose_b).t(),
                        &mut da[gi * m * k..(gi + 1) * m * k],
                        false,
                    );
                }
                Tensor::new(&[groups, m, k], da).unwrap()
            });
            let db = need[1].then(|| {
                let mut db = vec![T::zero(); groups * k * n];
                for gi in 0..groups {
                    let gm = MatRef::new(&gd[gi * m * n..(gi + 1) * m * n], m, n);
                    let am = MatRef::new(&ta.data()[gi * m * k..(gi + 1) * m * k], m, k);
                    let dst = &mut db[gi * k * n..(gi + 1) * k * n];
                    if transpose_b {
                        gemm(gm.t(), am, dst, false);
                    } else {
                        gemm(am.t(), gm, dst, false);
                    }
                }
                Tensor::new(tb.shape(), db).unwrap()
            });
            vec![da, db]
        }))
    }
}
