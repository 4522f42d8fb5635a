use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Row-wise softmax of a `[rows, cols]` slice with max subtraction.
pub fn softmax_rows<T: Scalar>(data: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        // accumulate in f64 so long f32 rows still sum to 1 within rounding
        let mut total = 0.0f64;
        for &v in row {
            let e = (v - m).exp();
            total += e.to_f64().unwrap_or(f64::NAN);
            out.push(e);
        }
        out[start..].iter_mut().for_each(|v| {
            *v = T::from_f64(v.to_f64().unwrap_or(f64::NAN) / total).unwrap_or(T::nan())
        });
    }
    out
}

impl<T: Scalar> Graph<T> {
    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap();
        let y = Tensor::new(&shape, softmax_rows(self.value(x).data(), cols)).unwrap();
        let saved = y.clone();
        self.record("softmax", y, &[x], move |g, _| {
            let mut dx = Vec::with_capacity(saved.numel());
            for (yr, gr) in saved.data().chunks(cols).zip(g.data().chunks(cols)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
            }
            vec![Some(Tensor::new(&shape, dx).unwrap())]
        })
    }

    /// Layer normalisation over the last axis with affine `gain`/`bias` of length D.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} for feature size {d}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let eps = T::lit(eps);
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let gv = self.value(gain).clone();
        let bv = self.value(bias).clone();
        let xd = self.value(x).data();
        let rows = xd.len() / d;
        let mut xhat = Vec::with_capacity(xd.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in xd.chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let out: Vec<T> = xhat
            .chunks(d)
            .flat_map(|row| {
                row.iter()
                    .zip(gv.data())
                    .zip(bv.data())
                    .map(|((&h, &g), &b)| h * g + b)
            })
            .collect();
        let value = Tensor::new(&shape, out)?;
        Ok(
            self.record("layer_norm", value, &[x, gain, bias], move |g, need| {
                let gd = g.data();
                let dx = need[0].then(|| {
                    let mut dx = Vec::with_capacity(gd.len());
                    for ((grow, hrow), &r) in gd.chunks(d).zip(xhat.chunks(d)).zip(&rstd) {
                        // dxhat = g ⊙ gain
                        let dh: Vec<T> = grow.iter().zip(gv.data()).map(|(&a, &b)| a * b).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() * inv_d;
                        let mean_dh_h =
                            dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                        dx.extend(
                            dh.iter()
                                .zip(hrow)
                                .map(|(&a, &h)| r * (a - mean_dh - h * mean_dh_h)),
                        );
                    }
                    Tensor::new(&shape, dx).unwrap()
                });
                let dgain = need[1].then(|| {
                    let mut acc = vec![T::zero(); d];
                    for (grow, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                        acc.iter_mut()
                            .zip(grow.iter().zip(hrow))
                            .for_each(|(a, (&gv, &h))| *a = *a + gv * h);
                    }
                    Tensor::new(&[d], acc).unwrap()
                });
                let dbias = need[2].then(|| {
                    let mut acc = vec![T::zero(); d];
                    for grow in gd.chunks(d) {
                        acc.iter_mut().zip(grow).for_each(|(a, &gv)| *a = *a + gv);
                    }
                    Tensor::new(&[d], acc).unwrap()
                });
                vec![dx, dgain, dbias]
            }),
        )
    }
}
