use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Bin `[floor(i·n/s), floor((i+1)·n/s))` of an adaptive pooling grid.
pub fn adaptive_bin(i: usize, n: usize, s: usize) -> (usize, usize) {
    (i * n / s, (i + 1) * n / s)
}

/// Two source taps and their weights for each output coordinate of a
/// half-pixel (align-corners = false) linear resize along one axis.
fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = if i0 == n_in - 1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

impl<T: Scalar> Graph<T> {
    /// Average pooling onto an `s_h × s_w` grid whose bins partition the input.
    pub fn adaptive_avg_pool(&mut self, x: Var, grid: (usize, usize)) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let (sh, sw) = grid;
        if sh == 0 || sw == 0 || sh > h || sw > w {
            return Err(Error::shape(
                "adaptive_avg_pool",
                format!("grid {sh}x{sw} does not fit a {h}x{w} input"),
            ));
        }
        let bins_y: Vec<_> = (0..sh).map(|i| adaptive_bin(i, h, sh)).collect();
        let bins_x: Vec<_> = (0..sw).map(|j| adaptive_bin(j, w, sw)).collect();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * sh * sw);
        for plane in xd.chunks(h * w) {
            for &(y0, y1) in &bins_y {
                for &(x0, x1) in &bins_x {
                    let mut acc = T::zero();
                    for yy in y0..y1 {
                        acc = acc + plane[yy * w + x0..yy * w + x1].iter().copied().sum::<T>();
                    }
                    out.push(acc / T::from_usize((y1 - y0) * (x1 - x0)).unwrap());
                }
            }
        }
        let value = Tensor::new(&[b, c, sh, sw], out)?;
        Ok(self.record("adaptive_avg_pool", value, &[x], move |g, _| {
            let mut dx = vec![T::zero(); b * c * h * w];
            for (plane, gplane) in dx.chunks_mut(h * w).zip(g.data().chunks(sh * sw)) {
                for (i, &(y0, y1)) in bins_y.iter().enumerate() {
                    for (j, &(x0, x1)) in bins_x.iter().enumerate() {
                        let share =
                            gplane[i * sw + j] / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                        for yy in y0..y1 {
                            plane[yy * w + x0..yy * w + x1]
                                .iter_mut()
                                .for_each(|v| *v = *v + share);
                        }
                    }
                }
            }
            vec![Some(Tensor::new(&[b, c, h, w], dx).unwrap())]
        }))
    }

    /// Bilinear resize with the half-pixel convention
    /// `src = (i + 0.5)·n_in/n_out − 0.5`, clamped to the input.
    pub fn resize_bilinear(&mut self, x: Var, out_hw: (usize, usize)) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = out_hw;
        if ho == 0 || wo == 0 {
            return Err(Error::shape("resize_bilinear", format!("target {ho}x{wo}")));
        }
        if (ho, wo) == (h, w) {
            return Ok(x);
        }
        let ty: Vec<(usize, usize, T)> = linear_taps(h, ho)
            .into_iter()
            .map(|(a, b, f)| (a, b, T::lit(f)))
            .collect();
        let tx: Vec<(usize, usize, T)> = linear_taps(w, wo)
            .into_iter()
            .map(|(a, b, f)| (a, b, T::lit(f)))
            .collect();
        let one = T::one();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        for plane in xd.chunks(h * w) {
            for &(y0, y1, fy) in &ty {
                let (r0, r1) = (&plane[y0 * w..(y0 + 1) * w], &plane[y1 * w..(y1 + 1) * w]);
                for &(x0, x1, fx) in &tx {
                    let top = r0[x0] * (one - fx) + r0[x1] * fx;
                    let bot = r1[x0] * (one - fx) + r1[x1] * fx;
                    out.push(top * (one - fy) + bot * fy);
                }
            }
        }
        let value = Tensor::new(&[b, c, ho, wo], out)?;
        Ok(self.record("resize_bilinear", value, &[x], move |g, _| {
            let mut dx = vec![T::zero(); b * c * h * w];
            for (plane, gplane) in dx.chunks_mut(h * w).zip(g.data().chunks(ho * wo)) {
                for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let gv = gplane[i * wo + j];
                        let (gt, gb) = (gv * (one - fy), gv * fy);
                        plane[y0 * w + x0] = plane[y0 * w + x0] + gt * (one - fx);
                        plane[y0 * w + x1] = plane[y0 * w + x1] + gt * fx;
                        plane[y1 * w + x0] = plane[y1 * w + x0] + gb * (one - fx);
                        plane[y1 * w + x1] = plane[y1 * w + x1] + gb * fx;
                    }
                }
            }
            vec![Some(Tensor::new(&[b, c, h, w], dx).unwrap())]
        }))
    }

    /// Per-pixel mean over channels: `(B, C, H, W) → (B, 1, H, W)`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let inv = T::one() / T::from_usize(c).unwrap();
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); b * plane];
        for bi in 0..b {
            for ci in 0..c {
                let src = &xd[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                out[bi * plane..(bi + 1) * plane]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(o, &v)| *o = *o + v);
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let value = Tensor::new(&[b, 1, h, w], out)?;
        Ok(self.record("channel_mean", value, &[x], move |g, _| {
            let gd = g.data();
            let dx = Tensor::from_fn(&[b, c, h, w], |i| {
                let (bi, p) = (i / (c * plane), i % plane);
                gd[bi * plane + p] * inv
            });
            vec![Some(dx)]
        }))
    }

    /// Per-pixel max over channels; the gradient goes to the first maximal channel.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let xd = self.value(x).data();
        let mut out = vec![T::neg_infinity(); b * plane];
        let mut arg = vec![0usize; b * plane];
        for bi in 0..b {
            for ci in 0..c {
                let src = &xd[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                for (p, &v) in src.iter().enumerate() {
                    let o = bi * plane + p;
                    if v > out[o] {
                        out[o] = v;
                        arg[o] = ci;
                    }
                }
            }
        }
        let value = Tensor::new(&[b, 1, h, w], out)?;
        Ok(self.record("channel_max", value, &[x], move |g, _| {
            let mut dx = vec![T::zero(); b * c * plane];
            for (o, (&a, &gv)) in arg.iter().zip(g.data()).enumerate() {
                let (bi, p) = (o / plane, o % plane);
                dx[(bi * c + a) * plane + p] = gv;
            }
            vec![Some(Tensor::new(&[b, c, h, w], dx).unwrap())]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_bins_of_4x4_grid() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64 + 1.0));
        let y = g.adaptive_avg_pool(x, (2, 2)).unwrap();
        assert_eq!(g.value(y).data(), &[3.5, 5.5, 11.5, 13.5]);
        let gap = g.adaptive_avg_pool(x, (1, 1)).unwrap();
        assert_eq!(g.value(gap).data(), &[8.5]);
        let same = g.adaptive_avg_pool(x, (4, 4)).unwrap();
        assert_eq!(g.value(same), g.value(x));
        assert!(g.adaptive_avg_pool(x, (5, 1)).is_err());
    }

    #[test]
    fn bilinear_half_pixel_row() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 1, 1, 2], &[0.0, 1.0]).unwrap());
        let y = g.resize_bilinear(x, (1, 4)).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 2, 3, 5], 5.0));
        for hw in [(1, 1), (7, 2), (16, 16)] {
            let y = g.resize_bilinear(x, hw).unwrap();
            assert!(g.value(y).data().iter().all(|&v| v == 5.0));
        }
    }

    #[test]
    fn channel_stats() {
        let mut g = Graph::<f64>::new();
        let x =
            g.constant(Tensor::from_f64(&[1, 3, 1, 2], &[1.0, -4.0, 3.0, 2.0, 2.0, 0.0]).unwrap());
        let m = g.channel_mean(x).unwrap();
        let mx = g.channel_max(x).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, -2.0 / 3.0]);
        assert_eq!(g.value(mx).data(), &[3.0, 2.0]);
    }
}
