//! 2-D convolution and its adjoint via im2col + gemm.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::scalar::{gemm, MatRef};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Stride, zero padding and dilation of a 2-D convolution, `(vertical, horizontal)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
        }
    }
}

impl ConvGeometry {
    pub fn same(kernel: usize) -> Self {
        let p = (kernel - 1) / 2;
        ConvGeometry {
            padding: (p, p),
            ..Default::default()
        }
    }

    pub fn stride(s: usize) -> Self {
        ConvGeometry {
            stride: (s, s),
            ..Default::default()
        }
    }

    pub fn dilated(rate: usize) -> Self {
        ConvGeometry {
            padding: (rate, rate),
            dilation: (rate, rate),
            ..Default::default()
        }
    }

    pub fn with_padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    /// `floor((n + 2p − d·(k−1) − 1)/s) + 1` per axis; `None` when non-positive.
    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let axis = |n: usize, k: usize, s: usize, p: usize, d: usize| -> Option<usize> {
            let span = (n + 2 * p) as isize - (d * (k - 1)) as isize - 1;
            if span < 0 || s == 0 {
                None
            } else {
                Some(span as usize / s + 1)
            }
        };
        Some((
            axis(h, kh, self.stride.0, self.padding.0, self.dilation.0)?,
            axis(w, kw, self.stride.1, self.padding.1, self.dilation.1)?,
        ))
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == (1, 1) && self.padding == (0, 0)
    }
}

/// Spatial layout shared by im2col/col2im for one batch item.
#[derive(Clone, Copy)]
struct Patches {
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeometry,
}

impl Patches {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Visit `(col_row, col_col, image_offset)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let ConvGeometry {
            stride: (sh, sw),
            padding: (ph, pw),
            dilation: (dh, dw),
        } = self.geom;
        let n = self.cols();
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let base = row * n;
                    for oy in 0..self.ho {
                        let iy = (oy * sh + ki * dh) as isize - ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let img_row = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * sw + kj * dw) as isize - pw as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(base + oy * self.wo + ox, img_row + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        cols.iter_mut().for_each(|v| *v = T::zero());
        self.for_each_tap(|ci, ii| cols[ci] = image[ii]);
    }

    /// Scatter-add columns back into a zero-initialised image.
    fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        self.for_each_tap(|ci, ii| image[ii] = image[ii] + cols[ci]);
    }
}

fn check_bias<T: Scalar>(
    g: &Graph<T>,
    bias: Option<Var>,
    cout: usize,
    op: &'static str,
) -> Result<()> {
    if let Some(b) = bias {
        if g.shape(b) != [cout] {
            return Err(Error::shape(
                op,
                format!("bias shape {:?}, expected [{cout}]", g.shape(b)),
            ));
        }
    }
    Ok(())
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn bias_grad<T: Scalar>(g: &Tensor<T>, cout: usize, plane: usize) -> Tensor<T> {
    let mut acc = vec![T::zero(); cout];
    for (i, chunk) in g.data().chunks(plane).enumerate() {
        acc[i % cout] = acc[i % cout] + chunk.iter().copied().sum();
    }
    Tensor::new(&[cout], acc).unwrap()
}

impl<T: Scalar> Graph<T> {
    /// Cross-correlation with zero padding. `weight` is `[Cout, Cin, kh, kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let (b, cin, h, w) = self.value(input).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, kernel expects {wcin}"),
            ));
        }
        check_bias(self, bias, cout, "conv2d")?;
        let (ho, wo) = geom.output_size(h, w, kh, kw).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("non-positive output for {h}x{w} input, kernel {kh}x{kw}, {geom:?}"),
            )
        })?;
        let p = Patches {
            channels: cin,
            h,
            w,
            kh,
            kw,
            ho,
            wo,
            geom,
        };
        let pointwise = geom.is_pointwise(kh, kw);

        let x = self.value(input).clone();
        let wt = self.value(weight).clone();
        let in_plane = cin * h * w;
        let out_plane = cout * ho * wo;
        let mut out = vec![T::zero(); b * out_plane];
        out.par_chunks_mut(out_plane)
            .enumerate()
            .for_each(|(bi, o)| {
                let img = &x.data()[bi * in_plane..(bi + 1) * in_plane];
                let wm = MatRef::new(wt.data(), cout, p.rows());
                if pointwise {
                    gemm(wm, MatRef::new(img, cin, h * w), o, false);
                } else {
                    let mut cols = vec![T::zero(); p.rows() * p.cols()];
                    p.im2col(img, &mut cols);
                    gemm(wm, MatRef::new(&cols, p.rows(), p.cols()), o, false);
                }
            });
        if let Some(bv) = bias {
            add_bias(&mut out, self.value(bv).data(), ho * wo);
        }
        let value = Tensor::new(&[b, cout, ho, wo], out)?;

        let parents: Vec<Var> = std::iter::once(input)
            .chain(Some(weight))
            .chain(bias)
            .collect();
        Ok(self.record("conv2d", value, &parents, move |g, need| {
            let gd = g.data();
            let wm = MatRef::new(wt.data(), cout, p.rows());
            let dx = need[0].then(|| {
                let mut dx = vec![T::zero(); b * in_plane];
                dx.par_chunks_mut(in_plane)
                    .enumerate()
                    .for_each(|(bi, dxi)| {
                        let gb =
                            MatRef::new(&gd[bi * out_plane..(bi + 1) * out_plane], cout, ho * wo);
                        if pointwise {
                            gemm(wm.t(), gb, dxi, false);
                        } else {
                            let mut dcols = vec![T::zero(); p.rows() * p.cols()];
                            gemm(wm.t(), gb, &mut dcols, false);
                            p.col2im(&dcols, dxi);
                        }
                    });
                Tensor::new(&[b, cin, h, w], dx).unwrap()
            });
            let dw = need[1].then(|| {
                let mut dw = vec![T::zero(); cout * p.rows()];
                let mut cols = if pointwise {
                    Vec::new()
                } else {
                    vec![T::zero(); p.rows() * p.cols()]
                };
                for bi in 0..b {
                    let img = &x.data()[bi * in_plane..(bi + 1) * in_plane];
                    let gb = MatRef::new(&gd[bi * out_plane..(bi + 1) * out_plane], cout, ho * wo);
                    if pointwise {
                        gemm(gb, MatRef::new(img, cin, h * w).t(), &mut dw, bi > 0);
                    } else {
                        p.im2col(img, &mut cols);
                        gemm(
                            gb,
                            MatRef::new(&cols, p.rows(), p.cols()).t(),
                            &mut dw,
                            bi > 0,
                        );
                    }
                }
                Tensor::new(&[cout, cin, kh, kw], dw).unwrap()
            });
            let mut grads = vec![dx, dw];
            if need.len() > 2 {
                grads.push(need[2].then(|| bias_grad(g, cout, ho * wo)));
            }
            grads
        }))
    }

    /// Transposed convolution (the adjoint of `conv2d` with the same stride and
    /// padding, dilation 1). `weight` is `[Cin, Cout, kh, kw]`;
    /// `Hout = (H−1)·s − 2p + k`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let (b, cin, h, w) = self.value(input).dims4()?;
        let (wcin, cout, kh, kw) = self.value(weight).dims4()?;
        if wcin != cin {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input has {cin} channels, kernel expects {wcin}"),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::shape("conv_transpose2d", "stride must be >= 1"));
        }
        check_bias(self, bias, cout, "conv_transpose2d")?;
        let ho = (h - 1) as isize * stride.0 as isize - 2 * padding.0 as isize + kh as isize;
        let wo = (w - 1) as isize * stride.1 as isize - 2 * padding.1 as isize + kw as isize;
        if ho < 1 || wo < 1 {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("non-positive output {ho}x{wo} for {h}x{w} input"),
            ));
        }
        let (ho, wo) = (ho as usize, wo as usize);
        let geom = ConvGeometry {
            stride,
            padding,
            dilation: (1, 1),
        };
        // Patches over the *output* image; its conv output grid is the input grid.
        let p = Patches {
            channels: cout,
            h: ho,
            w: wo,
            kh,
            kw,
            ho: h,
            wo: w,
            geom,
        };

        let x = self.value(input).clone();
        let wt = self.value(weight).clone();
        let in_plane = cin * h * w;
        let out_plane = cout * ho * wo;
        let mut out = vec![T::zero(); b * out_plane];
        out.par_chunks_mut(out_plane)
            .enumerate()
            .for_each(|(bi, o)| {
                let xb = MatRef::new(&x.data()[bi * in_plane..(bi + 1) * in_plane], cin, h * w);
                let mut cols = vec![T::zero(); p.rows() * p.cols()];
                gemm(
                    MatRef::new(wt.data(), cin, p.rows()).t(),
                    xb,
                    &mut cols,
                    false,
                );
                p.col2im(&cols, o);
            });
        if let Some(bv) = bias {
            add_bias(&mut out, self.value(bv).data(), ho * wo);
        }
        let value = Tensor::new(&[b, cout, ho, wo], out)?;

        let parents: Vec<Var> = std::iter::once(input)
            .chain(Some(weight))
            .chain(bias)
            .collect();
        Ok(
            self.record("conv_transpose2d", value, &parents, move |g, need| {
                let gd = g.data();
                let wm = MatRef::new(wt.data(), cin, p.rows());
                let dx = need[0].then(|| {
                    let mut dx = vec![T::zero(); b * in_plane];
                    dx.par_chunks_mut(in_plane)
                        .enumerate()
                        .for_each(|(bi, dxi)| {
                            let mut dcols = vec![T::zero(); p.rows() * p.cols()];
                            p.im2col(&gd[bi * out_plane..(bi + 1) * out_plane], &mut dcols);
                            gemm(wm, MatRef::new(&dcols, p.rows(), p.cols()), dxi, false);
                        });
                    Tensor::new(&[b, cin, h, w], dx).unwrap()
                });
                let dw = need[1].then(|| {
                    let mut dw = vec![T::zero(); cin * p.rows()];
                    let mut dcols = vec![T::zero(); p.rows() * p.cols()];
                    for bi in 0..b {
                        p.im2col(&gd[bi * out_plane..(bi + 1) * out_plane], &mut dcols);
                        let xb =
                            MatRef::new(&x.data()[bi * in_plane..(bi + 1) * in_plane], cin, h * w);
                        gemm(
                            xb,
                            MatRef::new(&dcols, p.rows(), p.cols()).t(),
                            &mut dw,
                            bi > 0,
                        );
                    }
                    Tensor::new(&[cin, cout, kh, kw], dw).unwrap()
                });
                let mut grads = vec![dx, dw];
                if need.len() > 2 {
                    grads.push(need[2].then(|| bias_grad(g, cout, ho * wo)));
                }
                grads
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_formula() {
        let g = ConvGeometry {
            stride: (2, 2),
            padding: (1, 1),
            dilation: (1, 1),
        };
        assert_eq!(g.output_size(256, 256, 3, 3), Some((128, 128)));
        assert_eq!(ConvGeometry::default().output_size(2, 2, 3, 3), None);
        assert_eq!(
            ConvGeometry::dilated(18).output_size(8, 8, 3, 3),
            Some((8, 8))
        );
    }

    #[test]
    fn identity_scaled_kernel() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, Some(b), ConvGeometry::default()).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
        assert!(matches!(
            g.conv2d(x, w, None, ConvGeometry::default()),
            Err(Error::Shape { .. })
        ));
        let w = g.constant(Tensor::zeros(&[2, 3, 5, 5]));
        assert!(g.conv2d(x, w, None, ConvGeometry::default()).is_err());
    }

    #[test]
    fn transposed_shape_and_bias() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let w = g.constant(Tensor::full(&[1, 1, 2, 2], 0.3));
        let b = g.constant(Tensor::full(&[1], 0.25));
        let y = g.conv_transpose2d(x, w, Some(b), (2, 2), (0, 0)).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 8, 8]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.25));
    }
}
