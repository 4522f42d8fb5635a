//! Cross-attention fusion of the two context streams, bottleneck compression,
//! and combined channel/spatial recalibration.

use std::sync::Arc;

use crate::config::{CombineMode, FusionConfig};
use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::numerics::{ConvGeometry, Graph, Scalar, Var};
use crate::params::{Bound, Init, ParamId, ParamLayout};

/// Channel concatenation with the ASPP stream first.
pub fn fuse_concat<T: Scalar>(g: &mut Graph<T>, x_aspp: Var, x_psp: Var) -> Result<Var> {
    let (a, b) = (g.value(x_aspp).dims4()?, g.value(x_psp).dims4()?);
    if (a.0, a.2, a.3) != (b.0, b.2, b.3) {
        return Err(Error::shape(
            "fuse_concat",
            format!(
                "ASPP map {:?} and PSP map {:?} differ outside the channel axis",
                g.shape(x_aspp),
                g.shape(x_psp)
            ),
        ));
    }
    g.concat(&[x_aspp, x_psp], 1)
}

/// Gather index `(B, heads·dk, T)` → `(B·heads, T, dk)`.
fn split_heads_index(b: usize, heads: usize, dk: usize, tokens: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(b * heads * dk * tokens);
    for bi in 0..b {
        for h in 0..heads {
            for t in 0..tokens {
                idx.extend((0..dk).map(|e| (bi * heads * dk + h * dk + e) * tokens + t));
            }
        }
    }
    idx
}

/// Gather index `(B·heads, T, dk)` → `(B, heads·dk, T)`.
fn merge_heads_index(b: usize, heads: usize, dk: usize, tokens: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(b * heads * dk * tokens);
    for bi in 0..b {
        for h in 0..heads {
            for e in 0..dk {
                idx.extend((0..tokens).map(|t| ((bi * heads + h) * tokens + t) * dk + e));
            }
        }
    }
    idx
}

/// Multi-head attention with queries from the fused map and keys/values from the
/// PSP map, every pixel a token, plus a residual connection to the queries.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub o: Conv2d,
    pub heads: usize,
    pub d_model: usize,
    pub max_tokens: usize,
}

impl CrossAttention {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        query_channels: usize,
        context_channels: usize,
        cfg: &FusionConfig,
    ) -> Result<Self> {
        if cfg.heads == 0 || !cfg.d_model.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!(
                "fusion.d_model {} is not divisible by fusion.heads {}",
                cfg.d_model, cfg.heads
            )));
        }
        Ok(CrossAttention {
            q: Conv2d::pointwise(layout, &format!("{name}.q"), query_channels, cfg.d_model),
            k: Conv2d::pointwise(layout, &format!("{name}.k"), context_channels, cfg.d_model),
            v: Conv2d::pointwise(layout, &format!("{name}.v"), context_channels, cfg.d_model),
            o: Conv2d::pointwise(layout, &format!("{name}.o"), cfg.d_model, query_channels),
            heads: cfg.heads,
            d_model: cfg.d_model,
            max_tokens: cfg.max_tokens,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x_cat: Var,
        x_psp: Var,
    ) -> Result<Var> {
        let (b, _, h, w) = g.value(x_cat).dims4()?;
        let ctx = g.value(x_psp).dims4()?;
        if (ctx.0, ctx.2, ctx.3) != (b, h, w) {
            return Err(Error::shape(
                "cross_attention",
                format!(
                    "query map {:?} and context map {:?} disagree",
                    g.shape(x_cat),
                    g.shape(x_psp)
                ),
            ));
        }
        let tokens = h * w;
        if tokens > self.max_tokens {
            return Err(Error::Config(format!(
                "cross-attention over {h}x{w} = {tokens} tokens exceeds fusion.max_tokens = {}; \
                 use a smaller tile and run windowed (tiled) inference, or raise the cap",
                self.max_tokens
            )));
        }
        let (heads, dk) = (self.heads, self.d_model / self.heads);
        let split = Arc::new(split_heads_index(b, heads, dk, tokens));
        let per_head = |g: &mut Graph<T>, conv: &Conv2d, x: Var| -> Result<Var> {
            let y = conv.forward(g, p, x)?;
            g.gather("split_heads", y, split.clone(), &[b * heads, tokens, dk])
        };
        let q = per_head(g, &self.q, x_cat)?;
        let k = per_head(g, &self.k, x_psp)?;
        let v = per_head(g, &self.v, x_psp)?;
        let q = g.scale(q, T::lit(1.0 / (dk as f64).sqrt()));
        let scores = g.bmm(q, k, true)?;
        let attn = g.softmax(scores);
        let out = g.bmm(attn, v, false)?;
        let out = g.gather(
            "merge_heads",
            out,
            Arc::new(merge_heads_index(b, heads, dk, tokens)),
            &[b, self.d_model, h, w],
        )?;
        let out = self.o.forward(g, p, out)?;
        g.add(x_cat, out)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let t = h * w;
        self.q.macs(h, w)
            + self.k.macs(h, w)
            + self.v.macs(h, w)
            + self.o.macs(h, w)
            + 2 * (t * t * self.d_model) as u64
    }
}

/// `1×1 → ReLU → 3×3 → ReLU → 1×1 → ReLU`, returning to the input width.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub reduce: Conv2d,
    pub mix: Conv2d,
    pub expand: Conv2d,
}

impl Bottleneck {
    pub fn new(layout: &mut ParamLayout, name: &str, channels: usize, inner: usize) -> Self {
        Bottleneck {
            reduce: Conv2d::pointwise(layout, &format!("{name}.reduce"), channels, inner),
            mix: Conv2d::new(
                layout,
                &format!("{name}.mix"),
                inner,
                inner,
                3,
                ConvGeometry::same(3),
                true,
            ),
            expand: Conv2d::pointwise(layout, &format!("{name}.expand"), inner, channels),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut y = x;
        for conv in [&self.reduce, &self.mix, &self.expand] {
            y = conv.forward(g, p, y)?;
            y = g.relu(y);
        }
        Ok(y)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.reduce.macs(h, w) + self.mix.macs(h, w) + self.expand.macs(h, w)
    }
}

/// Channel map (ECA) and spatial map (mean/max → conv), applied with a residual.
#[derive(Debug, Clone)]
pub struct CombinedAttention {
    /// `(1, 1, k, 1)` kernel sliding along the channel axis.
    pub eca_weight: ParamId,
    pub eca_kernel: usize,
    /// `(1, 2, k, k)` kernel over the stacked mean and max maps.
    pub sa_weight: ParamId,
    pub sa_kernel: usize,
    pub combine: CombineMode,
}

impl CombinedAttention {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        eca_kernel: usize,
        cfg: &FusionConfig,
    ) -> Self {
        let sa = cfg.sa_kernel;
        CombinedAttention {
            eca_weight: layout.register(
                format!("{name}.eca.weight"),
                &[1, 1, eca_kernel, 1],
                Init::KaimingUniform { fan_in: eca_kernel },
            ),
            eca_kernel,
            sa_weight: layout.register(
                format!("{name}.spatial.weight"),
                &[1, 2, sa, sa],
                Init::KaimingUniform {
                    fan_in: 2 * sa * sa,
                },
            ),
            sa_kernel: sa,
            combine: cfg.combine,
        }
    }

    /// `(B, C, H, W)` → channel weights `(B, C, 1, 1)` in (0, 1).
    pub fn channel_map<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        let (b, c, _, _) = g.value(z).dims4()?;
        let pooled = g.adaptive_avg_pool(z, (1, 1))?;
        let column = g.reshape(pooled, &[b, 1, c, 1])?;
        let pad = (self.eca_kernel - 1) / 2;
        let geom = ConvGeometry {
            padding: (pad, 0),
            ..Default::default()
        };
        let mixed = g.conv2d(column, p[self.eca_weight], None, geom)?;
        let weights = g.sigmoid(mixed);
        g.reshape(weights, &[b, c, 1, 1])
    }

    /// `(B, C, H, W)` → spatial weights `(B, 1, H, W)` in (0, 1).
    pub fn spatial_map<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        let mean = g.channel_mean(z)?;
        let max = g.channel_max(z)?;
        let stacked = g.concat(&[mean, max], 1)?;
        let y = g.conv2d(
            stacked,
            p[self.sa_weight],
            None,
            ConvGeometry::same(self.sa_kernel),
        )?;
        Ok(g.sigmoid(y))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        let a_c = self.channel_map(g, p, z)?;
        let a_s = self.spatial_map(g, p, z)?;
        apply_maps(g, z, a_c, a_s, self.combine)
    }

    pub fn macs(&self, c: usize, h: usize, w: usize) -> u64 {
        (c * self.eca_kernel + 2 * self.sa_kernel * self.sa_kernel * h * w) as u64
    }
}

/// Residual recalibration of `z` by a channel map `(B, C, 1, 1)` and a spatial map `(B, 1, H, W)`.
pub fn apply_maps<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    a_c: Var,
    a_s: Var,
    mode: CombineMode,
) -> Result<Var> {
    let scaled = match mode {
        CombineMode::Maps => {
            let zc = g.mul(z, a_c)?;
            g.mul(zc, a_s)?
        }
        CombineMode::Separate => {
            let zc = g.mul(z, a_c)?;
            let zs = g.mul(z, a_s)?;
            g.mul(zc, zs)?
        }
    };
    g.add(scaled, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn head_split_and_merge_are_inverse() {
        let (b, heads, dk, t) = (2, 3, 2, 5);
        let split = split_heads_index(b, heads, dk, t);
        let merge = merge_heads_index(b, heads, dk, t);
        for (i, &m) in merge.iter().enumerate() {
            assert_eq!(split[m], i);
        }
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut g = Graph::<f32>::inference();
        let a = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let b = g.constant(Tensor::zeros(&[1, 3, 5, 4]));
        assert!(fuse_concat(&mut g, a, b).is_err());
        let c = g.constant(Tensor::full(&[1, 3, 4, 4], 1.0));
        let y = fuse_concat(&mut g, a, c).unwrap();
        assert_eq!(g.shape(y), &[1, 5, 4, 4]);
    }

    #[test]
    fn half_maps_scale_by_one_and_a_quarter() {
        let mut g = Graph::<f64>::inference();
        let z = g.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64 - 3.0));
        let a_c = g.constant(Tensor::full(&[1, 2, 1, 1], 0.5));
        let a_s = g.constant(Tensor::full(&[1, 1, 2, 2], 0.5));
        let y = apply_maps(&mut g, z, a_c, a_s, CombineMode::Maps).unwrap();
        for (o, i) in g.value(y).data().iter().zip(g.value(z).data()) {
            assert_eq!(*o, 1.25 * i);
        }
    }
}
