//! Hierarchical shifted-window transformer encoder producing the four-level pyramid.

use std::sync::Arc;

use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, LayerNorm, Linear, LINEAR_INIT_STD};
use crate::numerics::ops::GATHER_ZERO;
use crate::numerics::{ConvGeometry, Graph, Scalar, Tensor, Var};
use crate::params::{Bound, Init, ParamId, ParamLayout};

/// Additive attention mask value for disallowed (wrapped or padded) key positions.
const MASK_VALUE: f64 = -100.0;

/// Encoder outputs `f1..f4` as `(B, C_i, H_i, W_i)` graph values.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
    /// Input size after padding to a multiple of the patch size.
    pub padded_input: (usize, usize),
}

/// Token grid of one attention layer, with the window padding and cyclic shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGrid {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub window: usize,
    pub shift: usize,
}

impl WindowGrid {
    pub fn padded(&self) -> (usize, usize) {
        (
            self.h.div_ceil(self.window) * self.window,
            self.w.div_ceil(self.window) * self.window,
        )
    }

    pub fn windows(&self) -> (usize, usize) {
        let (hp, wp) = self.padded();
        (hp / self.window, wp / self.window)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    fn source(&self, py: usize, px: usize) -> Option<(usize, usize)> {
        let (hp, wp) = self.padded();
        let sy = (py + self.shift) % hp;
        let sx = (px + self.shift) % wp;
        (sy < self.h && sx < self.w).then_some((sy, sx))
    }

    /// Gather index from `(B, H, W, C)` tokens to `(B·nW, w², C)` windows of the
    /// padded, cyclically shifted grid.
    pub fn partition_index(&self) -> Vec<usize> {
        let (nwy, nwx) = self.windows();
        let (win, c) = (self.window, self.channels);
        let mut index = Vec::with_capacity(self.batch * nwy * nwx * win * win * c);
        for b in 0..self.batch {
            for wy in 0..nwy {
                for wx in 0..nwx {
                    for ty in 0..win {
                        for tx in 0..win {
                            match self.source(wy * win + ty, wx * win + tx) {
                                Some((sy, sx)) => {
                                    let base = ((b * self.h + sy) * self.w + sx) * c;
                                    index.extend(base..base + c);
                                }
                                None => index.extend(std::iter::repeat_n(GATHER_ZERO, c)),
                            }
                        }
                    }
                }
            }
        }
        index
    }

    /// Inverse of [`Self::partition_index`] restricted to the unpadded tokens.
    pub fn reverse_index(&self) -> Vec<usize> {
        let (hp, wp) = self.padded();
        let (_, nwx) = self.windows();
        let (nwy, _) = self.windows();
        let (win, c) = (self.window, self.channels);
        let n = win * win;
        let mut index = Vec::with_capacity(self.batch * self.h * self.w * c);
        for b in 0..self.batch {
            for y in 0..self.h {
                let ry = (y + hp - self.shift) % hp;
                for x in 0..self.w {
                    let rx = (x + wp - self.shift) % wp;
                    let widx = (b * nwy + ry / win) * nwx + rx / win;
                    let base = (widx * n + (ry % win) * win + rx % win) * c;
                    index.extend(base..base + c);
                }
            }
        }
        index
    }

    /// `(1, nW, 1, w², w²)` additive mask, or `None` when every window is
    /// contiguous and unpadded.
    pub fn attention_mask<T: Scalar>(&self) -> Option<Tensor<T>> {
        let (hp, wp) = self.padded();
        if self.shift == 0 && (hp, wp) == (self.h, self.w) {
            return None;
        }
        let (nwy, nwx) = self.windows();
        let win = self.window;
        let n = win * win;
        let region = |p: usize, size: usize| -> usize {
            if self.shift == 0 || p < size - win {
                0
            } else if p < size - self.shift {
                1
            } else {
                2
            }
        };
        let mut mask = Vec::with_capacity(nwy * nwx * n * n);
        for wy in 0..nwy {
            for wx in 0..nwx {
                let info: Vec<(usize, bool)> = (0..n)
                    .map(|t| {
                        let (py, px) = (wy * win + t / win, wx * win + t % win);
                        (
                            region(py, hp) * 3 + region(px, wp),
                            self.source(py, px).is_some(),
                        )
                    })
                    .collect();
                for &(ri, _) in &info {
                    for &(rj, valid) in &info {
                        let allowed = ri == rj && valid;
                        mask.push(if allowed {
                            T::zero()
                        } else {
                            T::lit(MASK_VALUE)
                        });
                    }
                }
            }
        }
        Some(Tensor::new(&[1, nwy * nwx, 1, n, n], mask).expect("mask shape"))
    }
}

/// `(2w−1)²`-entry table index for every (query, key) pair of a window.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let n = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dy = (i / window) + window - 1 - (j / window);
            let dx = (i % window) + window - 1 - (j % window);
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Multi-head self-attention inside (optionally shifted) windows.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub relative_bias: Option<ParamId>,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
}

impl WindowAttention {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        rel_bias: bool,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: width {dim} not divisible by {heads} heads"
            )));
        }
        let qkv = Linear::new(layout, &format!("{name}.qkv"), dim, 3 * dim, true);
        let relative_bias = rel_bias.then(|| {
            let span = 2 * window - 1;
            layout.register(
                format!("{name}.relative_position_bias_table"),
                &[span * span, heads],
                Init::TruncNormal {
                    std: LINEAR_INIT_STD,
                },
            )
        });
        let proj = Linear::new(layout, &format!("{name}.proj"), dim, dim, true);
        Ok(WindowAttention {
            qkv,
            proj,
            relative_bias,
            dim,
            heads,
            window,
        })
    }

    /// `x` is `(B, H, W, C)`; returns the same shape.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        shifted: bool,
    ) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, h, w, c) = match s[..] {
            [b, h, w, c] if c == self.dim => (b, h, w, c),
            _ => {
                return Err(Error::shape(
                    "window_attention",
                    format!("tokens {s:?}, width {}", self.dim),
                ))
            }
        };
        let grid = WindowGrid {
            batch: b,
            h,
            w,
            channels: c,
            window: self.window,
            shift: if shifted { self.window / 2 } else { 0 },
        };
        let (nwy, nwx) = grid.windows();
        let nw = nwy * nwx;
        let n = grid.tokens_per_window();
        let heads = self.heads;
        let hd = c / heads;
        let bw = b * nw;

        let windows = g.gather(
            "window_partition",
            x,
            Arc::new(grid.partition_index()),
            &[bw, n, c],
        )?;
        let qkv = self.qkv.forward(g, p, windows)?;
        let split = |part: usize| -> Vec<usize> {
            let mut idx = Vec::with_capacity(bw * n * c);
            for wi in 0..bw {
                for hh in 0..heads {
                    for t in 0..n {
                        let base = (wi * n + t) * 3 * c + part * c + hh * hd;
                        idx.extend(base..base + hd);
                    }
                }
            }
            idx
        };
        let q = g.gather("split_heads", qkv, Arc::new(split(0)), &[bw * heads, n, hd])?;
        let k = g.gather("split_heads", qkv, Arc::new(split(1)), &[bw * heads, n, hd])?;
        let v = g.gather("split_heads", qkv, Arc::new(split(2)), &[bw * heads, n, hd])?;
        let q = g.scale(q, T::lit(1.0 / (hd as f64).sqrt()));
        let scores = g.bmm(q, k, true)?;
        let mut scores = g.reshape(scores, &[b, nw, heads, n, n])?;
        if let Some(table) = self.relative_bias {
            let rel = relative_position_index(self.window);
            let mut idx = Vec::with_capacity(heads * n * n);
            for hh in 0..heads {
                idx.extend(rel.iter().map(|&r| r * heads + hh));
            }
            let bias = g.gather(
                "relative_position_bias",
                p[table],
                Arc::new(idx),
                &[1, 1, heads, n, n],
            )?;
            scores = g.add(scores, bias)?;
        }
        if let Some(mask) = grid.attention_mask::<T>() {
            let m = g.constant(mask);
            scores = g.add(scores, m)?;
        }
        let attn = g.softmax(scores);
        let attn = g.reshape(attn, &[bw * heads, n, n])?;
        let out = g.bmm(attn, v, false)?;
        let mut merge = Vec::with_capacity(bw * n * c);
        for wi in 0..bw {
            for t in 0..n {
                for hh in 0..heads {
                    let base = ((wi * heads + hh) * n + t) * hd;
                    merge.extend(base..base + hd);
                }
            }
        }
        let out = g.gather("merge_heads", out, Arc::new(merge), &[bw, n, c])?;
        let out = self.proj.forward(g, p, out)?;
        g.gather(
            "window_reverse",
            out,
            Arc::new(grid.reverse_index()),
            &[b, h, w, c],
        )
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        let grid = WindowGrid {
            batch: 1,
            h,
            w,
            channels: self.dim,
            window: self.window,
            shift: 0,
        };
        let (hp, wp) = grid.padded();
        let tokens = hp * wp;
        let n = grid.tokens_per_window();
        self.qkv.macs(tokens) + 2 * (tokens * n * self.dim) as u64 + self.proj.macs(tokens)
    }
}

#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub shifted: bool,
}

impl SwinBlock {
    fn new(
        layout: &mut ParamLayout,
        name: &str,
        dim: usize,
        heads: usize,
        cfg: &EncoderConfig,
        shifted: bool,
    ) -> Result<Self> {
        Ok(SwinBlock {
            norm1: LayerNorm::new(layout, &format!("{name}.norm1"), dim),
            attn: WindowAttention::new(
                layout,
                &format!("{name}.attn"),
                dim,
                heads,
                cfg.window,
                cfg.relative_position_bias,
            )?,
            norm2: LayerNorm::new(layout, &format!("{name}.norm2"), dim),
            fc1: Linear::new(
                layout,
                &format!("{name}.mlp.fc1"),
                dim,
                dim * cfg.mlp_ratio,
                true,
            ),
            fc2: Linear::new(
                layout,
                &format!("{name}.mlp.fc2"),
                dim * cfg.mlp_ratio,
                dim,
                true,
            ),
            shifted,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x);
        // a single window covering the whole grid gains nothing from shifting
        let shift = self.shifted && (s[1] > self.attn.window || s[2] > self.attn.window);
        let h = self.norm1.forward(g, p, x)?;
        let a = self.attn.forward(g, p, h, shift)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, p, x)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, p, h)?;
        g.add(x, h)
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.attn.macs(h, w) + self.fc1.macs(h * w) + self.fc2.macs(h * w)
    }
}

/// 2×2 neighbourhood concat → layer norm → linear `4C → 2C`.
#[derive(Debug, Clone)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
    pub dim: usize,
}

impl PatchMerging {
    pub fn new(layout: &mut ParamLayout, name: &str, dim: usize) -> Self {
        PatchMerging {
            norm: LayerNorm::new(layout, &format!("{name}.norm"), 4 * dim),
            reduction: Linear::new(
                layout,
                &format!("{name}.reduction"),
                4 * dim,
                2 * dim,
                false,
            ),
            dim,
        }
    }

    /// Gather index `(B, H, W, C) → (B, ⌈H/2⌉, ⌈W/2⌉, 4C)` with zero padding of odd sizes.
    /// Neighbour order: (0,0), (1,0), (0,1), (1,1) as (row, col) offsets.
    pub fn gather_index(b: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let mut index = Vec::with_capacity(b * ho * wo * 4 * c);
        for bi in 0..b {
            for y in 0..ho {
                for x in 0..wo {
                    for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        let (sy, sx) = (2 * y + dy, 2 * x + dx);
                        if sy < h && sx < w {
                            let base = ((bi * h + sy) * w + sx) * c;
                            index.extend(base..base + c);
                        } else {
                            index.extend(std::iter::repeat_n(GATHER_ZERO, c));
                        }
                    }
                }
            }
        }
        index
    }

    /// `(B, H, W, C) → (B, ⌈H/2⌉, ⌈W/2⌉, 2C)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, h, w, c) = match s[..] {
            [b, h, w, c] if c == self.dim => (b, h, w, c),
            _ => {
                return Err(Error::shape(
                    "patch_merging",
                    format!("tokens {s:?}, width {}", self.dim),
                ))
            }
        };
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let x = g.gather(
            "patch_merge",
            x,
            Arc::new(Self::gather_index(b, h, w, c)),
            &[b, ho, wo, 4 * c],
        )?;
        let x = self.norm.forward(g, p, x)?;
        self.reduction.forward(g, p, x)
    }

    /// Same operation on a channel-first map: `(B, C, H, W) → (B, 2C, ⌈H/2⌉, ⌈W/2⌉)`.
    pub fn forward_nchw<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let t = g.permute(x, &[0, 2, 3, 1])?;
        let y = self.forward(g, p, t)?;
        g.permute(y, &[0, 3, 1, 2])
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.reduction.macs(h.div_ceil(2) * w.div_ceil(2))
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub blocks: Vec<SwinBlock>,
    /// Only on the levels the context modules read; a norm on the others
    /// would never receive a gradient.
    pub out_norm: Option<LayerNorm>,
    pub merge: Option<PatchMerging>,
    pub dim: usize,
}

/// Patch embedding, four stages of windowed blocks, and patch merging between them.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Conv2d,
    pub embed_norm: LayerNorm,
    pub stages: Vec<Stage>,
}

/// Smallest accepted input side.
pub const MIN_INPUT_SIDE: usize = 32;

impl Encoder {
    pub fn new(layout: &mut ParamLayout, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let dims = cfg.channels();
        let ps = cfg.patch_size;
        let patch_embed = Conv2d::new(
            layout,
            &format!("{name}.patch_embed.proj"),
            cfg.in_channels,
            dims[0],
            ps,
            ConvGeometry::stride(ps),
            true,
        );
        let embed_norm = LayerNorm::new(layout, &format!("{name}.patch_embed.norm"), dims[0]);
        let mut stages = Vec::with_capacity(4);
        for (i, &dim) in dims.iter().enumerate() {
            let blocks = (0..cfg.depths[i])
                .map(|j| {
                    SwinBlock::new(
                        layout,
                        &format!("{name}.stages.{i}.blocks.{j}"),
                        dim,
                        cfg.heads[i],
                        cfg,
                        cfg.shift && j % 2 == 1,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let out_norm =
                (i >= 2).then(|| LayerNorm::new(layout, &format!("{name}.norm{i}"), dim));
            let merge = (i < 3)
                .then(|| PatchMerging::new(layout, &format!("{name}.stages.{i}.downsample"), dim));
            stages.push(Stage {
                blocks,
                out_norm,
                merge,
                dim,
            });
        }
        Ok(Encoder {
            cfg: cfg.clone(),
            patch_embed,
            embed_norm,
            stages,
        })
    }

    /// Spatial sizes `(H_i, W_i)` of the four pyramid levels for an `h0 × w0` input.
    pub fn level_sizes(&self, h0: usize, w0: usize) -> [(usize, usize); 4] {
        let ps = self.cfg.patch_size;
        let mut hw = (h0.div_ceil(ps), w0.div_ceil(ps));
        let mut out = [(0, 0); 4];
        for slot in out.iter_mut() {
            *slot = hw;
            hw = (hw.0.div_ceil(2), hw.1.div_ceil(2));
        }
        out
    }

    pub fn check_input(&self, h0: usize, w0: usize) -> Result<()> {
        if h0 < MIN_INPUT_SIDE || w0 < MIN_INPUT_SIDE {
            return Err(Error::Config(format!(
                "input {h0}x{w0} is smaller than the {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE} minimum of the encoder"
            )));
        }
        let (g1h, g1w) = self.level_sizes(h0, w0)[0];
        let side = g1h.min(g1w);
        if side < self.cfg.window {
            return Err(Error::Config(format!(
                "input {h0}x{w0} gives a {g1h}x{g1w} token grid, smaller than window {}; use encoder.window = {side} or a larger input",
                self.cfg.window
            )));
        }
        Ok(())
    }

    /// `(B, C_in, H0, W0)` → pyramid with strides 4, 8, 16, 32.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
    ) -> Result<FeaturePyramid> {
        let (_, cin, h0, w0) = g.value(x).dims4()?;
        if cin != self.cfg.in_channels {
            return Err(Error::shape(
                "patch_embed",
                format!(
                    "input has {cin} bands, encoder expects {}",
                    self.cfg.in_channels
                ),
            ));
        }
        self.check_input(h0, w0)?;
        let ps = self.cfg.patch_size;
        let padded_input = (h0.div_ceil(ps) * ps, w0.div_ceil(ps) * ps);
        let x = g.pad_spatial(x, padded_input.0, padded_input.1)?;
        let x = self.patch_embed.forward(g, p, x)?;
        let x = g.permute(x, &[0, 2, 3, 1])?;
        let mut x = self.embed_norm.forward(g, p, x)?;
        let mut levels = [x; 4];
        for (i, stage) in self.stages.iter().enumerate() {
            for block in &stage.blocks {
                x = block.forward(g, p, x)?;
            }
            let out = match &stage.out_norm {
                Some(norm) => norm.forward(g, p, x)?,
                None => x,
            };
            levels[i] = g.permute(out, &[0, 3, 1, 2])?;
            if let Some(merge) = &stage.merge {
                x = merge.forward(g, p, x)?;
            }
        }
        Ok(FeaturePyramid {
            levels,
            padded_input,
        })
    }

    pub fn macs(&self, h0: usize, w0: usize) -> u64 {
        let sizes = self.level_sizes(h0, w0);
        let mut total = self.patch_embed.macs(
            sizes[0].0 * self.cfg.patch_size,
            sizes[0].1 * self.cfg.patch_size,
        );
        for (stage, &(h, w)) in self.stages.iter().zip(&sizes) {
            total += stage.blocks.iter().map(|b| b.macs(h, w)).sum::<u64>();
            if let Some(m) = &stage.merge {
                total += m.macs(h, w);
            }
        }
        total
    }
}
