//! Multi-scale context: atrous spatial pyramid over `f4`, pyramid pooling over `f3`.

use crate::config::ContextConfig;
use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::numerics::{ConvGeometry, Graph, Scalar, Var};
use crate::params::{Bound, ParamLayout};

/// Parallel dilated 3×3 branches plus a global-pooling branch, concatenated and projected.
#[derive(Debug, Clone)]
pub struct Aspp {
    pub branches: Vec<Conv2d>,
    pub gap_conv: Option<Conv2d>,
    pub project: Conv2d,
    pub in_channels: usize,
}

impl Aspp {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        in_channels: usize,
        cfg: &ContextConfig,
    ) -> Self {
        let bc = cfg.aspp_branch_channels;
        let branches = cfg
            .aspp_rates
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                Conv2d::new(
                    layout,
                    &format!("{name}.branches.{i}"),
                    in_channels,
                    bc,
                    3,
                    ConvGeometry::dilated(r),
                    true,
                )
            })
            .collect();
        let gap_conv = cfg
            .aspp_gap_conv
            .then(|| Conv2d::pointwise(layout, &format!("{name}.pool"), in_channels, bc));
        let gap_width = if cfg.aspp_gap_conv { bc } else { in_channels };
        let concat = cfg.aspp_rates.len() * bc + gap_width;
        let project = Conv2d::pointwise(
            layout,
            &format!("{name}.project"),
            concat,
            cfg.aspp_channels,
        );
        Aspp {
            branches,
            gap_conv,
            project,
            in_channels,
        }
    }

    /// Branch activations before concatenation, in rate order with the pooled branch last.
    pub fn branch_outputs<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        f4: Var,
    ) -> Result<Vec<Var>> {
        let (_, c, h, w) = g.value(f4).dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(
                "aspp",
                format!("f4 has {c} channels, expected {}", self.in_channels),
            ));
        }
        let mut outs = Vec::with_capacity(self.branches.len() + 1);
        for conv in &self.branches {
            let y = conv.forward(g, p, f4)?;
            outs.push(g.relu(y));
        }
        let pooled = g.adaptive_avg_pool(f4, (1, 1))?;
        let pooled = match &self.gap_conv {
            Some(conv) => conv.forward(g, p, pooled)?,
            None => pooled,
        };
        let pooled = g.relu(pooled);
        outs.push(g.resize_bilinear(pooled, (h, w))?);
        Ok(outs)
    }

    /// `(B, C4, H4, W4)` → `(B, C_a, out_hw)`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        f4: Var,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let outs = self.branch_outputs(g, p, f4)?;
        let cat = g.concat(&outs, 1)?;
        let y = self.project.forward(g, p, cat)?;
        g.resize_bilinear(y, out_hw)
    }

    pub fn macs(&self, h4: usize, w4: usize) -> u64 {
        let mut total: u64 = self.branches.iter().map(|b| b.macs(h4, w4)).sum();
        if let Some(c) = &self.gap_conv {
            total += c.macs(1, 1);
        }
        total + self.project.macs(h4, w4)
    }
}

/// Adaptive pooling at several grid sizes, each branch projected and upsampled back.
#[derive(Debug, Clone)]
pub struct Psp {
    pub scales: Vec<usize>,
    pub branches: Vec<Conv2d>,
    pub identity_branch: bool,
    pub project: Conv2d,
    pub in_channels: usize,
}

impl Psp {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        in_channels: usize,
        cfg: &ContextConfig,
    ) -> Self {
        let bc = cfg.psp_branch_channels;
        let branches = (0..cfg.psp_scales.len())
            .map(|i| Conv2d::pointwise(layout, &format!("{name}.branches.{i}"), in_channels, bc))
            .collect();
        let identity = if cfg.psp_identity_branch {
            in_channels
        } else {
            0
        };
        let project = Conv2d::pointwise(
            layout,
            &format!("{name}.project"),
            cfg.psp_scales.len() * bc + identity,
            cfg.psp_channels,
        );
        Psp {
            scales: cfg.psp_scales.clone(),
            branches,
            identity_branch: cfg.psp_identity_branch,
            project,
            in_channels,
        }
    }

    pub fn branch_outputs<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        f3: Var,
    ) -> Result<Vec<Var>> {
        let (_, c, h, w) = g.value(f3).dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(
                "psp",
                format!("f3 has {c} channels, expected {}", self.in_channels),
            ));
        }
        let largest = self.scales.iter().copied().max().unwrap_or(1);
        if largest > h.min(w) {
            return Err(Error::Config(format!(
                "pyramid pooling scale {largest} exceeds the {h}x{w} feature map; use smaller context.psp_scales or a larger input"
            )));
        }
        let mut outs = Vec::with_capacity(self.scales.len() + 1);
        for (&s, conv) in self.scales.iter().zip(&self.branches) {
            let pooled = g.adaptive_avg_pool(f3, (s, s))?;
            let y = conv.forward(g, p, pooled)?;
            let y = g.relu(y);
            outs.push(g.resize_bilinear(y, (h, w))?);
        }
        if self.identity_branch {
            outs.push(f3);
        }
        Ok(outs)
    }

    /// `(B, C3, H3, W3)` → `(B, C_p, H3, W3)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, f3: Var) -> Result<Var> {
        let outs = self.branch_outputs(g, p, f3)?;
        let cat = g.concat(&outs, 1)?;
        self.project.forward(g, p, cat)
    }

    pub fn macs(&self, h3: usize, w3: usize) -> u64 {
        let branches: u64 = self
            .scales
            .iter()
            .zip(&self.branches)
            .map(|(&s, c)| c.macs(s, s))
            .sum();
        branches + self.project.macs(h3, w3)
    }
}
