//! Parameterised building blocks shared by the network modules.

use crate::error::Result;
use crate::numerics::{ConvGeometry, Graph, Scalar, Var};
use crate::params::{Bound, Init, ParamId, ParamLayout};

pub const LINEAR_INIT_STD: f64 = 0.02;
/// Standard deviation of the per-pixel classifier weights.
pub const CLASSIFIER_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub geom: ConvGeometry,
}

impl Conv2d {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: ConvGeometry,
        bias: bool,
    ) -> Self {
        let weight = layout.register(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            Init::KaimingUniform {
                fan_in: in_channels * kernel * kernel,
            },
        );
        let bias =
            bias.then(|| layout.register(format!("{name}.bias"), &[out_channels], Init::Zeros));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            geom,
        }
    }

    pub fn pointwise(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(layout, name, cin, cout, 1, ConvGeometry::default(), true)
    }

    /// 1×1 classifier with small normal weights so initial logits are near uniform.
    pub fn classifier(layout: &mut ParamLayout, name: &str, cin: usize, classes: usize) -> Self {
        let weight = layout.register(
            format!("{name}.weight"),
            &[classes, cin, 1, 1],
            Init::TruncNormal {
                std: CLASSIFIER_INIT_STD,
            },
        );
        let bias = Some(layout.register(format!("{name}.bias"), &[classes], Init::Zeros));
        Conv2d {
            weight,
            bias,
            in_channels: cin,
            out_channels: classes,
            kernel: 1,
            geom: ConvGeometry::default(),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p[self.weight], self.bias.map(|b| p[b]), self.geom)
    }

    /// Multiply-accumulates for an `h × w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self
            .geom
            .output_size(h, w, self.kernel, self.kernel)
            .unwrap_or((0, 0));
        (self.out_channels * self.in_channels * self.kernel * self.kernel * ho * wo) as u64
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        // each output pixel sees (k/s)² taps per input channel
        let taps = (kernel / stride).max(1);
        let weight = layout.register(
            format!("{name}.weight"),
            &[in_channels, out_channels, kernel, kernel],
            Init::KaimingUniform {
                fan_in: in_channels * taps * taps,
            },
        );
        let bias = Some(layout.register(format!("{name}.bias"), &[out_channels], Init::Zeros));
        ConvTranspose2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv_transpose2d(
            x,
            p[self.weight],
            self.bias.map(|b| p[b]),
            (self.stride, self.stride),
            (0, 0),
        )
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (self.in_channels * self.out_channels * self.kernel * self.kernel * h * w) as u64
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
    ) -> Self {
        let weight = layout.register(
            format!("{name}.weight"),
            &[out_features, in_features],
            Init::TruncNormal {
                std: LINEAR_INIT_STD,
            },
        );
        let bias =
            bias.then(|| layout.register(format!("{name}.bias"), &[out_features], Init::Zeros));
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.weight], self.bias.map(|b| p[b]))
    }

    pub fn macs(&self, tokens: usize) -> u64 {
        (tokens * self.in_features * self.out_features) as u64
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(layout: &mut ParamLayout, name: &str, features: usize) -> Self {
        LayerNorm {
            gain: layout.register(format!("{name}.weight"), &[features], Init::Constant(1.0)),
            bias: layout.register(format!("{name}.bias"), &[features], Init::Zeros),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gain], p[self.bias], self.eps)
    }
}
