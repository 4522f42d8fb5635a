//! The assembled network: encoder → ASPP/PSP → cross-attention fusion →
//! bottleneck → combined attention → decoder.

mod accounting;
mod checkpoint;

pub use accounting::{
    count_params, estimate_flops, FlopReport, ParamReport, PAPER_GFLOPS, PAPER_PARAMS,
};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use crate::backbone::{Encoder, FeaturePyramid};
use crate::config::ModelConfig;
use crate::context::{Aspp, Psp};
use crate::decoder::{Decoder, SegOutputs};
use crate::error::{Error, Result};
use crate::fusion::{fuse_concat, Bottleneck, CombinedAttention, CrossAttention};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::{Bound, ParamLayout, ParamStore};

/// Top-level parameter-name prefixes, in construction order.
pub const MODULES: [&str; 7] = [
    "encoder",
    "context.aspp",
    "context.psp",
    "fusion.cross_attention",
    "fusion.bottleneck",
    "fusion.combined_attention",
    "decoder",
];

#[derive(Debug, Clone)]
pub struct MsCloudCam {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub encoder: Encoder,
    pub aspp: Aspp,
    pub psp: Psp,
    pub cross_attention: CrossAttention,
    pub bottleneck: Bottleneck,
    pub attention: CombinedAttention,
    pub decoder: Decoder,
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardTrace {
    pub pyramid: FeaturePyramid,
    pub x_aspp: Var,
    pub x_psp: Var,
    pub x_cat: Var,
    pub fused: Var,
    pub z: Var,
    pub z_prime: Var,
    pub decoder_stages: [Var; 4],
    pub outputs: SegOutputs,
}

impl MsCloudCam {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::default();
        let ch = config.encoder.channels();
        let q = config.query_channels();
        let encoder = Encoder::new(&mut layout, MODULES[0], &config.encoder)?;
        let aspp = Aspp::new(&mut layout, MODULES[1], ch[3], &config.context);
        let psp = Psp::new(&mut layout, MODULES[2], ch[2], &config.context);
        let cross_attention = CrossAttention::new(
            &mut layout,
            MODULES[3],
            q,
            config.context.psp_channels,
            &config.fusion,
        )?;
        let bottleneck = Bottleneck::new(
            &mut layout,
            MODULES[4],
            q,
            config.fusion.bottleneck_channels,
        );
        let attention =
            CombinedAttention::new(&mut layout, MODULES[5], config.eca_kernel(), &config.fusion);
        let decoder = Decoder::new(
            &mut layout,
            MODULES[6],
            q,
            config.encoder.patch_size,
            &config.decoder,
        );
        Ok(MsCloudCam {
            config: config.clone(),
            layout,
            encoder,
            aspp,
            psp,
            cross_attention,
            bottleneck,
            attention,
            decoder,
        })
    }

    /// Deterministic initial weights from `config.seed`.
    pub fn init_params<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore::init(&self.layout, self.config.seed)
    }

    pub fn forward_trace<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
    ) -> Result<ForwardTrace> {
        let (_, _, h0, w0) = g.value(x).dims4()?;
        let stage = |name: &'static str| move |e: Error| e.in_stage(name);
        let pyramid = self.encoder.forward(g, p, x).map_err(stage("encoder"))?;
        let [_, _, f3, f4] = pyramid.levels;
        let (h3, w3) = (g.shape(f3)[2], g.shape(f3)[3]);
        let x_aspp = self
            .aspp
            .forward(g, p, f4, (h3, w3))
            .map_err(stage("aspp"))?;
        let x_psp = self.psp.forward(g, p, f3).map_err(stage("psp"))?;
        let x_cat = fuse_concat(g, x_aspp, x_psp).map_err(stage("fuse_concat"))?;
        let fused = self
            .cross_attention
            .forward(g, p, x_cat, x_psp)
            .map_err(stage("cross_attention"))?;
        let z = self
            .bottleneck
            .forward(g, p, fused)
            .map_err(stage("bottleneck"))?;
        let z_prime = self
            .attention
            .forward(g, p, z)
            .map_err(stage("combined_attention"))?;
        let (outputs, decoder_stages) = self
            .decoder
            .forward_stages(g, p, z_prime, (h0, w0))
            .map_err(stage("decoder"))?;
        Ok(ForwardTrace {
            pyramid,
            x_aspp,
            x_psp,
            x_cat,
            fused,
            z,
            z_prime,
            decoder_stages,
            outputs,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<SegOutputs> {
        Ok(self.forward_trace(g, p, x)?.outputs)
    }

    /// Final-head logits for a batch, without recording gradients.
    pub fn predict_logits<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        images: Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let p = params.bind(&mut g, false);
        let x = g.constant(images);
        let out = self.forward(&mut g, &p, x)?;
        Ok(g.value(out.logits).clone())
    }
}

/// Per-pixel argmax over the class axis of `(B, K, H, W)` logits; ties go to the
/// lowest class index.
pub fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let (b, k, h, w) = logits.dims4()?;
    let plane = h * w;
    let d = logits.data();
    let mut out = vec![0u8; b * plane];
    for bi in 0..b {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if d[(bi * k + c) * plane + p] > d[(bi * k + best) * plane + p] {
                    best = c;
                }
            }
            out[bi * plane + p] = best as u8;
        }
    }
    Ok(out)
}
