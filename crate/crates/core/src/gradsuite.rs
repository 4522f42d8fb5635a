//! Registry of finite-difference checks covering every differentiable op and
//! each composed module, at tiny shapes in double precision.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Encoder, PatchMerging, SwinBlock, WindowAttention};
use crate::config::ModelConfig;
use crate::context::{Aspp, Psp};
use crate::decoder::{supervised_loss, Decoder, LossWeights};
use crate::error::{Error, Result};
use crate::fusion::{fuse_concat, Bottleneck, CombinedAttention, CrossAttention};
use crate::model::MsCloudCam;
use crate::numerics::{Activation, ConvGeometry, GradCheck, GradCheckReport, Graph, Tensor, Var};
use crate::params::{Bound, ParamLayout, ParamStore};

pub const PRIMITIVE_THRESHOLD: f64 = 1e-4;
pub const COMPOSITE_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    All,
    Numerics,
    Backbone,
    Context,
    Fusion,
    Decoder,
    Model,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Scope::All,
            "numerics" => Scope::Numerics,
            "backbone" => Scope::Backbone,
            "context" => Scope::Context,
            "fusion" => Scope::Fusion,
            "decoder" => Scope::Decoder,
            "model" => Scope::Model,
            other => return Err(Error::Config(format!("unknown gradcheck scope {other:?}"))),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub module: &'static str,
    pub report: GradCheckReport,
}

struct Suite {
    rng: ChaCha8Rng,
    entries: Vec<SuiteEntry>,
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

impl Suite {
    fn random(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            // keep magnitudes away from zero so ReLU/max kinks are not straddled
            let v: f64 = self.rng.gen_range(0.1..1.0);
            if self.rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
    }

    /// Scalar probe `Σ w ⊙ y` with fixed random weights.
    fn probe(&mut self, shape: &[usize]) -> Tensor<f64> {
        self.random(shape)
    }

    fn check(
        &mut self,
        module: &'static str,
        name: &str,
        gc: GradCheck,
        inputs: Vec<Tensor<f64>>,
        build: &Build,
    ) -> Result<()> {
        let report = gc.run(name, &inputs, build)?;
        log::info!("{module}/{name}: {:.3e}", report.worst_rel_error);
        self.entries.push(SuiteEntry { module, report });
        Ok(())
    }

    /// Checks `f(x)` through a weighted-sum readout.
    fn primitive<F>(
        &mut self,
        name: &str,
        inputs: Vec<Tensor<f64>>,
        out_shape: &[usize],
        f: F,
    ) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
    {
        let w = self.probe(out_shape);
        let build = move |g: &mut Graph<f64>, v: &[Var]| {
            let y = f(g, v)?;
            g.weighted_sum(y, &w)
        };
        self.check(
            "numerics",
            name,
            GradCheck::with_threshold(PRIMITIVE_THRESHOLD),
            inputs,
            &build,
        )
    }

    /// Checks a module with respect to its inputs and all of its parameters
    /// (parameters randomised so no bias sits exactly at a kink).
    #[allow(clippy::too_many_arguments)]
    fn module<F>(
        &mut self,
        module: &'static str,
        name: &str,
        layout: &ParamLayout,
        inputs: Vec<Tensor<f64>>,
        out_shape: &[usize],
        max_coords: usize,
        f: F,
    ) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &Bound, &[Var]) -> Result<Var> + 'static,
    {
        let n_inputs = inputs.len();
        let mut all = inputs;
        let store = ParamStore::<f64>::init(layout, 3);
        for t in store.values() {
            let noise = self.random(t.shape());
            all.push(t.zip_map(&noise, |a, b| a + 0.1 * b));
        }
        let w = self.probe(out_shape);
        let build = move |g: &mut Graph<f64>, v: &[Var]| {
            let p = Bound::from_vars(v[n_inputs..].to_vec());
            let y = f(g, &p, &v[..n_inputs])?;
            g.weighted_sum(y, &w)
        };
        // a small step keeps the probe from straddling ReLU kinks in the many
        // pre-activations of a composed module
        let gc = GradCheck {
            step: 1e-6,
            threshold: COMPOSITE_THRESHOLD,
            max_coords_per_input: max_coords,
            ..Default::default()
        };
        self.check(module, name, gc, all, &build)
    }
}

fn numerics(s: &mut Suite) -> Result<()> {
    let geoms = [
        ("conv2d", ConvGeometry::default(), 3),
        (
            "conv2d_stride2_pad1",
            ConvGeometry {
                stride: (2, 2),
                padding: (1, 1),
                dilation: (1, 1),
            },
            3,
        ),
        ("conv2d_dilated", ConvGeometry::dilated(2), 3),
        ("conv2d_pointwise", ConvGeometry::default(), 1),
    ];
    for (name, geom, k) in geoms {
        let (ho, wo) = geom.output_size(5, 4, k, k).unwrap();
        let inputs = vec![
            s.random(&[2, 3, 5, 4]),
            s.random(&[2, 3, k, k]),
            s.random(&[2]),
        ];
        s.primitive(name, inputs, &[2, 2, ho, wo], move |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), geom)
        })?;
    }
    let inputs = vec![
        s.random(&[1, 3, 3, 2]),
        s.random(&[3, 2, 2, 2]),
        s.random(&[2]),
    ];
    s.primitive("conv_transpose2d", inputs, &[1, 2, 6, 4], |g, v| {
        g.conv_transpose2d(v[0], v[1], Some(v[2]), (2, 2), (0, 0))
    })?;
    let inputs = vec![s.random(&[1, 2, 3, 3]), s.random(&[2, 1, 3, 3])];
    s.primitive("conv_transpose2d_pad1", inputs, &[1, 1, 5, 5], |g, v| {
        g.conv_transpose2d(v[0], v[1], None, (2, 2), (1, 1))
    })?;
    let x = s.random(&[2, 2, 5, 7]);
    s.primitive("adaptive_avg_pool", vec![x], &[2, 2, 3, 3], |g, v| {
        g.adaptive_avg_pool(v[0], (3, 3))
    })?;
    let x = s.random(&[1, 2, 3, 2]);
    s.primitive("resize_bilinear_up", vec![x], &[1, 2, 7, 5], |g, v| {
        g.resize_bilinear(v[0], (7, 5))
    })?;
    let x = s.random(&[1, 2, 6, 5]);
    s.primitive("resize_bilinear_down", vec![x], &[1, 2, 4, 2], |g, v| {
        g.resize_bilinear(v[0], (4, 2))
    })?;
    let x = s.random(&[3, 5]);
    s.primitive("softmax", vec![x], &[3, 5], |g, v| Ok(g.softmax(v[0])))?;
    for kind in [Activation::Relu, Activation::Gelu, Activation::Sigmoid] {
        let name = format!("{kind:?}").to_lowercase();
        let x = s.random(&[2, 3, 2, 2]);
        s.primitive(&name, vec![x], &[2, 3, 2, 2], move |g, v| {
            Ok(g.activation(v[0], kind))
        })?;
    }
    let inputs = vec![s.random(&[4, 6]), s.random(&[6]), s.random(&[6])];
    s.primitive("layer_norm", inputs, &[4, 6], |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    })?;
    let inputs = vec![s.random(&[2, 3, 4]), s.random(&[5, 4]), s.random(&[5])];
    s.primitive("linear", inputs, &[2, 3, 5], |g, v| {
        g.linear(v[0], v[1], Some(v[2]))
    })?;
    let inputs = vec![s.random(&[2, 3, 4]), s.random(&[2, 5, 4])];
    s.primitive("bmm_transposed", inputs, &[2, 3, 5], |g, v| {
        g.bmm(v[0], v[1], true)
    })?;
    let inputs = vec![s.random(&[2, 3, 4]), s.random(&[2, 4, 5])];
    s.primitive("bmm", inputs, &[2, 3, 5], |g, v| g.bmm(v[0], v[1], false))?;
    let inputs = vec![s.random(&[2, 3, 1, 4]), s.random(&[1, 3, 2, 1])];
    s.primitive("mul_broadcast", inputs, &[2, 3, 2, 4], |g, v| {
        g.mul(v[0], v[1])
    })?;
    let inputs = vec![s.random(&[2, 3, 2, 4]), s.random(&[1, 3, 1, 1])];
    s.primitive("add_broadcast", inputs, &[2, 3, 2, 4], |g, v| {
        g.add(v[0], v[1])
    })?;
    let inputs = vec![s.random(&[2, 3]), s.random(&[2, 3])];
    s.primitive("sub_scale", inputs, &[2, 3], |g, v| {
        let d = g.sub(v[0], v[1])?;
        Ok(g.scale(d, 0.7))
    })?;
    let x = s.random(&[2, 3, 4]);
    s.primitive("permute", vec![x], &[4, 2, 3], |g, v| {
        g.permute(v[0], &[2, 0, 1])
    })?;
    let inputs = vec![s.random(&[2, 1, 3]), s.random(&[2, 2, 3])];
    s.primitive("concat", inputs, &[2, 3, 3], |g, v| {
        g.concat(&[v[0], v[1]], 1)
    })?;
    let x = s.random(&[2, 5, 3]);
    s.primitive("narrow", vec![x], &[2, 2, 3], |g, v| {
        g.narrow(v[0], 1, 2, 2)
    })?;
    let x = s.random(&[1, 2, 3, 3]);
    s.primitive("pad_crop", vec![x], &[1, 2, 2, 4], |g, v| {
        let p = g.pad_spatial(v[0], 4, 5)?;
        g.crop_spatial(p, 2, 4)
    })?;
    let index = Arc::new(vec![3, usize::MAX, 0, 3, 5, 1]);
    let x = s.random(&[6]);
    s.primitive("gather", vec![x], &[2, 3], move |g, v| {
        g.gather("gather", v[0], index.clone(), &[2, 3])
    })?;
    let x = s.random(&[2, 3, 2, 2]);
    s.primitive("channel_mean", vec![x], &[2, 1, 2, 2], |g, v| {
        g.channel_mean(v[0])
    })?;
    let x = s.random(&[2, 3, 2, 2]);
    s.primitive("channel_max", vec![x], &[2, 1, 2, 2], |g, v| {
        g.channel_max(v[0])
    })?;
    let labels = Arc::new(vec![0, 3, 255, 1, 2, 2, 0, 255]);
    let gc = GradCheck::with_threshold(PRIMITIVE_THRESHOLD);
    let inputs = vec![s.random(&[2, 4, 2, 2])];
    s.check("numerics", "cross_entropy", gc, inputs, &move |g, v| {
        Ok(g.cross_entropy(v[0], labels.clone(), 255)?.0)
    })?;
    Ok(())
}

fn backbone(s: &mut Suite) -> Result<()> {
    let cfg = ModelConfig::tiny(3).encoder;
    for (name, hw, shifted) in [
        ("window_attention", 4, false),
        ("window_attention_shifted", 4, true),
        ("window_attention_padded_shifted", 5, true),
    ] {
        let mut layout = ParamLayout::default();
        let attn = WindowAttention::new(&mut layout, "attn", 4, 2, 2, true)?;
        let x = s.random(&[1, hw, hw, 4]);
        s.module(
            "backbone",
            name,
            &layout,
            vec![x],
            &[1, hw, hw, 4],
            32,
            move |g, p, v| attn.forward(g, p, v[0], shifted),
        )?;
    }
    let mut layout = ParamLayout::default();
    let block = {
        let mut c = cfg.clone();
        c.window = 2;
        // shifted block with an odd grid exercises roll, padding and the mask together
        SwinBlockBuilder::build(&mut layout, &c)?
    };
    let x = s.random(&[2, 3, 3, 4]);
    s.module(
        "backbone",
        "swin_block",
        &layout,
        vec![x],
        &[2, 3, 3, 4],
        32,
        move |g, p, v| block.forward(g, p, v[0]),
    )?;
    let mut layout = ParamLayout::default();
    let merge = PatchMerging::new(&mut layout, "merge", 3);
    let x = s.random(&[1, 3, 5, 3]);
    s.module(
        "backbone",
        "patch_merging",
        &layout,
        vec![x],
        &[1, 2, 3, 6],
        32,
        move |g, p, v| merge.forward(g, p, v[0]),
    )?;
    let mut layout = ParamLayout::default();
    let enc = Encoder::new(&mut layout, "encoder", &cfg)?;
    let x = s.random(&[1, 3, 32, 32]);
    s.module(
        "backbone",
        "encoder",
        &layout,
        vec![x],
        &[1, 32, 1, 1],
        12,
        move |g, p, v| {
            let pyr = enc.forward(g, p, v[0])?;
            Ok(pyr.levels[3])
        },
    )?;
    Ok(())
}

/// Builds one shifted block outside the encoder for isolated checking.
struct SwinBlockBuilder;

impl SwinBlockBuilder {
    fn build(layout: &mut ParamLayout, cfg: &crate::config::EncoderConfig) -> Result<SwinBlock> {
        let mut c = cfg.clone();
        c.depths = [2, 1, 1, 1];
        let enc = Encoder::new(layout, "enc", &c)?;
        Ok(enc.stages[0].blocks[1].clone())
    }
}

fn context(s: &mut Suite) -> Result<()> {
    let cfg = ModelConfig::tiny(3).context;
    let mut layout = ParamLayout::default();
    let aspp = Aspp::new(&mut layout, "aspp", 5, &cfg);
    let x = s.random(&[1, 5, 2, 2]);
    s.module(
        "context",
        "aspp",
        &layout,
        vec![x],
        &[1, cfg.aspp_channels, 4, 4],
        32,
        move |g, p, v| aspp.forward(g, p, v[0], (4, 4)),
    )?;
    let mut layout = ParamLayout::default();
    let psp = Psp::new(&mut layout, "psp", 3, &cfg);
    let x = s.random(&[1, 3, 4, 4]);
    s.module(
        "context",
        "psp",
        &layout,
        vec![x],
        &[1, cfg.psp_channels, 4, 4],
        32,
        move |g, p, v| psp.forward(g, p, v[0]),
    )?;
    Ok(())
}

fn fusion(s: &mut Suite) -> Result<()> {
    let cfg = ModelConfig::tiny(3).fusion;
    let mut layout = ParamLayout::default();
    let xa = s.random(&[1, 2, 3, 2]);
    let xp = s.random(&[1, 3, 3, 2]);
    s.module(
        "fusion",
        "fuse_concat",
        &layout,
        vec![xa.clone(), xp.clone()],
        &[1, 5, 3, 2],
        32,
        |g, _, v| fuse_concat(g, v[0], v[1]),
    )?;
    let attn = CrossAttention::new(&mut layout, "xattn", 5, 3, &cfg)?;
    let xc = s.random(&[1, 5, 3, 2]);
    s.module(
        "fusion",
        "cross_attention",
        &layout,
        vec![xc, xp],
        &[1, 5, 3, 2],
        32,
        move |g, p, v| attn.forward(g, p, v[0], v[1]),
    )?;
    let mut layout = ParamLayout::default();
    let bottleneck = Bottleneck::new(&mut layout, "bottleneck", 5, 3);
    let x = s.random(&[1, 5, 3, 3]);
    s.module(
        "fusion",
        "bottleneck",
        &layout,
        vec![x],
        &[1, 5, 3, 3],
        32,
        move |g, p, v| bottleneck.forward(g, p, v[0]),
    )?;
    for mode in [
        crate::config::CombineMode::Maps,
        crate::config::CombineMode::Separate,
    ] {
        let mut layout = ParamLayout::default();
        let c = crate::config::FusionConfig {
            combine: mode,
            ..cfg.clone()
        };
        let ca = CombinedAttention::new(&mut layout, "attn", 3, &c);
        let x = s.random(&[2, 6, 3, 3]);
        let name = match mode {
            crate::config::CombineMode::Maps => "combined_attention",
            crate::config::CombineMode::Separate => "combined_attention_separate",
        };
        s.module(
            "fusion",
            name,
            &layout,
            vec![x],
            &[2, 6, 3, 3],
            32,
            move |g, p, v| ca.forward(g, p, v[0]),
        )?;
    }
    Ok(())
}

fn decoder(s: &mut Suite) -> Result<()> {
    let cfg = ModelConfig::tiny(3).decoder;
    let mut layout = ParamLayout::default();
    let dec = Decoder::new(&mut layout, "decoder", 5, 4, &cfg);
    let z = s.random(&[1, 5, 2, 2]);
    let labels: Vec<u8> = (0..30 * 29)
        .map(|i| if i % 17 == 0 { 255 } else { (i % 4) as u8 })
        .collect();
    let labels = Arc::new(labels);
    let build = {
        let dec = dec.clone();
        move |g: &mut Graph<f64>, p: &Bound, v: &[Var]| {
            let out = dec.forward(g, p, v[0], (30, 29))?;
            Ok(supervised_loss(g, &out, labels.clone(), &LossWeights::default())?.total)
        }
    };
    s.module(
        "decoder",
        "decode_supervised_loss",
        &layout,
        vec![z.clone()],
        &[1],
        24,
        build,
    )?;
    s.module(
        "decoder",
        "decode_logits",
        &layout,
        vec![z],
        &[1, 4, 30, 29],
        24,
        move |g, p, v| Ok(dec.forward(g, p, v[0], (30, 29))?.logits),
    )?;
    Ok(())
}

fn model(s: &mut Suite) -> Result<()> {
    let net = MsCloudCam::new(&ModelConfig::tiny(3))?;
    let layout = net.layout.clone();
    let x = s.random(&[1, 3, 32, 36]);
    s.module(
        "model",
        "forward",
        &layout,
        vec![x],
        &[1, 4, 32, 36],
        5,
        move |g, p, v| Ok(net.forward(g, p, v[0])?.logits),
    )
}

/// Negative control: an op whose backward is scaled by 1.1.
fn fault_fixture(s: &mut Suite) -> Result<()> {
    let x = s.random(&[3, 3]);
    s.primitive("corrupted_backward", vec![x], &[3, 3], |g, v| {
        let value = g.value(v[0]).map(|x| x * x);
        let x = g.value(v[0]).clone();
        Ok(
            g.record("corrupted_backward", value, &[v[0]], move |grad, _| {
                vec![Some(grad.zip_map(&x, |gv, xv| 1.1 * 2.0 * xv * gv))]
            }),
        )
    })
}

/// Runs the checks of `scope`. `inject_fault` appends the negative control.
pub fn run_suite(scope: Scope, inject_fault: bool) -> Result<Vec<SuiteEntry>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(2024),
        entries: Vec::new(),
    };
    let all = scope == Scope::All;
    if all || scope == Scope::Numerics {
        numerics(&mut s)?;
    }
    if all || scope == Scope::Backbone {
        backbone(&mut s)?;
    }
    if all || scope == Scope::Context {
        context(&mut s)?;
    }
    if all || scope == Scope::Fusion {
        fusion(&mut s)?;
    }
    if all || scope == Scope::Decoder {
        decoder(&mut s)?;
    }
    if all || scope == Scope::Model {
        model(&mut s)?;
    }
    if inject_fault {
        fault_fixture(&mut s)?;
    }
    Ok(s.entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_is_caught() {
        let entries = run_suite(Scope::Context, true).unwrap();
        let fixture = entries.last().unwrap();
        assert_eq!(fixture.report.name, "corrupted_backward");
        assert!(!fixture.report.passed());
        assert!(entries[..entries.len() - 1]
            .iter()
            .all(|e| e.report.passed()));
    }
}
