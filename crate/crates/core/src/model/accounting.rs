//! Parameter counts and analytic multiply-accumulate estimates.

use std::fmt::Write as _;

use super::{MsCloudCam, MODULES};
use crate::config::ModelConfig;
use crate::decoder::coarse_sizes;
use crate::error::Result;

/// Reference totals of the published full-size network.
pub const PAPER_PARAMS: f64 = 47.44e6;
pub const PAPER_GFLOPS: f64 = 38.98;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub modules: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamReport {
    pub fn module(&self, name: &str) -> Option<usize> {
        self.modules
            .iter()
            .find(|(m, _)| m == name)
            .map(|(_, n)| *n)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (m, n) in &self.modules {
            let _ = writeln!(s, "  {m:<28} {n:>12}  ({:.3}M)", *n as f64 / 1e6);
        }
        let _ = writeln!(
            s,
            "  {:<28} {:>12}  ({:.3}M)",
            "total",
            self.total,
            self.total as f64 / 1e6
        );
        s
    }
}

pub fn count_params(cfg: &ModelConfig) -> Result<ParamReport> {
    let net = MsCloudCam::new(cfg)?;
    let modules = MODULES
        .iter()
        .map(|m| {
            (
                m.to_string(),
                net.layout.total_with_prefix(&format!("{m}.")),
            )
        })
        .collect();
    Ok(ParamReport {
        modules,
        total: net.layout.total(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopReport {
    pub input_hw: (usize, usize),
    pub modules: Vec<(String, u64)>,
    pub total_macs: u64,
}

impl FlopReport {
    /// `2 · MACs / 1e9`.
    pub fn gflops(&self) -> f64 {
        2.0 * self.total_macs as f64 / 1e9
    }
}

/// Multiply-accumulates of convolutions, linear layers and attention products
/// for one `h × w` image. Normalisation, activations, pooling and resizing are
/// not counted.
pub fn estimate_flops(cfg: &ModelConfig, input_hw: (usize, usize)) -> Result<FlopReport> {
    let net = MsCloudCam::new(cfg)?;
    let (h0, w0) = input_hw;
    let [_, _, (h3, w3)] = coarse_sizes(h0, w0, cfg.encoder.patch_size);
    let (h4, w4) = (h3.div_ceil(2), w3.div_ceil(2));
    let modules = vec![
        (MODULES[0].to_string(), net.encoder.macs(h0, w0)),
        (MODULES[1].to_string(), net.aspp.macs(h4, w4)),
        (MODULES[2].to_string(), net.psp.macs(h3, w3)),
        (MODULES[3].to_string(), net.cross_attention.macs(h3, w3)),
        (MODULES[4].to_string(), net.bottleneck.macs(h3, w3)),
        (
            MODULES[5].to_string(),
            net.attention.macs(cfg.query_channels(), h3, w3),
        ),
        (MODULES[6].to_string(), net.decoder.macs(h3, w3)),
    ];
    let total_macs = modules.iter().map(|(_, m)| m).sum();
    Ok(FlopReport {
        input_hw,
        modules,
        total_macs,
    })
}
