//! Transposed-convolution decoder with two auxiliary heads and the deeply supervised loss.

use std::sync::Arc;

use crate::config::DecoderConfig;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvTranspose2d};
use crate::numerics::{CrossEntropyStats, Graph, Scalar, Var};
use crate::params::{Bound, ParamLayout};

/// Logits `(B, K, H0, W0)` from the final head and the two auxiliary heads.
#[derive(Debug, Clone, Copy)]
pub struct SegOutputs {
    pub logits: Var,
    pub aux1: Var,
    pub aux2: Var,
}

/// Weights of the final and auxiliary terms, plus the ignored label value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub final_weight: f64,
    pub aux1: f64,
    pub aux2: f64,
    pub ignore_index: u8,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            final_weight: 1.0,
            aux1: 0.4,
            aux2: 0.4,
            ignore_index: 255,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.final_weight) && ok(self.aux1) && ok(self.aux2)) || self.final_weight == 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative with a positive final weight, got {} / {} / {}",
                self.final_weight, self.aux1, self.aux2
            )));
        }
        Ok(())
    }
}

/// Total loss node and the unweighted per-head terms.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: Var,
    pub final_term: f64,
    pub aux1_term: f64,
    pub aux2_term: f64,
    pub stats: CrossEntropyStats,
}

impl LossBreakdown {
    pub fn all_ignored(&self) -> bool {
        self.stats.all_ignored
    }
}

/// Spatial sizes along the downsampling path: `[H1, H2, H3]` per axis for an
/// `h0 × w0` input with patch size `patch`.
pub fn coarse_sizes(h0: usize, w0: usize, patch: usize) -> [(usize, usize); 3] {
    let h1 = (h0.div_ceil(patch), w0.div_ceil(patch));
    let h2 = (h1.0.div_ceil(2), h1.1.div_ceil(2));
    let h3 = (h2.0.div_ceil(2), h2.1.div_ceil(2));
    [h1, h2, h3]
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub stages: Vec<ConvTranspose2d>,
    pub head: Conv2d,
    pub aux1_head: Conv2d,
    pub aux2_head: Conv2d,
    pub in_channels: usize,
    pub patch: usize,
}

impl Decoder {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        in_channels: usize,
        patch: usize,
        cfg: &DecoderConfig,
    ) -> Self {
        let mut prev = in_channels;
        let stages = cfg
            .stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let d = ConvTranspose2d::new(layout, &format!("{name}.up{}", i + 1), prev, c, 2, 2);
                prev = c;
                d
            })
            .collect();
        let k = cfg.num_classes;
        let sc = cfg.stage_channels;
        Decoder {
            stages,
            head: Conv2d::classifier(layout, &format!("{name}.head"), sc[3], k),
            aux1_head: Conv2d::classifier(layout, &format!("{name}.aux1"), sc[0], k),
            aux2_head: Conv2d::classifier(layout, &format!("{name}.aux2"), sc[1], k),
            in_channels,
            patch,
        }
    }

    /// `z'` at the `f3` grid → logits at `input_hw`. Also returns `y1..y4`.
    pub fn forward_stages<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        z: Var,
        input_hw: (usize, usize),
    ) -> Result<(SegOutputs, [Var; 4])> {
        let (_, c, h3, w3) = g.value(z).dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(
                "decoder",
                format!("input has {c} channels, expected {}", self.in_channels),
            ));
        }
        let expected = coarse_sizes(input_hw.0, input_hw.1, self.patch)[2];
        if (h3, w3) != expected {
            return Err(Error::shape(
                "decoder",
                format!(
                    "input grid {h3}x{w3} does not match the {}x{} stride-16 grid of a {}x{} image",
                    expected.0, expected.1, input_hw.0, input_hw.1
                ),
            ));
        }
        let mut ys = [z; 4];
        let mut y = z;
        for (i, stage) in self.stages.iter().enumerate() {
            y = stage.forward(g, p, y)?;
            y = g.relu(y);
            let got = g.shape(y);
            let want = (h3 << (i + 1), w3 << (i + 1));
            if (got[2], got[3]) != want {
                return Err(Error::shape(
                    "decoder",
                    format!(
                        "stage {} output {}x{}, expected {}x{}",
                        i + 1,
                        got[2],
                        got[3],
                        want.0,
                        want.1
                    ),
                ));
            }
            ys[i] = y;
        }
        let full = (h3 * 16, w3 * 16);
        let (h0, w0) = input_hw;
        let logits = self.head.forward(g, p, ys[3])?;
        let logits = g.crop_spatial(logits, h0, w0)?;
        let aux = |g: &mut Graph<T>, head: &Conv2d, y: Var| -> Result<Var> {
            let l = head.forward(g, p, y)?;
            let l = g.resize_bilinear(l, full)?;
            g.crop_spatial(l, h0, w0)
        };
        let aux1 = aux(g, &self.aux1_head, ys[0])?;
        let aux2 = aux(g, &self.aux2_head, ys[1])?;
        Ok((SegOutputs { logits, aux1, aux2 }, ys))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        z: Var,
        input_hw: (usize, usize),
    ) -> Result<SegOutputs> {
        Ok(self.forward_stages(g, p, z, input_hw)?.0)
    }

    pub fn macs(&self, h3: usize, w3: usize) -> u64 {
        let mut total = 0;
        let (mut h, mut w) = (h3, w3);
        for s in &self.stages {
            total += s.macs(h, w);
            h *= 2;
            w *= 2;
        }
        total
            + self.head.macs(h, w)
            + self.aux1_head.macs(h3 * 2, w3 * 2)
            + self.aux2_head.macs(h3 * 4, w3 * 4)
    }
}

/// `λ_f·CE(Ŷ) + λ_1·CE(Ŷ1) + λ_2·CE(Ŷ2)` against `B·H0·W0` labels.
pub fn supervised_loss<T: Scalar>(
    g: &mut Graph<T>,
    outputs: &SegOutputs,
    labels: Arc<Vec<u8>>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let (l_final, stats) = g.cross_entropy(outputs.logits, labels.clone(), weights.ignore_index)?;
    let (l_aux1, _) = g.cross_entropy(outputs.aux1, labels.clone(), weights.ignore_index)?;
    let (l_aux2, _) = g.cross_entropy(outputs.aux2, labels, weights.ignore_index)?;
    let read = |g: &Graph<T>, v: Var| g.value(v).data()[0].to_f64().unwrap_or(f64::NAN);
    let (final_term, aux1_term, aux2_term) = (read(g, l_final), read(g, l_aux1), read(g, l_aux2));
    if stats.all_ignored {
        log::warn!("every pixel of the batch carries the ignore label; loss defined as 0");
    }
    let a = g.scale(l_final, T::lit(weights.final_weight));
    let b = g.scale(l_aux1, T::lit(weights.aux1));
    let c = g.scale(l_aux2, T::lit(weights.aux2));
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(LossBreakdown {
        total,
        final_term,
        aux1_term,
        aux2_term,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn coarse_grid_bookkeeping() {
        assert_eq!(coarse_sizes(256, 256, 4), [(64, 64), (32, 32), (16, 16)]);
        assert_eq!(coarse_sizes(509, 509, 4), [(128, 128), (64, 64), (32, 32)]);
        assert_eq!(coarse_sizes(36, 40, 4), [(9, 10), (5, 5), (3, 3)]);
    }

    #[test]
    fn uniform_logits_give_weighted_log4() {
        let mut g = Graph::<f64>::new();
        let zeros = g.leaf(Tensor::zeros(&[1, 4, 2, 2]), true);
        let out = SegOutputs {
            logits: zeros,
            aux1: zeros,
            aux2: zeros,
        };
        let labels = Arc::new(vec![0, 1, 2, 3]);
        let l = supervised_loss(&mut g, &out, labels, &LossWeights::default()).unwrap();
        let total = g.value(l.total).data()[0];
        assert!((l.final_term - 4f64.ln()).abs() < 1e-12);
        assert!((total - 1.8 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_zero_final_weight() {
        let w = LossWeights {
            final_weight: 0.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }
}
