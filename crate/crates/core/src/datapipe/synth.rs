//! Procedural cloud scenes with labels consistent by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{RasterSample, Sensor};
use crate::numerics::Tensor;

const CLEAR: u8 = 0;
const THICK: u8 = 1;
const THIN: u8 = 2;
const SHADOW: u8 = 3;

/// Sum of a few random plane waves, in `[-1, 1]`.
struct SmoothField {
    waves: Vec<(f64, f64, f64)>,
}

impl SmoothField {
    fn new(rng: &mut ChaCha8Rng, hw: usize) -> Self {
        let waves = (0..3)
            .map(|_| {
                let freq = rng.gen_range(0.5..2.5) * std::f64::consts::TAU / hw as f64;
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                (
                    freq * angle.cos(),
                    freq * angle.sin(),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        SmoothField { waves }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|&(fy, fx, ph)| (fy * y as f64 + fx * x as f64 + ph).sin())
            .sum();
        s / self.waves.len() as f64
    }
}

/// Ellipse with a wobbly boundary.
#[derive(Clone, Copy)]
struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    lobes: f64,
    phase: f64,
}

impl Blob {
    /// Centre drawn uniformly from `centre ± spread` on both axes.
    fn random(rng: &mut ChaCha8Rng, centre: (f64, f64), spread: f64, r: (f64, f64)) -> Self {
        Blob {
            cy: centre.0 + rng.gen_range(-spread..=spread),
            cx: centre.1 + rng.gen_range(-spread..=spread),
            ry: rng.gen_range(r.0..r.1),
            rx: rng.gen_range(r.0..r.1),
            lobes: rng.gen_range(2..5) as f64,
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    fn shifted(self, dy: f64, dx: f64) -> Self {
        Blob {
            cy: self.cy + dy,
            cx: self.cx + dx,
            ..self
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        let (dy, dx) = (
            (y as f64 - self.cy) / self.ry,
            (x as f64 - self.cx) / self.rx,
        );
        let theta = dy.atan2(dx);
        (dy * dy + dx * dx).sqrt() < 1.0 + 0.2 * (self.lobes * theta + self.phase).sin()
    }
}

fn paint(labels: &mut [u8], hw: usize, blob: &Blob, class: u8) {
    for y in 0..hw {
        for x in 0..hw {
            if blob.contains(y, x) {
                labels[y * hw + x] = class;
            }
        }
    }
}

/// One deterministic `hw × hw` scene with `bands` channels of raw digital numbers.
///
/// For `hw ≥ 64` a guaranteed cloud/shadow pair sits in the upper-left quadrant and
/// a guaranteed thin cloud in the lower-right, so every class appears.
pub fn synth_sample(index: usize, hw: usize, bands: usize, seed: u64) -> RasterSample {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let s = hw as f64;
    let mut labels = vec![CLEAR; hw * hw];
    let shadow_offset = |b: &Blob| (b.ry * 0.8 + 1.0, b.rx * 0.8 + 1.0);

    // background clutter first so the guaranteed blobs stay on top
    for _ in 0..rng.gen_range(0..3) {
        let b = Blob::random(&mut rng, (s / 2.0, s / 2.0), s / 2.0, (s * 0.05, s * 0.1));
        let (dy, dx) = shadow_offset(&b);
        paint(&mut labels, hw, &b.shifted(dy, dx), SHADOW);
        paint(&mut labels, hw, &b, THICK);
    }
    for _ in 0..rng.gen_range(0..3) {
        let b = Blob::random(&mut rng, (s / 2.0, s / 2.0), s / 2.0, (s * 0.05, s * 0.12));
        paint(&mut labels, hw, &b, THIN);
    }
    let jitter = s * 0.04;
    let thick = Blob::random(&mut rng, (s * 0.22, s * 0.22), jitter, (s * 0.09, s * 0.13));
    let (dy, dx) = shadow_offset(&thick);
    paint(&mut labels, hw, &thick.shifted(dy, dx), SHADOW);
    paint(&mut labels, hw, &thick, THICK);
    let thin = Blob::random(&mut rng, (s * 0.75, s * 0.75), jitter, (s * 0.09, s * 0.14));
    paint(&mut labels, hw, &thin, THIN);

    let background = SmoothField::new(&mut rng, hw);
    let texture = SmoothField::new(&mut rng, hw);
    let mut raw = vec![0f32; bands * hw * hw];
    for b in 0..bands {
        let t = if bands > 1 {
            b as f64 / (bands - 1) as f64
        } else {
            0.0
        };
        let cirrus = b + 1 == bands;
        for y in 0..hw {
            for x in 0..hw {
                let ground = 900.0 + 600.0 * t + 300.0 * background.at(y, x);
                let value = match labels[y * hw + x] {
                    THICK => 5500.0 - 300.0 * t + 400.0 * texture.at(y, x),
                    THIN => ground + 1500.0 * (1.0 - 0.4 * t) + if cirrus { 2000.0 } else { 0.0 },
                    SHADOW => ground * 0.3,
                    _ => ground,
                };
                let noise: f64 = rng.gen_range(-20.0..20.0);
                raw[(b * hw + y) * hw + x] = (value + noise).max(0.0) as f32;
            }
        }
    }
    RasterSample {
        id: format!("synth_{seed}_{index:05}"),
        sensor: Sensor::for_bands(bands).unwrap_or(Sensor::Sentinel2L1c),
        raw: Tensor::new(&[1, bands, hw, hw], raw).expect("synthetic raster shape"),
        labels: Some(labels),
    }
}

pub fn synth_dataset(n: usize, hw: usize, bands: usize, seed: u64) -> Vec<RasterSample> {
    (0..n).map(|i| synth_sample(i, hw, bands, seed)).collect()
}
