//! Raster ingestion, reflectance normalisation, label remapping, split
//! bookkeeping and procedurally generated scenes.

mod mst;
mod split;
mod synth;

use std::collections::BTreeMap;
use std::sync::Arc;

pub use mst::{load_mst, save_mst, Dtype, MstFile, Payload, MST_MAGIC};
pub use split::SplitManifest;
pub use synth::{synth_dataset, synth_sample};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Divisor taking top-of-atmosphere digital numbers to unitless reflectance.
pub const REFLECTANCE_SCALE: f32 = 3000.0;
pub const IGNORE_LABEL: u8 = 255;

pub const CLASS_NAMES: [&str; 4] = ["clear", "thick", "thin", "shadow"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sensor {
    Sentinel2L1c,
    Sentinel2L2a,
    Landsat8,
}

impl Sensor {
    pub fn code(self) -> u8 {
        match self {
            Sensor::Sentinel2L1c => 0,
            Sensor::Sentinel2L2a => 1,
            Sensor::Landsat8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        [Sensor::Sentinel2L1c, Sensor::Sentinel2L2a, Sensor::Landsat8]
            .into_iter()
            .find(|s| s.code() == code)
    }

    pub fn bands(self) -> usize {
        match self {
            Sensor::Sentinel2L1c | Sensor::Sentinel2L2a => 13,
            Sensor::Landsat8 => 11,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Sensor::Sentinel2L1c => "sentinel2_l1c",
            Sensor::Sentinel2L2a => "sentinel2_l2a",
            Sensor::Landsat8 => "landsat8",
        }
    }

    pub fn for_bands(bands: usize) -> Option<Self> {
        match bands {
            13 => Some(Sensor::Sentinel2L1c),
            11 => Some(Sensor::Landsat8),
            _ => None,
        }
    }
}

/// One scene: raw digital numbers `(1, C, H, W)` and an optional label map.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterSample {
    pub id: String,
    pub sensor: Sensor,
    pub raw: Tensor<f32>,
    pub labels: Option<Vec<u8>>,
}

impl RasterSample {
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.raw.shape();
        (s[1], s[2], s[3])
    }

    /// Reflectance image fed to the network.
    pub fn image(&self) -> Tensor<f32> {
        normalize_reflectance(&self.raw)
    }

    pub fn to_mst(&self) -> MstFile {
        let (c, h, w) = self.dims();
        MstFile {
            sensor: self.sensor,
            channels: c,
            height: h,
            width: w,
            payload: Payload::F32(self.raw.data().to_vec()),
            labels: self.labels.clone(),
        }
    }

    pub fn from_mst(id: impl Into<String>, file: MstFile) -> Result<Self> {
        let id = id.into();
        let raw = match file.payload {
            Payload::F32(v) => Tensor::new(&[1, file.channels, file.height, file.width], v)?,
            Payload::U8(_) => {
                return Err(Error::Data(format!(
                    "{id}: holds a label map, not an image"
                )));
            }
        };
        if file.channels != file.sensor.bands() {
            return Err(Error::Data(format!(
                "{id}: {} bands but sensor {} has {}",
                file.channels,
                file.sensor.name(),
                file.sensor.bands()
            )));
        }
        Ok(RasterSample {
            id,
            sensor: file.sensor,
            raw,
            labels: file.labels,
        })
    }
}

/// `raw / 3000`, without clipping.
pub fn normalize_reflectance<T: Scalar>(raw: &Tensor<T>) -> Tensor<T> {
    let scale = T::lit(REFLECTANCE_SCALE as f64);
    raw.map(|v| v / scale)
}

/// L8Biome raw codes → class indices: 128 clear, 255 thick, 192 thin, 64 shadow,
/// 0 fill (ignored).
pub fn remap_l8biome_value(raw: u8) -> Option<u8> {
    match raw {
        128 => Some(0),
        255 => Some(1),
        192 => Some(2),
        64 => Some(3),
        0 => Some(IGNORE_LABEL),
        _ => None,
    }
}

pub fn remap_l8biome(raw: &[u8]) -> Result<Vec<u8>> {
    let mut bad: BTreeMap<u8, usize> = BTreeMap::new();
    let out: Vec<u8> = raw
        .iter()
        .map(|&v| {
            remap_l8biome_value(v).unwrap_or_else(|| {
                *bad.entry(v).or_default() += 1;
                IGNORE_LABEL
            })
        })
        .collect();
    if bad.is_empty() {
        Ok(out)
    } else {
        let list: Vec<String> = bad.iter().map(|(v, n)| format!("{v} ({n} px)")).collect();
        Err(Error::Data(format!(
            "unexpected L8Biome label values: {}; expected only 0, 64, 128, 192, 255",
            list.join(", ")
        )))
    }
}

/// Stacks samples into a normalised `(B, C, H, W)` batch and its flattened labels.
pub fn collate(samples: &[&RasterSample]) -> Result<(Tensor<f32>, Arc<Vec<u8>>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?;
    let dims = first.dims();
    let mut images = Vec::with_capacity(samples.len());
    let mut labels = Vec::new();
    for s in samples {
        if s.dims() != dims {
            return Err(Error::Data(format!(
                "sample {} has dims {:?}, batch started with {:?}",
                s.id,
                s.dims(),
                dims
            )));
        }
        let l = s
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data(format!("sample {} has no labels", s.id)))?;
        labels.extend_from_slice(l);
        images.push(s.image());
    }
    Ok((Tensor::stack_batch(&images)?, Arc::new(labels)))
}
