//! Checkpoint container.
//!
//! Little-endian layout: magic `MSCK`, `u8` version, 3 reserved bytes, `u64`
//! training step, `u32`-length config text, `u32` entry count with
//! `(u16 name length, name, u8 rank, u32 dims…, u64 offset)` per parameter, a
//! `u8` optimiser flag with an optional `u64` optimiser step, a `u64` value count
//! followed by the f32 payload (parameters, then first and second moments when
//! present), and finally a SHA-256 digest of every preceding byte.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::MsCloudCam;
use crate::config::{KvFile, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Tensor};
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSCK";
pub const CHECKPOINT_VERSION: u8 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Tensor<f32>>,
    pub second: Vec<Tensor<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Completed training steps.
    pub step: u64,
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn capture(
        config: &ModelConfig,
        params: &ParamStore<f32>,
        step: u64,
        adam: Option<&Adam<f32>>,
    ) -> Self {
        let named = (0..params.len())
            .map(|i| (params.name(i).to_string(), params.values()[i].clone()))
            .collect();
        let optimizer = adam.map(|a| {
            let (first, second) = a.moments();
            OptimizerState {
                step: a.step_count(),
                first: first.to_vec(),
                second: second.to_vec(),
            }
        });
        Checkpoint {
            config: config.clone(),
            step,
            params: named,
            optimizer,
        }
    }

    /// Parameter store for `net`, after checking the config snapshot and manifest.
    pub fn restore(&self, net: &MsCloudCam) -> Result<ParamStore<f32>> {
        if let Some((key, ours, theirs)) = net.config.first_difference(&self.config) {
            return Err(Error::Checkpoint(format!(
                "config mismatch on {key}: model has {ours}, checkpoint has {theirs}"
            )));
        }
        let specs = net.layout.specs();
        if specs.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model expects {}",
                self.params.len(),
                specs.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(&self.params) {
            if spec.name != *name || spec.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "manifest entry {name} {:?} does not match model parameter {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        ParamStore::from_values(
            &net.layout,
            self.params.iter().map(|(_, t)| t.clone()).collect(),
        )
    }

    pub fn adam(&self, config: AdamConfig) -> Option<Adam<f32>> {
        self.optimizer
            .as_ref()
            .map(|o| Adam::from_state(config, o.step, o.first.clone(), o.second.clone()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&[0; 3]);
        out.write_u64::<LittleEndian>(self.step).unwrap();
        let text = self.config.to_text();
        out.write_u32::<LittleEndian>(text.len() as u32).unwrap();
        out.extend_from_slice(text.as_bytes());
        out.write_u32::<LittleEndian>(self.params.len() as u32)
            .unwrap();
        let mut offset = 0u64;
        for (name, t) in &self.params {
            out.write_u16::<LittleEndian>(name.len() as u16).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.write_u32::<LittleEndian>(d as u32).unwrap();
            }
            out.write_u64::<LittleEndian>(offset).unwrap();
            offset += t.numel() as u64;
        }
        let mut payload: Vec<&Tensor<f32>> = self.params.iter().map(|(_, t)| t).collect();
        match &self.optimizer {
            Some(o) => {
                out.push(1);
                out.write_u64::<LittleEndian>(o.step).unwrap();
                payload.extend(o.first.iter().chain(&o.second));
            }
            None => out.push(0),
        }
        let count: usize = payload.iter().map(|t| t.numel()).sum();
        out.write_u64::<LittleEndian>(count as u64).unwrap();
        out.reserve(count * 4 + DIGEST_LEN);
        for t in payload {
            for &v in t.data() {
                out.write_f32::<LittleEndian>(v).unwrap();
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
        if bytes.len() < 8 + DIGEST_LEN {
            return Err(err(format!(
                "file is {} bytes, too short for a checkpoint",
                bytes.len()
            )));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(err("bad magic, expected \"MSCK\"".into()));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(err(format!(
                "format version {} is not supported (expected {CHECKPOINT_VERSION})",
                bytes[4]
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(err("checksum mismatch: file is corrupted".into()));
        }
        let mut cur = Cursor::new(&body[8..]);
        let short = |_| err("truncated header".into());
        let step = cur.read_u64::<LittleEndian>().map_err(short)?;
        let text_len = cur.read_u32::<LittleEndian>().map_err(short)? as usize;
        let mut text = vec![0u8; text_len];
        cur.read_exact(&mut text).map_err(short)?;
        let text =
            String::from_utf8(text).map_err(|_| err("config snapshot is not UTF-8".into()))?;
        let mut kv = KvFile::parse(&text, Some(path))?;
        let config =
            ModelConfig::from_kv(&mut kv).map_err(|e| err(format!("config snapshot: {e}")))?;
        kv.finish()
            .map_err(|e| err(format!("config snapshot: {e}")))?;

        let n = cur.read_u32::<LittleEndian>().map_err(short)? as usize;
        let mut manifest = Vec::with_capacity(n);
        let mut expected_offset = 0u64;
        for _ in 0..n {
            let len = cur.read_u16::<LittleEndian>().map_err(short)? as usize;
            let mut name = vec![0u8; len];
            cur.read_exact(&mut name).map_err(short)?;
            let name =
                String::from_utf8(name).map_err(|_| err("parameter name is not UTF-8".into()))?;
            let rank = cur.read_u8().map_err(short)? as usize;
            let shape = (0..rank)
                .map(|_| cur.read_u32::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(short)?;
            let offset = cur.read_u64::<LittleEndian>().map_err(short)?;
            if offset != expected_offset {
                return Err(err(format!(
                    "entry {name} at offset {offset}, expected {expected_offset}"
                )));
            }
            expected_offset += shape.iter().product::<usize>() as u64;
            manifest.push((name, shape));
        }
        let opt_step = match cur.read_u8().map_err(short)? {
            0 => None,
            1 => Some(cur.read_u64::<LittleEndian>().map_err(short)?),
            f => return Err(err(format!("optimizer flag {f}, expected 0 or 1"))),
        };
        let count = cur.read_u64::<LittleEndian>().map_err(short)? as usize;
        let groups = if opt_step.is_some() { 3 } else { 1 };
        if count as u64 != expected_offset * groups {
            return Err(err(format!(
                "payload declares {count} values, manifest needs {}",
                expected_offset * groups
            )));
        }
        let start = 8 + cur.position() as usize;
        let data = &body[start..];
        if data.len() != count * 4 {
            return Err(err(format!(
                "payload short: expected {} bytes, got {}",
                count * 4,
                data.len()
            )));
        }
        let mut values = data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        let mut read_group = || -> Result<Vec<Tensor<f32>>> {
            manifest
                .iter()
                .map(|(_, shape)| {
                    let n: usize = shape.iter().product();
                    Tensor::new(shape, values.by_ref().take(n).collect())
                })
                .collect()
        };
        let tensors = read_group()?;
        let optimizer = match opt_step {
            Some(s) => Some(OptimizerState {
                step: s,
                first: read_group()?,
                second: read_group()?,
            }),
            None => None,
        };
        let params = manifest.into_iter().map(|(n, _)| n).zip(tensors).collect();
        Ok(Checkpoint {
            config,
            step,
            params,
            optimizer,
        })
    }
}

/// Writes through a temporary file and a rename, so a crash never leaves a
/// half-written checkpoint at `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
