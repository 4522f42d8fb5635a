//! The `.mst` raster container.
//!
//! Little-endian layout: magic `MST1`, `u8` dtype (0 = f32, 1 = u8 labels),
//! `u8` sensor, `u16` reserved, `u32` C, H, W, then `C·H·W` channel-major
//! values, then a `u8` presence byte optionally followed by `H·W` label bytes.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::Sensor;
use crate::error::{Error, Result};

pub const MST_MAGIC: &[u8; 4] = b"MST1";
const HEADER_LEN: usize = 4 + 1 + 1 + 2 + 3 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::U8 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn dtype(&self) -> Dtype {
        match self {
            Payload::F32(_) => Dtype::F32,
            Payload::U8(_) => Dtype::U8,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MstFile {
    pub sensor: Sensor,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub payload: Payload,
    pub labels: Option<Vec<u8>>,
}

impl MstFile {
    /// A single-channel label map, as written by inference.
    pub fn label_map(sensor: Sensor, height: usize, width: usize, labels: Vec<u8>) -> Self {
        MstFile {
            sensor,
            channels: 1,
            height,
            width,
            payload: Payload::U8(labels),
            labels: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dims = [self.channels, self.height, self.width];
        let n = dims.iter().product::<usize>();
        if self.payload.len() != n {
            return Err(Error::Data(format!(
                "payload holds {} values for dims {dims:?}",
                self.payload.len()
            )));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.height * self.width {
                return Err(Error::Data(format!(
                    "{} labels for a {}x{} raster",
                    l.len(),
                    self.height,
                    self.width
                )));
            }
        }
        let mut out = Vec::with_capacity(HEADER_LEN + n * self.payload.dtype().width() + 1);
        out.extend_from_slice(MST_MAGIC);
        out.push(self.payload.dtype().code());
        out.push(self.sensor.code());
        out.write_u16::<LittleEndian>(0).unwrap();
        for d in dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::Data(format!("dimension {d} does not fit in u32")))?;
            out.write_u32::<LittleEndian>(d).unwrap();
        }
        match &self.payload {
            Payload::F32(v) => v
                .iter()
                .for_each(|&x| out.write_f32::<LittleEndian>(x).unwrap()),
            Payload::U8(v) => out.extend_from_slice(v),
        }
        match &self.labels {
            Some(l) => {
                out.push(1);
                out.extend_from_slice(l);
            }
            None => out.push(0),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            msg,
        };
        if bytes.len() < HEADER_LEN {
            return Err(err(format!(
                "header short: expected {HEADER_LEN} bytes, got {}",
                bytes.len()
            )));
        }
        if &bytes[..4] != MST_MAGIC {
            return Err(err(format!(
                "bad magic {:?}, expected \"MST1\"",
                String::from_utf8_lossy(&bytes[..4])
            )));
        }
        let mut cur = Cursor::new(&bytes[4..HEADER_LEN]);
        let dtype = match cur.read_u8().unwrap() {
            0 => Dtype::F32,
            1 => Dtype::U8,
            c => return Err(err(format!("unknown dtype code {c}"))),
        };
        let sensor_code = cur.read_u8().unwrap();
        let sensor = Sensor::from_code(sensor_code)
            .ok_or_else(|| err(format!("unknown sensor code {sensor_code}")))?;
        let _reserved = cur.read_u16::<LittleEndian>().unwrap();
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = cur.read_u32::<LittleEndian>().unwrap() as usize;
        }
        let [c, h, w] = dims;
        if dims.contains(&0) {
            return Err(err(format!("zero dimension in {c}x{h}x{w}")));
        }
        let need = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .and_then(|v| v.checked_mul(dtype.width()))
            .ok_or_else(|| err(format!("dimensions {c}x{h}x{w} overflow")))?;
        let body = &bytes[HEADER_LEN..];
        if body.len() < need {
            return Err(err(format!(
                "payload short: expected {need} bytes, got {}",
                body.len()
            )));
        }
        let payload = match dtype {
            Dtype::F32 => Payload::F32(
                body[..need]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            ),
            Dtype::U8 => Payload::U8(body[..need].to_vec()),
        };
        let mut rest = Cursor::new(&body[need..]);
        let labels = match rest.read_u8() {
            Err(_) | Ok(0) => None,
            Ok(1) => {
                let mut l = vec![0u8; h * w];
                let got = rest.read(&mut l).unwrap_or(0);
                if got < l.len() {
                    return Err(err(format!(
                        "label block short: expected {} bytes, got {got}",
                        h * w
                    )));
                }
                Some(l)
            }
            Ok(flag) => return Err(err(format!("label presence byte {flag}, expected 0 or 1"))),
        };
        let trailing = body.len() - need - rest.position() as usize;
        if trailing > 0 {
            return Err(err(format!("{trailing} unexpected trailing bytes")));
        }
        Ok(MstFile {
            sensor,
            channels: c,
            height: h,
            width: w,
            payload,
            labels,
        })
    }
}

pub fn save_mst(file: &MstFile, path: &Path) -> Result<()> {
    let bytes = file.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_mst(path: &Path) -> Result<MstFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    MstFile::from_bytes(&bytes, path)
}
