//! Class maps as colour images.

use mscloudcam::{Error, Result};

/// RGB per class: clear, thick cloud, thin cloud, shadow.
pub const CLASS_COLORS: [[u8; 3]; 4] = [
    [173, 216, 230],
    [255, 255, 255],
    [211, 211, 211],
    [105, 105, 105],
];

/// Binary PPM (P6). Ignore-labelled or unknown pixels are drawn black.
pub fn encode_ppm(labels: &[u8], height: usize, width: usize) -> Result<Vec<u8>> {
    if labels.len() != height * width {
        return Err(Error::Data(format!(
            "{} labels for a {height}x{width} image",
            labels.len()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(labels.len() * 3);
    for &l in labels {
        out.extend_from_slice(CLASS_COLORS.get(l as usize).unwrap_or(&[0, 0, 0]));
    }
    Ok(out)
}

/// Inverse of [`encode_ppm`] for the colours it writes.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let bad = |m: &str| Error::Data(format!("ppm: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields
            .push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ascii"))?);
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("expected an 8-bit P6 image"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let body = &bytes[pos + 1..];
    if body.len() != width * height * 3 {
        return Err(bad("pixel data length does not match header"));
    }
    Ok((
        height,
        width,
        body.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
    ))
}
