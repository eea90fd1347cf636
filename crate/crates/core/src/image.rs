//! RGB images, binary masks, and binary PNM (P5/P6, maxval 255) codecs.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit RGB image, interleaved row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Planar `3 x H x W` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        Tensor::from_fn([3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            self.data[p * 3 + c] as f64 / 255.0
        })
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Self> {
        let (width, height, data) = decode_pnm(bytes, b"P6", 3, path)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_ppm())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode_ppm(&fs::read(path)?, path)
    }

    /// Alpha-blend `color` over the pixels where `mask` is set.
    pub fn overlay(&self, mask: &Mask, color: [u8; 3], alpha: f64) -> Result<Self> {
        if mask.width != self.width || mask.height != self.height {
            return Err(Error::Shape {
                op: "overlay",
                lhs: vec![self.height, self.width],
                rhs: vec![mask.height, mask.width],
            });
        }
        let mut out = self.clone();
        for (p, &m) in mask.data.iter().enumerate() {
            if m != 0 {
                for (c, &tint) in color.iter().enumerate() {
                    let v = (1.0 - alpha) * self.data[p * 3 + c] as f64 + alpha * tint as f64;
                    out.data[p * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        Ok(out)
    }
}

/// Binary `H x W` mask holding labels 0/1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_labels(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape {
                op: "mask",
                lhs: vec![height, width],
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Usage("mask labels must be 0 or 1".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Labels as floats, for use as a loss target.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Label 1 is stored as 255.
    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }));
        out
    }

    pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Self> {
        let (width, height, raw) = decode_pnm(bytes, b"P5", 1, path)?;
        let data = raw
            .into_iter()
            .map(|v| match v {
                0 => Ok(0),
                255 => Ok(1),
                other => Err(Error::format(
                    path,
                    format!("mask pixel value {other} is not 0 or 255"),
                )),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_pgm())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode_pgm(&fs::read(path)?, path)
    }
}

/// Grayscale heat map in `[0, 1]`, written as P5.
pub fn encode_heatmap(values: &[f64], width: usize, height: usize) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        values
            .iter()
            .map(|v| ((v - lo) / span * 255.0).round() as u8),
    );
    out
}

fn decode_pnm(
    bytes: &[u8],
    magic: &[u8; 2],
    channels: usize,
    path: &Path,
) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::format(
            path,
            format!(
                "bad magic {found:?}, expected {}",
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "malformed header number"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(path, "zero image extent"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(path, "malformed header"));
    }
    pos += 1;
    let expected = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, expected {expected}", payload.len()),
        ));
    }
    Ok((width, height, payload.to_vec()))
}
