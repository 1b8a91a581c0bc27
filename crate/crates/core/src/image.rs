//! Planar float images and binary NetPBM (P5 / P6, maxval 255) coding.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decoded image: `channels × height × width` floats in `[0, 1]`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if !matches!(channels, 1 | 3) {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Clamps every value into `[0, 1]` (NaN becomes 0).
    pub fn from_clipped(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(channels, height, width, data)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            vec![value; channels * height * width],
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// `1×C×H×W` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            &[1, self.channels, self.height, self.width],
            self.data.clone(),
        )
        .expect("consistent size")
    }

    /// Clipped image from a `1×C×H×W` or `C×H×W` tensor.
    pub fn from_tensor_clipped(t: &Tensor<f32>) -> Result<Self> {
        let (c, h, w) = match *t.shape() {
            [1, c, h, w] | [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "expected a single image tensor, got {:?}",
                    t.shape()
                )))
            }
        };
        Self::from_clipped(c, h, w, t.data().to_vec())
    }

    /// Values rounded to the nearest 8-bit level and scaled back.
    pub fn quantized(&self) -> Self {
        Self {
            data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
            ..self.clone()
        }
    }
}

fn to_u8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let bad = |m: &str| Err(Error::Decode(m.to_string()));
    if bytes.len() < 2 || bytes[0] != b'P' {
        return bad("missing NetPBM magic");
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        _ => return bad("only binary P5 (gray) and P6 (color) are supported"),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and comments may precede every header token.
        let mut saw_sep = false;
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => {
                    pos += 1;
                    saw_sep = true;
                }
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                        pos += 1;
                    }
                    saw_sep = true;
                }
                Some(_) => break,
                None => return bad("truncated header"),
            }
        }
        if !saw_sep {
            return bad("header tokens must be separated by whitespace");
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos || pos - start > 9 {
            return bad("expected a decimal header value");
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .expect("at most nine digits");
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Decode(format!(
            "unsupported maxval {maxval} (only 255)"
        )));
    }
    if width == 0 || height == 0 {
        return bad("zero image dimension");
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return bad("missing whitespace after maxval"),
    }
    Ok(Header {
        channels,
        width,
        height,
        data_start: pos,
    })
}

/// Decodes a binary P5 or P6 image with maxval 255. Bytes after the pixel
/// payload are ignored.
pub fn decode_netpbm(bytes: &[u8]) -> Result<ImageBuffer> {
    let h = parse_header(bytes)?;
    let n = h
        .width
        .checked_mul(h.height)
        .and_then(|v| v.checked_mul(h.channels))
        .ok_or_else(|| Error::Decode("image dimensions overflow".into()))?;
    let payload = bytes
        .get(h.data_start..)
        .filter(|p| p.len() >= n)
        .ok_or_else(|| Error::Decode(format!("truncated payload: need {n} bytes")))?;
    let plane = h.width * h.height;
    let mut data = vec![0.0f32; n];
    // Interleaved on disk, planar in memory.
    for (i, &b) in payload[..n].iter().enumerate() {
        let (pixel, c) = (i / h.channels, i % h.channels);
        data[c * plane + pixel] = b as f32 / 255.0;
    }
    ImageBuffer::new(h.channels, h.height, h.width, data)
}

/// Encodes as P5 (1 channel) or P6 (3 channels), rounding to nearest level.
pub fn encode_netpbm(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    let plane = img.width * img.height;
    out.reserve(plane * img.channels);
    for p in 0..plane {
        for c in 0..img.channels {
            out.push(to_u8(img.data[c * plane + p]));
        }
    }
    out
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_netpbm(&bytes).map_err(|e| match e {
        Error::Decode(m) => Error::Decode(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_image(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_netpbm(img)).map_err(|e| Error::io(path, e))
}

/// True for `.pgm` / `.ppm` file names.
pub fn is_netpbm_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("ppm"))
}
