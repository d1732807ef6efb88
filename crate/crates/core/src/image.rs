//! Images, file formats and degradation protocols.
//!
//! Supported containers:
//! - binary PGM (`P5`, maxval 255 or 65535, 16-bit samples big-endian)
//! - binary PPM (`P6`, maxval 255)
//! - `F32R`: the magic `F32R`, then little-endian `u32` height, width and
//!   channels, then little-endian `f32` samples in row-major, channel-last
//!   order. Lossless.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A raster with 1 or 3 channels, samples normalized to `[0, 1]`.
///
/// `dynamic_range` is the container maximum the samples were divided by
/// (255 for 8-bit, 65535 for 16-bit, 1 for `F32R`) and converts errors back
/// to native units.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    /// Channel-last, row-major.
    data: Vec<f32>,
    dynamic_range: f32,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>, dynamic_range: f32) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::arg(format!("images have 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::arg("image dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::arg(format!(
                "{height}×{width}×{channels} image needs {} samples, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if !(dynamic_range > 0.0 && dynamic_range.is_finite()) {
            return Err(Error::arg("dynamic range must be positive"));
        }
        Ok(Image { height, width, channels, data, dynamic_range })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32, dynamic_range: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels], dynamic_range)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn dynamic_range(&self) -> f32 {
        self.dynamic_range
    }

    pub fn with_dynamic_range(mut self, dynamic_range: f32) -> Self {
        self.dynamic_range = dynamic_range;
        self
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// `C×H×W` tensor of the normalized samples.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (h, w, c) = self.dims();
        Tensor::from_fn(&[c, h, w], |i| {
            let (ch, p) = (i / (h * w), i % (h * w));
            T::lit(self.data[p * c + ch] as f64)
        })
    }

    /// Builds an image from a `C×H×W` tensor, clamping samples to `[0, 1]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, dynamic_range: f32) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        let mut data = vec![0.0f32; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                data[p * c + ch] = (t.data()[ch * h * w + p].as_f64() as f32).clamp(0.0, 1.0);
            }
        }
        Image::new(h, w, c, data, dynamic_range)
    }

    /// Quantizes to the 8- or 16-bit grid implied by the dynamic range.
    pub fn quantized(&self) -> Image {
        let maxval = container_maxval(self.channels, self.dynamic_range) as f32;
        let data = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * maxval).round() / maxval).collect();
        Image { data, ..self.clone() }
    }
}

fn container_maxval(channels: usize, dynamic_range: f32) -> u32 {
    if channels == 1 && dynamic_range > 255.0 {
        65535
    } else {
        255
    }
}

/// Image file containers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Pgm,
    Ppm,
    F32r,
}

impl Format {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        match ext.as_deref() {
            Some("pgm") => Ok(Format::Pgm),
            Some("ppm") => Ok(Format::Ppm),
            Some("pnm") => Ok(Format::Pgm),
            Some("f32r") => Ok(Format::F32r),
            _ => Err(Error::arg(format!("cannot infer image format from {}", path.display()))),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Format::Pgm => "pgm",
            Format::Ppm => "ppm",
            Format::F32r => "f32r",
        }
    }
}

pub fn load(path: impl AsRef<Path>) -> Result<Image> {
    decode(&fs::read(path)?)
}

/// Writes `img` in the container named by the file extension; `.pnm` picks
/// PGM or PPM from the channel count.
pub fn save(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let format = match Format::from_path(path)? {
        Format::Pgm | Format::Ppm if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pnm")) => {
            if img.channels == 1 {
                Format::Pgm
            } else {
                Format::Ppm
            }
        }
        f => f,
    };
    fs::write(path, encode(img, format)?)?;
    Ok(())
}

/// Decodes any supported container, sniffing the magic bytes.
pub fn decode(bytes: &[u8]) -> Result<Image> {
    match bytes.get(..2) {
        Some(b"P5") => decode_pnm(bytes, 1),
        Some(b"P6") => decode_pnm(bytes, 3),
        _ if bytes.starts_with(b"F32R") => decode_f32r(bytes),
        _ => Err(Error::format(0, "unrecognized magic (expected P5, P6 or F32R)")),
    }
}

pub fn encode(img: &Image, format: Format) -> Result<Vec<u8>> {
    match format {
        Format::F32r => {
            let mut out = Vec::with_capacity(16 + img.data.len() * 4);
            out.extend_from_slice(b"F32R");
            for v in [img.height, img.width, img.channels] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
            for v in &img.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
            Ok(out)
        }
        Format::Pgm | Format::Ppm => {
            let (magic, channels) = if format == Format::Pgm { ("P5", 1) } else { ("P6", 3) };
            if img.channels != channels {
                return Err(Error::arg(format!(
                    "{} stores {channels}-channel images, got {} channels",
                    format.extension(),
                    img.channels
                )));
            }
            let maxval = container_maxval(channels, img.dynamic_range);
            let mut out = format!("{magic}\n{} {}\n{maxval}\n", img.width, img.height).into_bytes();
            for &v in &img.data {
                let q = (v.clamp(0.0, 1.0) * maxval as f32).round() as u32;
                if maxval > 255 {
                    out.extend_from_slice(&(q as u16).to_be_bytes());
                } else {
                    out.push(q as u8);
                }
            }
            Ok(out)
        }
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start, format!("expected {what}")));
        }
        if self.pos - start > 9 {
            return Err(Error::format(start, format!("{what} is too large")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        Ok(text.parse().expect("at most nine digits"))
    }
}

fn decode_pnm(bytes: &[u8], channels: usize) -> Result<Image> {
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format(maxval_at, "zero image dimension"));
    }
    match (channels, maxval) {
        (1, 255 | 65535) | (3, 255) => {}
        _ => return Err(Error::format(maxval_at, format!("unsupported maxval {maxval}"))),
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(cur.pos, "expected whitespace after maxval"));
    }
    let start = cur.pos + 1;
    let bytes_per_sample = if maxval > 255 { 2 } else { 1 };
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::format(maxval_at, "image dimensions overflow"))?;
    let need = n * bytes_per_sample;
    if bytes.len() < start + need {
        return Err(Error::format(bytes.len(), format!("truncated raster: need {need} bytes after offset {start}")));
    }
    let raster = &bytes[start..start + need];
    let scale = 1.0 / maxval as f32;
    let data = if bytes_per_sample == 2 {
        raster
            .chunks_exact(2)
            .enumerate()
            .map(|(i, b)| {
                let v = u16::from_be_bytes([b[0], b[1]]) as usize;
                if v > maxval {
                    Err(Error::format(start + 2 * i, format!("sample {v} exceeds maxval {maxval}")))
                } else {
                    Ok(v as f32 * scale)
                }
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        raster.iter().map(|&v| v as f32 * scale).collect()
    };
    Image::new(height, width, channels, data, maxval as f32)
}

fn decode_f32r(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 16 {
        return Err(Error::format(bytes.len(), "truncated F32R header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (height, width, channels) = (word(0), word(1), word(2));
    if channels != 1 && channels != 3 {
        return Err(Error::format(12, format!("unsupported channel count {channels}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::format(4, "zero image dimension"));
    }
    let n = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(channels))
        .filter(|&n| n <= (usize::MAX - 16) / 4)
        .ok_or_else(|| Error::format(4, "image dimensions overflow"))?;
    if bytes.len() < 16 + 4 * n {
        return Err(Error::format(bytes.len(), format!("truncated F32R raster: need {} bytes", 16 + 4 * n)));
    }
    let data: Vec<f32> = bytes[16..16 + 4 * n]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::format(16 + 4 * i, format!("sample {} outside [0, 1]", data[i])));
    }
    Image::new(height, width, channels, data, 1.0)
}

/// Non-overlapping `scale×scale` average pooling.
pub fn degrade_pool(hr: &Image, scale: usize) -> Result<Image> {
    let (h, w, c) = hr.dims();
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::arg(format!("{h}×{w} is not divisible by scale {scale}")));
    }
    let (oh, ow) = (h / scale, w / scale);
    let inv = 1.0 / (scale * scale) as f64;
    let mut data = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for y in oy * scale..(oy + 1) * scale {
                    for x in ox * scale..(ox + 1) * scale {
                        acc += hr.get(y, x, ch) as f64;
                    }
                }
                data.push((acc * inv) as f32);
            }
        }
    }
    Image::new(oh, ow, c, data, hr.dynamic_range)
}

/// Nearest-neighbor replication by an integer factor.
pub fn replicate_up(img: &Image, factor: usize) -> Result<Image> {
    let (h, w, c) = img.dims();
    if factor == 0 {
        return Err(Error::arg("replication factor must be positive"));
    }
    let mut data = Vec::with_capacity(h * w * c * factor * factor);
    for y in 0..h * factor {
        for x in 0..w * factor {
            for ch in 0..c {
                data.push(img.get(y / factor, x / factor, ch));
            }
        }
    }
    Image::new(h * factor, w * factor, c, data, img.dynamic_range)
}

/// Adds i.i.d. Gaussian noise of standard deviation `sigma255 / 255` and
/// clips to `[0, 1]`.
pub fn add_gaussian_noise(img: &Image, sigma255: f64, seed: u64) -> Result<Image> {
    if !(sigma255 >= 0.0 && sigma255.is_finite()) {
        return Err(Error::arg("noise level must be a nonnegative number"));
    }
    if sigma255 == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma255 / 255.0).map_err(|e| Error::arg(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = img
        .data
        .iter()
        .map(|&v| ((v as f64 + normal.sample(&mut rng)) as f32).clamp(0.0, 1.0))
        .collect();
    Ok(Image { data, ..img.clone() })
}
