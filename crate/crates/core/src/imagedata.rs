//! Raster types shared by all stages, probability clamping, and the two
//! on-disk codecs: binary PGM (`P5`, masks and grayscale images; `P6` for RGB
//! images) and the HPM float32 probability-map format.
//!
//! All rasters are row-major with the origin at the top-left corner.

use std::fs;
use std::path::Path;

use crate::error::{HcrfError, Result};

/// Clamp margin used whenever probabilities are about to enter a logarithm.
pub const DEFAULT_EPSILON: f64 = 1e-6;

const HPM_MAGIC: &str = "HPM1";

/// Common read access to the row-major rasters, used by the geometric
/// transforms (tiling, flips, rotations) in [`crate::dataset`].
pub trait Raster: Clone {
    type Sample: Copy;

    fn width(&self) -> usize;
    fn height(&self) -> usize;

    /// Samples per pixel.
    fn channels(&self) -> usize {
        1
    }

    fn samples(&self) -> &[Self::Sample];

    /// Builds a raster of the same kind (and channel count) with new geometry.
    fn rebuild(&self, width: usize, height: usize, samples: Vec<Self::Sample>) -> Self;
}

/// 8-bit image, one or three channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    channels: usize,
    samples: Vec<u8>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, channels: usize, samples: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(HcrfError::parameter("image dimensions must be at least 1x1"));
        }
        if channels != 1 && channels != 3 {
            return Err(HcrfError::parameter(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if samples.len() != width * height * channels {
            return Err(HcrfError::parameter(format!(
                "image sample count {} does not match {width}x{height}x{channels}",
                samples.len()
            )));
        }
        Ok(ImageGrid {
            width,
            height,
            channels,
            samples,
        })
    }

    pub fn gray(width: usize, height: usize, samples: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, samples)
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let start = (y * self.width + x) * self.channels;
        &self.samples[start..start + self.channels]
    }

    /// Per-pixel luma (ITU-R BT.601 weights), rounded to 8 bits.
    pub fn luma(&self) -> Vec<u8> {
        match self.channels {
            1 => self.samples.clone(),
            _ => self
                .samples
                .chunks_exact(3)
                .map(|px| luma_of(px[0] as f64, px[1] as f64, px[2] as f64).round() as u8)
                .collect(),
        }
    }
}

pub(crate) fn luma_of(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

impl Raster for ImageGrid {
    type Sample = u8;

    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn channels(&self) -> usize {
        self.channels
    }
    fn samples(&self) -> &[u8] {
        &self.samples
    }
    fn rebuild(&self, width: usize, height: usize, samples: Vec<u8>) -> Self {
        ImageGrid {
            width,
            height,
            channels: self.channels,
            samples,
        }
    }
}

/// Binary segmentation: 1 = foreground (abnormal tissue), 0 = background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(HcrfError::parameter("mask dimensions must be at least 1x1"));
        }
        if labels.len() != width * height {
            return Err(HcrfError::parameter(format!(
                "mask label count {} does not match {width}x{height}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(HcrfError::parameter(format!("mask label {bad} is not binary")));
        }
        Ok(LabelMask { width, height, labels })
    }

    pub fn filled(width: usize, height: usize, label: bool) -> Self {
        LabelMask {
            width,
            height,
            labels: vec![label as u8; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut labels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(x, y) as u8);
            }
        }
        LabelMask { width, height, labels }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.labels[y * self.width + x] == 1
    }
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.labels[y * self.width + x] = value as u8;
    }
    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
    pub fn same_dims(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }

    pub fn complement(&self) -> LabelMask {
        LabelMask {
            width: self.width,
            height: self.height,
            labels: self.labels.iter().map(|&l| 1 - l).collect(),
        }
    }
}

impl Raster for LabelMask {
    type Sample = u8;

    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn samples(&self) -> &[u8] {
        &self.labels
    }
    fn rebuild(&self, width: usize, height: usize, samples: Vec<u8>) -> Self {
        LabelMask {
            width,
            height,
            labels: samples,
        }
    }
}

/// Per-pixel (or per-patch) foreground probability.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ProbMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(HcrfError::parameter("probability map dimensions must be at least 1x1"));
        }
        if values.len() != width * height {
            return Err(HcrfError::parameter(format!(
                "probability count {} does not match {width}x{height}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(HcrfError::parameter(format!("probability {bad} outside [0,1]")));
        }
        Ok(ProbMap { width, height, values })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Constructor for values already known to lie in `[0,1]`.
    pub(crate) fn from_unchecked(width: usize, height: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), width * height);
        debug_assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
        ProbMap { width, height, values }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
    pub fn same_dims(&self, other: &ProbMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// True when every value is strictly inside (0,1), i.e. safe for `ln p` and `ln(1-p)`.
    pub fn is_open_unit(&self) -> bool {
        self.values.iter().all(|&v| v > 0.0 && v < 1.0)
    }

    /// Binarizes at 0.5; exact halves go to background.
    pub fn threshold(&self) -> LabelMask {
        LabelMask {
            width: self.width,
            height: self.height,
            labels: self.values.iter().map(|&v| (v > 0.5) as u8).collect(),
        }
    }
}

impl Raster for ProbMap {
    type Sample = f64;

    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn samples(&self) -> &[f64] {
        &self.values
    }
    fn rebuild(&self, width: usize, height: usize, samples: Vec<f64>) -> Self {
        ProbMap {
            width,
            height,
            values: samples,
        }
    }
}

impl From<&LabelMask> for ProbMap {
    fn from(mask: &LabelMask) -> Self {
        ProbMap {
            width: mask.width,
            height: mask.height,
            values: mask.labels.iter().map(|&l| l as f64).collect(),
        }
    }
}

/// Pixel tally by (prediction, ground truth).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, rhs: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + rhs.tp,
            fp: self.fp + rhs.fp,
            tn: self.tn + rhs.tn,
            fn_: self.fn_ + rhs.fn_,
        }
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = ConfusionCounts>>(iter: I) -> Self {
        iter.fold(ConfusionCounts::default(), |a, b| a + b)
    }
}

/// Clamps every probability into `[epsilon, 1 - epsilon]`.
pub fn clamp_prob(map: &ProbMap, epsilon: f64) -> Result<ProbMap> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(HcrfError::parameter(format!(
            "clamp epsilon {epsilon} must lie in (0, 0.5)"
        )));
    }
    let hi = 1.0 - epsilon;
    Ok(ProbMap {
        width: map.width,
        height: map.height,
        values: map.values.iter().map(|&v| v.max(epsilon).min(hi)).collect(),
    })
}

// ---------------------------------------------------------------------------
// PGM
// ---------------------------------------------------------------------------

struct PgmHeader<'a> {
    magic: &'a str,
    width: usize,
    height: usize,
    maxval: usize,
    payload: &'a [u8],
}

fn parse_pnm(bytes: &[u8]) -> Result<PgmHeader<'_>> {
    let mut pos = 0usize;
    let mut tokens: Vec<&str> = Vec::with_capacity(4);
    while tokens.len() < 4 {
        // Skip whitespace and comments.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(HcrfError::format("truncated PGM header")),
            }
        }
        let start = pos;
        while let Some(b) = bytes.get(pos) {
            if b.is_ascii_whitespace() || *b == b'#' {
                break;
            }
            pos += 1;
        }
        let tok = std::str::from_utf8(&bytes[start..pos]).map_err(|_| HcrfError::format("non-ASCII PGM header"))?;
        tokens.push(tok);
    }
    // Exactly one whitespace byte separates the header from the payload.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(HcrfError::format("missing whitespace after PGM maxval")),
    }
    let parse_num = |tok: &str, what: &str| -> Result<usize> {
        tok.parse::<usize>()
            .map_err(|_| HcrfError::format(format!("invalid PGM {what} {tok:?}")))
    };
    let width = parse_num(tokens[1], "width")?;
    let height = parse_num(tokens[2], "height")?;
    let maxval = parse_num(tokens[3], "maxval")?;
    if width == 0 || height == 0 {
        return Err(HcrfError::format("PGM dimensions must be nonzero"));
    }
    Ok(PgmHeader {
        magic: tokens[0],
        width,
        height,
        maxval,
        payload: &bytes[pos..],
    })
}

fn take_payload<'a>(header: &PgmHeader<'a>, channels: usize) -> Result<&'a [u8]> {
    let expected = header.width * header.height * channels;
    if header.payload.len() < expected {
        return Err(HcrfError::format(format!(
            "truncated payload: expected {expected} bytes, found {}",
            header.payload.len()
        )));
    }
    if header.payload.len() > expected {
        return Err(HcrfError::format(format!(
            "trailing data after {expected}-byte payload"
        )));
    }
    Ok(header.payload)
}

/// Decodes a mask from PGM bytes; samples must be exactly 0 or 255.
pub fn decode_mask(bytes: &[u8]) -> Result<LabelMask> {
    let header = parse_pnm(bytes)?;
    if header.magic != "P5" {
        return Err(HcrfError::format(format!(
            "mask must be binary PGM (P5), found magic {:?}",
            header.magic
        )));
    }
    if header.maxval != 255 {
        return Err(HcrfError::format(format!(
            "mask maxval must be 255, found {}",
            header.maxval
        )));
    }
    let payload = take_payload(&header, 1)?;
    let labels = payload
        .iter()
        .enumerate()
        .map(|(i, &b)| match b {
            0 => Ok(0),
            255 => Ok(1),
            other => Err(HcrfError::format(format!(
                "mask sample {other} at offset {i} is neither 0 nor 255"
            ))),
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelMask::new(header.width, header.height, labels)
}

pub fn encode_mask(mask: &LabelMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.labels.iter().map(|&l| if l == 1 { 255u8 } else { 0u8 }));
    out
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| HcrfError::io(path, e))?;
    decode_mask(&bytes).map_err(|e| e.context(format!("reading mask {}", path.display())))
}

pub fn write_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mask(mask)).map_err(|e| HcrfError::io(path, e))
}

/// Decodes an 8-bit `P5` (gray) or `P6` (RGB) image.
pub fn decode_image(bytes: &[u8]) -> Result<ImageGrid> {
    let header = parse_pnm(bytes)?;
    let channels = match header.magic {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(HcrfError::format(format!(
                "image must be P5 or P6, found magic {other:?}"
            )))
        }
    };
    if header.maxval != 255 {
        return Err(HcrfError::format(format!(
            "image maxval must be 255, found {}",
            header.maxval
        )));
    }
    let payload = take_payload(&header, channels)?;
    ImageGrid::new(header.width, header.height, channels, payload.to_vec())
}

pub fn encode_image(image: &ImageGrid) -> Vec<u8> {
    let magic = if image.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.samples);
    out
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| HcrfError::io(path, e))?;
    decode_image(&bytes).map_err(|e| e.context(format!("reading image {}", path.display())))
}

pub fn write_image(image: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_image(image)).map_err(|e| HcrfError::io(path, e))
}

// ---------------------------------------------------------------------------
// HPM
// ---------------------------------------------------------------------------

/// Decodes `HPM1 <w> <h>\n` followed by `w*h` little-endian float32 values.
pub fn decode_probmap(bytes: &[u8]) -> Result<ProbMap> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| HcrfError::format("HPM header not terminated by newline"))?;
    let header = std::str::from_utf8(&bytes[..newline]).map_err(|_| HcrfError::format("HPM header is not UTF-8"))?;
    let mut parts = header.split(' ');
    if parts.next() != Some(HPM_MAGIC) {
        return Err(HcrfError::format(format!("bad HPM magic in header {header:?}")));
    }
    let mut dim = |what: &str| -> Result<usize> {
        parts
            .next()
            .and_then(|t| t.parse::<usize>().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| HcrfError::format(format!("invalid HPM {what} in header {header:?}")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    if parts.next().is_some() {
        return Err(HcrfError::format(format!("extra fields in HPM header {header:?}")));
    }
    let payload = &bytes[newline + 1..];
    let expected = width * height * 4;
    if payload.len() != expected {
        return Err(HcrfError::format(format!(
            "HPM payload is {} bytes, header {width}x{height} needs {expected}",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .enumerate()
        .map(|(i, chunk)| {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if (0.0..=1.0).contains(&v) {
                Ok(v as f64)
            } else {
                Err(HcrfError::format(format!("HPM value {v} at index {i} outside [0,1]")))
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ProbMap::from_unchecked(width, height, values))
}

/// Encodes at float32 precision.
pub fn encode_probmap(map: &ProbMap) -> Vec<u8> {
    let mut out = format!("{HPM_MAGIC} {} {}\n", map.width, map.height).into_bytes();
    out.reserve(map.values.len() * 4);
    for &v in &map.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn read_probmap(path: impl AsRef<Path>) -> Result<ProbMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| HcrfError::io(path, e))?;
    decode_probmap(&bytes).map_err(|e| e.context(format!("reading probability map {}", path.display())))
}

pub fn write_probmap(map: &ProbMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_probmap(map)).map_err(|e| HcrfError::io(path, e))
}
