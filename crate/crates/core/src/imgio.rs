//! Raster types and the binary codecs used for persistence: PPM/PGM for
//! images and masks, SMF for float planes, and the U-Net checkpoint format.
//!
//! All multi-plane rasters are plane-major: pixel `(x, y)` of plane `p` lives
//! at `p * w * h + y * w + x`.

use thiserror::Error;

use crate::nn::UNetConfig;
use crate::stats::ChannelStats;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("malformed header: {0}")]
    MalformedHeader(&'static str),
    #[error("unsupported maxval {0} (only 255 is accepted)")]
    UnsupportedMaxval(u32),
    #[error("zero image dimension ({width}x{height})")]
    ZeroDimension { width: usize, height: usize },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported plane count {0} (expected 1 or 2)")]
    BadPlaneCount(u32),
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("parameter count {found} does not match config ({expected})")]
    LengthMismatch { expected: usize, found: usize },
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f32),
}

pub type Result<T> = std::result::Result<T, CodecError>;

/// Three-plane color image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// All R, then all G, then all B.
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != 3 * width * height {
            return Err(CodecError::InvalidRaster(format!(
                "rgb data length {} != 3*{}*{}",
                data.len(),
                width,
                height
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CodecError::InvalidRaster("rgb value outside [0,1]".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let n = width * height;
        let mut data = Vec::with_capacity(3 * n);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, n));
        }
        Self { width, height, data }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let n = self.width * self.height;
        let i = y * self.width + x;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// Binary raster: 0 = background skin, 1 = lesion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(CodecError::InvalidRaster(format!(
                "mask data length {} != {}*{}",
                data.len(),
                width,
                height
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(CodecError::InvalidRaster("mask value not in {0,1}".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// Raw two-channel network output: `s0` background, `s1` foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub width: usize,
    pub height: usize,
    pub s0: Vec<f32>,
    pub s1: Vec<f32>,
}

impl ScoreMap {
    pub fn new(width: usize, height: usize, s0: Vec<f32>, s1: Vec<f32>) -> Result<Self> {
        check_dims(width, height)?;
        if s0.len() != width * height || s1.len() != width * height {
            return Err(CodecError::InvalidRaster("score plane length mismatch".into()));
        }
        if s0.iter().chain(s1.iter()).any(|v| !v.is_finite()) {
            return Err(CodecError::InvalidRaster("non-finite score".into()));
        }
        Ok(Self { width, height, s0, s1 })
    }
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(CodecError::ZeroDimension { width, height });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Netpbm (binary P5/P6, maxval 255)
// ---------------------------------------------------------------------------

struct PnmHeader {
    width: usize,
    height: usize,
    payload_start: usize,
}

fn parse_pnm_header(bytes: &[u8], magic: &'static str) -> Result<PnmHeader> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(CodecError::BadMagic { expected: magic });
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // whitespace and comments before each field
        let mut saw_separator = false;
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => {
                    saw_separator = true;
                    pos += 1;
                }
                Some(b'#') => {
                    saw_separator = true;
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(CodecError::MalformedHeader("header ends early")),
            }
        }
        if !saw_separator {
            return Err(CodecError::MalformedHeader("missing whitespace"));
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(CodecError::MalformedHeader("expected a decimal integer"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| CodecError::MalformedHeader("integer out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(CodecError::MalformedHeader("maxval must be followed by whitespace")),
    }
    let [width, height, maxval] = fields;
    let (width, height) = (width as usize, height as usize);
    check_dims(width, height)?;
    if maxval != 255 {
        return Err(CodecError::UnsupportedMaxval(maxval));
    }
    Ok(PnmHeader {
        width,
        height,
        payload_start: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &PnmHeader, channels: usize) -> Result<&'a [u8]> {
    let expected = header
        .width
        .checked_mul(header.height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or(CodecError::MalformedHeader("dimensions overflow"))?;
    let found = bytes.len() - header.payload_start;
    if found < expected {
        return Err(CodecError::Truncated { expected, found });
    }
    Ok(&bytes[header.payload_start..header.payload_start + expected])
}

#[inline]
fn quantize(v: f32) -> u8 {
    // round-half-up; f32 -> u8 casts saturate
    (v * 255.0 + 0.5).floor() as u8
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let header = parse_pnm_header(bytes, "P6")?;
    let raw = payload(bytes, &header, 3)?;
    let n = header.width * header.height;
    let mut data = vec![0.0f32; 3 * n];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(RgbImage {
        width: header.width,
        height: header.height,
        data,
    })
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let n = image.width * image.height;
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.reserve(3 * n);
    for i in 0..n {
        for c in 0..3 {
            out.push(quantize(image.data[c * n + i]));
        }
    }
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let header = parse_pnm_header(bytes, "P5")?;
    let raw = payload(bytes, &header, 1)?;
    Ok(GrayImage {
        width: header.width,
        height: header.height,
        data: raw.iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

pub fn encode_gray_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().map(|&v| quantize(v)));
    out
}

/// Masks are written with the challenge convention: 0 -> 0, 1 -> 255.
pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|&v| if v != 0 { 255u8 } else { 0 }));
    out
}

/// Binarize a grayscale raster: foreground iff value >= `threshold`.
pub fn mask_from_gray(gray: &GrayImage, threshold: f32) -> Result<Mask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CodecError::BadThreshold(threshold));
    }
    Ok(Mask {
        width: gray.width,
        height: gray.height,
        data: gray.data.iter().map(|&v| u8::from(v >= threshold)).collect(),
    })
}

// ---------------------------------------------------------------------------
// SMF: "SMF1" | w u32le | h u32le | planes u32le | f32le * planes*w*h
// ---------------------------------------------------------------------------

pub const SMF_MAGIC: &[u8; 4] = b"SMF1";
pub const SMF_HEADER_LEN: usize = 16;

/// One or two float planes as stored in an SMF file.
#[derive(Debug, Clone, PartialEq)]
pub struct SmfRaster {
    pub width: usize,
    pub height: usize,
    pub planes: Vec<Vec<f32>>,
}

impl From<&ScoreMap> for SmfRaster {
    fn from(s: &ScoreMap) -> Self {
        Self {
            width: s.width,
            height: s.height,
            planes: vec![s.s0.clone(), s.s1.clone()],
        }
    }
}

impl From<&GrayImage> for SmfRaster {
    fn from(g: &GrayImage) -> Self {
        Self {
            width: g.width,
            height: g.height,
            planes: vec![g.data.clone()],
        }
    }
}

impl TryFrom<SmfRaster> for ScoreMap {
    type Error = CodecError;

    fn try_from(r: SmfRaster) -> Result<Self> {
        if r.planes.len() != 2 {
            return Err(CodecError::BadPlaneCount(r.planes.len() as u32));
        }
        let mut planes = r.planes.into_iter();
        let s0 = planes.next().unwrap();
        let s1 = planes.next().unwrap();
        ScoreMap::new(r.width, r.height, s0, s1)
    }
}

pub fn encode_smf(raster: &SmfRaster) -> Vec<u8> {
    let n = raster.width * raster.height;
    let mut out = Vec::with_capacity(SMF_HEADER_LEN + 4 * n * raster.planes.len());
    out.extend_from_slice(SMF_MAGIC);
    out.extend_from_slice(&(raster.width as u32).to_le_bytes());
    out.extend_from_slice(&(raster.height as u32).to_le_bytes());
    out.extend_from_slice(&(raster.planes.len() as u32).to_le_bytes());
    for plane in &raster.planes {
        debug_assert_eq!(plane.len(), n);
        for v in plane {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_smf(bytes: &[u8]) -> Result<SmfRaster> {
    if bytes.len() < 4 || &bytes[..4] != SMF_MAGIC {
        return Err(CodecError::BadMagic { expected: "SMF1" });
    }
    if bytes.len() < SMF_HEADER_LEN {
        return Err(CodecError::Truncated {
            expected: SMF_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let width = read_u32(bytes, 4) as usize;
    let height = read_u32(bytes, 8) as usize;
    let planes = read_u32(bytes, 12);
    if planes != 1 && planes != 2 {
        return Err(CodecError::BadPlaneCount(planes));
    }
    check_dims(width, height)?;
    let n = width
        .checked_mul(height)
        .ok_or(CodecError::MalformedHeader("dimensions overflow"))?;
    let expected = n
        .checked_mul(4 * planes as usize)
        .ok_or(CodecError::MalformedHeader("dimensions overflow"))?;
    let found = bytes.len() - SMF_HEADER_LEN;
    if found < expected {
        return Err(CodecError::Truncated { expected, found });
    }
    let floats = read_f32s(&bytes[SMF_HEADER_LEN..SMF_HEADER_LEN + expected]);
    Ok(SmfRaster {
        width,
        height,
        planes: floats.chunks_exact(n).map(<[f32]>::to_vec).collect(),
    })
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UNET";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained model: architecture, weights in canonical order, and the channel
/// statistics the inputs were normalized with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: UNetConfig,
    pub params: Vec<f32>,
    pub normalization: ChannelStats,
}

/// Layout (all little-endian):
/// `"UNET" | version u32 | depth, base, in, out: u32 | mean[3], std[3]: f64 |
/// count u64 | params f32 * count`.
pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * 5 + 8 * 7 + 4 * c.params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        c.config.depth,
        c.config.base_channels,
        c.config.in_channels,
        c.config.out_channels,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in c.normalization.mean.iter().chain(c.normalization.std.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(c.params.len() as u64).to_le_bytes());
    for p in &c.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

const CHECKPOINT_HEADER_LEN: usize = 4 + 4 + 16 + 48 + 8;

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CodecError::BadMagic { expected: "UNET" });
    }
    if bytes.len() < CHECKPOINT_HEADER_LEN {
        return Err(CodecError::Truncated {
            expected: CHECKPOINT_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = read_u32(bytes, 4);
    if version != CHECKPOINT_VERSION {
        return Err(CodecError::BadVersion(version));
    }
    let config = UNetConfig {
        depth: read_u32(bytes, 8) as usize,
        base_channels: read_u32(bytes, 12) as usize,
        in_channels: read_u32(bytes, 16) as usize,
        out_channels: read_u32(bytes, 20) as usize,
    };
    config
        .validate()
        .map_err(|e| CodecError::InvalidRaster(format!("checkpoint config: {e}")))?;
    let mut stats = [0f64; 6];
    for (i, s) in stats.iter_mut().enumerate() {
        let at = 24 + 8 * i;
        *s = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    }
    let count = u64::from_le_bytes(bytes[72..80].try_into().unwrap());
    let expected = config.param_count();
    if count != expected as u64 {
        return Err(CodecError::LengthMismatch {
            expected,
            found: usize::try_from(count).unwrap_or(usize::MAX),
        });
    }
    let found = bytes.len() - CHECKPOINT_HEADER_LEN;
    if found < 4 * expected {
        return Err(CodecError::Truncated {
            expected: 4 * expected,
            found,
        });
    }
    Ok(Checkpoint {
        config,
        params: read_f32s(&bytes[CHECKPOINT_HEADER_LEN..CHECKPOINT_HEADER_LEN + 4 * expected]),
        normalization: ChannelStats {
            mean: [stats[0], stats[1], stats[2]],
            std: [stats[3], stats[4], stats[5]],
        },
    })
}
