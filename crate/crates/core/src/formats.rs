//! On-disk formats.
//!
//! * Messages: raw bytes, 8 bits per byte, most significant bit first, the
//!   last byte zero-padded. The true bit length lives in a JSON sidecar
//!   `<file>.json` (`{"bit_length": N}`).
//! * Images, interchange: binary 8-bit PPM (`P6`, 3 channels) or PGM (`P5`,
//!   1 channel).
//! * Images, lossless: a single JSON header line terminated by `\n`,
//!   followed by `H*W*C` little-endian `f32` values in `H, W, C` order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{BitMessage, LatentShape, SamplingMode};
use crate::error::{Result, StegoError};
use crate::generator::{ImageShape, ImageTensor};

pub const TENSOR_FORMAT: &str = "latent-stego-tensor";
pub const TENSOR_VERSION: u32 = 1;
const MAX_HEADER: usize = 64 * 1024;

/// `path` with `.json` appended to the full file name.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageSidecar {
    pub bit_length: usize,
}

pub fn write_message(path: &Path, msg: &BitMessage) -> Result<()> {
    fs::write(path, msg.to_bytes())?;
    let side = serde_json::to_string_pretty(&MessageSidecar { bit_length: msg.len() })?;
    fs::write(sidecar_path(path), side)?;
    Ok(())
}

/// Reads a message; without a sidecar every bit of the file is used.
pub fn read_message(path: &Path) -> Result<BitMessage> {
    let bytes = fs::read(path)?;
    let side = sidecar_path(path);
    let bit_length = if side.exists() {
        serde_json::from_str::<MessageSidecar>(&fs::read_to_string(side)?)?.bit_length
    } else {
        bytes.len() * 8
    };
    BitMessage::from_bytes(&bytes, bit_length)
}

/// Metadata written next to a stego image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StegoSidecar {
    pub version: u32,
    pub generator_seed: u64,
    pub latent_shape: LatentShape,
    pub image_shape: ImageShape,
    pub mode: SamplingMode,
    pub bit_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub format: String,
    pub version: u32,
    pub shape: ImageShape,
    pub seed: Option<u64>,
    pub dtype: String,
}

pub fn encode_tensor(x: &ImageTensor, seed: Option<u64>) -> Result<Vec<u8>> {
    let header = TensorHeader {
        format: TENSOR_FORMAT.into(),
        version: TENSOR_VERSION,
        shape: x.shape(),
        seed,
        dtype: "f32le".into(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(x.pixels().len() * 4);
    for &v in x.pixels() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(TensorHeader, ImageTensor)> {
    let nl = bytes
        .iter()
        .take(MAX_HEADER)
        .position(|&b| b == b'\n')
        .ok_or_else(|| StegoError::invalid("tensor file has no header line"))?;
    let header: TensorHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.format != TENSOR_FORMAT || header.version != TENSOR_VERSION || header.dtype != "f32le" {
        return Err(StegoError::invalid(format!(
            "unsupported tensor header {} v{} {}",
            header.format, header.version, header.dtype
        )));
    }
    let body = &bytes[nl + 1..];
    let expected = header.shape.len() * 4;
    if body.len() != expected {
        return Err(StegoError::invalid(format!(
            "tensor body has {} bytes, expected {expected}",
            body.len()
        )));
    }
    let pixels = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let img = ImageTensor::new(pixels, header.shape)?;
    Ok((header, img))
}

/// 8-bit PPM (3 channels) or PGM (1 channel). Pixels are clamped to
/// `[0, 1]` and rounded to the nearest of 256 levels.
pub fn encode_pnm(x: &ImageTensor) -> Result<Vec<u8>> {
    let s = x.shape();
    let magic = match s.c {
        1 => "P5",
        3 => "P6",
        c => return Err(StegoError::invalid(format!("PNM needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.extend(x.pixels().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn decode_pnm(bytes: &[u8]) -> Result<ImageTensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(StegoError::invalid("truncated PNM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| StegoError::invalid("bad PNM header"))?);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let c = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        m => return Err(StegoError::invalid(format!("unsupported PNM magic {m}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| StegoError::invalid(format!("bad PNM field '{s}'")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(StegoError::invalid("only 8-bit PNM is supported"));
    }
    let shape = ImageShape::new(h, w, c);
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != shape.len() {
        return Err(StegoError::invalid(format!(
            "PNM raster has {} bytes, expected {}",
            raster.len(),
            shape.len()
        )));
    }
    ImageTensor::new(raster.iter().map(|&b| b as f64 / 255.0).collect(), shape)
}

fn is_pnm(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("ppm" | "pgm" | "pnm")
    )
}

/// Encodes an image according to the file extension: `.ppm`/`.pgm` give
/// 8-bit PNM, anything else the float tensor format.
pub fn encode_image_file(path: &Path, x: &ImageTensor, seed: Option<u64>) -> Result<Vec<u8>> {
    if is_pnm(path) {
        encode_pnm(x)
    } else {
        encode_tensor(x, seed)
    }
}

pub fn write_image(path: &Path, x: &ImageTensor, seed: Option<u64>) -> Result<()> {
    let bytes = encode_image_file(path, x, seed)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path)?;
    if is_pnm(path) {
        decode_pnm(&bytes)
    } else {
        decode_tensor(&bytes).map(|(_, img)| img)
    }
}
