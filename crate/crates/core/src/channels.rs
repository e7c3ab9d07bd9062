//! Deterministic image degradations standing in for storage formats and
//! lossy compression.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, StegoError};
use crate::generator::ImageTensor;

const BLOCK: usize = 8;

/// Standard JPEG luminance quantisation table (ITU-T T.81, Annex K).
pub const LUMA_BASE_TABLE: [[u16; 8]; 8] = [
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelConfig {
    Identity,
    Float16,
    BitDepth(u8),
    JpegLike(u8),
}

impl ChannelConfig {
    pub fn bitdepth(bits: u8) -> Result<Self> {
        if !(1..=16).contains(&bits) {
            return Err(StegoError::invalid(format!("bit depth {bits} outside 1..=16")));
        }
        Ok(ChannelConfig::BitDepth(bits))
    }

    pub fn jpeg_like(quality: u8) -> Result<Self> {
        if !(1..=100).contains(&quality) {
            return Err(StegoError::invalid(format!("quality {quality} outside 1..=100")));
        }
        Ok(ChannelConfig::JpegLike(quality))
    }

    /// True for the three entries that model lossless containers.
    pub fn is_near_lossless(&self) -> bool {
        !matches!(self, ChannelConfig::JpegLike(_))
    }

    fn validate(&self) -> Result<()> {
        match *self {
            ChannelConfig::BitDepth(b) => Self::bitdepth(b).map(|_| ()),
            ChannelConfig::JpegLike(q) => Self::jpeg_like(q).map(|_| ()),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for ChannelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelConfig::Identity => f.write_str("identity"),
            ChannelConfig::Float16 => f.write_str("float16"),
            ChannelConfig::BitDepth(b) => write!(f, "bitdepth:{b}"),
            ChannelConfig::JpegLike(q) => write!(f, "jpeg_like:{q}"),
        }
    }
}

impl FromStr for ChannelConfig {
    type Err = StegoError;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let num = |a: Option<&str>| -> Result<u8> {
            a.ok_or_else(|| StegoError::invalid(format!("channel '{s}' needs a parameter")))?
                .parse::<u8>()
                .map_err(|_| StegoError::invalid(format!("bad channel parameter in '{s}'")))
        };
        match (kind, arg) {
            ("identity", None) => Ok(ChannelConfig::Identity),
            ("float16", None) => Ok(ChannelConfig::Float16),
            ("bitdepth", a) => ChannelConfig::bitdepth(num(a)?),
            ("jpeg_like", a) => ChannelConfig::jpeg_like(num(a)?),
            _ => Err(StegoError::invalid(format!("unknown channel '{s}'"))),
        }
    }
}

impl Serialize for ChannelConfig {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ChannelConfig {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Quality-scaled 8x8 quantisation table, entries at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantTable(pub [[u16; 8]; 8]);

impl QuantTable {
    pub fn max_entry(&self) -> u16 {
        self.0.iter().flatten().copied().max().unwrap_or(1)
    }

    pub fn ones() -> Self {
        QuantTable([[1; 8]; 8])
    }
}

/// Scales the luminance table by `s = (q < 50 ? 5000/q : 200 - 2q) / 100`,
/// flooring each entry and clamping it to at least 1.
pub fn quality_to_table(q: u8) -> Result<QuantTable> {
    if !(1..=100).contains(&q) {
        return Err(StegoError::invalid(format!("quality {q} outside 1..=100")));
    }
    let q = q as u32;
    let mut table = [[1u16; 8]; 8];
    for (row, base_row) in table.iter_mut().zip(LUMA_BASE_TABLE.iter()) {
        for (t, &base) in row.iter_mut().zip(base_row) {
            let scaled = if q < 50 {
                base as u32 * 50 / q
            } else {
                base as u32 * (200 - 2 * q) / 100
            };
            *t = scaled.clamp(1, u16::MAX as u32) as u16;
        }
    }
    Ok(QuantTable(table))
}

/// The six channels ordered from lossless to most lossy: 32-bit float
/// storage, 16-bit float storage, 8-bit lossless, then DCT quantisation at
/// quality 90, 70 and 50.
pub fn channel_severity_order() -> Vec<ChannelConfig> {
    vec![
        ChannelConfig::Identity,
        ChannelConfig::Float16,
        ChannelConfig::BitDepth(8),
        ChannelConfig::JpegLike(90),
        ChannelConfig::JpegLike(70),
        ChannelConfig::JpegLike(50),
    ]
}

/// Applies a channel to an image. Pure and deterministic.
pub fn apply_channel(cfg: ChannelConfig, x: &ImageTensor) -> Result<ImageTensor> {
    cfg.validate()?;
    match cfg {
        ChannelConfig::Identity => Ok(x.clone()),
        ChannelConfig::Float16 => map_pixels(x, |v| half::f16::from_f64(v).to_f64()),
        ChannelConfig::BitDepth(b) => {
            let levels = ((1u32 << b) - 1) as f64;
            map_pixels(x, |v| (v.clamp(0.0, 1.0) * levels).round() / levels)
        }
        ChannelConfig::JpegLike(q) => dct_roundtrip(x, &quality_to_table(q)?, true),
    }
}

fn map_pixels(x: &ImageTensor, f: impl Fn(f64) -> f64) -> Result<ImageTensor> {
    ImageTensor::new(x.pixels().iter().map(|&v| f(v)).collect(), x.shape())
}

/// Orthonormal 8-point DCT-II matrix, `m[u][x]`.
fn dct_matrix() -> [[f64; BLOCK]; BLOCK] {
    let mut m = [[0.0; BLOCK]; BLOCK];
    for (u, row) in m.iter_mut().enumerate() {
        let norm = if u == 0 { (1.0 / BLOCK as f64).sqrt() } else { (2.0 / BLOCK as f64).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = norm * (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / (2 * BLOCK) as f64).cos();
        }
    }
    m
}

/// Per-channel 8x8 block DCT, division by `table`, optional rounding,
/// multiplication back, inverse DCT, and clamping to `[0, 1]`. Pixels are
/// scaled to the 0..255 range and level-shifted by 128 as in baseline JPEG.
///
/// With `rounding = false` and an all-ones table the map is the identity up
/// to floating-point error, isolating coefficient rounding as the only loss.
pub fn dct_roundtrip(x: &ImageTensor, table: &QuantTable, rounding: bool) -> Result<ImageTensor> {
    let shape = x.shape();
    if shape.h % BLOCK != 0 || shape.w % BLOCK != 0 {
        return Err(StegoError::invalid(format!(
            "image {}x{} is not a multiple of {BLOCK} in both dimensions",
            shape.h, shape.w
        )));
    }
    let m = dct_matrix();
    let src = x.pixels();
    let mut out = vec![0.0; src.len()];
    let mut blk = [[0.0f64; BLOCK]; BLOCK];
    let mut tmp = [[0.0f64; BLOCK]; BLOCK];
    for ch in 0..shape.c {
        for by in (0..shape.h).step_by(BLOCK) {
            for bx in (0..shape.w).step_by(BLOCK) {
                let idx = |y: usize, xx: usize| ((by + y) * shape.w + bx + xx) * shape.c + ch;
                for (y, row) in blk.iter_mut().enumerate() {
                    for (xx, v) in row.iter_mut().enumerate() {
                        *v = src[idx(y, xx)] * 255.0 - 128.0;
                    }
                }
                // coefficients = M * B * M^T
                for u in 0..BLOCK {
                    for xx in 0..BLOCK {
                        tmp[u][xx] = (0..BLOCK).map(|y| m[u][y] * blk[y][xx]).sum();
                    }
                }
                for u in 0..BLOCK {
                    for v in 0..BLOCK {
                        let c: f64 = (0..BLOCK).map(|xx| tmp[u][xx] * m[v][xx]).sum();
                        let qv = table.0[u][v] as f64;
                        let level = if rounding { (c / qv).round() } else { c / qv };
                        blk[u][v] = level * qv;
                    }
                }
                // pixels = M^T * C * M
                for y in 0..BLOCK {
                    for v in 0..BLOCK {
                        tmp[y][v] = (0..BLOCK).map(|u| m[u][y] * blk[u][v]).sum();
                    }
                }
                for y in 0..BLOCK {
                    for xx in 0..BLOCK {
                        let p: f64 = (0..BLOCK).map(|v| tmp[y][v] * m[v][xx]).sum();
                        out[idx(y, xx)] = ((p + 128.0) / 255.0).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    ImageTensor::new(out, shape)
}

/// Worst-case pixel error of one DCT coefficient rounding pass, in `[0, 1]`
/// pixel units: `0.5 * max(Q) * (sum_u |m[u][x]|)^2 / 255`.
pub fn dct_error_bound(table: &QuantTable) -> f64 {
    let m = dct_matrix();
    let gain = (0..BLOCK)
        .map(|x| (0..BLOCK).map(|u| m[u][x].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    0.5 * table.max_entry() as f64 * gain * gain / 255.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::ImageShape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(shape: ImageShape, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new((0..shape.len()).map(|_| rng.random::<f64>()).collect(), shape).unwrap()
    }

    #[test]
    fn table_scaling() {
        assert_eq!(quality_to_table(50).unwrap().0, LUMA_BASE_TABLE);
        assert_eq!(quality_to_table(100).unwrap(), QuantTable::ones());
        let t10 = quality_to_table(10).unwrap();
        for u in 0..8 {
            for v in 0..8 {
                assert_eq!(t10.0[u][v], 5 * LUMA_BASE_TABLE[u][v]);
            }
        }
        assert!(quality_to_table(0).is_err());
        assert!(quality_to_table(101).is_err());
    }

    #[test]
    fn severity_list() {
        let list = channel_severity_order();
        assert_eq!(list.len(), 6);
        assert_eq!(list[0], ChannelConfig::Identity);
        let x = random_image(ImageShape::new(16, 16, 3), 1);
        assert_eq!(apply_channel(list[0], &x).unwrap(), x);
    }

    #[test]
    fn bitdepth_on_gray() {
        let x = ImageTensor::filled(ImageShape::new(8, 8, 1), 0.5);
        let y = apply_channel(ChannelConfig::BitDepth(8), &x).unwrap();
        assert!(y.pixels().iter().all(|&v| (v - 0.5).abs() <= 1.0 / 510.0));
    }

    #[test]
    fn bitdepth_is_idempotent() {
        let x = random_image(ImageShape::new(8, 8, 3), 2);
        for b in [1, 4, 8, 16] {
            let once = apply_channel(ChannelConfig::BitDepth(b), &x).unwrap();
            let twice = apply_channel(ChannelConfig::BitDepth(b), &once).unwrap();
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn float16_rounds_to_half_precision() {
        let x = ImageTensor::new(vec![0.1, 1.0 / 3.0, 0.999_99, 0.0], ImageShape::new(2, 2, 1)).unwrap();
        let y = apply_channel(ChannelConfig::Float16, &x).unwrap();
        for (a, b) in x.pixels().iter().zip(y.pixels()) {
            assert!((a - b).abs() <= a.abs() * 2f64.powi(-11));
            assert_eq!(*b, half::f16::from_f64(*b).to_f64());
        }
    }

    #[test]
    fn dct_without_rounding_is_identity() {
        let x = random_image(ImageShape::new(16, 24, 3), 3);
        let y = dct_roundtrip(&x, &QuantTable::ones(), false).unwrap();
        assert!(x.max_abs_diff(&y) < 1e-9);
    }

    #[test]
    fn rounding_error_within_bound() {
        let shape = ImageShape::new(8, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for q in [90u8, 70, 50, 10] {
            let table = quality_to_table(q).unwrap();
            let bound = dct_error_bound(&table);
            for _ in 0..250 {
                let x = random_image(shape, rng.random());
                let y = dct_roundtrip(&x, &table, true).unwrap();
                assert!(x.max_abs_diff(&y) <= bound);
            }
        }
    }

    #[test]
    fn non_multiple_of_eight_rejected() {
        let x = ImageTensor::filled(ImageShape::new(12, 8, 1), 0.5);
        assert!(apply_channel(ChannelConfig::JpegLike(90), &x).is_err());
    }

    #[test]
    fn config_strings() {
        for cfg in channel_severity_order() {
            let s = cfg.to_string();
            assert_eq!(s.parse::<ChannelConfig>().unwrap(), cfg);
            let json = serde_json::to_string(&cfg).unwrap();
            assert_eq!(json, format!("\"{s}\""));
        }
        assert_eq!(ChannelConfig::JpegLike(70).to_string(), "jpeg_like:70");
        assert!("jpeg_like:0".parse::<ChannelConfig>().is_err());
        assert!("bitdepth:17".parse::<ChannelConfig>().is_err());
        assert!("gzip".parse::<ChannelConfig>().is_err());
        assert!(apply_channel(ChannelConfig::JpegLike(0), &ImageTensor::filled(ImageShape::new(8, 8, 1), 0.5)).is_err());
    }
}
