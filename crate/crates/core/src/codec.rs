//! Message embedding and zero-threshold extraction.
//!
//! Each message bit selects one half of the unit interval. A value drawn
//! uniformly inside that half is pushed through the standard normal quantile
//! function, so that fair message bits produce latents that are exactly
//! standard Gaussian. Extraction only needs the sign of each latent.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StegoError};

/// Inputs to the quantile function are clamped to `[EPS, 1 - EPS]`.
pub const QUANTILE_CLAMP: f64 = 1.0 / (1u64 << 40) as f64;

const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// A payload of bits, each stored as `0` or `1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitMessage {
    bits: Vec<u8>,
}

impl BitMessage {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(StegoError::invalid("message must contain at least one bit"));
        }
        if let Some(pos) = bits.iter().position(|&b| b > 1) {
            return Err(StegoError::invalid(format!(
                "bit {pos} has value {}, expected 0 or 1",
                bits[pos]
            )));
        }
        Ok(BitMessage { bits })
    }

    pub fn from_bools(bits: &[bool]) -> Result<Self> {
        Self::new(bits.iter().map(|&b| b as u8).collect())
    }

    /// Draws `n` independent fair bits.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Self> {
        Self::new((0..n).map(|_| rng.random_range(0..2u8)).collect())
    }

    /// Unpacks `bit_len` bits from `bytes`, most significant bit first.
    pub fn from_bytes(bytes: &[u8], bit_len: usize) -> Result<Self> {
        if bit_len > bytes.len() * 8 {
            return Err(StegoError::invalid(format!(
                "bit length {bit_len} exceeds the {} bits available",
                bytes.len() * 8
            )));
        }
        let bits = (0..bit_len)
            .map(|i| (bytes[i / 8] >> (7 - i % 8)) & 1)
            .collect();
        Self::new(bits)
    }

    /// Packs bits MSB-first; the final partial byte is zero-padded.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            out[i / 8] |= b << (7 - i % 8);
        }
        out
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn ones_rate(&self) -> f64 {
        self.bits.iter().map(|&b| b as f64).sum::<f64>() / self.len() as f64
    }

    pub fn complement(&self) -> Self {
        BitMessage {
            bits: self.bits.iter().map(|&b| 1 - b).collect(),
        }
    }
}

/// Stratified uniforms, one per message bit.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformVector {
    values: Vec<f64>,
}

impl UniformVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(StegoError::invalid(format!("uniform value {v} outside (0,1)")));
        }
        Ok(UniformVector { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl LatentShape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        LatentShape { c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for LatentShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{}", self.c, self.h, self.w)
    }
}

/// Parses three positive comma-separated integers.
pub(crate) fn parse_triple(s: &str, what: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| StegoError::invalid(format!("bad {what} '{s}'")))?;
    match parts[..] {
        [a, b, c] if a > 0 && b > 0 && c > 0 => Ok([a, b, c]),
        _ => Err(StegoError::invalid(format!("{what} '{s}' needs three positive integers"))),
    }
}

impl std::str::FromStr for LatentShape {
    type Err = StegoError;

    /// `"c,h,w"`.
    fn from_str(s: &str) -> Result<Self> {
        let [c, h, w] = parse_triple(s, "latent shape")?;
        Ok(LatentShape::new(c, h, w))
    }
}

/// Flat latent vector in channel-major `(c, h, w)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    values: Vec<f64>,
    shape: LatentShape,
}

impl LatentTensor {
    pub fn new(values: Vec<f64>, shape: LatentShape) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(StegoError::invalid(format!(
                "latent of {} values does not fit shape ({shape})",
                values.len()
            )));
        }
        Ok(LatentTensor { values, shape })
    }

    pub fn zeros(shape: LatentShape) -> Self {
        LatentTensor {
            values: vec![0.0; shape.len()],
            shape,
        }
    }

    /// Independent standard normal coordinates.
    pub fn gaussian<R: Rng + ?Sized>(shape: LatentShape, rng: &mut R) -> Self {
        let values = (0..shape.len())
            .map(|_| rng.sample(rand_distr::StandardNormal))
            .collect();
        LatentTensor { values, shape }
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &LatentTensor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &LatentTensor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Seed for the within-interval sampler. The receiver never needs it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StegoKey {
    pub seed: u64,
}

impl StegoKey {
    pub const fn new(seed: u64) -> Self {
        StegoKey { seed }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Uniform inside the selected half-interval. Distribution preserving.
    #[default]
    Random,
    /// Always the half-interval midpoint (0.25 or 0.75). Deterministic and
    /// maximally robust, but the latents are no longer Gaussian.
    Midpoint,
}

impl std::str::FromStr for SamplingMode {
    type Err = StegoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SamplingMode::Random),
            "midpoint" => Ok(SamplingMode::Midpoint),
            other => Err(StegoError::invalid(format!("unknown mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplingMode::Random => "random",
            SamplingMode::Midpoint => "midpoint",
        })
    }
}

/// Maps bit 0 into `(0, 0.5)` and bit 1 into `[0.5, 1)`.
pub fn bits_to_uniform(msg: &BitMessage, key: StegoKey, mode: SamplingMode) -> Result<UniformVector> {
    if msg.is_empty() {
        return Err(StegoError::invalid("message must contain at least one bit"));
    }
    let values = match mode {
        SamplingMode::Midpoint => msg
            .bits()
            .iter()
            .map(|&b| if b == 0 { 0.25 } else { 0.75 })
            .collect(),
        SamplingMode::Random => {
            let mut rng = ChaCha20Rng::seed_from_u64(key.seed);
            msg.bits()
                .iter()
                .map(|&b| {
                    let m = (rng.next_u64() >> 11) as f64;
                    if b == 0 {
                        // (m + 0.5) / 2^53 lies in the open interval (0, 1)
                        0.5 * (m + 0.5) * f64::EPSILON / 2.0
                    } else {
                        // m / 2^53 lies in [0, 1)
                        0.5 + 0.5 * m * f64::EPSILON / 2.0
                    }
                })
                .collect()
        }
    };
    Ok(UniformVector { values })
}

/// Standard normal CDF evaluated through the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile function.
///
/// A rational approximation (Wichura's AS 241) gives roughly 1e-16 relative
/// accuracy; one Halley step against the erfc-based CDF polishes the result.
/// The lower tail is always evaluated directly and the upper tail by
/// reflection, so `q(1 - p) == -q(p)` whenever `1 - p` is exact.
pub fn inverse_normal_cdf(p: f64) -> Result<f64> {
    if p.is_nan() {
        return Err(StegoError::invalid("quantile of NaN"));
    }
    Ok(normal_quantile(p))
}

pub(crate) fn normal_quantile(p: f64) -> f64 {
    let p = p.clamp(QUANTILE_CLAMP, 1.0 - QUANTILE_CLAMP);
    if p == 0.5 {
        return 0.0;
    }
    if p < 0.5 {
        lower_quantile(p)
    } else {
        -lower_quantile(1.0 - p)
    }
}

fn lower_quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 0.5);
    let x = wichura(p);
    // Halley refinement on f(x) = Phi(x) - p.
    let err = 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2) - p;
    let u = err * SQRT_2PI * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

fn wichura(p: f64) -> f64 {
    const A: [f64; 8] = [
        3.387_132_872_796_366_608,
        133.141_667_891_784_377_3,
        1_971.590_950_306_551_442_7,
        13_731.693_765_509_461_125,
        45_921.953_931_549_871_457,
        67_265.770_927_008_700_853,
        33_430.575_583_588_128_105,
        2_509.080_928_730_122_672_7,
    ];
    const B: [f64; 8] = [
        1.0,
        42.313_330_701_600_911_252,
        687.187_007_492_057_908_3,
        5_394.196_021_424_751_077_1,
        21_213.794_301_586_595_867,
        39_307.895_800_092_710_61,
        28_729.085_735_721_942_674,
        5_226.495_278_852_545_925_4,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_577_34,
        4.630_337_846_156_545_295_9,
        5.769_497_221_460_691_405_5,
        3.647_848_324_763_204_605_04,
        1.270_458_252_452_368_382_58,
        0.241_780_725_177_450_611_77,
        0.022_723_844_989_269_184_583_6,
        7.745_450_142_783_414_076_6e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_758_821_87,
        1.676_384_830_183_803_849_4,
        0.689_767_334_985_100_004_55,
        0.148_103_976_427_480_074_59,
        0.015_198_666_563_616_457_2,
        5.475_938_084_995_344_946e-4,
        1.050_750_071_644_416_843_64e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103_777_2,
        5.463_784_911_164_114_369_9,
        1.784_826_539_917_291_335_8,
        0.296_560_571_828_504_891_23,
        0.026_532_189_526_576_123_093,
        0.001_242_660_947_388_078_438_5,
        2.711_555_568_743_487_578_64e-5,
        2.010_334_399_292_288_132_45e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        0.599_832_206_555_887_937_69,
        0.136_929_880_922_735_805_31,
        0.014_875_361_290_850_615_025,
        7.868_691_311_456_132_591e-4,
        1.846_318_317_510_054_681_8e-5,
        1.421_511_758_316_445_887_7e-7,
        2.044_263_103_389_939_785_64e-15,
    ];
    fn poly(coef: &[f64; 8], x: f64) -> f64 {
        coef.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let r = (-p.ln()).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    -x
}

/// Elementwise quantile transform of stratified uniforms into a latent.
pub fn uniform_to_latent(s: &UniformVector, shape: LatentShape) -> Result<LatentTensor> {
    if s.len() != shape.len() {
        return Err(StegoError::invalid(format!(
            "{} uniforms cannot fill latent shape ({shape})",
            s.len()
        )));
    }
    let values = s.values().iter().map(|&p| normal_quantile(p)).collect();
    LatentTensor::new(values, shape)
}

/// Zero-threshold decoding: negative latents decode to 0, everything else
/// (including exact zeros) to 1.
pub fn latent_to_bits(z: &LatentTensor) -> Result<BitMessage> {
    let bits = z
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v.is_nan() {
                Err(StegoError::invalid(format!("latent coordinate {i} is NaN")))
            } else {
                Ok(if v < 0.0 { 0 } else { 1 })
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    BitMessage::new(bits)
}

/// Fraction of positions on which two equal-length messages agree.
pub fn bit_accuracy(a: &BitMessage, b: &BitMessage) -> Result<f64> {
    if a.len() != b.len() {
        return Err(StegoError::invalid(format!(
            "cannot compare messages of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let agree = a.bits().iter().zip(b.bits()).filter(|(x, y)| x == y).count();
    Ok(agree as f64 / a.len() as f64)
}

/// Bits to latent in one call: stratified sampling followed by the quantile map.
pub fn embed_bits(
    msg: &BitMessage,
    key: StegoKey,
    mode: SamplingMode,
    shape: LatentShape,
) -> Result<LatentTensor> {
    if msg.len() != shape.len() {
        return Err(StegoError::invalid(format!(
            "message of {} bits does not match latent size {} ({shape})",
            msg.len(),
            shape.len()
        )));
    }
    uniform_to_latent(&bits_to_uniform(msg, key, mode)?, shape)
}
