//! Seedable differentiable surrogate for a latent generative model.
//!
//! The surrogate has three parts:
//!
//! * an invertible latent map `Z_0 = Q Z_T + b` with `Q` orthogonal, which
//!   stands in for the denoising trajectory and preserves `N(0, I)`;
//! * a smooth decoder `X = sigmoid(W2 . phi(W1 . up(Z_0)))` where `up` is
//!   k-fold nearest-neighbour upsampling and `phi(a) = alpha * tanh(a / alpha)`;
//! * an analytic encoder that undoes each decoder layer in turn.
//!
//! `W1` and `W2` are 1x1 mixing matrices whose entries depend on the pixel's
//! offset inside its k-by-k block, so one block of pixels carries the `c`
//! latent values of one latent site. The decoder Jacobian is therefore block
//! diagonal over latent sites, which keeps reverse-mode gradients cheap.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{LatentShape, LatentTensor};
use crate::error::{Result, StegoError};

/// Margin kept away from the open ranges of `tanh` and the logistic squash
/// when inverting them.
pub const INVERSION_MARGIN: f64 = 1e-6;

const MAX_CHANNELS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl ImageShape {
    pub const fn new(h: usize, w: usize, c: usize) -> Self {
        ImageShape { h, w, c }
    }

    pub const fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{}", self.h, self.w, self.c)
    }
}

impl std::str::FromStr for ImageShape {
    type Err = StegoError;

    /// `"H,W,C"`.
    fn from_str(s: &str) -> Result<Self> {
        let [h, w, c] = crate::codec::parse_triple(s, "image shape")?;
        Ok(ImageShape::new(h, w, c))
    }
}

/// Row-major `H x W x C` image with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pixels: Vec<f64>,
    shape: ImageShape,
}

impl ImageTensor {
    pub fn new(pixels: Vec<f64>, shape: ImageShape) -> Result<Self> {
        if pixels.len() != shape.len() {
            return Err(StegoError::invalid(format!(
                "image of {} values does not fit shape ({shape})",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(StegoError::invalid("image contains non-finite pixels"));
        }
        Ok(ImageTensor { pixels, shape })
    }

    pub fn filled(shape: ImageShape, value: f64) -> Self {
        ImageTensor {
            pixels: vec![value; shape.len()],
            shape,
        }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn distance(&self, other: &ImageTensor) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn mse(&self, other: &ImageTensor) -> f64 {
        let d = self.distance(other);
        d * d / self.pixels.len() as f64
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Elementwise activations of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `phi = alpha * tanh(./alpha)` followed by the logistic squash.
    Smooth,
    /// Both nonlinearities replaced by the identity. The decoder becomes the
    /// linear map `W2 W1 up(.)` plus biases; used to check the optimizer
    /// against closed-form least squares.
    Linear,
}

/// Architecture knobs of the surrogate decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderArch {
    /// Hidden channels per pixel; must not exceed the image channel count.
    pub hidden: usize,
    /// Scale of the hidden nonlinearity.
    pub alpha: f64,
    /// Standard deviation of the smooth part of `W1`.
    pub w1_gain: f64,
    /// Standard deviation of the per-pixel white part of `W1`.
    pub w1_texture: f64,
    /// Standard deviation of `W2`.
    pub w2_gain: f64,
    /// Standard deviation of the output biases.
    pub bias_gain: f64,
    /// Standard deviation of the latent-map bias `b`.
    pub mix_bias_gain: f64,
    /// Highest DCT frequency index (u + v) used for the smooth part of `W1`.
    pub max_frequency: usize,
    pub activation: Activation,
}

impl Default for DecoderArch {
    fn default() -> Self {
        DecoderArch {
            hidden: 3,
            alpha: 2.0,
            w1_gain: 0.7,
            w1_texture: 0.5,
            w2_gain: 1.0,
            bias_gain: 0.3,
            mix_bias_gain: 0.05,
            max_frequency: 3,
            activation: Activation::Smooth,
        }
    }
}

/// Power-iteration estimate of `max ||J_D(Z)||_2` over a set of probes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub value: f64,
    /// Largest iteration count used by any probe.
    pub iterations: usize,
    /// Largest final relative residual `||J^T J v - lambda v|| / lambda`.
    pub residual: f64,
}

/// Fixed weights of one surrogate generator. Immutable after construction.
#[derive(Debug)]
pub struct GeneratorParams {
    seed: u64,
    latent: LatentShape,
    image: ImageShape,
    factor: usize,
    arch: DecoderArch,
    mixing: DMatrix<f64>,
    mix_bias: Vec<f64>,
    /// `[offset][hidden][latent channel]`
    w1: Vec<f64>,
    /// `[offset][hidden]`
    b1: Vec<f64>,
    /// `[offset][image channel][hidden]`
    w2: Vec<f64>,
    /// `[offset][image channel]`
    b2: Vec<f64>,
    /// `[offset][hidden][image channel]`, left inverse of each `W2` block.
    w2_pinv: Vec<f64>,
    /// `(sum_o W1[o]^T W1[o])^-1`, `c x c`, row-major.
    w1_gram_inv: Vec<f64>,
    lipschitz: OnceLock<LipschitzEstimate>,
}

/// Default latent shape `(4, 16, 16)`: 1024 embedded bits.
pub const DEFAULT_LATENT: LatentShape = LatentShape::new(4, 16, 16);
/// Default image shape `(128, 128, 3)`.
pub const DEFAULT_IMAGE: ImageShape = ImageShape::new(128, 128, 3);

/// Builds the default-architecture generator for `seed`.
pub fn make_generator(seed: u64, latent: LatentShape, image: ImageShape) -> Result<GeneratorParams> {
    GeneratorParams::new(seed, latent, image, DecoderArch::default())
}

impl GeneratorParams {
    pub fn new(seed: u64, latent: LatentShape, image: ImageShape, arch: DecoderArch) -> Result<Self> {
        if latent.is_empty() || image.is_empty() {
            return Err(StegoError::invalid("shapes must be non-empty"));
        }
        if image.h % latent.h != 0 || image.w % latent.w != 0 || image.h / latent.h != image.w / latent.w {
            return Err(StegoError::invalid(format!(
                "image ({image}) is not an integer upsampling of latent ({latent})"
            )));
        }
        let factor = image.h / latent.h;
        if arch.hidden == 0 || arch.hidden > image.c {
            return Err(StegoError::invalid(format!(
                "hidden width {} must be in 1..={}",
                arch.hidden, image.c
            )));
        }
        if factor * factor * arch.hidden < latent.c {
            return Err(StegoError::invalid("pixel block too small to carry the latent channels"));
        }
        if latent.c > MAX_CHANNELS || image.c > MAX_CHANNELS {
            return Err(StegoError::invalid(format!("at most {MAX_CHANNELS} channels supported")));
        }
        if !(arch.alpha > 0.0) {
            return Err(StegoError::invalid("alpha must be positive"));
        }

        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = latent.len();
        let mixing = random_orthogonal(n, &mut rng);
        let mix_bias = gaussian_vec(n, arch.mix_bias_gain, &mut rng);

        let (kk, f, c, ch) = (factor * factor, arch.hidden, latent.c, image.c);
        let basis = low_frequency_basis(factor, arch.max_frequency);
        let w1 = smooth_field(&basis, f * c, arch.w1_gain, arch.w1_texture, &mut rng);
        let b1 = smooth_field(&basis, f, arch.bias_gain, 0.0, &mut rng);
        // W2 is a fixed mixing matrix plus a smooth per-offset perturbation.
        let w2_base = gaussian_vec(ch * f, arch.w2_gain, &mut rng);
        let w2_var = smooth_field(&basis, ch * f, 0.25 * arch.w2_gain, 0.0, &mut rng);
        let w2: Vec<f64> = (0..kk * ch * f)
            .map(|i| w2_base[i % (ch * f)] + w2_var[i])
            .collect();
        let b2 = smooth_field(&basis, ch, arch.bias_gain, 0.0, &mut rng);

        let mut w2_pinv = vec![0.0; kk * f * ch];
        for o in 0..kk {
            let m = DMatrix::from_row_slice(ch, f, &w2[o * ch * f..(o + 1) * ch * f]);
            let gram = (m.transpose() * &m)
                .try_inverse()
                .ok_or_else(|| StegoError::invalid("singular output mixing block"))?;
            let pinv = gram * m.transpose();
            for r in 0..f {
                for s in 0..ch {
                    w2_pinv[o * f * ch + r * ch + s] = pinv[(r, s)];
                }
            }
        }
        let mut gram = DMatrix::<f64>::zeros(c, c);
        for o in 0..kk {
            let m = DMatrix::from_row_slice(f, c, &w1[o * f * c..(o + 1) * f * c]);
            gram += m.transpose() * m;
        }
        let gram_inv = gram
            .try_inverse()
            .ok_or_else(|| StegoError::invalid("latent mixing weights are rank deficient"))?;
        let w1_gram_inv = (0..c * c).map(|i| gram_inv[(i / c, i % c)]).collect();

        Ok(GeneratorParams {
            seed,
            latent,
            image,
            factor,
            arch,
            mixing,
            mix_bias,
            w1,
            b1,
            w2,
            b2,
            w2_pinv,
            w1_gram_inv,
            lipschitz: OnceLock::new(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn latent_shape(&self) -> LatentShape {
        self.latent
    }

    pub fn image_shape(&self) -> ImageShape {
        self.image
    }

    pub fn upsampling(&self) -> usize {
        self.factor
    }

    pub fn arch(&self) -> &DecoderArch {
        &self.arch
    }

    /// Short human-readable identifier, e.g. `seed=42,hidden=3`.
    pub fn label(&self) -> String {
        format!("seed={},hidden={}", self.seed, self.arch.hidden)
    }

    /// Largest deviation of `Q Q^T` from the identity.
    pub fn orthogonality_error(&self) -> f64 {
        let n = self.latent.len();
        let prod = &self.mixing * self.mixing.transpose();
        (prod - DMatrix::<f64>::identity(n, n)).amax()
    }

    fn check_latent(&self, z: &LatentTensor) -> Result<()> {
        if z.shape() != self.latent {
            return Err(StegoError::invalid(format!(
                "latent shape ({}) does not match generator ({})",
                z.shape(),
                self.latent
            )));
        }
        Ok(())
    }

    fn check_image(&self, x: &ImageTensor) -> Result<()> {
        if x.shape() != self.image {
            return Err(StegoError::invalid(format!(
                "image shape ({}) does not match generator ({})",
                x.shape(),
                self.image
            )));
        }
        Ok(())
    }

    /// `Z_0 = Q Z_T + b`.
    pub fn denoise(&self, zt: &LatentTensor) -> Result<LatentTensor> {
        self.check_latent(zt)?;
        let v = &self.mixing * DVector::from_column_slice(zt.values());
        let values = v.iter().zip(&self.mix_bias).map(|(a, b)| a + b).collect();
        LatentTensor::new(values, self.latent)
    }

    /// `Z_T = Q^T (Z_0 - b)`, the exact inverse of [`denoise`](Self::denoise).
    pub fn invert_denoise(&self, z0: &LatentTensor) -> Result<LatentTensor> {
        self.check_latent(z0)?;
        let centered: Vec<f64> = z0.values().iter().zip(&self.mix_bias).map(|(a, b)| a - b).collect();
        let v = self.mixing.tr_mul(&DVector::from_vec(centered));
        LatentTensor::new(v.as_slice().to_vec(), self.latent)
    }

    #[inline]
    fn phi(&self, a: f64) -> (f64, f64) {
        match self.arch.activation {
            Activation::Smooth => {
                let t = (a / self.arch.alpha).tanh();
                (self.arch.alpha * t, 1.0 - t * t)
            }
            Activation::Linear => (a, 1.0),
        }
    }

    #[inline]
    fn squash(&self, y: f64) -> (f64, f64) {
        match self.arch.activation {
            Activation::Smooth => {
                let s = 1.0 / (1.0 + (-y).exp());
                (s, s * (1.0 - s))
            }
            Activation::Linear => (y, 1.0),
        }
    }

    /// Decodes `Z_0` and records the elementwise derivatives needed for
    /// Jacobian products at that point.
    fn forward(&self, z0: &[f64]) -> (Vec<f64>, Linearization) {
        let (k, f, c, ch) = (self.factor, self.arch.hidden, self.latent.c, self.image.c);
        let (lh, lw) = (self.latent.h, self.latent.w);
        let npix = self.image.h * self.image.w;
        let mut out = vec![0.0; npix * ch];
        let mut dphi = vec![0.0; npix * f];
        let mut dsq = vec![0.0; npix * ch];
        let mut zb = [0.0f64; MAX_CHANNELS];
        let mut hid = [0.0f64; MAX_CHANNELS];
        for by in 0..lh {
            for bx in 0..lw {
                for (ci, slot) in zb.iter_mut().take(c).enumerate() {
                    *slot = z0[ci * lh * lw + by * lw + bx];
                }
                for dy in 0..k {
                    for dx in 0..k {
                        let o = dy * k + dx;
                        let p = (by * k + dy) * self.image.w + bx * k + dx;
                        let w1 = &self.w1[o * f * c..(o + 1) * f * c];
                        for fi in 0..f {
                            let mut a = self.b1[o * f + fi];
                            for ci in 0..c {
                                a += w1[fi * c + ci] * zb[ci];
                            }
                            let (h, d) = self.phi(a);
                            hid[fi] = h;
                            dphi[p * f + fi] = d;
                        }
                        let w2 = &self.w2[o * ch * f..(o + 1) * ch * f];
                        for co in 0..ch {
                            let mut y = self.b2[o * ch + co];
                            for fi in 0..f {
                                y += w2[co * f + fi] * hid[fi];
                            }
                            let (x, d) = self.squash(y);
                            out[p * ch + co] = x;
                            dsq[p * ch + co] = d;
                        }
                    }
                }
            }
        }
        (out, Linearization { dphi, dsq })
    }

    /// `J_D(Z) v` using derivatives recorded at `Z`.
    fn jvp(&self, lin: &Linearization, v: &[f64]) -> Vec<f64> {
        let (k, f, c, ch) = (self.factor, self.arch.hidden, self.latent.c, self.image.c);
        let (lh, lw) = (self.latent.h, self.latent.w);
        let mut out = vec![0.0; self.image.len()];
        let mut vb = [0.0f64; MAX_CHANNELS];
        let mut hid = [0.0f64; MAX_CHANNELS];
        for by in 0..lh {
            for bx in 0..lw {
                for (ci, slot) in vb.iter_mut().take(c).enumerate() {
                    *slot = v[ci * lh * lw + by * lw + bx];
                }
                for dy in 0..k {
                    for dx in 0..k {
                        let o = dy * k + dx;
                        let p = (by * k + dy) * self.image.w + bx * k + dx;
                        let w1 = &self.w1[o * f * c..(o + 1) * f * c];
                        for fi in 0..f {
                            let mut a = 0.0;
                            for ci in 0..c {
                                a += w1[fi * c + ci] * vb[ci];
                            }
                            hid[fi] = a * lin.dphi[p * f + fi];
                        }
                        let w2 = &self.w2[o * ch * f..(o + 1) * ch * f];
                        for co in 0..ch {
                            let mut y = 0.0;
                            for fi in 0..f {
                                y += w2[co * f + fi] * hid[fi];
                            }
                            out[p * ch + co] = y * lin.dsq[p * ch + co];
                        }
                    }
                }
            }
        }
        out
    }

    /// `J_D(Z)^T u` using derivatives recorded at `Z` (reverse mode).
    fn vjp(&self, lin: &Linearization, u: &[f64]) -> Vec<f64> {
        let (k, f, c, ch) = (self.factor, self.arch.hidden, self.latent.c, self.image.c);
        let (lh, lw) = (self.latent.h, self.latent.w);
        let mut grad = vec![0.0; self.latent.len()];
        let mut acc = [0.0f64; MAX_CHANNELS];
        let mut dh = [0.0f64; MAX_CHANNELS];
        for by in 0..lh {
            for bx in 0..lw {
                acc[..c].fill(0.0);
                for dy in 0..k {
                    for dx in 0..k {
                        let o = dy * k + dx;
                        let p = (by * k + dy) * self.image.w + bx * k + dx;
                        let w2 = &self.w2[o * ch * f..(o + 1) * ch * f];
                        dh[..f].fill(0.0);
                        for co in 0..ch {
                            let gy = u[p * ch + co] * lin.dsq[p * ch + co];
                            for fi in 0..f {
                                dh[fi] += w2[co * f + fi] * gy;
                            }
                        }
                        let w1 = &self.w1[o * f * c..(o + 1) * f * c];
                        for fi in 0..f {
                            let ga = dh[fi] * lin.dphi[p * f + fi];
                            for ci in 0..c {
                                acc[ci] += w1[fi * c + ci] * ga;
                            }
                        }
                    }
                }
                for ci in 0..c {
                    grad[ci * lh * lw + by * lw + bx] = acc[ci];
                }
            }
        }
        grad
    }

    /// `X = D(Z_0)`.
    pub fn decode_image(&self, z0: &LatentTensor) -> Result<ImageTensor> {
        self.check_latent(z0)?;
        let (pixels, _) = self.forward(z0.values());
        ImageTensor::new(pixels, self.image)
    }

    /// Approximate left inverse of the decoder, undoing one layer at a time.
    /// Pixels are clamped into `[0, 1]` first.
    pub fn encode_image(&self, x: &ImageTensor) -> Result<LatentTensor> {
        self.check_image(x)?;
        let (k, f, c, ch) = (self.factor, self.arch.hidden, self.latent.c, self.image.c);
        let (lh, lw) = (self.latent.h, self.latent.w);
        let smooth = self.arch.activation == Activation::Smooth;
        let alpha = self.arch.alpha;
        let mut z = vec![0.0; self.latent.len()];
        let mut logits = [0.0f64; MAX_CHANNELS];
        let mut acc = [0.0f64; MAX_CHANNELS];
        for by in 0..lh {
            for bx in 0..lw {
                acc[..c].fill(0.0);
                for dy in 0..k {
                    for dx in 0..k {
                        let o = dy * k + dx;
                        let p = (by * k + dy) * self.image.w + bx * k + dx;
                        for co in 0..ch {
                            let v = x.pixels[p * ch + co];
                            let y = if smooth {
                                let v = v.clamp(INVERSION_MARGIN, 1.0 - INVERSION_MARGIN);
                                (v / (1.0 - v)).ln()
                            } else {
                                v
                            };
                            logits[co] = y - self.b2[o * ch + co];
                        }
                        let pinv = &self.w2_pinv[o * f * ch..(o + 1) * f * ch];
                        let w1 = &self.w1[o * f * c..(o + 1) * f * c];
                        for fi in 0..f {
                            let mut h = 0.0;
                            for co in 0..ch {
                                h += pinv[fi * ch + co] * logits[co];
                            }
                            let a = if smooth {
                                let t = (h / alpha).clamp(-1.0 + INVERSION_MARGIN, 1.0 - INVERSION_MARGIN);
                                alpha * t.atanh()
                            } else {
                                h
                            } - self.b1[o * f + fi];
                            for ci in 0..c {
                                acc[ci] += w1[fi * c + ci] * a;
                            }
                        }
                    }
                }
                for ci in 0..c {
                    let mut v = 0.0;
                    for cj in 0..c {
                        v += self.w1_gram_inv[ci * c + cj] * acc[cj];
                    }
                    z[ci * lh * lw + by * lw + bx] = v;
                }
            }
        }
        LatentTensor::new(z, self.latent)
    }

    /// `L(Z) = 0.5 ||D(Z) - X_ref||^2` and its exact gradient
    /// `J_D(Z)^T (D(Z) - X_ref)`.
    pub fn loss_and_gradient(&self, z0: &LatentTensor, x_ref: &ImageTensor) -> Result<(f64, LatentTensor)> {
        self.check_latent(z0)?;
        self.check_image(x_ref)?;
        let (loss, grad, _) = self.loss_grad_raw(z0.values(), x_ref.pixels());
        Ok((loss, LatentTensor::new(grad, self.latent)?))
    }

    /// Returns loss, gradient and reconstruction error `||D(Z) - X_ref||`.
    pub(crate) fn loss_grad_raw(&self, z0: &[f64], x_ref: &[f64]) -> (f64, Vec<f64>, f64) {
        let (x, lin) = self.forward(z0);
        let resid: Vec<f64> = x.iter().zip(x_ref).map(|(a, b)| a - b).collect();
        let sq: f64 = resid.iter().map(|r| r * r).sum();
        let grad = self.vjp(&lin, &resid);
        (0.5 * sq, grad, sq.sqrt())
    }

    /// `J_D(Z) v`, exposed for diagnostics and tests.
    pub fn jacobian_vector_product(&self, z0: &LatentTensor, v: &LatentTensor) -> Result<Vec<f64>> {
        self.check_latent(z0)?;
        self.check_latent(v)?;
        let (_, lin) = self.forward(z0.values());
        Ok(self.jvp(&lin, v.values()))
    }

    /// `J_D(Z)^T u`, exposed for diagnostics and tests.
    pub fn vector_jacobian_product(&self, z0: &LatentTensor, u: &[f64]) -> Result<LatentTensor> {
        self.check_latent(z0)?;
        if u.len() != self.image.len() {
            return Err(StegoError::invalid("cotangent does not match image size"));
        }
        let (_, lin) = self.forward(z0.values());
        LatentTensor::new(self.vjp(&lin, u), self.latent)
    }

    /// Largest singular value of `J_D` over `probes` Gaussian latents, each
    /// found by power iteration on `J^T J`. Stops a probe once the relative
    /// residual drops below `1e-6` or after `iters` rounds.
    pub fn estimate_lipschitz(&self, probes: usize, iters: usize) -> Result<LipschitzEstimate> {
        if probes == 0 {
            return Err(StegoError::invalid("need at least one probe"));
        }
        if iters < 10 {
            return Err(StegoError::invalid("need at least 10 power iterations"));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed ^ 0x5eed_11b5_c4e7_0001);
        let mut best = LipschitzEstimate {
            value: 0.0,
            iterations: 0,
            residual: 0.0,
        };
        for _ in 0..probes {
            let z = LatentTensor::gaussian(self.latent, &mut rng);
            let start = LatentTensor::gaussian(self.latent, &mut rng);
            let (sigma, used, resid) = self.power_iteration(z.values(), start.into_values(), iters, 1e-6);
            best.value = best.value.max(sigma);
            best.iterations = best.iterations.max(used);
            best.residual = best.residual.max(resid);
        }
        Ok(best)
    }

    /// Top singular value of `J_D` at one latent, by power iteration.
    pub fn estimate_lipschitz_at(&self, z0: &LatentTensor) -> Result<f64> {
        self.check_latent(z0)?;
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed ^ 0x5eed_11b5_c4e7_0002);
        let start = LatentTensor::gaussian(self.latent, &mut rng);
        Ok(self.power_iteration(z0.values(), start.into_values(), 2000, 1e-6).0)
    }

    /// Power iteration on `J^T J` at `z0`. `J^T J` is block diagonal over
    /// latent sites, so each site's slice of `v` is normalised and tested
    /// separately and the result is the largest per-site singular value.
    /// Returns `(sigma_max, iterations, worst residual)`.
    pub(crate) fn power_iteration(&self, z0: &[f64], mut v: Vec<f64>, iters: usize, tol: f64) -> (f64, usize, f64) {
        let (_, lin) = self.forward(z0);
        let sites = self.latent.h * self.latent.w;
        let c = self.latent.c;
        let site_norm = |v: &[f64], s: usize| (0..c).map(|ci| v[ci * sites + s].powi(2)).sum::<f64>().sqrt();
        let normalize_sites = |v: &mut [f64]| {
            for s in 0..sites {
                let n = site_norm(v, s);
                if n > 0.0 {
                    for ci in 0..c {
                        v[ci * sites + s] /= n;
                    }
                }
            }
        };
        normalize_sites(&mut v);
        let mut lambda = vec![0.0; sites];
        let mut resid = f64::INFINITY;
        let mut used = 0;
        for it in 1..=iters {
            used = it;
            let w = self.vjp(&lin, &self.jvp(&lin, &v));
            resid = 0.0;
            for (s, l) in lambda.iter_mut().enumerate() {
                *l = (0..c).map(|ci| v[ci * sites + s] * w[ci * sites + s]).sum::<f64>();
                if *l > 0.0 {
                    let r = (0..c)
                        .map(|ci| (w[ci * sites + s] - *l * v[ci * sites + s]).powi(2))
                        .sum::<f64>()
                        .sqrt()
                        / *l;
                    resid = resid.max(r);
                } else {
                    *l = 0.0;
                }
            }
            v = w;
            normalize_sites(&mut v);
            if resid <= tol {
                break;
            }
        }
        let top = lambda.iter().fold(0.0f64, |a, &b| a.max(b));
        (top.sqrt(), used, resid)
    }

    /// Cached certified-by-sampling Lipschitz estimate used by the optimizer
    /// (8 probes, up to 2000 power iterations each).
    pub fn lipschitz(&self) -> LipschitzEstimate {
        *self
            .lipschitz
            .get_or_init(|| self.estimate_lipschitz(8, 2000).expect("valid probe settings"))
    }
}

struct Linearization {
    dphi: Vec<f64>,
    dsq: Vec<f64>,
}

fn gaussian_vec<R: Rng>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Haar-random orthogonal matrix from the QR factorisation of a Gaussian
/// matrix, with column signs fixed by the diagonal of `R`.
fn random_orthogonal<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Orthonormal 2-D DCT basis functions on a `k x k` block with `u + v <= max_freq`,
/// evaluated at every offset: `basis[b][offset]`.
fn low_frequency_basis(k: usize, max_freq: usize) -> Vec<Vec<f64>> {
    let cos = |u: usize, x: usize| {
        let norm = if u == 0 { (1.0 / k as f64).sqrt() } else { (2.0 / k as f64).sqrt() };
        norm * (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / (2 * k) as f64).cos()
    };
    let mut basis = Vec::new();
    for u in 0..k {
        for v in 0..k {
            if u + v <= max_freq {
                basis.push(
                    (0..k * k)
                        .map(|o| cos(u, o / k) * cos(v, o % k) * k as f64)
                        .collect(),
                );
            }
        }
    }
    basis
}

/// Per-offset parameter field `[offset][slot]`: random combinations of the
/// smooth basis with entries of standard deviation about `gain`, plus white
/// noise of scale `texture`.
fn smooth_field<R: Rng>(basis: &[Vec<f64>], slots: usize, gain: f64, texture: f64, rng: &mut R) -> Vec<f64> {
    let kk = basis[0].len();
    let norm = gain / (basis.len() as f64).sqrt();
    let coef = gaussian_vec(basis.len() * slots, norm, rng);
    let mut out = vec![0.0; kk * slots];
    for o in 0..kk {
        for s in 0..slots {
            let mut v = 0.0;
            for (b, row) in basis.iter().enumerate() {
                v += coef[b * slots + s] * row[o];
            }
            out[o * slots + s] = v;
        }
    }
    if texture > 0.0 {
        for v in out.iter_mut() {
            *v += texture * rng.sample::<f64, _>(StandardNormal);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(seed: u64, c: usize, activation: Activation) -> GeneratorParams {
        let arch = DecoderArch {
            activation,
            ..DecoderArch::default()
        };
        GeneratorParams::new(seed, LatentShape::new(c, 2, 2), ImageShape::new(8, 8, 3), arch).unwrap()
    }

    fn default_params() -> &'static GeneratorParams {
        static P: OnceLock<GeneratorParams> = OnceLock::new();
        P.get_or_init(|| make_generator(42, DEFAULT_LATENT, DEFAULT_IMAGE).unwrap())
    }

    #[test]
    fn mixing_is_orthogonal() {
        assert!(default_params().orthogonality_error() <= 1e-10);
    }

    #[test]
    fn denoise_roundtrip() {
        let p = default_params();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let z = LatentTensor::gaussian(DEFAULT_LATENT, &mut rng);
        let back = p.invert_denoise(&p.denoise(&z).unwrap()).unwrap();
        assert!(z.max_abs_diff(&back) <= 1e-12);
    }

    #[test]
    fn denoise_preserves_standard_covariance() {
        // Z_0 - b = Q Z_T must again be N(0, I).
        let p = GeneratorParams::new(11, LatentShape::new(1, 4, 4), ImageShape::new(16, 16, 3), DecoderArch::default())
            .unwrap();
        let n = 16;
        let samples = 10_000;
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut cov = vec![0.0; n * n];
        let zero = p.denoise(&LatentTensor::zeros(p.latent_shape())).unwrap();
        for _ in 0..samples {
            let z = p.denoise(&LatentTensor::gaussian(p.latent_shape(), &mut rng)).unwrap();
            let v: Vec<f64> = z.values().iter().zip(zero.values()).map(|(a, b)| a - b).collect();
            for i in 0..n {
                for j in 0..n {
                    cov[i * n + j] += v[i] * v[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { 1.0 } else { 0.0 };
                // standard error ~0.01 (off-diagonal) / ~0.014 (diagonal)
                assert!((cov[i * n + j] / samples as f64 - expect).abs() < 0.07);
            }
        }
    }

    #[test]
    fn decoded_pixels_in_unit_interval() {
        let p = default_params();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for scale in [1.0, 10.0] {
            let mut z = LatentTensor::gaussian(DEFAULT_LATENT, &mut rng);
            z.values_mut().iter_mut().for_each(|v| *v *= scale);
            let x = p.decode_image(&z).unwrap();
            assert!(x.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn golden_decode_of_zero_latent() {
        // Frozen from the reference build; guards the weight construction.
        let x = default_params().decode_image(&LatentTensor::zeros(DEFAULT_LATENT)).unwrap();
        let px = x.pixels();
        for (i, v) in [
            (0, 0.3820975579463059),
            (1, 0.4868770074141601),
            (2, 0.44024497150732067),
            (1000, 0.5451028284579277),
            (49151, 0.872970518312204),
        ] {
            assert!((px[i] - v).abs() < 1e-12, "pixel {i}: {}", px[i]);
        }
        assert!((px.iter().sum::<f64>() - 23947.556540943046).abs() < 1e-8);
    }

    #[test]
    fn encoder_inverts_clean_decodes() {
        let p = default_params();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut rel = Vec::new();
        for _ in 0..20 {
            let z = p.denoise(&LatentTensor::gaussian(DEFAULT_LATENT, &mut rng)).unwrap();
            let back = p.encode_image(&p.decode_image(&z).unwrap()).unwrap();
            rel.push(z.distance(&back) / z.norm());
        }
        rel.sort_by(f64::total_cmp);
        assert!(rel[rel.len() / 2] <= 0.05, "median relative error {}", rel[rel.len() / 2]);
    }

    #[test]
    fn shape_mismatches_rejected() {
        let p = default_params();
        assert!(p.decode_image(&LatentTensor::zeros(LatentShape::new(4, 8, 8))).is_err());
        assert!(p.encode_image(&ImageTensor::filled(ImageShape::new(64, 64, 3), 0.5)).is_err());
        let arch = DecoderArch::default();
        assert!(GeneratorParams::new(1, LatentShape::new(4, 16, 16), ImageShape::new(100, 128, 3), arch.clone()).is_err());
        let wide = DecoderArch { hidden: 4, ..arch.clone() };
        assert!(GeneratorParams::new(1, DEFAULT_LATENT, DEFAULT_IMAGE, wide).is_err());
        let flat = DecoderArch { alpha: 0.0, ..arch };
        assert!(GeneratorParams::new(1, DEFAULT_LATENT, DEFAULT_IMAGE, flat).is_err());
        assert!(ImageTensor::new(vec![f64::NAN; 3], ImageShape::new(1, 1, 3)).is_err());
    }

    #[test]
    fn shapes_parse() {
        assert_eq!("4,16,16".parse::<LatentShape>().unwrap(), DEFAULT_LATENT);
        assert_eq!("128,128,3".parse::<ImageShape>().unwrap(), DEFAULT_IMAGE);
        assert!("4,16".parse::<LatentShape>().is_err());
        assert!("0,1,1".parse::<ImageShape>().is_err());
        assert!("a,b,c".parse::<ImageShape>().is_err());
    }

    fn loss(p: &GeneratorParams, z: &[f64], x: &[f64]) -> f64 {
        p.loss_grad_raw(z, x).0
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = default_params();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let z = p.denoise(&LatentTensor::gaussian(DEFAULT_LATENT, &mut rng)).unwrap();
        let target = p.decode_image(&p.denoise(&LatentTensor::gaussian(DEFAULT_LATENT, &mut rng)).unwrap()).unwrap();
        let (_, grad) = p.loss_and_gradient(&z, &target).unwrap();
        let h = 1e-5;
        for _ in 0..10 {
            let v = LatentTensor::gaussian(DEFAULT_LATENT, &mut rng);
            let shift = |s: f64| -> Vec<f64> { z.values().iter().zip(v.values()).map(|(a, b)| a + s * b).collect() };
            let fd = (loss(p, &shift(h), target.pixels()) - loss(p, &shift(-h), target.pixels())) / (2.0 * h);
            let an: f64 = grad.values().iter().zip(v.values()).map(|(a, b)| a * b).sum();
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "fd {fd} analytic {an}");
        }
    }

    #[test]
    fn jvp_and_vjp_are_adjoint() {
        let p = small(8, 2, Activation::Smooth);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let z = LatentTensor::gaussian(p.latent_shape(), &mut rng);
        let v = LatentTensor::gaussian(p.latent_shape(), &mut rng);
        let u: Vec<f64> = gaussian_vec(p.image_shape().len(), 1.0, &mut rng);
        let jv = p.jacobian_vector_product(&z, &v).unwrap();
        let jtu = p.vector_jacobian_product(&z, &u).unwrap();
        let lhs: f64 = jv.iter().zip(&u).map(|(a, b)| a * b).sum();
        let rhs: f64 = jtu.values().iter().zip(v.values()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    /// Dense Jacobian by central differences of the decoder, independent of
    /// the hand-written products.
    fn fd_jacobian(p: &GeneratorParams, z: &LatentTensor) -> DMatrix<f64> {
        let n = z.len();
        let m = p.image_shape().len();
        let h = 1e-5;
        let mut jac = DMatrix::zeros(m, n);
        for j in 0..n {
            let mut plus = z.clone();
            plus.values_mut()[j] += h;
            let mut minus = z.clone();
            minus.values_mut()[j] -= h;
            let a = p.decode_image(&plus).unwrap();
            let b = p.decode_image(&minus).unwrap();
            for i in 0..m {
                jac[(i, j)] = (a.pixels()[i] - b.pixels()[i]) / (2.0 * h);
            }
        }
        jac
    }

    #[test]
    fn power_iteration_matches_dense_svd() {
        for seed in [1, 2, 3] {
            let p = small(seed, 2, Activation::Smooth);
            let mut rng = ChaCha20Rng::seed_from_u64(seed + 100);
            let z = LatentTensor::gaussian(p.latent_shape(), &mut rng);
            let dense = fd_jacobian(&p, &z).singular_values().max();
            let power = p.estimate_lipschitz_at(&z).unwrap();
            assert!((dense - power).abs() <= 1e-6 * dense, "dense {dense} power {power}");
        }
    }

    #[test]
    fn lipschitz_estimate_is_max_over_probes() {
        let p = small(4, 2, Activation::Smooth);
        let est = p.estimate_lipschitz(4, 2000).unwrap();
        assert!(est.residual <= 1e-6);
        let mut rng = ChaCha20Rng::seed_from_u64(p.seed ^ 0x5eed_11b5_c4e7_0001);
        let mut best = 0.0f64;
        for _ in 0..4 {
            let z = LatentTensor::gaussian(p.latent_shape(), &mut rng);
            let _start = LatentTensor::gaussian(p.latent_shape(), &mut rng);
            best = best.max(fd_jacobian(&p, &z).singular_values().max());
        }
        assert!((est.value - best).abs() <= 1e-6 * best);
        assert!(p.estimate_lipschitz(0, 100).is_err());
        assert!(p.estimate_lipschitz(1, 5).is_err());
    }

    #[test]
    fn local_lipschitz_premise() {
        let p = default_params();
        let lj = p.lipschitz().value;
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..100 {
            let z = p.denoise(&LatentTensor::gaussian(DEFAULT_LATENT, &mut rng)).unwrap();
            let mut d = LatentTensor::gaussian(DEFAULT_LATENT, &mut rng);
            let scale = 1e-3 / d.norm();
            d.values_mut().iter_mut().for_each(|v| *v *= scale);
            let moved: Vec<f64> = z.values().iter().zip(d.values()).map(|(a, b)| a + b).collect();
            let a = p.decode_image(&z).unwrap();
            let b = p.decode_image(&LatentTensor::new(moved, DEFAULT_LATENT).unwrap()).unwrap();
            assert!(a.distance(&b) <= 1.01 * lj * 1e-3);
        }
    }

    #[test]
    fn linear_hook_is_affine() {
        let p = small(5, 2, Activation::Linear);
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let a = LatentTensor::gaussian(p.latent_shape(), &mut rng);
        let b = LatentTensor::gaussian(p.latent_shape(), &mut rng);
        let mid = LatentTensor::new(
            a.values().iter().zip(b.values()).map(|(x, y)| 0.5 * (x + y)).collect(),
            p.latent_shape(),
        )
        .unwrap();
        let (da, db, dm) = (p.decode_image(&a).unwrap(), p.decode_image(&b).unwrap(), p.decode_image(&mid).unwrap());
        for i in 0..dm.pixels().len() {
            assert!((dm.pixels()[i] - 0.5 * (da.pixels()[i] + db.pixels()[i])).abs() < 1e-12);
        }
        // With identity nonlinearities the encoder is an exact left inverse.
        let back = p.encode_image(&da).unwrap();
        assert!(a.max_abs_diff(&back) < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn decode_is_deterministic_and_bounded(seed in 0u64..1000, zseed in 0u64..1000) {
            let p = small(seed, 3, Activation::Smooth);
            let q = small(seed, 3, Activation::Smooth);
            let mut rng = ChaCha20Rng::seed_from_u64(zseed);
            let z = LatentTensor::gaussian(p.latent_shape(), &mut rng);
            let x = p.decode_image(&z).unwrap();
            let y = q.decode_image(&z).unwrap();
            prop_assert_eq!(x.pixels(), y.pixels());
            prop_assert!(x.pixels().iter().all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn denoise_inverse_exact(seed in 0u64..1000, zseed in 0u64..1000) {
            let p = small(seed, 2, Activation::Smooth);
            let mut rng = ChaCha20Rng::seed_from_u64(zseed);
            let z = LatentTensor::gaussian(p.latent_shape(), &mut rng);
            let back = p.invert_denoise(&p.denoise(&z).unwrap()).unwrap();
            prop_assert!(z.max_abs_diff(&back) <= 1e-12);
        }
    }
}
