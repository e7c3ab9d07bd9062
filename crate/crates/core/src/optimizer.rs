//! Receiver-side latent refinement.
//!
//! Starting from the encoder's estimate `Z_1 = E(X')`, the latent is updated
//! by plain gradient descent `Z_{i+1} = Z_i - eta * grad L(Z_i)` on
//! `L(Z) = 0.5 ||D(Z) - X'||^2`, with the received image held fixed. Every
//! step records the quantities needed to check two facts about the update:
//! the step length equals `eta * ||grad L||`, and it never exceeds
//! `eta * L_J * ||D(Z_i) - X'||` when `L_J` bounds the decoder Jacobian.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::codec::{latent_to_bits, BitMessage, LatentTensor};
use crate::error::{Result, StegoError};
use crate::generator::{GeneratorParams, ImageTensor};

/// Relative tolerance for the step-length identity.
pub const IDENTITY_TOLERANCE: f64 = 1e-9;
/// Absolute tolerance on the Lipschitz bound slack.
pub const BOUND_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtaPolicy {
    /// Use `OptimizerConfig::eta` as given.
    Fixed,
    /// `eta = auto_safety * 2 / L_J^2`, computed once per run.
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub steps: usize,
    pub eta: f64,
    pub eta_policy: EtaPolicy,
    pub auto_safety: f64,
    /// Stop early once `||grad L|| < grad_tol`; `0` disables.
    pub grad_tol: f64,
    pub record_trace: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            steps: 100,
            eta: 1.0,
            eta_policy: EtaPolicy::Auto,
            auto_safety: 0.9,
            grad_tol: 0.0,
            record_trace: true,
        }
    }
}

impl OptimizerConfig {
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_fixed_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self.eta_policy = EtaPolicy::Fixed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(StegoError::invalid(format!("step size {} must be positive", self.eta)));
        }
        if !(self.auto_safety > 0.0 && self.auto_safety < 1.0) {
            return Err(StegoError::invalid("auto_safety must lie in (0, 1)"));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(StegoError::invalid("grad_tol must be non-negative"));
        }
        Ok(())
    }

    /// Step size actually used against a decoder with Lipschitz estimate `lj`.
    pub fn resolve_eta(&self, lj: f64) -> f64 {
        match self.eta_policy {
            EtaPolicy::Fixed => self.eta,
            EtaPolicy::Auto => self.auto_safety * 2.0 / (lj * lj),
        }
    }

    /// Short hex digest of the settings that define the update rule. Two runs
    /// with equal fingerprints executed the same optimizer.
    pub fn fingerprint(&self) -> String {
        let desc = format!(
            "gd-v1;eta={};policy={};safety={};grad_tol={}",
            self.eta,
            self.eta_policy_string(),
            self.auto_safety,
            self.grad_tol
        );
        Sha256::digest(desc.as_bytes())[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn eta_policy_string(&self) -> String {
        match self.eta_policy {
            EtaPolicy::Auto => "auto".into(),
            EtaPolicy::Fixed => format!("fixed:{}", self.eta),
        }
    }
}

/// Parsed form of the command-line `--eta {auto|fixed:VALUE}` flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtaArg {
    pub policy: EtaPolicy,
    pub eta: f64,
}

impl FromStr for EtaArg {
    type Err = StegoError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(EtaArg { policy: EtaPolicy::Auto, eta: 1.0 });
        }
        let v = s
            .strip_prefix("fixed:")
            .and_then(|v| v.parse::<f64>().ok())
            .filter(|v| *v > 0.0 && v.is_finite())
            .ok_or_else(|| StegoError::invalid(format!("bad eta '{s}', expected auto or fixed:VALUE")))?;
        Ok(EtaArg { policy: EtaPolicy::Fixed, eta: v })
    }
}

impl fmt::Display for EtaArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.policy {
            EtaPolicy::Auto => f.write_str("auto"),
            EtaPolicy::Fixed => write!(f, "fixed:{}", self.eta),
        }
    }
}

impl Serialize for EtaArg {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EtaArg {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(de)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub step_norm: f64,
    /// `||D(Z_i) - X'||`
    pub recon_error: f64,
    /// `eta * L_J * ||D(Z_i) - X'||`
    pub bound_value: f64,
    pub bound_ok: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub eta: f64,
    pub lipschitz: f64,
    pub records: Vec<StepRecord>,
}

impl OptimizationTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Loss increases between consecutive steps.
    pub fn loss_increases(&self) -> usize {
        self.records.windows(2).filter(|w| w[1].loss > w[0].loss).count()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,loss,grad_norm,step_norm,bound_value,bound_ok")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{}",
                r.step, r.loss, r.grad_norm, r.step_norm, r.bound_value, r.bound_ok
            )?;
        }
        Ok(())
    }
}

/// Gradient descent on the reconstruction loss against a fixed image.
pub fn refine_latent(
    params: &GeneratorParams,
    z_init: &LatentTensor,
    x_recv: &ImageTensor,
    cfg: &OptimizerConfig,
) -> Result<(LatentTensor, OptimizationTrace)> {
    let (mut snaps, trace) = refine_with_checkpoints(params, z_init, x_recv, cfg, &[cfg.steps])?;
    Ok((snaps.pop().expect("one checkpoint requested"), trace))
}

/// Runs `max(checkpoints)` steps, ignoring `cfg.steps`, and returns the
/// iterate after each requested step count in the order given. Checkpoint
/// `0` is the starting latent. An early stop freezes the iterate for every
/// later checkpoint.
pub fn refine_with_checkpoints(
    params: &GeneratorParams,
    z_init: &LatentTensor,
    x_recv: &ImageTensor,
    cfg: &OptimizerConfig,
    checkpoints: &[usize],
) -> Result<(Vec<LatentTensor>, OptimizationTrace)> {
    cfg.validate()?;
    if z_init.shape() != params.latent_shape() {
        return Err(StegoError::invalid(format!(
            "initial latent ({}) does not match generator ({})",
            z_init.shape(),
            params.latent_shape()
        )));
    }
    if x_recv.shape() != params.image_shape() {
        return Err(StegoError::invalid(format!(
            "received image ({}) does not match generator ({})",
            x_recv.shape(),
            params.image_shape()
        )));
    }
    let total = checkpoints.iter().copied().max().unwrap_or(0);
    let lj = if total > 0 { params.lipschitz().value } else { 0.0 };
    let eta = cfg.resolve_eta(lj);
    let mut trace = OptimizationTrace {
        eta,
        lipschitz: lj,
        records: Vec::new(),
    };

    let mut snaps: Vec<Option<LatentTensor>> = vec![None; checkpoints.len()];
    let mut z = z_init.values().to_vec();
    let take = |done: usize, z: &[f64], snaps: &mut Vec<Option<LatentTensor>>| {
        for (slot, &c) in snaps.iter_mut().zip(checkpoints) {
            if slot.is_none() && c <= done {
                *slot = Some(LatentTensor::new(z.to_vec(), z_init.shape()).expect("shape checked"));
            }
        }
    };
    take(0, &z, &mut snaps);

    for step in 0..total {
        let (loss, grad, recon) = params.loss_grad_raw(&z, x_recv.pixels());
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(StegoError::Numeric {
                step,
                reason: format!("loss {loss}, gradient norm {grad_norm}"),
                trace: Box::new(trace),
            });
        }
        if cfg.grad_tol > 0.0 && grad_norm < cfg.grad_tol {
            take(usize::MAX, &z, &mut snaps);
            break;
        }
        let mut step_sq = 0.0;
        for (zi, gi) in z.iter_mut().zip(&grad) {
            let delta = -eta * gi;
            step_sq += delta * delta;
            *zi += delta;
        }
        if !step_sq.is_finite() || z.iter().any(|v| !v.is_finite()) {
            return Err(StegoError::Numeric {
                step,
                reason: format!("update overflowed (step norm {})", step_sq.sqrt()),
                trace: Box::new(trace),
            });
        }
        if cfg.record_trace {
            let step_norm = step_sq.sqrt();
            let bound_value = eta * lj * recon;
            trace.records.push(StepRecord {
                step,
                loss,
                grad_norm,
                step_norm,
                recon_error: recon,
                bound_value,
                bound_ok: step_norm <= bound_value,
            });
        }
        take(step + 1, &z, &mut snaps);
    }
    let snaps = snaps.into_iter().map(|s| s.expect("all checkpoints reached")).collect();
    Ok((snaps, trace))
}

/// Per-step check of the step-length identity and the Lipschitz bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lipschitz: f64,
    pub eta: f64,
    /// `|step - eta * grad| / step` per step (0 when the step is 0).
    pub identity_residuals: Vec<f64>,
    /// `eta * L_J * recon - step` per step.
    pub bound_slacks: Vec<f64>,
    pub max_identity_residual: f64,
    pub min_bound_slack: f64,
    pub identity_violations: usize,
    pub bound_violations: usize,
}

impl BoundReport {
    pub fn all_ok(&self) -> bool {
        self.identity_violations == 0 && self.bound_violations == 0
    }
}

/// Checks each recorded step against `lipschitz` and `eta`. Pass an
/// inflated certified constant (e.g. `1.01 * L_J`) to test the bound.
pub fn verify_trace(trace: &OptimizationTrace, lipschitz: f64, eta: f64) -> Result<BoundReport> {
    if trace.is_empty() {
        return Err(StegoError::invalid("cannot verify an empty trace"));
    }
    let identity_residuals: Vec<f64> = trace
        .records
        .iter()
        .map(|r| {
            let diff = (r.step_norm - eta * r.grad_norm).abs();
            if r.step_norm > 0.0 {
                diff / r.step_norm
            } else {
                diff
            }
        })
        .collect();
    let bound_slacks: Vec<f64> = trace
        .records
        .iter()
        .map(|r| eta * lipschitz * r.recon_error - r.step_norm)
        .collect();
    Ok(BoundReport {
        lipschitz,
        eta,
        max_identity_residual: identity_residuals.iter().copied().fold(0.0, f64::max),
        min_bound_slack: bound_slacks.iter().copied().fold(f64::INFINITY, f64::min),
        identity_violations: identity_residuals.iter().filter(|&&r| r > IDENTITY_TOLERANCE).count(),
        bound_violations: bound_slacks.iter().filter(|&&s| s < -BOUND_TOLERANCE).count(),
        identity_residuals,
        bound_slacks,
    })
}

/// Full receiver path: encode, refine, invert the latent map, threshold.
/// With `cfg.steps == 0` this is the encoder-only baseline.
pub fn extract_with_optimization(
    params: &GeneratorParams,
    x_recv: &ImageTensor,
    cfg: &OptimizerConfig,
) -> Result<(BitMessage, OptimizationTrace)> {
    let z_init = params.encode_image(x_recv)?;
    let (z0, trace) = refine_latent(params, &z_init, x_recv, cfg)?;
    let bits = latent_to_bits(&params.invert_denoise(&z0)?)?;
    Ok((bits, trace))
}

/// Decoded messages after each of `step_counts` refinement steps, all taken
/// from a single descent trajectory so that results are paired.
pub fn extract_at_steps(
    params: &GeneratorParams,
    x_recv: &ImageTensor,
    cfg: &OptimizerConfig,
    step_counts: &[usize],
) -> Result<(Vec<BitMessage>, OptimizationTrace)> {
    let z_init = params.encode_image(x_recv)?;
    let (snaps, trace) = refine_with_checkpoints(params, &z_init, x_recv, cfg, step_counts)?;
    let msgs = snaps
        .iter()
        .map(|z0| latent_to_bits(&params.invert_denoise(z0)?))
        .collect::<Result<Vec<_>>>()?;
    Ok((msgs, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::LatentShape;
    use crate::generator::{Activation, DecoderArch, ImageShape};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn small(seed: u64, activation: Activation) -> GeneratorParams {
        let arch = DecoderArch {
            activation,
            ..DecoderArch::default()
        };
        GeneratorParams::new(seed, LatentShape::new(2, 2, 2), ImageShape::new(8, 8, 3), arch).unwrap()
    }

    fn random_image(p: &GeneratorParams, rng: &mut ChaCha20Rng) -> ImageTensor {
        let s = p.image_shape();
        ImageTensor::new((0..s.len()).map(|_| rng.random::<f64>()).collect(), s).unwrap()
    }

    #[test]
    fn zero_steps_returns_start() {
        let p = small(1, Activation::Smooth);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let z = LatentTensor::gaussian(p.latent_shape(), &mut rng);
        let x = random_image(&p, &mut rng);
        let (out, trace) = refine_latent(&p, &z, &x, &OptimizerConfig::default().with_steps(0)).unwrap();
        assert_eq!(out, z);
        assert!(trace.is_empty());
        assert_eq!(trace.lipschitz, 0.0);
    }

    #[test]
    fn zero_steps_is_the_encoder_baseline() {
        let p = small(2, Activation::Smooth);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let x = random_image(&p, &mut rng);
        let (bits, _) = extract_with_optimization(&p, &x, &OptimizerConfig::default().with_steps(0)).unwrap();
        let direct = latent_to_bits(&p.invert_denoise(&p.encode_image(&x).unwrap()).unwrap()).unwrap();
        assert_eq!(bits, direct);
    }

    #[test]
    fn optimum_is_a_fixed_point() {
        let p = small(3, Activation::Smooth);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let z = LatentTensor::gaussian(p.latent_shape(), &mut rng);
        let x = p.decode_image(&z).unwrap();
        let (loss, grad) = p.loss_and_gradient(&z, &x).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.norm() == 0.0);
        let (out, _) = refine_latent(&p, &z, &x, &OptimizerConfig::default().with_steps(10)).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn trace_satisfies_identity_and_bound() {
        let p = small(4, Activation::Smooth);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x = random_image(&p, &mut rng);
        let z = p.encode_image(&x).unwrap();
        let (_, trace) = refine_latent(&p, &z, &x, &OptimizerConfig::default().with_steps(50)).unwrap();
        assert_eq!(trace.len(), 50);
        assert!(trace.records.iter().all(|r| r.bound_ok));
        let report = verify_trace(&trace, 1.01 * trace.lipschitz, trace.eta).unwrap();
        assert!(report.all_ok(), "{report:?}");
        assert!(report.max_identity_residual <= IDENTITY_TOLERANCE);
        // a deliberately understated constant must be caught
        let tight = verify_trace(&trace, 1e-3 * trace.lipschitz, trace.eta).unwrap();
        assert!(tight.bound_violations > 0);
        assert!(verify_trace(&OptimizationTrace::default(), 1.0, 1.0).is_err());
    }

    #[test]
    fn auto_step_reduces_loss() {
        let p = small(5, Activation::Smooth);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let x = random_image(&p, &mut rng);
        let z = p.encode_image(&x).unwrap();
        let (_, trace) = refine_latent(&p, &z, &x, &OptimizerConfig::default().with_steps(100)).unwrap();
        assert_eq!(trace.eta, 0.9 * 2.0 / trace.lipschitz.powi(2));
        assert!(trace.records.last().unwrap().loss < trace.records[0].loss);
    }

    /// Affine decoder `D(z) = A z + d`, read off column by column.
    fn affine_parts(p: &GeneratorParams) -> (DMatrix<f64>, DVector<f64>) {
        let shape = p.latent_shape();
        let d = p.decode_image(&LatentTensor::zeros(shape)).unwrap();
        let d = DVector::from_column_slice(d.pixels());
        let mut a = DMatrix::zeros(d.len(), shape.len());
        for j in 0..shape.len() {
            let mut e = LatentTensor::zeros(shape);
            e.values_mut()[j] = 1.0;
            let col = DVector::from_column_slice(p.decode_image(&e).unwrap().pixels()) - &d;
            a.set_column(j, &col);
        }
        (a, d)
    }

    #[test]
    fn linear_decoder_converges_to_least_squares() {
        let p = small(6, Activation::Linear);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let x = random_image(&p, &mut rng);
        let (a, d) = affine_parts(&p);
        let rhs = DVector::from_column_slice(x.pixels()) - d;
        let exact = a.clone().svd(true, true).solve(&rhs, 1e-14).unwrap();
        let sigma = a.singular_values();
        assert!(p.lipschitz().value <= sigma.max() * (1.0 + 1e-6));

        let z0 = LatentTensor::zeros(p.latent_shape());
        let (z, _) = refine_latent(&p, &z0, &x, &OptimizerConfig::default().with_steps(3000)).unwrap();
        let err = (DVector::from_column_slice(z.values()) - &exact).norm() / exact.norm();
        assert!(err <= 1e-6, "relative error {err}");
    }

    #[test]
    fn checkpoints_share_one_trajectory() {
        let p = small(7, Activation::Smooth);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let x = random_image(&p, &mut rng);
        let z = p.encode_image(&x).unwrap();
        let cfg = OptimizerConfig::default();
        let (snaps, trace) = refine_with_checkpoints(&p, &z, &x, &cfg, &[30, 0, 10]).unwrap();
        assert_eq!(trace.len(), 30);
        assert_eq!(snaps[1], z);
        for (snap, steps) in [(&snaps[0], 30), (&snaps[2], 10)] {
            let (alone, _) = refine_latent(&p, &z, &x, &cfg.clone().with_steps(steps)).unwrap();
            assert_eq!(snap, &alone);
        }
    }

    #[test]
    fn gradient_tolerance_stops_early() {
        let p = small(8, Activation::Smooth);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let x = random_image(&p, &mut rng);
        let z = p.encode_image(&x).unwrap();
        let cfg = OptimizerConfig {
            grad_tol: 1e9,
            ..OptimizerConfig::default()
        };
        let (snaps, trace) = refine_with_checkpoints(&p, &z, &x, &cfg, &[0, 5]).unwrap();
        assert!(trace.is_empty());
        assert_eq!(snaps[0], snaps[1]);
    }

    #[test]
    fn divergence_is_a_numeric_error() {
        let p = small(9, Activation::Smooth);
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let x = random_image(&p, &mut rng);
        let z = p.encode_image(&x).unwrap();
        let cfg = OptimizerConfig::default().with_steps(10).with_fixed_eta(1e308);
        match refine_latent(&p, &z, &x, &cfg) {
            Err(e @ StegoError::Numeric { .. }) => {
                assert_eq!(e.exit_code(), 3);
                if let StegoError::Numeric { step, trace, .. } = e {
                    assert_eq!(trace.len(), step);
                }
            }
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn config_validation_and_fingerprint() {
        assert!(OptimizerConfig::default().with_fixed_eta(0.0).validate().is_err());
        assert!(OptimizerConfig {
            auto_safety: 1.0,
            ..OptimizerConfig::default()
        }
        .validate()
        .is_err());
        let a = OptimizerConfig::default();
        assert_eq!(a.fingerprint(), a.clone().with_steps(7).fingerprint());
        assert_ne!(a.fingerprint(), a.clone().with_fixed_eta(1.0).fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
    }

    #[test]
    fn eta_argument_parsing() {
        assert_eq!("auto".parse::<EtaArg>().unwrap().policy, EtaPolicy::Auto);
        let f: EtaArg = "fixed:0.25".parse().unwrap();
        assert_eq!((f.policy, f.eta), (EtaPolicy::Fixed, 0.25));
        assert_eq!(f.to_string(), "fixed:0.25");
        for bad in ["fixed:", "fixed:-1", "fixed:nan", "1.0", ""] {
            assert!(bad.parse::<EtaArg>().is_err(), "{bad}");
        }
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        OptimizationTrace::default().write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,loss,grad_norm,step_norm,bound_value,bound_ok\n");
    }
}
