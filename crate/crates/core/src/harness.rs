//! Experiment driver and the file-level commands behind the CLI.
//!
//! Benchmarks are full factorials over channels and refinement step counts.
//! Each trial draws one message, embeds it once, and pushes the same stego
//! image through every channel; every step count is read off a single
//! descent trajectory. Gains over the encoder-only baseline are therefore
//! paired differences.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::{apply_channel, channel_severity_order, ChannelConfig};
use crate::codec::{bit_accuracy, embed_bits, BitMessage, LatentShape, SamplingMode, StegoKey};
use crate::error::{Result, StegoError};
use crate::formats::{self, StegoSidecar};
use crate::generator::{DecoderArch, GeneratorParams, ImageShape, DEFAULT_IMAGE, DEFAULT_LATENT};
use crate::optimizer::{extract_at_steps, extract_with_optimization, verify_trace, OptimizationTrace, OptimizerConfig};

pub const SCHEMA_VERSION: u32 = 1;
/// Inflation applied to the sampled Lipschitz estimate when checking the
/// step bound.
pub const CERTIFY_INFLATION: f64 = 1.01;

/// Which surrogate generator to build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub latent: LatentShape,
    pub image: ImageShape,
    pub arch: DecoderArch,
}

impl GeneratorSpec {
    pub fn new(seed: u64) -> Self {
        GeneratorSpec {
            seed,
            latent: DEFAULT_LATENT,
            image: DEFAULT_IMAGE,
            arch: DecoderArch::default(),
        }
    }

    pub fn build(&self) -> Result<GeneratorParams> {
        GeneratorParams::new(self.seed, self.latent, self.image, self.arch.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub generator: GeneratorSpec,
    pub channels: Vec<ChannelConfig>,
    pub steps: Vec<usize>,
    pub trials: usize,
    pub mode: SamplingMode,
    pub master_seed: u64,
    pub optimizer: OptimizerConfig,
}

impl ExperimentSpec {
    /// Six-channel sweep at 0 and 100 steps, 100 trials per cell.
    pub fn table_sweep(generator_seed: u64, master_seed: u64) -> Self {
        ExperimentSpec {
            generator: GeneratorSpec::new(generator_seed),
            channels: channel_severity_order(),
            steps: vec![0, 100],
            trials: 100,
            mode: SamplingMode::Random,
            master_seed,
            optimizer: OptimizerConfig::default(),
        }
    }

    /// Step-count sweep {50, 80, 100, 110} on the six channels.
    pub fn ablation(generator_seed: u64, master_seed: u64) -> Self {
        ExperimentSpec {
            steps: ABLATION_STEPS.to_vec(),
            ..Self::table_sweep(generator_seed, master_seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(StegoError::invalid("trials must be at least 1"));
        }
        if self.channels.is_empty() {
            return Err(StegoError::invalid("at least one channel is required"));
        }
        if self.steps.is_empty() {
            return Err(StegoError::invalid("at least one step count is required"));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub generator: String,
    pub channel: ChannelConfig,
    pub steps: usize,
    pub trials: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    /// Mean paired accuracy difference against `steps = 0`.
    pub mean_gain: f64,
    pub mean_gain_pct: f64,
    /// Trials where this step count beat / lost to the baseline.
    pub wins: usize,
    pub losses: usize,
    /// One-sided sign-test p-value for `gain > 0`.
    pub sign_test_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub schema_version: u32,
    pub optimizer_fingerprint: String,
    pub master_seed: u64,
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn row(&self, generator: &str, channel: ChannelConfig, steps: usize) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.generator == generator && r.channel == channel && r.steps == steps)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "schema_version,generator,channel,steps,trials,mean_accuracy,std_accuracy,mean_gain,mean_gain_pct,wins,losses,sign_test_p,optimizer\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.6},{:.6},{:.4},{},{},{:.6e},{}\n",
                self.schema_version,
                r.generator,
                r.channel,
                r.steps,
                r.trials,
                r.mean_accuracy,
                r.std_accuracy,
                r.mean_gain,
                r.mean_gain_pct,
                r.wins,
                r.losses,
                r.sign_test_p,
                self.optimizer_fingerprint
            ));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("results.csv"), self.to_csv())?;
        fs::write(dir.join("results.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// One-sided sign test: `P(X >= wins)` for `X ~ Binomial(wins + losses, 1/2)`.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let ln_half_n = n as f64 * 0.5f64.ln();
    // ln C(n, k) built up incrementally
    let mut ln_c = 0.0;
    let mut tail = 0.0;
    for k in 0..=n {
        if k > 0 {
            ln_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= wins {
            tail += (ln_c + ln_half_n).exp();
        }
    }
    tail.min(1.0)
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Per-trial accuracies, `[channel][step index]`, for the requested steps
/// plus the baseline in the last slot.
struct TrialOutcome {
    acc: Vec<Vec<f64>>,
    traces: Vec<OptimizationTrace>,
}

fn run_trial(
    params: &GeneratorParams,
    spec: &ExperimentSpec,
    trial: usize,
    checkpoints: &[usize],
    keep_trace: bool,
) -> Result<TrialOutcome> {
    let trial_seed = splitmix(spec.master_seed ^ splitmix(trial as u64));
    let mut rng = ChaCha20Rng::seed_from_u64(trial_seed);
    let msg = BitMessage::random(params.latent_shape().len(), &mut rng)?;
    let key = StegoKey::new(splitmix(trial_seed));
    let zt = embed_bits(&msg, key, spec.mode, params.latent_shape())?;
    let stego = params.decode_image(&params.denoise(&zt)?)?;
    let mut cfg = spec.optimizer.clone();
    cfg.record_trace = keep_trace;
    let mut acc = Vec::with_capacity(spec.channels.len());
    let mut traces = Vec::new();
    for &ch in &spec.channels {
        let received = apply_channel(ch, &stego)?;
        let (msgs, trace) = extract_at_steps(params, &received, &cfg, checkpoints)?;
        acc.push(
            msgs.iter()
                .map(|m| bit_accuracy(&msg, m))
                .collect::<Result<Vec<_>>>()?,
        );
        if keep_trace {
            traces.push(trace);
        }
    }
    Ok(TrialOutcome { acc, traces })
}

fn severity_rank(ch: &ChannelConfig) -> usize {
    channel_severity_order()
        .iter()
        .position(|c| c == ch)
        .unwrap_or(usize::MAX)
}

/// Runs the factorial benchmark for one generator. Also returns the traces
/// of trial 0, one per channel.
pub fn run_bench_with(
    params: &GeneratorParams,
    spec: &ExperimentSpec,
    label: &str,
) -> Result<(Vec<ResultRow>, Vec<(ChannelConfig, OptimizationTrace)>)> {
    spec.validate()?;
    let mut checkpoints = spec.steps.clone();
    checkpoints.push(0);
    let base = checkpoints.len() - 1;

    let outcomes = (0..spec.trials)
        .into_par_iter()
        .map(|t| run_trial(params, spec, t, &checkpoints, t == 0))
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..spec.channels.len()).collect();
    order.sort_by_key(|&i| severity_rank(&spec.channels[i]));
    let mut steps_order: Vec<usize> = (0..spec.steps.len()).collect();
    steps_order.sort_by_key(|&i| spec.steps[i]);

    let n = spec.trials as f64;
    let mut rows = Vec::new();
    for &ci in &order {
        for &si in &steps_order {
            let accs: Vec<f64> = outcomes.iter().map(|o| o.acc[ci][si]).collect();
            let gains: Vec<f64> = outcomes.iter().map(|o| o.acc[ci][si] - o.acc[ci][base]).collect();
            let mean = accs.iter().sum::<f64>() / n;
            let var = if spec.trials > 1 {
                accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let mean_gain = gains.iter().sum::<f64>() / n;
            let wins = gains.iter().filter(|&&g| g > 0.0).count();
            let losses = gains.iter().filter(|&&g| g < 0.0).count();
            rows.push(ResultRow {
                generator: label.to_string(),
                channel: spec.channels[ci],
                steps: spec.steps[si],
                trials: spec.trials,
                mean_accuracy: mean,
                std_accuracy: var.sqrt(),
                mean_gain,
                mean_gain_pct: 100.0 * mean_gain,
                wins,
                losses,
                sign_test_p: sign_test_p(wins, losses),
            });
        }
    }
    let traces = outcomes
        .into_iter()
        .next()
        .map(|o| spec.channels.iter().copied().zip(o.traces).collect())
        .unwrap_or_default();
    Ok((rows, traces))
}

/// Step counts of the default ablation sweep.
pub const ABLATION_STEPS: [usize; 4] = [50, 80, 100, 110];

/// Channel x steps x trials benchmark against the spec's generator. With
/// `out` set, also writes `results.csv`, `results.json` and one trace per
/// channel (trial 0) under `traces/`.
pub fn cmd_bench(spec: &ExperimentSpec, out: Option<&Path>) -> Result<ResultTable> {
    let params = spec.generator.build()?;
    let (rows, traces) = run_bench_with(&params, spec, &params.label())?;
    let table = ResultTable {
        schema_version: SCHEMA_VERSION,
        optimizer_fingerprint: spec.optimizer.fingerprint(),
        master_seed: spec.master_seed,
        rows,
    };
    if let Some(dir) = out {
        table.write(dir)?;
        write_traces(&dir.join("traces"), &params.label(), &traces)?;
    }
    Ok(table)
}

fn write_traces(dir: &Path, label: &str, traces: &[(ChannelConfig, OptimizationTrace)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (ch, trace) in traces {
        let name = format!("{label}_{ch}.csv").replace([':', ',', '='], "_");
        let mut buf = Vec::new();
        trace.write_csv(&mut buf)?;
        fs::write(dir.join(name), buf)?;
    }
    Ok(())
}

/// Runs the identical optimizer against the spec's generator and a second,
/// independently seeded generator of possibly different hidden width. Rows
/// of both generators share one table and one optimizer fingerprint.
pub fn cmd_crossmodel(spec: &ExperimentSpec, second: &GeneratorSpec, out: Option<&Path>) -> Result<ResultTable> {
    if second.seed == spec.generator.seed {
        return Err(StegoError::invalid("second generator needs a different seed"));
    }
    let fingerprint = spec.optimizer.fingerprint();
    let mut rows = Vec::new();
    let mut all_traces = Vec::new();
    for g in [&spec.generator, second] {
        let params = g.build()?;
        let (r, traces) = run_bench_with(&params, spec, &params.label())?;
        rows.extend(r);
        all_traces.push((params.label(), traces));
    }
    let table = ResultTable {
        schema_version: SCHEMA_VERSION,
        optimizer_fingerprint: fingerprint,
        master_seed: spec.master_seed,
        rows,
    };
    if let Some(dir) = out {
        table.write(dir)?;
        for (label, traces) in &all_traces {
            write_traces(&dir.join("traces"), label, traces)?;
        }
    }
    Ok(table)
}

/// Arguments of the embed command.
#[derive(Debug, Clone)]
pub struct EmbedRequest {
    pub message: PathBuf,
    pub key: StegoKey,
    pub generator: GeneratorSpec,
    pub mode: SamplingMode,
    pub output: PathBuf,
}

/// Embeds a message file into a stego image and writes the image plus a
/// `<image>.json` sidecar. The file type follows the output extension.
pub fn cmd_embed(req: &EmbedRequest) -> Result<StegoSidecar> {
    let msg = formats::read_message(&req.message)?;
    let params = req.generator.build()?;
    let shape = params.latent_shape();
    if msg.len() != shape.len() {
        return Err(StegoError::invalid(format!(
            "message has {} bits but the latent ({shape}) holds {}",
            msg.len(),
            shape.len()
        )));
    }
    let zt = embed_bits(&msg, req.key, req.mode, shape)?;
    let image = params.decode_image(&params.denoise(&zt)?)?;
    let side = StegoSidecar {
        version: SCHEMA_VERSION,
        generator_seed: params.seed(),
        latent_shape: shape,
        image_shape: params.image_shape(),
        mode: req.mode,
        bit_length: msg.len(),
    };
    let bytes = formats::encode_image_file(&req.output, &image, Some(params.seed()))?;
    let side_json = serde_json::to_string_pretty(&side)?;
    fs::write(&req.output, bytes)?;
    fs::write(formats::sidecar_path(&req.output), side_json)?;
    Ok(side)
}

#[derive(Debug, Clone)]
pub struct ExtractRequest {
    pub image: PathBuf,
    pub generator: GeneratorSpec,
    pub optimizer: OptimizerConfig,
    pub out_dir: PathBuf,
    /// Original message, when known, to report accuracy.
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractReport {
    pub schema_version: u32,
    pub generator: String,
    pub steps: usize,
    pub eta: f64,
    pub lipschitz: f64,
    pub optimizer_fingerprint: String,
    pub initial_recon_error: Option<f64>,
    pub final_recon_error: Option<f64>,
    pub loss_increases: usize,
    pub max_identity_residual: Option<f64>,
    pub min_bound_slack: Option<f64>,
    pub identity_violations: usize,
    pub bound_violations: usize,
    pub accuracy: Option<f64>,
}

/// Recovers a message from an image file. Writes `recovered.bin` (+ sidecar),
/// `traces/extract.csv` and `report.json` into the output directory; nothing
/// is written unless every step succeeds.
pub fn cmd_extract(req: &ExtractRequest) -> Result<(BitMessage, ExtractReport)> {
    let image = formats::read_image(&req.image)?;
    let params = req.generator.build()?;
    let reference = req.reference.as_deref().map(formats::read_message).transpose()?;
    let (bits, trace) = extract_with_optimization(&params, &image, &req.optimizer)?;
    let certified = CERTIFY_INFLATION * trace.lipschitz;
    let check = if trace.is_empty() {
        None
    } else {
        Some(verify_trace(&trace, certified, trace.eta)?)
    };
    let accuracy = reference.as_ref().map(|m| bit_accuracy(m, &bits)).transpose()?;
    let report = ExtractReport {
        schema_version: SCHEMA_VERSION,
        generator: params.label(),
        steps: req.optimizer.steps,
        eta: trace.eta,
        lipschitz: trace.lipschitz,
        optimizer_fingerprint: req.optimizer.fingerprint(),
        initial_recon_error: trace.records.first().map(|r| r.recon_error),
        final_recon_error: trace.records.last().map(|r| r.recon_error),
        loss_increases: trace.loss_increases(),
        max_identity_residual: check.as_ref().map(|c| c.max_identity_residual),
        min_bound_slack: check.as_ref().map(|c| c.min_bound_slack),
        identity_violations: check.as_ref().map_or(0, |c| c.identity_violations),
        bound_violations: check.as_ref().map_or(0, |c| c.bound_violations),
        accuracy,
    };
    let mut trace_csv = Vec::new();
    trace.write_csv(&mut trace_csv)?;
    let report_json = serde_json::to_string_pretty(&report)?;

    fs::create_dir_all(req.out_dir.join("traces"))?;
    formats::write_message(&req.out_dir.join("recovered.bin"), &bits)?;
    fs::write(req.out_dir.join("traces").join("extract.csv"), trace_csv)?;
    fs::write(req.out_dir.join("report.json"), report_json)?;
    Ok((bits, report))
}

/// Applies one channel to an image file.
pub fn cmd_attack(input: &Path, channel: ChannelConfig, output: &Path) -> Result<()> {
    let image = formats::read_image(input)?;
    let degraded = apply_channel(channel, &image)?;
    formats::write_image(output, &degraded, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_values() {
        assert_eq!(sign_test_p(0, 0), 1.0);
        assert!((sign_test_p(1, 0) - 0.5).abs() < 1e-12);
        assert!((sign_test_p(5, 0) - 1.0 / 32.0).abs() < 1e-12);
        // P(X >= 8 | n = 10) = (45 + 10 + 1) / 1024
        assert!((sign_test_p(8, 2) - 56.0 / 1024.0).abs() < 1e-12);
        assert!((sign_test_p(0, 7) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        let mut spec = ExperimentSpec::table_sweep(1, 2);
        spec.trials = 0;
        assert!(spec.validate().is_err());
        let mut spec = ExperimentSpec::table_sweep(1, 2);
        spec.channels.clear();
        assert!(spec.validate().is_err());
        let mut spec = ExperimentSpec::table_sweep(1, 2);
        spec.steps.clear();
        assert!(spec.validate().is_err());
    }
}
