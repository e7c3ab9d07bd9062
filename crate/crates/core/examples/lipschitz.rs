//! Decoder Lipschitz estimate, the step size it implies, and a check of the
//! per-step bound on one refinement run.
//!
//! cargo run --release --example lipschitz -- [seed]

use latent_stego::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> Result<()> {
    let seed = std::env::args().nth(1).map(|s| s.parse().expect("seed")).unwrap_or(42);
    let params = make_generator(seed, DEFAULT_LATENT, DEFAULT_IMAGE)?;
    let t = std::time::Instant::now();
    let est = params.lipschitz();
    println!(
        "L_J = {:.6} ({} iterations, residual {:.1e}, {:.2?})",
        est.value,
        est.iterations,
        est.residual,
        t.elapsed()
    );
    let cfg = OptimizerConfig::default();
    println!("auto step size {:.5}", cfg.resolve_eta(est.value));

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let z = params.denoise(&LatentTensor::gaussian(DEFAULT_LATENT, &mut rng))?;
    println!("local spectral norm at a random latent {:.6}", params.estimate_lipschitz_at(&z)?);

    let x = apply_channel(ChannelConfig::JpegLike(50), &params.decode_image(&z)?)?;
    let (_, trace) = refine_latent(&params, &params.encode_image(&x)?, &x, &cfg)?;
    let report = verify_trace(&trace, 1.01 * est.value, trace.eta)?;
    println!(
        "{} steps: max identity residual {:.1e}, min bound slack {:.3e}, violations {}",
        trace.len(),
        report.max_identity_residual,
        report.min_bound_slack,
        report.identity_violations + report.bound_violations
    );
    Ok(())
}
