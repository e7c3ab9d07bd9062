//! Embed a random message, push the stego image through a lossy channel and
//! recover it with and without latent refinement.
//!
//! cargo run --release --example embed_extract -- [channel] [steps]

use latent_stego::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let channel: ChannelConfig = args.next().as_deref().unwrap_or("jpeg_like:70").parse()?;
    let steps: usize = args.next().map(|s| s.parse().expect("steps")).unwrap_or(100);

    let params = make_generator(42, DEFAULT_LATENT, DEFAULT_IMAGE)?;
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let msg = BitMessage::random(DEFAULT_LATENT.len(), &mut rng)?;
    let key = StegoKey::new(0xC0FFEE);

    let zt = embed_bits(&msg, key, SamplingMode::Random, DEFAULT_LATENT)?;
    let stego = params.decode_image(&params.denoise(&zt)?)?;
    let received = apply_channel(channel, &stego)?;
    println!("channel {channel}: pixel RMSE {:.5}", received.mse(&stego).sqrt());

    let (baseline, _) = extract_with_optimization(&params, &received, &OptimizerConfig::default().with_steps(0))?;
    let (refined, trace) = extract_with_optimization(&params, &received, &OptimizerConfig::default().with_steps(steps))?;
    println!("encoder only     : {:.4}", bit_accuracy(&msg, &baseline)?);
    println!("{steps:>4} refinement: {:.4}", bit_accuracy(&msg, &refined)?);
    if let (Some(first), Some(last)) = (trace.records.first(), trace.records.last()) {
        println!("reconstruction error {:.3} -> {:.3}", first.recon_error, last.recon_error);
    }
    Ok(())
}
