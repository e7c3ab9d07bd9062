//! Goodness-of-fit of embedded latents, random versus midpoint sampling.
//!
//! cargo run --release --example security_check

use latent_stego::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> Result<()> {
    let n = 1 << 16;
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let msg = BitMessage::random(n, &mut rng)?;
    for mode in [SamplingMode::Random, SamplingMode::Midpoint] {
        let s = bits_to_uniform(&msg, StegoKey::new(11), mode)?;
        let z = uniform_to_latent(&s, LatentShape::new(1, 1, n))?;
        let ks = ks_test_gaussian(z.values())?;
        let uni = uniformity_test(&s, msg.ones_rate())?;
        let kl = empirical_kl(z.values(), 64)?;
        println!("{mode}:");
        println!("  {}", serde_json::to_string(&ks)?);
        println!("  {}", serde_json::to_string(&uni)?);
        println!("  histogram KL {kl:.3e} nats");
    }
    Ok(())
}
