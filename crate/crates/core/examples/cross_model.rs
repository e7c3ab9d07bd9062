//! The same optimizer against two independently built generators.
//!
//! cargo run --release --example cross_model -- [trials]

use latent_stego::harness::{cmd_crossmodel, ExperimentSpec, GeneratorSpec};
use latent_stego::DecoderArch;

fn main() -> latent_stego::Result<()> {
    let trials = std::env::args().nth(1).map(|s| s.parse().expect("trials")).unwrap_or(5);
    let spec = ExperimentSpec {
        trials,
        ..ExperimentSpec::table_sweep(42, 0)
    };
    let second = GeneratorSpec {
        arch: DecoderArch {
            hidden: 2,
            ..DecoderArch::default()
        },
        ..GeneratorSpec::new(7)
    };
    let table = cmd_crossmodel(&spec, &second, None)?;
    println!("optimizer {}", table.optimizer_fingerprint);
    for r in table.rows.iter().filter(|r| r.steps == 100) {
        println!(
            "{:<18} {:<14} {:.4} ({:+.3} pts)",
            r.generator,
            r.channel.to_string(),
            r.mean_accuracy,
            r.mean_gain_pct
        );
    }
    Ok(())
}
