//! Gain over the encoder-only baseline as a function of refinement steps.
//!
//! cargo run --release --example ablation -- [trials] [channel]

use latent_stego::harness::{cmd_bench, ExperimentSpec};
use latent_stego::ChannelConfig;

fn main() -> latent_stego::Result<()> {
    let mut args = std::env::args().skip(1);
    let trials = args.next().map(|s| s.parse().expect("trials")).unwrap_or(10);
    let channel: ChannelConfig = args.next().as_deref().unwrap_or("jpeg_like:70").parse()?;
    let spec = ExperimentSpec {
        trials,
        channels: vec![channel],
        steps: vec![0, 10, 25, 50, 80, 100, 110, 150, 200],
        ..ExperimentSpec::table_sweep(42, 0)
    };
    let table = cmd_bench(&spec, None)?;
    println!("{channel}, {trials} trials");
    for r in &table.rows {
        let bar = "#".repeat((r.mean_gain_pct * 10.0).max(0.0) as usize);
        println!("{:>4} steps  {:>7.3}%  {bar}", r.steps, r.mean_gain_pct);
    }
    Ok(())
}
