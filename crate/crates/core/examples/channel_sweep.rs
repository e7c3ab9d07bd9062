//! Accuracy before and after refinement on every channel in severity order.
//!
//! cargo run --release --example channel_sweep -- [trials]

use latent_stego::harness::{cmd_bench, ExperimentSpec};

fn main() -> latent_stego::Result<()> {
    let trials = std::env::args().nth(1).map(|s| s.parse().expect("trials")).unwrap_or(10);
    let spec = ExperimentSpec {
        trials,
        ..ExperimentSpec::table_sweep(42, 0)
    };
    let table = cmd_bench(&spec, None)?;
    println!("{:<14} {:>8} {:>8} {:>8} {:>6}", "channel", "base", "refined", "gain%", "wins");
    for ch in &spec.channels {
        let base = table.rows.iter().find(|r| r.channel == *ch && r.steps == 0).unwrap();
        let opt = table.rows.iter().find(|r| r.channel == *ch && r.steps == 100).unwrap();
        println!(
            "{:<14} {:>8.4} {:>8.4} {:>8.3} {:>3}/{}",
            ch.to_string(),
            base.mean_accuracy,
            opt.mean_accuracy,
            opt.mean_gain_pct,
            opt.wins,
            opt.trials
        );
    }
    Ok(())
}
