use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latent_stego::channels::{channel_severity_order, ChannelConfig};
use latent_stego::codec::{LatentShape, SamplingMode, StegoKey};
use latent_stego::generator::{DecoderArch, ImageShape, DEFAULT_IMAGE, DEFAULT_LATENT};
use latent_stego::harness::{
    cmd_attack, cmd_bench, cmd_crossmodel, cmd_embed, cmd_extract, EmbedRequest, ExperimentSpec, ExtractRequest,
    GeneratorSpec, ResultTable, ABLATION_STEPS,
};
use latent_stego::optimizer::{EtaArg, OptimizerConfig};
use latent_stego::{Result, StegoError};

#[derive(Parser)]
#[command(name = "latent-stego", version, about = "Generative steganography with latent refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Hide a message file in a generated image.
    Embed(EmbedArgs),
    /// Recover a message from a (possibly degraded) image.
    Extract(ExtractArgs),
    /// Apply a lossy channel to an image file.
    Attack(AttackArgs),
    /// Channel x steps benchmark.
    Bench(BenchArgs),
    /// Benchmark over the step-count sweep 50,80,100,110.
    Ablate(BenchArgs),
    /// Benchmark the same optimizer on two generators.
    Crossmodel(CrossArgs),
}

#[derive(Args, Clone)]
struct GenArgs {
    /// Generator seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_name = "c,h,w", default_value_t = DEFAULT_LATENT)]
    latent_shape: LatentShape,
    #[arg(long, value_name = "H,W,C", default_value_t = DEFAULT_IMAGE)]
    image_shape: ImageShape,
}

impl GenArgs {
    fn spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            seed: self.seed,
            latent: self.latent_shape,
            image: self.image_shape,
            arch: DecoderArch::default(),
        }
    }
}

#[derive(Args, Clone)]
struct OptArgs {
    #[arg(long, value_name = "auto|fixed:VALUE", default_value = "auto")]
    eta: EtaArg,
}

impl OptArgs {
    fn config(&self, steps: usize) -> OptimizerConfig {
        OptimizerConfig {
            eta: self.eta.eta,
            eta_policy: self.eta.policy,
            ..OptimizerConfig::default()
        }
        .with_steps(steps)
    }
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    generator: GenArgs,
    /// Message file (raw bytes, optional `<file>.json` sidecar with the bit length).
    #[arg(long)]
    message: PathBuf,
    /// Stego key seeding the uniform sampler.
    #[arg(long, default_value_t = 0)]
    key: u64,
    #[arg(long, default_value_t = SamplingMode::Random)]
    mode: SamplingMode,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Output file name; `.ppm`/`.pgm` writes 8-bit PNM, anything else the float tensor format.
    #[arg(long, default_value = "stego.tensor")]
    name: String,
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    generator: GenArgs,
    #[command(flatten)]
    optimizer: OptArgs,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    /// Original message, to report bit accuracy.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    image: PathBuf,
    /// identity, float16, bitdepth:B or jpeg_like:Q
    #[arg(long)]
    channel: ChannelConfig,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Output file name; defaults to the input's.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args, Clone)]
struct BenchArgs {
    #[command(flatten)]
    generator: GenArgs,
    #[command(flatten)]
    optimizer: OptArgs,
    /// Channels, comma separated; defaults to the full severity list.
    #[arg(long, value_delimiter = ',')]
    channel: Vec<ChannelConfig>,
    /// Step counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    steps: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = SamplingMode::Random)]
    mode: SamplingMode,
    /// Seed for messages and keys.
    #[arg(long, default_value_t = 0)]
    master_seed: u64,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

impl BenchArgs {
    fn spec(&self, default_steps: &[usize]) -> ExperimentSpec {
        let steps = if self.steps.is_empty() { default_steps.to_vec() } else { self.steps.clone() };
        let channels = if self.channel.is_empty() { channel_severity_order() } else { self.channel.clone() };
        ExperimentSpec {
            generator: self.generator.spec(),
            channels,
            steps,
            trials: self.trials,
            mode: self.mode,
            master_seed: self.master_seed,
            optimizer: self.optimizer.config(0),
        }
    }
}

#[derive(Args)]
struct CrossArgs {
    #[command(flatten)]
    bench: BenchArgs,
    #[arg(long, default_value_t = 7)]
    second_seed: u64,
    #[arg(long, default_value_t = 2)]
    second_hidden: usize,
}

fn print_table(table: &ResultTable) {
    println!("{:<20} {:<14} {:>5} {:>9} {:>9} {:>9}", "generator", "channel", "steps", "accuracy", "gain_pct", "sign_p");
    for r in &table.rows {
        println!(
            "{:<20} {:<14} {:>5} {:>9.4} {:>9.3} {:>9.2e}",
            r.generator,
            r.channel.to_string(),
            r.steps,
            r.mean_accuracy,
            r.mean_gain_pct,
            r.sign_test_p
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Embed(a) => {
            let output = a.out.join(&a.name);
            std::fs::create_dir_all(&a.out)?;
            let side = cmd_embed(&EmbedRequest {
                message: a.message,
                key: StegoKey::new(a.key),
                generator: a.generator.spec(),
                mode: a.mode,
                output: output.clone(),
            })?;
            println!("embedded {} bits into {}", side.bit_length, output.display());
        }
        Command::Extract(a) => {
            let (bits, report) = cmd_extract(&ExtractRequest {
                image: a.image,
                generator: a.generator.spec(),
                optimizer: a.optimizer.config(a.steps),
                out_dir: a.out.clone(),
                reference: a.reference,
            })?;
            println!("recovered {} bits into {}", bits.len(), a.out.join("recovered.bin").display());
            if let Some(acc) = report.accuracy {
                println!("bit accuracy {acc:.6}");
            }
        }
        Command::Attack(a) => {
            let name = match a.name {
                Some(n) => PathBuf::from(n),
                None => PathBuf::from(
                    a.image
                        .file_name()
                        .ok_or_else(|| StegoError::InvalidInput("input has no file name".into()))?,
                ),
            };
            std::fs::create_dir_all(&a.out)?;
            let output = a.out.join(name);
            if output == a.image {
                return Err(StegoError::InvalidInput("refusing to overwrite the input image".into()));
            }
            cmd_attack(&a.image, a.channel, &output)?;
            println!("wrote {}", output.display());
        }
        Command::Bench(a) => print_table(&cmd_bench(&a.spec(&[0, 100]), Some(&a.out))?),
        Command::Ablate(a) => print_table(&cmd_bench(&a.spec(&ABLATION_STEPS), Some(&a.out))?),
        Command::Crossmodel(a) => {
            let second = GeneratorSpec {
                seed: a.second_seed,
                arch: DecoderArch {
                    hidden: a.second_hidden,
                    ..DecoderArch::default()
                },
                ..a.bench.generator.spec()
            };
            print_table(&cmd_crossmodel(&a.bench.spec(&[0, 100]), &second, Some(&a.bench.out))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
