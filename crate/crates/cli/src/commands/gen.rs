use std::path::PathBuf;

use clap::Args;
use shadowstorm::synth::{gen_dataset, SynthConfig};

use crate::error::CliError;
use crate::parse::parse_size;

/// Write a synthetic triplet dataset plus manifest.
#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Image size as HxW.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: &GenArgs) -> Result<(), CliError> {
    let config = SynthConfig {
        seed: args.seed,
        count: args.count,
        height: args.size.0,
        width: args.size.1,
        ..SynthConfig::default()
    };
    let manifest = gen_dataset(&config, &args.out)?;
    eprintln!("wrote {} triplets to {}", manifest.rows.len(), args.out.display());
    Ok(())
}
