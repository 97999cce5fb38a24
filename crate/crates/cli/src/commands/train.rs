use std::path::PathBuf;

use clap::Args;
use shadowstorm::image::Image;
use shadowstorm::metrics::format_value;
use shadowstorm::models::{model_tinycnn, save_params, train_toy, TrainConfig, TrainReport};
use shadowstorm::synth::load_triplet_dir;

use crate::error::CliError;
use crate::report::{sibling, CSV_TAG};

pub const DEFAULT_EPOCHS: usize = 200;
pub const DEFAULT_LR: f64 = 0.5;

/// Train the tiny CNN on a triplet directory (shadow -> shadow-free).
#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    pub epochs: usize,
    #[arg(long, default_value_t = DEFAULT_LR)]
    pub lr: f64,
    /// Initialization seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parameter file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss CSV; defaults to `<out stem>.loss.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = format!("{CSV_TAG}\nepoch,mse\n");
    for (e, l) in losses.iter().enumerate() {
        s.push_str(&format!("{e},{}\n", format_value(*l)));
    }
    s
}

pub fn train(args: &TrainArgs) -> Result<TrainReport, CliError> {
    if !(args.lr > 0.0 && args.lr.is_finite()) {
        return Err(CliError::Usage(format!("learning rate {} must be positive", args.lr)));
    }
    if !args.data.is_dir() {
        return Err(CliError::io(&args.data, "not a directory"));
    }
    let pairs: Vec<(Image, Image)> = load_triplet_dir(&args.data)?
        .into_iter()
        .map(|t| (t.shadow, t.shadow_free))
        .collect();
    let mut model = model_tinycnn(args.seed);
    let config = TrainConfig {
        epochs: args.epochs,
        lr: args.lr,
    };
    let report = train_toy(&mut model, &pairs, config, |e, l| {
        if e % 50 == 0 {
            eprintln!("epoch {e:>5}  mse {l:.6e}");
        }
    })?;
    Ok(report)
}

pub fn run(args: &TrainArgs) -> Result<(), CliError> {
    let report = train(args)?;
    save_params(&report.params, &args.out).map_err(|e| CliError::io(&args.out, e))?;
    let log = args.log.clone().unwrap_or_else(|| sibling(&args.out, ".loss.csv"));
    std::fs::write(&log, loss_csv(&report.losses)).map_err(|e| CliError::io(&log, e))?;
    let (first, last) = (report.losses[0], report.losses[report.losses.len() - 1]);
    eprintln!("mse {first:.6e} -> {last:.6e}; params in {}", args.out.display());
    Ok(())
}
