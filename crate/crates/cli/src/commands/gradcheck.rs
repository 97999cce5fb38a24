use clap::Args;
use shadowstorm::autodiff::GradCheckReport;
use shadowstorm::image::Image;
use shadowstorm::models::GraphModel;
use shadowstorm::rng::Stream;

use crate::error::CliError;
use crate::parse::parse_size;
use crate::zoo::{ZooModel, ZOO_NAMES};

/// Compare each model's input gradient with central differences.
#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// One model (name or params file); default checks the whole zoo.
    #[arg(long)]
    pub model: Option<String>,
    /// Random inputs per model.
    #[arg(long, default_value_t = 20)]
    pub inputs: usize,
    #[arg(long, default_value = "16x16", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub h: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

/// Worst case over all inputs for one model.
#[derive(Debug, Clone)]
pub struct ModelCheck {
    pub model: String,
    pub inputs: usize,
    /// `(input index, report)` of the input with the largest error.
    pub worst: (usize, GradCheckReport),
    pub total_skipped: usize,
    pub total_coordinates: usize,
    pub passed: bool,
}

pub fn random_input(h: usize, w: usize, seed: u64, k: usize) -> Image {
    let mut rng = Stream::keyed(&[seed, k as u64, 0x6763]);
    Image::new(h, w, 3, (0..h * w * 3).map(|_| rng.unit()).collect()).expect("unit values are in range")
}

pub fn check_model(model: &ZooModel, args: &GradcheckArgs) -> Result<ModelCheck, CliError> {
    if args.inputs == 0 || args.h <= 0.0 || args.tol <= 0.0 {
        return Err(CliError::Usage("--inputs, --h and --tol must be positive".into()));
    }
    let (h, w) = args.size;
    let mut worst: Option<(usize, GradCheckReport)> = None;
    let (mut skipped, mut coords, mut passed) = (0, 0, true);
    for k in 0..args.inputs {
        let image = random_input(h, w, args.seed, k);
        let report = model.grad_check(&image, args.seed ^ k as u64, args.h, args.tol)?;
        skipped += report.skipped;
        coords += report.coordinates;
        passed &= report.passed;
        let worse = worst.as_ref().is_none_or(|(_, r)| {
            (!report.passed && r.passed) || (report.passed == r.passed && report.max_rel_error > r.max_rel_error)
        });
        if worse {
            worst = Some((k, report));
        }
    }
    Ok(ModelCheck {
        model: model.name().to_string(),
        inputs: args.inputs,
        worst: worst.expect("at least one input"),
        total_skipped: skipped,
        total_coordinates: coords,
        passed,
    })
}

fn describe(check: &ModelCheck, size: (usize, usize)) -> String {
    let (k, r) = &check.worst;
    let i = r.worst_index;
    let w = size.1;
    format!(
        "{:<10} max_rel_error {:.3e}  skipped {}/{}  worst: input {} coordinate {} (row {}, col {}, ch {}) analytic {:.9e} numeric {:.9e}",
        check.model,
        r.max_rel_error,
        check.total_skipped,
        check.total_coordinates,
        k,
        i,
        i / 3 / w,
        (i / 3) % w,
        i % 3,
        r.analytic,
        r.numeric,
    )
}

pub fn run(args: &GradcheckArgs) -> Result<(), CliError> {
    let specs: Vec<String> = match &args.model {
        Some(m) => vec![m.clone()],
        None => ZOO_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    let mut failed = Vec::new();
    for spec in &specs {
        let model = ZooModel::load(spec, args.seed)?;
        let check = check_model(&model, args)?;
        println!("{}", describe(&check, args.size));
        if !check.passed {
            failed.push(describe(&check, args.size));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "gradient check failed (tol {:e}): {}",
            args.tol,
            failed.join("; ")
        )))
    }
}
