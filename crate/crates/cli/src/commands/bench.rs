use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use rayon::prelude::*;
use shadowstorm::attack::{equivalent_uniform_budget, AttackConfig, AttackMode};
use shadowstorm::image::Image;
use shadowstorm::metrics::RegionScores;
use shadowstorm::models::DiffModel;
use shadowstorm::rng::mix;
use shadowstorm::synth::{load_triplet_dir, Triplet};

use crate::commands::{run_cell, Cell};
use crate::error::CliError;
use crate::parse::{parse_budget, sorted_budgets};
use crate::report::{plot_text, sibling, sort_rows, summarize, write_rows, write_summary, ResultRow, SummaryRow};
use crate::zoo::ZooModel;

pub const DEFAULT_BUDGETS: &str = "1/255,2/255,4/255,8/255,16/255";

/// Sweep every (image, mode, budget) cell of a triplet directory.
///
/// Writes `<out>`, `<out stem>.summary.csv` and `<out stem>.plot.dat`.
#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Directory of shadow_/mask_/free_ triplets.
    #[arg(long)]
    pub data: PathBuf,
    /// identity | gainmap | tinycnn | path to a params file
    #[arg(long, default_value = "gainmap")]
    pub model: String,
    #[arg(long, value_delimiter = ',', default_value = "adaptive,uniform")]
    pub modes: Vec<AttackMode>,
    /// Comma-separated budgets (fractions or decimals), eps_a for both modes.
    #[arg(long, value_delimiter = ',', default_value = DEFAULT_BUDGETS, value_parser = parse_budget)]
    pub budgets: Vec<f64>,
    /// Run uniform cells at eps_u = eps_a * mean(image).
    #[arg(long)]
    pub equalize: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long, default_value_t = 4.0)]
    pub step_div: f64,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Record wall-clock runtime per row (breaks byte-reproducibility).
    #[arg(long)]
    pub timing: bool,
}

/// Paths written by a sweep.
pub struct BenchOutputs {
    pub csv: PathBuf,
    pub summary: PathBuf,
    pub plot: PathBuf,
}

impl BenchOutputs {
    pub fn new(out: &Path) -> Self {
        Self {
            csv: out.to_path_buf(),
            summary: sibling(out, ".summary.csv"),
            plot: sibling(out, ".plot.dat"),
        }
    }
}

/// In-memory sweep result.
pub struct Sweep {
    pub rows: Vec<ResultRow>,
    pub clean: Vec<RegionScores>,
    pub summary: Vec<SummaryRow>,
    pub failures: Vec<String>,
}

fn mode_tag(mode: AttackMode) -> u64 {
    match mode {
        AttackMode::Uniform => 1,
        AttackMode::Adaptive => 2,
    }
}

/// Attack seed of one cell: depends only on the sweep seed and the cell key,
/// never on scheduling.
pub fn cell_seed(seed: u64, index: usize, mode: AttackMode, budget_index: usize) -> u64 {
    mix(&[seed, index as u64, mode_tag(mode), budget_index as u64])
}

fn image_id(t: &Triplet) -> String {
    format!("{:04}", t.index)
}

/// Runs the sweep over already loaded triplets.
pub fn sweep(model: &dyn DiffModel, triplets: &[Triplet], args: &BenchArgs) -> Result<Sweep, CliError> {
    let budgets = sorted_budgets(&args.budgets);
    for &eps in &budgets {
        AttackConfig {
            iterations: args.iters,
            step_divisor: args.step_div,
            ..AttackConfig::adaptive(eps)
        }
        .validate()?;
    }
    if args.modes.is_empty() {
        return Err(CliError::Usage("at least one mode is required".into()));
    }
    let mut modes = args.modes.clone();
    modes.sort();
    modes.dedup();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", args.jobs)))?;

    pool.install(|| {
        let outputs: Vec<Result<(Image, RegionScores), CliError>> = triplets
            .par_iter()
            .map(|t| {
                let out = model.forward(&t.shadow)?;
                let scores = RegionScores::compute(&out, &t.shadow_free, &t.mask)?;
                Ok((out, scores))
            })
            .collect();

        let mut failures = Vec::new();
        let mut ok = Vec::with_capacity(triplets.len());
        for (t, r) in triplets.iter().zip(outputs) {
            match r {
                Ok(v) => ok.push((t, v)),
                Err(e) => failures.push(format!("image {} clean pass: {e}", image_id(t))),
            }
        }
        let nb = budgets.len();
        let cells: Vec<(usize, AttackMode, usize)> = (0..ok.len())
            .flat_map(|i| modes.iter().flat_map(move |&m| (0..nb).map(move |b| (i, m, b))))
            .collect();
        let results: Vec<Result<ResultRow, String>> = cells
            .par_iter()
            .map(|&(i, mode, b)| {
                let (t, (clean_out, _)) = &ok[i];
                let eps_a = budgets[b];
                let epsilon = match (mode, args.equalize) {
                    (AttackMode::Uniform, true) => equivalent_uniform_budget(&t.shadow, eps_a),
                    _ => eps_a,
                };
                let config = AttackConfig {
                    iterations: args.iters,
                    step_divisor: args.step_div,
                    ..AttackConfig::new(mode, epsilon).with_seed(cell_seed(args.seed, t.index, mode, b))
                };
                let id = image_id(t);
                let cell = Cell {
                    image_id: &id,
                    shadow: &t.shadow,
                    mask: &t.mask,
                    truth: Some(&t.shadow_free),
                    clean_output: clean_out,
                };
                run_cell(model, &cell, &config, eps_a, args.timing)
                    .map(|(row, _)| row)
                    .map_err(|e| format!("image {id} mode {mode} eps {eps_a}: {e}"))
            })
            .collect();

        let mut rows = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok(row) => rows.push(row),
                Err(msg) => failures.push(msg),
            }
        }
        sort_rows(&mut rows);
        let clean: Vec<RegionScores> = ok.iter().map(|(_, (_, s))| *s).collect();
        let summary = summarize(&rows, &clean);
        Ok(Sweep {
            rows,
            clean,
            summary,
            failures,
        })
    })
}

pub fn write_sweep(out: &BenchOutputs, sweep: &Sweep) -> Result<(), CliError> {
    if let Some(dir) = out.csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_rows(&out.csv, &sweep.rows)?;
    write_summary(&out.summary, &sweep.summary, &sweep.failures)?;
    fs::write(&out.plot, plot_text(&sweep.summary)).map_err(|e| CliError::io(&out.plot, e))
}

pub fn run(args: &BenchArgs) -> Result<(), CliError> {
    let model = ZooModel::load(&args.model, args.seed)?;
    if !args.data.is_dir() {
        return Err(CliError::io(&args.data, "not a directory"));
    }
    let triplets = load_triplet_dir(&args.data)?;
    if triplets.is_empty() {
        eprintln!(
            "warning: {} holds no triplets; writing empty results",
            args.data.display()
        );
    }
    let result = sweep(&model, &triplets, args)?;
    write_sweep(&BenchOutputs::new(&args.out), &result)?;
    for f in &result.failures {
        eprintln!("failed: {f}");
    }
    let total = result.rows.len() + result.failures.len();
    if result.failures.is_empty() {
        eprintln!("wrote {} rows to {}", result.rows.len(), args.out.display());
        Ok(())
    } else {
        Err(CliError::Partial {
            failed: result.failures.len(),
            total,
        })
    }
}
