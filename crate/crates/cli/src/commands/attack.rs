use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use shadowstorm::attack::{equivalent_uniform_budget, AttackConfig, AttackMode};
use shadowstorm::image::{load_mask, load_pnm, save_pnm, Image, Perturbation};
use shadowstorm::metrics::{format_value, normalized_perturbation_map};
use shadowstorm::models::DiffModel;

use crate::commands::{run_cell, Cell};
use crate::error::CliError;
use crate::parse::parse_budget;
use crate::report::write_rows;
use crate::zoo::ZooModel;

pub const MASK_THRESHOLD: f64 = 0.5;

/// Attack one image and write the perturbed image, |delta| and normalized
/// perturbation visualizations, and a one-row results CSV.
#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub mode: AttackMode,
    /// Budget as a fraction (16/255) or decimal; eps_a in adaptive mode.
    #[arg(long, value_parser = parse_budget)]
    pub eps: f64,
    /// In uniform mode, use eps * mean(image) as the actual budget.
    #[arg(long)]
    pub equalize: bool,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long, default_value_t = 4.0)]
    pub step_div: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// identity | gainmap | tinycnn | path to a params file
    #[arg(long, default_value = "gainmap")]
    pub model: String,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Ground-truth shadow-free image; defaults to the free_NNNN sibling of a
    /// shadow_NNNN input when present.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub out_prefix: PathBuf,
    /// Record wall-clock runtime in the CSV (breaks byte-reproducibility).
    #[arg(long)]
    pub timing: bool,
}

/// Outputs written by [`run`], keyed off the prefix.
pub struct AttackOutputs {
    pub csv: PathBuf,
    pub attacked: PathBuf,
    pub delta: PathBuf,
    pub normalized: PathBuf,
    pub meta: PathBuf,
}

impl AttackOutputs {
    pub fn new(prefix: &Path, channels: usize) -> Self {
        let ext = if channels == 1 { "pgm" } else { "ppm" };
        let with = |suffix: &str| {
            let mut s = prefix.as_os_str().to_owned();
            s.push(suffix);
            PathBuf::from(s)
        };
        Self {
            csv: with(".csv"),
            attacked: with(&format!("_attacked.{ext}")),
            delta: with(&format!("_delta.{ext}")),
            normalized: with(&format!("_normalized.{ext}")),
            meta: with("_meta.tsv"),
        }
    }
}

fn default_truth(image: &Path) -> Option<PathBuf> {
    let name = image.file_name()?.to_str()?;
    let rest = name.strip_prefix("shadow_")?;
    let candidate = image.with_file_name(format!("free_{rest}"));
    candidate.exists().then_some(candidate)
}

/// Scales `values` by `1 / max` (or 1 if all zero) into a displayable image.
fn stretched(values: &[f64], like: &Image) -> Result<(Image, f64), CliError> {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let factor = if max > 0.0 { 1.0 / max } else { 1.0 };
    let [h, w, c] = like.shape();
    let img = Image::from_clamped(h, w, c, values.iter().map(|v| v.abs() * factor).collect())?;
    Ok((img, factor))
}

pub fn run(args: &AttackArgs) -> Result<(), CliError> {
    let model = ZooModel::load(&args.model, args.seed)?;
    let image = load_pnm(&args.image)?;
    let mask = load_mask(&args.mask, MASK_THRESHOLD)?;
    if !mask.matches(&image) {
        return Err(CliError::Validation(format!(
            "mask {} does not match image {}",
            args.mask.display(),
            args.image.display()
        )));
    }
    let truth_path = args.truth.clone().or_else(|| default_truth(&args.image));
    let truth = truth_path.as_ref().map(load_pnm).transpose()?;
    if let Some(t) = &truth {
        image.ensure_same_shape(t)?;
    }

    let epsilon = match (args.mode, args.equalize) {
        (AttackMode::Uniform, true) => equivalent_uniform_budget(&image, args.eps),
        _ => args.eps,
    };
    let config = AttackConfig {
        iterations: args.iters,
        step_divisor: args.step_div,
        ..AttackConfig::new(args.mode, epsilon).with_seed(args.seed)
    };
    config.validate()?;
    let clean_output = model.forward(&image)?;
    let image_id = args
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let cell = Cell {
        image_id: &image_id,
        shadow: &image,
        mask: &mask,
        truth: truth.as_ref(),
        clean_output: &clean_output,
    };
    let (row, result) = run_cell(&model, &cell, &config, args.eps, args.timing)?;

    let out = AttackOutputs::new(&args.out_prefix, image.channels());
    if let Some(dir) = out.csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    save_pnm(&result.attacked_image, &out.attacked)?;
    let (delta_img, delta_stretch) = stretched(result.perturbation.data(), &image)?;
    save_pnm(&delta_img, &out.delta)?;
    let normalized = normalized_perturbation_map(&result.perturbation, &image, config.intensity_floor)?;
    let (norm_img, norm_stretch) = stretched(&normalized, &image)?;
    save_pnm(&norm_img, &out.normalized)?;
    write_rows(&out.csv, &[row])?;
    write_meta(
        &out.meta,
        &args.model,
        &config,
        &result.perturbation,
        delta_stretch,
        norm_stretch,
    )?;
    Ok(())
}

fn write_meta(
    path: &Path,
    model: &str,
    config: &AttackConfig,
    delta: &Perturbation,
    delta_stretch: f64,
    norm_stretch: f64,
) -> Result<(), CliError> {
    let lines = [
        ("model", model.to_string()),
        ("mode", config.mode.to_string()),
        ("epsilon", format_value(config.epsilon)),
        ("seed", config.seed.to_string()),
        ("entries", delta.len().to_string()),
        ("delta_stretch", format_value(delta_stretch)),
        ("normalized_stretch", format_value(norm_stretch)),
    ];
    let text: String = lines.iter().map(|(k, v)| format!("{k}\t{v}\n")).collect();
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}
