pub mod attack;
pub mod bench;
pub mod gen;
pub mod gradcheck;
pub mod train;

use std::time::Instant;

use shadowstorm::attack::{pgd_attack, AttackConfig, AttackResult};
use shadowstorm::image::{Image, ShadowMask};
use shadowstorm::metrics::{perturbation_norms, RegionScores};
use shadowstorm::models::DiffModel;

use crate::error::CliError;
use crate::report::ResultRow;

/// Inputs of one attacked cell.
pub struct Cell<'a> {
    pub image_id: &'a str,
    pub shadow: &'a Image,
    pub mask: &'a ShadowMask,
    pub truth: Option<&'a Image>,
    pub clean_output: &'a Image,
}

pub fn run_cell(
    model: &dyn DiffModel,
    cell: &Cell<'_>,
    config: &AttackConfig,
    epsilon_nominal: f64,
    timing: bool,
) -> Result<(ResultRow, AttackResult), CliError> {
    let start = Instant::now();
    let result = pgd_attack(model, cell.shadow, config)?;
    let attacked_output = model.forward(&result.attacked_image)?;
    let runtime_ms = timing.then(|| start.elapsed().as_secs_f64() * 1e3);
    let truth = cell
        .truth
        .map(|t| RegionScores::compute(&attacked_output, t, cell.mask))
        .transpose()?;
    let row = ResultRow {
        image_id: cell.image_id.to_string(),
        mode: config.mode,
        epsilon_nominal,
        epsilon_effective: config.epsilon,
        truth,
        clean: RegionScores::compute(&attacked_output, cell.clean_output, cell.mask)?,
        norms: perturbation_norms(&result.perturbation, cell.shadow, config.intensity_floor)?,
        iterations: config.iterations,
        runtime_ms,
    };
    Ok((row, result))
}
