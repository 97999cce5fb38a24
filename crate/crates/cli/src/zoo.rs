//! Model selection by name or parameter file.

use std::path::Path;

use shadowstorm::autodiff::{GradCheckReport, Tape, Var};
use shadowstorm::image::Image;
use shadowstorm::models::{
    load_params, model_grad_check, model_identity, model_tinycnn, GainMap, GraphModel, Identity, ModelError,
    ModelParams, TinyCnn,
};

use crate::error::CliError;

pub const ZOO_NAMES: [&str; 3] = ["identity", "gainmap", "tinycnn"];

#[derive(Debug, Clone)]
pub enum ZooModel {
    Identity(Identity),
    GainMap(GainMap),
    TinyCnn(TinyCnn),
}

impl ZooModel {
    /// `identity`, `gainmap` (default geometry), `tinycnn` (seeded, untrained)
    /// or a path to a saved tinycnn parameter file.
    pub fn load(spec: &str, seed: u64) -> Result<Self, CliError> {
        match spec {
            "identity" => Ok(ZooModel::Identity(model_identity())),
            "gainmap" => Ok(ZooModel::GainMap(GainMap::default())),
            "tinycnn" => Ok(ZooModel::TinyCnn(model_tinycnn(seed))),
            path => {
                let path = Path::new(path);
                if !path.exists() {
                    return Err(CliError::Usage(format!(
                        "model {spec:?} is neither one of {ZOO_NAMES:?} nor an existing params file"
                    )));
                }
                let params = load_params(path).map_err(|e| CliError::io(path, e))?;
                let model = TinyCnn::from_params(params).map_err(|e| CliError::io(path, e))?;
                Ok(ZooModel::TinyCnn(model))
            }
        }
    }

    pub fn grad_check(&self, image: &Image, seed: u64, h: f64, tol: f64) -> Result<GradCheckReport, ModelError> {
        model_grad_check(self, image, seed, h, tol)
    }

    fn inner(&self) -> &dyn GraphModel {
        match self {
            ZooModel::Identity(m) => m,
            ZooModel::GainMap(m) => m,
            ZooModel::TinyCnn(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn GraphModel {
        match self {
            ZooModel::Identity(m) => m,
            ZooModel::GainMap(m) => m,
            ZooModel::TinyCnn(m) => m,
        }
    }
}

impl GraphModel for ZooModel {
    fn name(&self) -> &str {
        self.inner().name()
    }

    fn params(&self) -> &ModelParams {
        self.inner().params()
    }

    fn params_mut(&mut self) -> &mut ModelParams {
        self.inner_mut().params_mut()
    }

    fn record(&self, tape: &mut Tape, input: Var, params: &[Var]) -> Result<Var, ModelError> {
        self.inner().record(tape, input, params)
    }
}
