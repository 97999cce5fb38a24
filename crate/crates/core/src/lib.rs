pub mod attack;
pub mod autodiff;
pub mod image;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod synth;
