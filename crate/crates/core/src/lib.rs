pub mod autodiff;
pub mod basis;
pub mod dataset;
pub mod design;
pub mod diagnostics;
pub mod error;
pub mod formula;
pub mod hazard;
pub mod inference;
pub mod model;
pub mod params;
pub mod prediction;
pub mod quadrature;
pub mod scalar;
pub mod simulation;
pub mod spec;

pub use error::{Error, Result};
pub use scalar::Real;

/// Parameter values on the constrained scale.
pub type Parameters = params::ParameterVector<f64>;
/// Parameters recorded on a reverse-mode tape.
pub type TapeParameters<'t> = params::ParameterVector<autodiff::Var<'t>>;
/// Log posterior decomposition at a plain point.
pub type LogPosterior = hazard::LogPosteriorValue<f64>;
/// Random-effect block with plain values.
pub type EffectBlock = params::ReBlock<f64>;
