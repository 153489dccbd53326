//! County-level, crop-specific yield forecasting from multi-modal
//! remote-sensing inputs.
//!
//! The crate covers the full pipeline at desk scale: a small f64 autodiff
//! tensor engine ([`tensor`]), the sample/container data model ([`data`]),
//! field masking and stratified pixel sampling ([`sampling`]), a synthetic
//! benchmark generator with a closed-form yield oracle ([`synth`]), the
//! multi-modal transformer ([`model`]), and training/evaluation with
//! year-wise cross-validation ([`train`]). The `cropcast` binary wires these
//! together.

pub mod cli;
pub mod data;
pub mod model;
pub mod sampling;
pub mod synth;
pub mod rng;
pub mod tensor;
pub mod train;
