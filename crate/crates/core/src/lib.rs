//! Numerical toolkit for stable Lévy diffusion.
//!
//! - [`fracmat`]: band-stored stiffness matrix of the fractional diffusion term
//! - [`fvsolver`]: characteristic-tracking finite volume solver of the forward equation
//! - [`invfit`]: Levenberg-Marquardt identification of the piecewise-linear drift
//! - [`sampler`]: inverse-CDF sampling of the solved density, interval probabilities
//! - [`appio`]: data files, configuration and the command-line driver

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod appio;
pub mod error;
pub mod fracmat;
pub mod fvsolver;
pub mod invfit;
pub mod model;
pub mod sampler;

pub use error::{Error, Result};
pub use model::{
    eval_drift, eval_piecewise_linear, DensitySnapshot, DriftPair, DriftParams, FadeParams, ObservationGroup,
    ObservationSet, SpaceTimeGrid,
};
