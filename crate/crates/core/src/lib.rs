//! Two-phase microstructure synthesis, diffusion-model reconstruction and
//! evaluation.
//!
//! The crate is organised around the stages of the workflow:
//!
//! - [`synth`] generates training/evaluation datasets,
//! - [`schedule`], [`diffusion`] and [`denoiser`] implement noising, sampling
//!   and the trainable noise predictor,
//! - [`descriptors`] and [`contour`] characterise microstructures,
//! - [`lbm`] measures permeability with a lattice-Boltzmann solver.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod contour;
pub mod denoiser;
pub mod descriptors;
pub mod diffusion;
pub mod error;
pub mod field;
pub mod io;
pub mod lbm;
pub mod microstructure;
pub mod par;
pub mod schedule;
pub mod stats;
pub mod synth;

pub use denoiser::{Architecture, DenoiserModel};
pub use error::{Error, Result};
pub use field::Field;
pub use microstructure::Microstructure;
pub use schedule::{NoiseSchedule, ScheduleConfig};
