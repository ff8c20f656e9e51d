//! Benchmarked risk-sensitive portfolio optimization in an affine factor market.
//!
//! The pipeline is: build a [`model::ValidatedModel`], integrate the value
//! function coefficients with [`valuefn::solve_value_coefficients`], evaluate
//! feedback policies in [`policy`], check the game structure in [`game`],
//! simulate in [`simulate`] and summarize returns with [`analytics`].
//! [`estimate`] fits a constant-coefficient model to a return panel.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod error;
pub mod estimate;
pub mod game;
pub mod linalg;
pub mod model;
pub mod policy;
pub mod simulate;
pub mod valuefn;

pub use error::{Error, Result};
pub use model::{Coefficients, GramBlocks, ModelSpec, ProjectionPair, Segment, ValidatedModel};
pub use valuefn::{solve_value_coefficients, value_function, ValueCoefficients, ValueEval};
