//! Discrete Hutchinson measures and attractors of iterated function systems.
//!
//! A system (IFS for arity 1, GIFS for arity `m ≥ 2`) is discretized on a
//! uniform grid by rounding every map output to the nearest lattice point.
//! Iterating the resulting Markov operator on finitely supported measures
//! approximates the invariant measure within `ε/(1−α) + αᴺ·D` in the
//! Monge–Kantorovich metric; iterating the set map on supports approximates
//! the attractor within the same bound in the Hausdorff metric.

// `!(x > 0.0)` also rejects NaN, which is the point.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod error;
pub mod expr;
pub mod grid;
pub mod measure;
pub mod operator;
pub mod render;
pub mod sum;
pub mod system;

pub use error::{Error, Result};
pub use expr::Expr;
pub use grid::{CellId, Grid, GridIndex, Interval};
pub use measure::DiscreteMeasure;
pub use operator::{DiscretizedSystem, PlanMode, ResolutionPlan};
pub use system::{parse_system, Mode, SystemSpec};
