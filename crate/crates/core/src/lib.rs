//! Self-supervised traversability navigation on a synthetic skid-steer robot.
//!
//! The crate closes the full loop at desk scale: a procedural world simulator
//! with a depth camera ([`world`]), a skid-steer kino-dynamic model
//! ([`kinodynamics`]), a moving-horizon estimator that recovers traction
//! coefficients from noisy pose measurements ([`estimator`]), a differentiable
//! camera-to-BEV mapping pipeline ([`bev`]), a self-supervised trainer
//! ([`trainer`]), a sampling model predictive controller ([`controller`]), and
//! a scenario runner that wires everything into `collect` / `train` /
//! `navigate` / `eval` commands ([`runner`]).

pub mod bev;
pub mod camera;
pub mod controller;
pub mod error;
pub mod estimator;
pub mod grid;
pub mod io;
pub mod kinodynamics;
pub mod model;
pub mod runner;
pub mod trainer;
pub mod util;
pub mod world;

pub use error::{Error, Result};
