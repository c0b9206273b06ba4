//! Lyapunov exponents of one-degree-of-freedom Hamiltonian systems driven by
//! small Lévy noise in the Marcus (canonical) sense.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod estimators;
pub mod fpcircle;
pub mod frame;
pub mod marcus;
pub mod model;
pub mod noise;
pub mod output;
pub mod quadrature;
pub mod systems;

pub use error::{Error, Result};

pub type Vec2 = nalgebra::Vector2<f64>;
pub type Mat2 = nalgebra::Matrix2<f64>;
