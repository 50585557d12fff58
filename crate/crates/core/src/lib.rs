//! Graded microstructure optimization by zoned asymptotic homogenization.
//!
//! A fixed periodic unit cell is composed with a smooth polynomial map
//! `y(x)`; the macroscopic domain is split into zones, each zone's effective
//! tensor comes from a Jacobian-mapped periodic cell problem, and the map's
//! coefficients are optimized for minimum compliance with MMA.
//!
//! Conventions used throughout:
//! - Voigt order `(11, 22, 12)` in 2D and `(11, 22, 33, 23, 13, 12)` in 3D,
//!   engineering shear strains (see [`tensor`]).
//! - Degrees of freedom are node-major; grids index `x1` fastest.

pub mod config;
pub mod driver;
pub mod error;
pub mod export;
pub mod fem;
pub mod finescale;
pub mod macrosolver;
pub mod mapping;
pub mod microsolver;
pub mod mma;
pub mod scheduler;
pub mod sensitivity;
pub mod sparse;
pub mod tensor;
pub mod unitcell;

pub use error::{Error, Result};
