//! Smoothing-based hp quasi-interpolation toolkit.
//!
//! The crate builds, layer by layer: simplicial meshes with degree
//! distributions, mollifiers with vanishing moments, admissible length-scale
//! functions, the variable-scale chain-rule expansion, the mollification
//! operator I_eps with its boundary and zero-trace variants, classical
//! hp interpolation on simplices, integer/fractional Sobolev norms, localized
//! residual estimators on polygon boundaries, and a convergence-study driver.

pub mod bem;
pub mod error;
pub mod faa;
pub mod hp_interp;
pub mod jet;
pub mod length_scale;
pub mod mesh;
pub mod mollifier;
pub mod multi_index;
pub mod norms;
pub mod poly;
pub mod quad;
pub mod smoothing;
pub mod study;

pub use error::{Error, Result};
