//! Implicit morphable head avatars.
//!
//! Canonical occupancy, deformation and texture fields are trained from
//! rendered frames. Deformed-space rays are marched by solving for canonical
//! correspondences of a forward skinning warp, and surface points are
//! differentiated implicitly through their defining constraints.

pub mod container;
pub mod deform;
pub mod error;
pub mod eval;
pub mod morphable;
pub mod nets;
pub mod render;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
