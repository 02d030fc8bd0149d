//! Near-field XL-MIMO beam management for low-altitude UAV links.

pub mod binio;
pub mod channel;
pub mod codebook;
pub mod error;
pub mod evalharness;
pub mod geom;
pub mod inference;
pub mod predictor;
pub mod rng;
pub mod sysgeo;
pub mod training;

pub use error::{Error, Result};
pub use geom::{Aabb, Vec3};
