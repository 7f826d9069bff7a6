//! Incremental online signed distance field mapping.

pub mod geometry;
pub mod sensor_sim;
pub mod coarse_grid;
pub mod local_sdf;
pub mod siren;
pub mod trainer;
pub mod eval;
pub mod pipeline;
