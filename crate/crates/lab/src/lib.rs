//! File formats, run directories, the experiment runner and the HTTP labeling
//! service built on `querysynth-core`.

pub mod config;
pub mod params;
pub mod records;
pub mod results;
pub mod rundir;
pub mod runner;
pub mod service;
pub mod wire;
