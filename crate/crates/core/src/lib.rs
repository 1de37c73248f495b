//! Simulation core for NV-detected high-resolution NMR under a rotating
//! magnetic field.

pub mod consts;
pub mod control;
pub mod engine;
pub mod geom;
pub mod rng;
pub mod sample;
pub mod sensor;
pub mod spectra;
pub mod spinalg;
