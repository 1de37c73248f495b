//! Physical constants (SI) and default gyromagnetic ratios in Hz/T.

pub const MU0: f64 = 1.256_637_062_12e-6;
pub const PLANCK: f64 = 6.626_070_15e-34;
pub const BOLTZMANN: f64 = 1.380_649e-23;

pub const GAMMA_1H: f64 = 42.577_478_518e6;
pub const GAMMA_E: f64 = 28.024_951_4e9;
/// Magnitude of the 15N gyromagnetic ratio.
pub const GAMMA_15N: f64 = 4.316_4e6;

pub const TAU: f64 = std::f64::consts::TAU;

/// `arccos(1/sqrt 3)`.
pub fn magic_angle() -> f64 {
    (1.0 / 3f64.sqrt()).acos()
}
