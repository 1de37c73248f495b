//! Nuclear sample model: shift tensors, pair geometry in the detection
//! region, dipolar couplings, sensor coupling weights and statistically
//! polarised initial states.

use crate::consts::{GAMMA_1H, MU0, PLANCK};
use crate::geom::{self, Mat3, Vec3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SampleError {
    #[error("direction has norm {0}, expected 1")]
    NonUnit(f64),
    #[error("pair placement failed after {attempts} attempts (placed {placed} of {wanted})")]
    Placement { attempts: usize, placed: usize, wanted: usize },
    #[error("invalid sample parameter: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, SampleError>;

fn check_unit(b: &Vec3) -> Result<()> {
    if geom::is_unit(b, UNIT_TOL) {
        Ok(())
    } else {
        Err(SampleError::NonUnit(b.norm()))
    }
}

/// Chemical-shift tensor: principal values in Hz at the working field and a
/// ZYZ Euler rotation from the principal-axis system to the laboratory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftTensor {
    pub principal_values: [f64; 3],
    pub pas_orientation: [f64; 3],
}

impl ShiftTensor {
    pub fn new(principal_values: [f64; 3], pas_orientation: [f64; 3]) -> Self {
        Self { principal_values, pas_orientation }
    }

    pub fn iso(&self) -> f64 {
        let [x, y, z] = self.principal_values;
        (x + y + z) / 3.0
    }

    /// PAS-to-lab rotation; its columns are the principal axes X, Y, Z.
    pub fn rotation(&self) -> Mat3 {
        let [a, b, c] = self.pas_orientation;
        geom::euler_zyz(a, b, c)
    }

    /// `R diag(delta) R^T` in Hz.
    pub fn lab_tensor(&self) -> Mat3 {
        let r = self.rotation();
        r * Mat3::from_diagonal(&Vec3::from(self.principal_values)) * r.transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpinSpecies {
    /// Ordinary frequency per tesla.
    pub gyromagnetic_ratio: f64,
    pub label: String,
}

impl Default for SpinSpecies {
    fn default() -> Self {
        Self { gyromagnetic_ratio: GAMMA_1H, label: "1H".into() }
    }
}

/// Largest secular splitting of two protons 0.25 nm apart, Hz.
pub const MAX_SPLITTING_ANCHOR: f64 = 14.9e3;

/// Ratio between the dipolar prefactor used here and `mu0 gamma^2 h / (4 pi r^3)`.
///
/// Fixed so that two protons 0.25 nm apart have a `theta = 0` splitting
/// `2 d(0)` (the `I_S^1 I_S^2` coefficient) of 14.9 kHz.
pub fn dipolar_convention() -> f64 {
    MAX_SPLITTING_ANCHOR / (2.0 * dipolar_bare(GAMMA_1H, 0.25e-9))
}

fn dipolar_bare(gamma: f64, r: f64) -> f64 {
    MU0 * gamma * gamma * PLANCK / (4.0 * std::f64::consts::PI * r.powi(3))
}

/// Orientation-independent dipolar prefactor in Hz for two like spins at distance `r`.
pub fn dipolar_prefactor(gamma: f64, r: f64) -> f64 {
    dipolar_convention() * dipolar_bare(gamma, r)
}

/// Two nuclei with their tensors and mutual dipolar coupling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCluster {
    /// Metres, relative to the NV at the origin.
    pub positions: [[f64; 3]; 2],
    pub tensors: [ShiftTensor; 2],
    pub species: SpinSpecies,
    /// Hz.
    pub dipolar_b: f64,
    pub unit_internuclear: [f64; 3],
}

impl PairCluster {
    pub fn new(center: Vec3, axis: Vec3, distance: f64, tensors: [ShiftTensor; 2], species: SpinSpecies) -> Self {
        let axis = axis.normalize();
        let p0 = center - axis * (0.5 * distance);
        let p1 = center + axis * (0.5 * distance);
        let dipolar_b = dipolar_prefactor(species.gyromagnetic_ratio, distance);
        Self {
            positions: [p0.into(), p1.into()],
            tensors,
            species,
            dipolar_b,
            unit_internuclear: axis.into(),
        }
    }

    pub fn distance(&self) -> f64 {
        (Vec3::from(self.positions[1]) - Vec3::from(self.positions[0])).norm()
    }

    pub fn axis(&self) -> Vec3 {
        Vec3::from(self.unit_internuclear)
    }

    /// Copy with tensors, positions and axis rotated by `q`.
    pub fn rotated(&self, q: &Mat3) -> Self {
        let rot = |t: &ShiftTensor| {
            let r = q * t.rotation();
            ShiftTensor { principal_values: t.principal_values, pas_orientation: zyz_from_matrix(&r) }
        };
        Self {
            positions: [(q * Vec3::from(self.positions[0])).into(), (q * Vec3::from(self.positions[1])).into()],
            tensors: [rot(&self.tensors[0]), rot(&self.tensors[1])],
            species: self.species.clone(),
            dipolar_b: self.dipolar_b,
            unit_internuclear: (q * self.axis()).into(),
        }
    }
}

/// ZYZ Euler angles of a proper rotation matrix.
pub fn zyz_from_matrix(r: &Mat3) -> [f64; 3] {
    let cb = r[(2, 2)].clamp(-1.0, 1.0);
    let b = cb.acos();
    if b.sin().abs() > 1e-12 {
        let a = r[(1, 2)].atan2(r[(0, 2)]);
        let c = r[(2, 1)].atan2(-r[(2, 0)]);
        [a, b, c]
    } else if cb > 0.0 {
        [r[(1, 0)].atan2(r[(0, 0)]), 0.0, 0.0]
    } else {
        [(-r[(1, 0)]).atan2(-r[(0, 0)]), std::f64::consts::PI, 0.0]
    }
}

/// Secular shift `sum_i cos^2(theta_i) delta_i` for field direction `b_hat`.
pub fn secular_shift(tensor: &ShiftTensor, b_hat: &Vec3) -> Result<f64> {
    check_unit(b_hat)?;
    let r = tensor.rotation();
    Ok((0..3)
        .map(|i| {
            let c = r.column(i).dot(b_hat);
            c * c * tensor.principal_values[i]
        })
        .sum())
}

/// Secular dipolar coefficient `d(theta) = b (3 cos^2 theta - 1) / 2` of
/// `d [3 I_S^1 I_S^2 - I^1 . I^2]`.
pub fn dipolar_secular(pair: &PairCluster, b_hat: &Vec3) -> Result<f64> {
    check_unit(b_hat)?;
    let c = pair.axis().dot(b_hat);
    Ok(pair.dipolar_b * (3.0 * c * c - 1.0) / 2.0)
}

/// Sampled Bloch angles `(theta, phi)` per nucleus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlochSample {
    pub angles: Vec<(f64, f64)>,
    /// `x = beta gamma B0`.
    pub beta_field_product: f64,
}

/// Inverse of the cumulative distribution of `cos theta` at uniform variate `u`.
pub fn cos_theta_from_uniform(u: f64, x: f64) -> f64 {
    if x.abs() < 1e-8 {
        return 1.0 - 2.0 * u;
    }
    // -ln(e^-x + 2 u sinh x) / x, written to avoid overflow for large x
    let v = (-x).exp() + 2.0 * u * x.sinh();
    (-v.ln() / x).clamp(-1.0, 1.0)
}

/// Cumulative probability `P_c` as a function of `cos theta`.
pub fn bloch_cdf(cos_theta: f64, x: f64) -> f64 {
    if x.abs() < 1e-8 {
        return (1.0 - cos_theta) / 2.0;
    }
    ((-x * cos_theta).exp() - (-x).exp()) / (2.0 * x.sinh())
}

/// Mean of `cos theta`, `1/x - coth x`.
pub fn mean_cos_theta(x: f64) -> f64 {
    if x.abs() < 1e-6 {
        return -x / 3.0;
    }
    1.0 / x - 1.0 / x.tanh()
}

/// Mean of `sin^2 theta`, `2 (x coth x - 1) / x^2`.
pub fn mean_sin2_theta(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        return 2.0 / 3.0 - 2.0 * x * x / 45.0;
    }
    2.0 * (x / x.tanh() - 1.0) / (x * x)
}

pub fn sample_bloch<R: Rng + ?Sized>(n: usize, x: f64, rng: &mut R) -> BlochSample {
    let angles = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let ct = cos_theta_from_uniform(u, x);
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            (ct.acos(), phi)
        })
        .collect();
    BlochSample { angles, beta_field_product: x }
}

/// Per-nucleus coupling weight `C_k` in tesla per unit `<I>`.
pub fn coupling_weight(position: &Vec3, gamma: f64) -> f64 {
    let r = position.norm();
    let lz = position.z / r;
    -(MU0 * PLANCK / (4.0 * std::f64::consts::PI)) * gamma * (2.0f64 / 3.0).sqrt() * (3.0 * lz * lz - 1.0) / r.powi(3)
}

/// Prefactor `mu0 h gamma sqrt(2/3) / (4 pi)` that turns the geometric factor into `C_k`.
pub fn coupling_scale(gamma: f64) -> f64 {
    MU0 * PLANCK * gamma * (2.0f64 / 3.0).sqrt() / (4.0 * std::f64::consts::PI)
}

/// Half-ball of radius `d` resting on the surface `z = d` above an NV at depth `d`.
pub fn in_detection_region(p: &Vec3, d: f64) -> bool {
    p.z >= d && (p - Vec3::new(0.0, 0.0, d)).norm() <= d
}

pub fn detection_volume(d: f64) -> f64 {
    2.0 / 3.0 * std::f64::consts::PI * d.powi(3)
}

/// `F2 = integral of [(3 l_z^2 - 1) / r^3]^2` over the detection region, m^-3.
///
/// In NV-centred spherical coordinates the region is `d / cos t <= r <= 2 d cos t`
/// for `cos t >= 1/sqrt 2`; the radial and polar integrals are elementary.
pub fn f2_integral(d: f64) -> f64 {
    let prim = |c: f64| {
        let outer = 9.0 * c.powi(8) / 8.0 - c.powi(6) + c.powi(4) / 4.0;
        let inner = (4.5 * c * c - 6.0 * c.ln() - 0.5 / (c * c)) / 8.0;
        outer - inner
    };
    let a = std::f64::consts::FRAC_1_SQRT_2;
    2.0 * std::f64::consts::PI / (3.0 * d.powi(3)) * (prim(1.0) - prim(a))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub nv_depth: f64,
    pub pair_count: usize,
    pub internuclear_distance: f64,
    pub exclusion_radius: f64,
    /// Principal values of the two nuclei of every pair, Hz.
    pub principal_values: [[f64; 3]; 2],
    pub species: SpinSpecies,
    pub max_attempts_per_pair: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            nv_depth: 5e-9,
            pair_count: 16,
            internuclear_distance: 0.25e-9,
            exclusion_radius: 0.4e-9,
            principal_values: [[352.0, 22.0, 456.0], [221.0, 27.0, 74.0]],
            species: SpinSpecies::default(),
            max_attempts_per_pair: 10_000,
        }
    }
}

/// Detection region of one sensor with the coupling weights of its nuclei.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionGeometry {
    pub nv_depth: f64,
    pub pair_count: usize,
    /// Two entries per pair, in pair order.
    pub coupling_weights: Vec<f64>,
    pub f2: f64,
    pub volume: f64,
}

/// Random pair centres (uniform in the region), internuclear axes and PAS
/// orientations (Haar), with centres kept at least the exclusion radius apart.
pub fn place_pairs<R: Rng + ?Sized>(cfg: &GeometryConfig, rng: &mut R) -> Result<(DetectionGeometry, Vec<PairCluster>)> {
    if cfg.pair_count == 0 {
        return Err(SampleError::Invalid("pair_count must be at least 1".into()));
    }
    if !(cfg.nv_depth > 0.0) {
        return Err(SampleError::Invalid("nv_depth must be positive".into()));
    }
    if !(cfg.internuclear_distance > 0.0) {
        return Err(SampleError::Invalid("internuclear distance must be positive".into()));
    }
    let d = cfg.nv_depth;
    let budget = cfg.max_attempts_per_pair.max(1) * cfg.pair_count;
    let mut attempts = 0usize;
    let mut pairs: Vec<PairCluster> = Vec::with_capacity(cfg.pair_count);
    let mut centers: Vec<Vec3> = Vec::with_capacity(cfg.pair_count);
    while pairs.len() < cfg.pair_count {
        if attempts >= budget {
            return Err(SampleError::Placement { attempts, placed: pairs.len(), wanted: cfg.pair_count });
        }
        attempts += 1;
        let c = Vec3::new(rng.random_range(-d..=d), rng.random_range(-d..=d), rng.random_range(d..=2.0 * d));
        let axis = geom::random_unit(rng);
        let t0 = ShiftTensor::new(cfg.principal_values[0], geom::random_euler(rng));
        let t1 = ShiftTensor::new(cfg.principal_values[1], geom::random_euler(rng));
        if !in_detection_region(&c, d) {
            continue;
        }
        let pair = PairCluster::new(c, axis, cfg.internuclear_distance, [t0, t1], cfg.species.clone());
        let inside = pair.positions.iter().all(|p| in_detection_region(&Vec3::from(*p), d));
        let clear = centers.iter().all(|o| (o - c).norm() >= cfg.exclusion_radius);
        if inside && clear {
            centers.push(c);
            pairs.push(pair);
        }
    }
    let coupling_weights = pairs
        .iter()
        .flat_map(|p| p.positions.iter().map(|x| coupling_weight(&Vec3::from(*x), p.species.gyromagnetic_ratio)).collect::<Vec<_>>())
        .collect();
    let geometry = DetectionGeometry {
        nv_depth: d,
        pair_count: cfg.pair_count,
        coupling_weights,
        f2: f2_integral(d),
        volume: detection_volume(d),
    };
    Ok((geometry, pairs))
}

/// Uniform points in the detection region (used for single-nucleus ensembles).
pub fn sample_region_points<R: Rng + ?Sized>(n: usize, d: f64, rng: &mut R) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let c = Vec3::new(rng.random_range(-d..=d), rng.random_range(-d..=d), rng.random_range(d..=2.0 * d));
        if in_detection_region(&c, d) {
            out.push(c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zyz_roundtrip() {
        for e in [[0.3, 1.1, -2.0], [2.9, 0.2, 0.7], [-1.0, 2.5, 3.0]] {
            let r = geom::euler_zyz(e[0], e[1], e[2]);
            let back = zyz_from_matrix(&r);
            let r2 = geom::euler_zyz(back[0], back[1], back[2]);
            assert!((r - r2).norm() < 1e-12);
        }
    }

    #[test]
    fn small_x_limits_are_continuous() {
        for x in [1e-9, 1e-5, 1e-3] {
            assert!((mean_sin2_theta(x) - 2.0 / 3.0).abs() < 1e-6);
            assert!(mean_cos_theta(x).abs() < 1e-3);
        }
    }
}
