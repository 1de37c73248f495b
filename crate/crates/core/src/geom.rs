//! Small 3-D helpers on top of nalgebra.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::Rng;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Uniform point on the unit sphere.
pub fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let s = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(s * phi.cos(), s * phi.sin(), z)
}

/// Uniform unit vector orthogonal to `v`.
pub fn random_orthogonal<R: Rng + ?Sized>(v: &Vec3, rng: &mut R) -> Vec3 {
    let (a, b) = orthonormal_complement(v);
    let eta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    a * eta.cos() + b * eta.sin()
}

/// Two unit vectors completing `v` to a right-handed orthonormal triad `(a, b, v)`.
pub fn orthonormal_complement(v: &Vec3) -> (Vec3, Vec3) {
    let n = v.normalize();
    let trial = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let a = (trial - n * n.dot(&trial)).normalize();
    let b = n.cross(&a);
    (a, b)
}

/// Rotation by `angle` about `axis` (right-hand rule).
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).into_inner()
}

/// ZYZ Euler rotation `Rz(a) Ry(b) Rz(c)`.
pub fn euler_zyz(a: f64, b: f64, c: f64) -> Mat3 {
    axis_angle(&Vec3::z(), a) * axis_angle(&Vec3::y(), b) * axis_angle(&Vec3::z(), c)
}

/// Haar-random ZYZ Euler angles.
pub fn random_euler<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    let cb: f64 = rng.random_range(-1.0..=1.0);
    let c = rng.random_range(0.0..std::f64::consts::TAU);
    [a, cb.acos(), c]
}

pub fn is_unit(v: &Vec3, tol: f64) -> bool {
    (v.norm() - 1.0).abs() <= tol
}
