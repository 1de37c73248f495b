//! Control programs: the rotating field and its MAS triad, the fsLG drive
//! with its misalignment models, and Ornstein-Uhlenbeck amplitude noise.

use crate::consts::TAU;
use crate::geom::{self, Mat3, Vec3};
use crate::rng::{self, Stream};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("invalid control parameter `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, ControlError>;

fn invalid(field: &'static str, reason: impl Into<String>) -> ControlError {
    ControlError::Invalid { field, reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldMode {
    RotatingField,
    StaticField,
    RotatingSample,
}

/// Orthonormal triad `(u, v, n)`; the field cone axis is `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisFrame {
    pub u: Vec3,
    pub v: Vec3,
    pub n: Vec3,
}

impl AxisFrame {
    pub fn for_aperture(epsilon: f64) -> Self {
        let (s, c) = epsilon.sin_cos();
        Self { u: Vec3::x(), v: Vec3::new(0.0, c, -s), n: Vec3::new(0.0, s, c) }
    }
}

/// Directions of `I_M`, `I_A`, `I_S` at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MasAxes {
    pub m: Vec3,
    pub a: Vec3,
    pub s: Vec3,
}

impl MasAxes {
    /// Coordinates of a lab vector in the `(M, A, S)` basis.
    pub fn coords(&self, w: &Vec3) -> Vec3 {
        Vec3::new(self.m.dot(w), self.a.dot(w), self.s.dot(w))
    }

    /// Lab vector from `(M, A, S)` coordinates.
    pub fn vector(&self, c: &Vec3) -> Vec3 {
        self.m * c.x + self.a * c.y + self.s * c.z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldProgram {
    /// Tesla.
    pub b0: f64,
    /// Rotation rate, Hz.
    pub nu: f64,
    pub epsilon: f64,
    pub axis_frame: AxisFrame,
    pub mode: FieldMode,
}

impl FieldProgram {
    pub fn new(b0: f64, nu: f64, epsilon: f64, mode: FieldMode) -> Result<Self> {
        if !(b0 > 0.0) {
            return Err(invalid("b0", "must be positive"));
        }
        if !(nu > 0.0) {
            return Err(invalid("nu", "must be positive"));
        }
        if !(epsilon > 0.0 && epsilon < std::f64::consts::PI) {
            return Err(invalid("epsilon", "must lie in (0, pi)"));
        }
        Ok(Self { b0, nu, epsilon, axis_frame: AxisFrame::for_aperture(epsilon), mode })
    }

    pub fn period(&self) -> f64 {
        1.0 / self.nu
    }

    /// Rotation angle `2 pi nu t` of the field (or of the sample, for rotating_sample).
    pub fn rotation_angle(&self, t: f64) -> f64 {
        match self.mode {
            FieldMode::StaticField => 0.0,
            _ => TAU * self.nu * t,
        }
    }

    /// Rotation about `n` by `2 pi nu t`; identity in static mode.
    pub fn rotation(&self, t: f64) -> Mat3 {
        geom::axis_angle(&self.axis_frame.n, self.rotation_angle(t))
    }

    fn rotating_axes(&self, angle: f64) -> MasAxes {
        let AxisFrame { u, v, n } = self.axis_frame;
        let (se, ce) = self.epsilon.sin_cos();
        let (s, c) = angle.sin_cos();
        let m = u * c + v * s;
        let w = u * s - v * c;
        MasAxes { m, a: -w * ce + n * se, s: w * se + n * ce }
    }

    pub fn field_at(&self, t: f64) -> Vec3 {
        match self.mode {
            FieldMode::RotatingField => self.rotating_axes(self.rotation_angle(t)).s * self.b0,
            FieldMode::StaticField => self.rotating_axes(0.0).s * self.b0,
            FieldMode::RotatingSample => Vec3::z() * self.b0,
        }
    }

    /// The MAS triad. Only the rotating-field mode moves it.
    pub fn mas_axes(&self, t: f64) -> MasAxes {
        match self.mode {
            FieldMode::RotatingField => self.rotating_axes(self.rotation_angle(t)),
            _ => self.rotating_axes(0.0),
        }
    }

    /// The triad at `t = 0`; the fixed basis of the interaction picture.
    pub fn reference_axes(&self) -> MasAxes {
        self.rotating_axes(0.0)
    }

    /// Rotation applied to the sample (rotating_sample only): the inverse of the
    /// triad rotation, so that the field seen by the sample matches the
    /// rotating-field mode.
    pub fn sample_rotation(&self, t: f64) -> Mat3 {
        match self.mode {
            FieldMode::RotatingSample => self.rotation(t).transpose(),
            _ => Mat3::identity(),
        }
    }

    /// Frame-rotation term `-nu I_n` of the co-rotating frame, split into its
    /// `(M0, A0, S0)` components in Hz. Zero unless the field rotates.
    pub fn berry_field(&self) -> Vec3 {
        match self.mode {
            FieldMode::RotatingField => {
                let (s, c) = self.epsilon.sin_cos();
                Vec3::new(0.0, -self.nu * s, -self.nu * c)
            }
            _ => Vec3::zeros(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriveVariant {
    /// Direction modulated at the rotation rate along the instantaneous `M` axis.
    Modulated,
    /// Fixed direction along the cone axis `n`.
    Simple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MisalignmentModel {
    /// Rigid rotation of the instantaneous ideal direction by `phi_error`.
    RigidRotation,
    /// The per-component formula with unnormalised ideal direction `u + v`.
    PaperLiteral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Misalignment {
    pub phi_error: f64,
    pub model: MisalignmentModel,
    pub seed: u64,
}

impl Default for Misalignment {
    fn default() -> Self {
        Self { phi_error: 0.0, model: MisalignmentModel::RigidRotation, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FslgSchedule {
    pub enabled: bool,
    /// Even number of equal segments per field period.
    pub segments_per_period: usize,
}

/// One evaluation of the lab-frame drive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriveSample {
    /// Unit direction in the lab frame.
    pub direction: Vec3,
    /// Peak amplitude of the linearly polarised drive, Hz.
    pub amplitude: f64,
    /// Total phase `phi(t) + alpha(t)` of the cosine.
    pub phase: f64,
    pub delta_sign: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriveProgram {
    /// Nuclear Larmor frequency `omega`, Hz.
    pub larmor: f64,
    pub commensurability_p: u32,
    /// Rabi amplitude, derived from `larmor` and `p`.
    pub omega: f64,
    pub alpha: f64,
    pub variant: DriveVariant,
    pub misalignment: Misalignment,
    pub fslg: FslgSchedule,
    /// With the drive off the frame carrier sits at the (compensated) Larmor frequency.
    pub enabled: bool,
    /// Remove the `-nu cos(eps)` frame offset through the carrier.
    pub berry_compensation: bool,
    /// Unit vector orthogonal to the ideal direction, drawn from the misalignment seed.
    misalign_axis: Vec3,
    field: FieldProgram,
}

/// Rabi amplitude fixed by the carrier-commensurability constraint.
pub fn rabi_from_p(larmor: f64, p: u32) -> f64 {
    (2.0f64 / 3.0).sqrt() * larmor / p as f64
}

/// Even segment count with one effective nutation per segment, rounded.
pub fn default_segments(omega_eff: f64, nu: f64) -> usize {
    let k = (omega_eff / nu / 2.0).round().max(1.0) as usize;
    2 * k
}

impl DriveProgram {
    pub fn new(
        field: &FieldProgram,
        larmor: f64,
        p: u32,
        variant: DriveVariant,
        misalignment: Misalignment,
        segments_per_period: Option<usize>,
    ) -> Result<Self> {
        if !(larmor > 0.0) {
            return Err(invalid("larmor", "must be positive"));
        }
        if p == 0 {
            return Err(invalid("p", "must be a positive integer"));
        }
        let omega = rabi_from_p(larmor, p);
        let omega_eff = (1.5f64).sqrt() * omega;
        let segs = segments_per_period.unwrap_or_else(|| default_segments(omega_eff, field.nu));
        if segs == 0 || segs % 2 != 0 {
            return Err(invalid("segments_per_period", "must be a positive even number"));
        }
        let ideal = match variant {
            DriveVariant::Modulated => field.reference_axes().m,
            DriveVariant::Simple => field.axis_frame.n,
        };
        let mut r = rng::substream(misalignment.seed, rng::tag::MISALIGN, 0);
        let misalign_axis = match (variant, misalignment.model) {
            // orthogonal to the unnormalised ideal u + v
            (DriveVariant::Modulated, MisalignmentModel::PaperLiteral) => {
                geom::random_orthogonal(&(field.axis_frame.u + field.axis_frame.v), &mut r)
            }
            _ => geom::random_orthogonal(&ideal, &mut r),
        };
        let alpha = match variant {
            DriveVariant::Modulated => std::f64::consts::FRAC_PI_2,
            DriveVariant::Simple => 0.0,
        };
        Ok(Self {
            larmor,
            commensurability_p: p,
            omega,
            alpha,
            variant,
            misalignment,
            fslg: FslgSchedule { enabled: true, segments_per_period: segs },
            enabled: true,
            berry_compensation: true,
            misalign_axis,
            field: field.clone(),
        })
    }

    pub fn field(&self) -> &FieldProgram {
        &self.field
    }

    pub fn delta(&self) -> f64 {
        self.omega / 2f64.sqrt()
    }

    pub fn omega_eff(&self) -> f64 {
        (self.omega * self.omega + self.delta() * self.delta()).sqrt()
    }

    pub fn misalignment_axis(&self) -> Vec3 {
        self.misalign_axis
    }

    pub fn segment_duration(&self) -> f64 {
        self.field.period() / self.fslg.segments_per_period as f64
    }

    pub fn segment_index(&self, t: f64) -> u64 {
        (t / self.segment_duration()).floor().max(0.0) as u64
    }

    /// `+1` on even segments, `-1` on odd ones (always `+1` with fsLG off).
    pub fn delta_sign(&self, t: f64) -> f64 {
        if self.fslg.enabled && self.segment_index(t) % 2 == 1 {
            -1.0
        } else {
            1.0
        }
    }

    /// Offset of the frame carrier below the Larmor frequency, excluding the
    /// switched `Delta` part: `nu cos(eps)` when compensating.
    pub fn carrier_correction(&self) -> f64 {
        if self.berry_compensation {
            -self.field.berry_field().z
        } else {
            0.0
        }
    }

    /// Switched detuning `s(t) Delta` of the frame, Hz; zero with the drive off.
    pub fn detuning(&self, t: f64) -> f64 {
        if self.enabled {
            self.delta_sign(t) * self.delta()
        } else {
            0.0
        }
    }

    /// Integral of the switched detuning, `Delta * int_0^t s(t') dt'`, in Hz*s.
    pub fn detuning_integral(&self, t: f64) -> f64 {
        if !self.enabled {
            return 0.0;
        }
        if !self.fslg.enabled {
            return self.delta() * t;
        }
        let seg = self.segment_duration();
        let k = self.segment_index(t);
        let rem = t - k as f64 * seg;
        let base = if k % 2 == 1 { seg } else { 0.0 };
        let sign = if k % 2 == 1 { -1.0 } else { 1.0 };
        self.delta() * (base + sign * rem)
    }

    /// Carrier phase `Phi(t) = 2 pi int (omega - s Delta - correction)` of the frame.
    pub fn frame_phase(&self, t: f64) -> f64 {
        TAU * ((self.larmor - self.carrier_correction()) * t - self.detuning_integral(t))
    }

    /// Instantaneous carrier frequency, Hz.
    pub fn carrier_frequency(&self, t: f64) -> f64 {
        self.larmor - self.carrier_correction() - self.detuning(t)
    }

    /// Drive phase offset including the fsLG inversion.
    pub fn phase_offset(&self, t: f64) -> f64 {
        if self.delta_sign(t) < 0.0 {
            self.alpha + std::f64::consts::PI
        } else {
            self.alpha
        }
    }

    /// Scale applied to `2 Omega`: `1/sin(eps)` for the simple drive so its
    /// transverse part carries `Omega`.
    pub fn amplitude_scale(&self) -> f64 {
        match self.variant {
            DriveVariant::Modulated => 1.0,
            DriveVariant::Simple => 1.0 / self.field.epsilon.sin(),
        }
    }

    /// Drive direction in the frame that co-rotates with the triad, as a lab
    /// vector at `t = 0` (not normalised for the literal model, where
    /// `|a u + b v + c n|` varies).
    fn corotating_vector(&self, t: f64) -> Vec3 {
        let phi = self.misalignment.phi_error;
        let (sp, cp) = phi.sin_cos();
        let f = &self.field;
        match (self.variant, self.misalignment.model) {
            (DriveVariant::Modulated, MisalignmentModel::RigidRotation) => {
                f.reference_axes().m * cp + self.misalign_axis * sp
            }
            (DriveVariant::Modulated, MisalignmentModel::PaperLiteral) => {
                let AxisFrame { u, v, n } = f.axis_frame;
                let c = (u + v) * cp + self.misalign_axis * sp;
                let (s, co) = f.rotation_angle(t).sin_cos();
                let lab = u * (c.dot(&u) * s) + v * (c.dot(&v) * co) + n * c.dot(&n);
                f.rotation(t).transpose() * lab
            }
            (DriveVariant::Simple, _) => {
                f.rotation(t).transpose() * (f.axis_frame.n * cp + self.misalign_axis * sp)
            }
        }
    }

    /// Drive direction vector in the lab frame. In rotating_sample mode the
    /// drive is the rotating-field drive seen from the rotating sample.
    pub fn lab_direction(&self, t: f64) -> Vec3 {
        let w = self.corotating_vector(t);
        match self.field.mode {
            FieldMode::RotatingField => self.field.rotation(t) * w,
            _ => w,
        }
    }

    /// Drive direction (times its amplitude scale) in the frame that co-rotates
    /// with the triad, as `(M0, A0, S0)` coordinates.
    pub fn corotating_direction(&self, t: f64) -> Vec3 {
        self.field.reference_axes().coords(&self.corotating_vector(t)) * self.amplitude_scale()
    }

    pub fn drive_at(&self, noise_factor: f64, t: f64) -> DriveSample {
        let d = self.lab_direction(t);
        let norm = d.norm();
        DriveSample {
            direction: d / norm,
            amplitude: if self.enabled { 2.0 * self.omega * self.amplitude_scale() * norm * noise_factor } else { 0.0 },
            phase: self.frame_phase(t) + self.phase_offset(t),
            delta_sign: self.delta_sign(t),
        }
    }

    /// Rotating-wave transverse field in the interaction picture, Hz per unit
    /// `(1 + xi)`: `Omega * s * Rz(alpha) (e_x, e_y)`.
    pub fn rwa_field(&self, t: f64) -> (f64, f64) {
        if !self.enabled {
            return (0.0, 0.0);
        }
        let e = self.corotating_direction(t);
        let (sa, ca) = self.alpha.sin_cos();
        let s = self.delta_sign(t);
        (self.omega * s * (ca * e.x - sa * e.y), self.omega * s * (sa * e.x + ca * e.y))
    }

    /// Bloch-Siegert offset for unit noise factor, Hz: `|Omega_perp|^2 / (4 omega)`.
    pub fn bloch_siegert(&self, t: f64) -> f64 {
        let (x, y) = self.rwa_field(t);
        (x * x + y * y) / (4.0 * self.larmor)
    }

    /// Nominal Bloch-Siegert offset `Omega^2 / (4 omega)`.
    pub fn nominal_bloch_siegert(&self) -> f64 {
        self.omega * self.omega / (4.0 * self.larmor)
    }
}

/// Exact AR(1) update of an Ornstein-Uhlenbeck process.
pub fn ou_step<R: Rng + ?Sized>(x: f64, dt: f64, tau_c: f64, sigma: f64, rng: &mut R) -> f64 {
    let a = (-dt / tau_c).exp();
    let z: f64 = rng.sample(StandardNormal);
    x * a + sigma * (1.0 - a * a).max(0.0).sqrt() * z
}

/// Multiplicative amplitude noise `1 + xi(t)` with `xi` an OU process.
#[derive(Debug, Clone)]
pub struct NoiseProcess {
    pub relative_sigma: f64,
    pub correlation_time: f64,
    pub dt: f64,
    state: f64,
    rng: Stream,
}

impl NoiseProcess {
    /// Starts from the stationary distribution.
    pub fn new(relative_sigma: f64, correlation_time: f64, dt: f64, mut rng: Stream) -> Result<Self> {
        if !(relative_sigma >= 0.0) {
            return Err(invalid("relative_sigma", "must be non-negative"));
        }
        if !(correlation_time > 0.0) {
            return Err(invalid("correlation_time", "must be positive"));
        }
        if !(dt > 0.0) {
            return Err(invalid("dt", "must be positive"));
        }
        let z: f64 = rng.sample(StandardNormal);
        Ok(Self { relative_sigma, correlation_time, dt, state: relative_sigma * z, rng })
    }

    pub fn xi(&self) -> f64 {
        self.state
    }

    pub fn factor(&self) -> f64 {
        1.0 + self.state
    }

    pub fn advance(&mut self) -> f64 {
        self.state = ou_step(self.state, self.dt, self.correlation_time, self.relative_sigma, &mut self.rng);
        self.state
    }

    /// The next `n` factors `1 + xi`, one per step; the first is the current value.
    pub fn path(&mut self, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.factor());
            self.advance();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detuning_integral_is_continuous() {
        let f = FieldProgram::new(2.0, 1e3, crate::consts::magic_angle(), FieldMode::RotatingField).unwrap();
        let d = DriveProgram::new(&f, 84e6, 448, DriveVariant::Modulated, Misalignment::default(), None).unwrap();
        let seg = d.segment_duration();
        for k in 1..6 {
            let t = k as f64 * seg;
            let a = d.detuning_integral(t - 1e-12);
            let b = d.detuning_integral(t + 1e-12);
            assert!((a - b).abs() < 1e-6);
        }
        assert!(d.detuning_integral(2.0 * seg).abs() < 1e-9);
    }
}
