//! NV readout: effective nuclear field, dynamical-decoupling phase, the
//! electron+nitrogen correlation circuit and ensemble averaging.

use crate::consts::{GAMMA_15N, GAMMA_E, TAU};
use crate::control::DriveProgram;
use crate::engine::isotropic_line;
use crate::spinalg::{self, DensityState, Operator, SpinError, C64};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SensorError {
    #[error(transparent)]
    Spin(#[from] SpinError),
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("{what}: expected {expected} entries, got {got}")]
    Mismatch { what: &'static str, expected: usize, got: usize },
    #[error("no sensor records to average")]
    Empty,
}

pub type Result<T> = std::result::Result<T, SensorError>;

fn invalid(field: &'static str, reason: impl Into<String>) -> SensorError {
    SensorError::Invalid { field, reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DdSequence {
    #[default]
    Xy8,
    Xy4,
}

impl DdSequence {
    /// Pulse axes in order, `true` for x.
    pub fn axes(self) -> &'static [bool] {
        match self {
            DdSequence::Xy4 => &[true, false, true, false],
            DdSequence::Xy8 => &[true, false, true, false, false, true, false, true],
        }
    }

    pub fn pulses(self) -> usize {
        self.axes().len()
    }
}

/// Axis of the last readout pulse before `CnNOTe`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutPulse {
    /// `(pi/2)` about `-y`; maps the `sin phi_p` quadrature onto populations.
    #[default]
    MinusY,
    /// `(pi/2)` about `-x`; maps `cos phi_p` instead.
    MinusX,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutConfig {
    /// Electron gyromagnetic ratio, Hz/T.
    pub gamma_e: f64,
    /// Nitrogen gyromagnetic ratio, Hz/T (memory qubit, bookkeeping only).
    pub gamma_n: f64,
    pub dd_sequence: DdSequence,
    /// Interpulse spacing, s.
    pub spacing: f64,
    /// Total probing time, s.
    pub t_prob: f64,
    /// Carrier of the nuclear field used for the filter, Hz.
    pub carrier: f64,
    /// Memory lifetime, s. `None` means no damping.
    pub t1_memory: Option<f64>,
    pub windows: usize,
    /// Field rotation frequency, Hz (one window per rotation).
    pub nu: f64,
    /// Standard deviation of additive noise on every correlation value.
    pub readout_noise: f64,
    pub readout_pulse: ReadoutPulse,
}

impl ReadoutConfig {
    /// Resonant spacing `1/(2 carrier)` and one full sequence of probing.
    pub fn new(carrier: f64, nu: f64, windows: usize, dd_sequence: DdSequence) -> Self {
        let spacing = 0.5 / carrier;
        Self {
            gamma_e: GAMMA_E,
            gamma_n: GAMMA_15N,
            dd_sequence,
            spacing,
            t_prob: dd_sequence.pulses() as f64 * spacing,
            carrier,
            t1_memory: None,
            windows,
            nu,
            readout_noise: 0.0,
            readout_pulse: ReadoutPulse::MinusY,
        }
    }

    /// Carrier `sqrt(2) Omega` of `drive`.
    pub fn for_drive(drive: &DriveProgram, nu: f64, windows: usize) -> Self {
        Self::new(2f64.sqrt() * drive.omega, nu, windows, DdSequence::Xy8)
    }

    pub fn pulse_count(&self) -> usize {
        (self.t_prob / self.spacing).round() as usize
    }

    /// Checks hard constraints; returns soft warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        for (field, v) in [
            ("gamma_e", self.gamma_e),
            ("spacing", self.spacing),
            ("t_prob", self.t_prob),
            ("carrier", self.carrier),
            ("nu", self.nu),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(field, format!("must be positive and finite, got {v}")));
            }
        }
        if self.windows == 0 {
            return Err(invalid("windows", "must be at least 1"));
        }
        if let Some(t1) = self.t1_memory {
            if !(t1 > 0.0) {
                return Err(invalid("t1_memory", format!("must be positive, got {t1}")));
            }
        }
        if !(self.readout_noise >= 0.0 && self.readout_noise.is_finite()) {
            return Err(invalid("readout_noise", format!("must be non-negative, got {}", self.readout_noise)));
        }
        let n = self.t_prob / self.spacing;
        if n.round() < 1.0 || (n - n.round()).abs() > 1e-6 * n.max(1.0) {
            return Err(invalid("t_prob", format!("{} is not a whole number of spacings ({n})", self.t_prob)));
        }
        let mut warnings = Vec::new();
        let mismatch = (2.0 * self.carrier * self.spacing - 1.0).abs();
        if mismatch > 0.01 {
            warnings.push(format!(
                "interpulse spacing {:.4e} s is off resonance with the {:.4e} Hz carrier by {:.1}%",
                self.spacing,
                self.carrier,
                100.0 * mismatch
            ));
        }
        Ok(warnings)
    }

    /// Phase per tesla of resonant field amplitude, `4 gamma_e t_prob`.
    pub fn phase_gain(&self) -> f64 {
        4.0 * self.gamma_e * self.t_prob
    }

    /// Memory damping `exp(-p/(nu T1))`.
    pub fn damping(&self, p: usize) -> f64 {
        match self.t1_memory {
            Some(t1) => (-(p as f64) / (self.nu * t1)).exp(),
            None => 1.0,
        }
    }

    /// Filter sign of the sequence at time `t` after the window instant.
    pub fn filter_sign(&self, t: f64) -> f64 {
        let flips = ((t / self.spacing) + 0.5).floor().max(0.0) as usize;
        if flips % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Quadratures `(sum C_k <I_v>, sum C_k <I_u>)` of the field at the NV, T.
pub fn field_quadratures(expectations: &[[f64; 3]], weights: &[f64]) -> Result<(f64, f64)> {
    if expectations.len() != weights.len() {
        return Err(SensorError::Mismatch { what: "coupling weights", expected: expectations.len(), got: weights.len() });
    }
    let mut b = (0.0, 0.0);
    for (e, c) in expectations.iter().zip(weights) {
        b.0 += c * e[1];
        b.1 += c * e[0];
    }
    Ok(b)
}

/// `B_N(t) = sum C_k [cos(2 pi f t) <I_v> + sin(2 pi f t) <I_u>]` at `t` after the window instant.
pub fn effective_field(expectations: &[[f64; 3]], weights: &[f64], carrier: f64, t: f64) -> Result<f64> {
    let (bc, bs) = field_quadratures(expectations, weights)?;
    let (s, c) = (TAU * carrier * t).sin_cos();
    Ok(c * bc + s * bs)
}

/// Phase accumulated over `[0, t_prob]` under the decoupling sequence.
///
/// The filter is integrated piecewise between pulses with Gauss-Legendre
/// quadrature, so any smooth `b` is handled, not only the resonant carrier.
pub fn dd_phase<F: Fn(f64) -> f64>(b: F, cfg: &ReadoutConfig) -> f64 {
    const NODES: [(f64, f64); 5] = [
        (0.0, 0.568_888_888_888_888_9),
        (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
        (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
        (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
        (0.906_179_845_938_664, 0.236_926_885_056_189_1),
    ];
    let n = cfg.pulse_count();
    let mut edges = Vec::with_capacity(n + 2);
    edges.push(0.0);
    edges.extend((0..n).map(|k| (k as f64 + 0.5) * cfg.spacing).filter(|t| *t < cfg.t_prob));
    edges.push(cfg.t_prob);
    let sub = 16;
    let mut total = 0.0;
    for (i, w) in edges.windows(2).enumerate() {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        let h = (w[1] - w[0]) / sub as f64;
        let mut acc = 0.0;
        for j in 0..sub {
            let mid = w[0] + (j as f64 + 0.5) * h;
            acc += NODES.iter().map(|(x, wt)| wt * b(mid + 0.5 * h * x)).sum::<f64>() * 0.5 * h;
        }
        total += sign * acc;
    }
    TAU * cfg.gamma_e * total
}

/// Closed form of [`dd_phase`] for a field at the resonant carrier: only the
/// cosine quadrature survives, `phi = 4 gamma_e t_prob b_cos`.
pub fn resonant_phase(b_cos: f64, cfg: &ReadoutConfig) -> f64 {
    cfg.phase_gain() * b_cos
}

/// Electron (site 0) and nitrogen (site 1) correlation circuit with the
/// fixed gates precomputed.
#[derive(Debug, Clone)]
pub struct CorrelationCircuit {
    prepare: Operator,
    store: Operator,
    entangle: Operator,
    reopen: Operator,
    close: Operator,
    readout: Operator,
    sz: Operator,
}

fn rotation(axis: [f64; 3], angle: f64, site: usize) -> Result<Operator> {
    // exp(-i angle n.S) = cos(angle/2) - 2 i sin(angle/2) n.S
    let s = spinalg::spin_component(axis, site, 2)?;
    let (sn, cs) = (0.5 * angle).sin_cos();
    let m = DMatrix::<C64>::identity(4, 4) * C64::new(cs, 0.0) - s.matrix() * C64::new(0.0, 2.0 * sn);
    Ok(Operator::from_matrix(m)?)
}

fn cnot(control: usize) -> Result<Operator> {
    // flip the other qubit when the control is in |1> (S_z = -1/2); site 0 is the high bit
    let mut m = DMatrix::<C64>::zeros(4, 4);
    for i in 0..4usize {
        let bit = (i >> (1 - control)) & 1;
        let j = if bit == 1 { i ^ (1 << control) } else { i };
        m[(j, i)] = C64::new(1.0, 0.0);
    }
    Ok(Operator::from_matrix(m)?)
}

fn phase_gate(phi: f64) -> Result<Operator> {
    rotation([0.0, 0.0, 1.0], phi, 0)
}

/// Electron reset to `|0>` keeping the nitrogen, with the nitrogen Bloch vector scaled by `damping`.
fn reinitialise(rho: &DensityState, damping: f64) -> Result<DensityState> {
    let m = rho.matrix();
    let mut n = DMatrix::<C64>::zeros(2, 2);
    for a in 0..2 {
        for b in 0..2 {
            n[(a, b)] = m[(a, b)] + m[(2 + a, 2 + b)];
        }
    }
    let half = C64::new(0.5, 0.0);
    let mixed = DMatrix::<C64>::identity(2, 2) * half;
    let n = &mixed + (&n - &mixed) * C64::new(damping, 0.0);
    let mut e = DMatrix::<C64>::zeros(2, 2);
    e[(0, 0)] = C64::new(1.0, 0.0);
    Ok(DensityState::from_matrix(e.kronecker(&n))?)
}

impl CorrelationCircuit {
    pub fn new(readout: ReadoutPulse) -> Result<Self> {
        let x = [1.0, 0.0, 0.0];
        let minus_y = [0.0, -1.0, 0.0];
        let last = match readout {
            ReadoutPulse::MinusY => rotation(minus_y, std::f64::consts::FRAC_PI_2, 0)?,
            ReadoutPulse::MinusX => rotation(x, -std::f64::consts::FRAC_PI_2, 0)?,
        };
        Ok(Self {
            prepare: rotation(x, std::f64::consts::FRAC_PI_2, 0)?,
            store: rotation(minus_y, std::f64::consts::FRAC_PI_2, 0)?,
            entangle: cnot(0)?,
            reopen: rotation(x, std::f64::consts::FRAC_PI_2, 0)?,
            close: last,
            readout: cnot(1)?,
            sz: spinalg::spin_component([0.0, 0.0, 1.0], 0, 2)?,
        })
    }

    /// `<S_z>` after the full sequence for stored phase `phi0` and probe phase `phi_p`.
    pub fn run(&self, phi0: f64, phi_p: f64, damping: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&damping) {
            return Err(invalid("damping", format!("{damping} not in [0, 1]")));
        }
        let mut psi = vec![C64::new(0.0, 0.0); 4];
        psi[0] = C64::new(1.0, 0.0);
        let mut rho = DensityState::pure(&psi)?;
        rho = rho.conjugate(&self.prepare)?;
        rho = rho.conjugate(&phase_gate(phi0)?)?;
        rho = rho.conjugate(&self.store)?;
        rho = rho.conjugate(&self.entangle)?;
        rho = reinitialise(&rho, damping)?;
        rho = rho.conjugate(&self.reopen)?;
        rho = rho.conjugate(&phase_gate(phi_p)?)?;
        rho = rho.conjugate(&self.close)?;
        rho = rho.conjugate(&self.readout)?;
        Ok(spinalg::expectation(&rho, &self.sz)?)
    }
}

/// Gate-level correlation readout with the default readout pulse.
pub fn correlation_sequence(phi0: f64, phi_p: f64, damping: f64) -> Result<f64> {
    CorrelationCircuit::new(ReadoutPulse::MinusY)?.run(phi0, phi_p, damping)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub index: usize,
    /// Phase amplitude `gain sqrt(b_cos^2 + b_sin^2)` per window, rad.
    pub amplitude: Vec<f64>,
    /// Quadrature phase of the field at window 0, rad.
    pub xi: f64,
    pub phi: Vec<f64>,
    pub correlation: Vec<f64>,
}

impl SensorRecord {
    /// Record from per-window field quadratures `(b_cos, b_sin)` in tesla.
    pub fn from_quadratures<R: Rng + ?Sized>(
        index: usize,
        quadratures: &[(f64, f64)],
        cfg: &ReadoutConfig,
        circuit: &CorrelationCircuit,
        rng: Option<&mut R>,
    ) -> Result<Self> {
        let first = *quadratures.first().ok_or_else(|| invalid("quadratures", "no windows"))?;
        let gain = cfg.phase_gain();
        let phi: Vec<f64> = quadratures.iter().map(|q| resonant_phase(q.0, cfg)).collect();
        let amplitude = quadratures.iter().map(|q| gain * q.0.hypot(q.1)).collect();
        let mut correlation = Vec::with_capacity(phi.len());
        for (p, ph) in phi.iter().enumerate() {
            correlation.push(circuit.run(phi[0], *ph, cfg.damping(p))?);
        }
        if cfg.readout_noise > 0.0 {
            if let Some(rng) = rng {
                let normal = Normal::new(0.0, cfg.readout_noise).map_err(|e| invalid("readout_noise", e.to_string()))?;
                for c in &mut correlation {
                    *c += normal.sample(rng);
                }
            }
        }
        Ok(Self { index, amplitude, xi: first.1.atan2(first.0), phi, correlation })
    }
}

/// Per-window mean over sensors with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSignal {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub count: usize,
}

/// Arithmetic mean of `correlation[p]`, summed in record order.
pub fn ensemble_average(records: &[SensorRecord]) -> Result<EnsembleSignal> {
    let first = records.first().ok_or(SensorError::Empty)?;
    let m = first.correlation.len();
    let mut sum = vec![0.0; m];
    for r in records {
        if r.correlation.len() != m {
            return Err(SensorError::Mismatch { what: "correlation windows", expected: m, got: r.correlation.len() });
        }
        for (p, c) in r.correlation.iter().enumerate() {
            sum[p] += c;
        }
    }
    let n = records.len() as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut sq = vec![0.0; m];
    for r in records {
        for (p, c) in r.correlation.iter().enumerate() {
            sq[p] += (c - mean[p]).powi(2);
        }
    }
    let stderr = if records.len() < 2 { vec![0.0; m] } else { sq.iter().map(|s| (s / (n - 1.0) / n).sqrt()).collect() };
    Ok(EnsembleSignal { mean, stderr, count: records.len() })
}

/// Amplitude of the ensemble signal per nucleus in the small-phase regime:
/// `(1/2) gain^2 <C^2> <sin^2 theta>/8` with `<C^2> = scale^2 F2 / V`.
pub fn signal_prefactor(coupling_scale: f64, f2: f64, volume: f64, mean_sin2_theta: f64, cfg: &ReadoutConfig) -> f64 {
    let g = cfg.phase_gain();
    0.5 * g * g * coupling_scale * coupling_scale * f2 / volume * mean_sin2_theta / 8.0
}

/// Closed-form ensemble signal at window `p` for groups `(N, delta_iso)`.
pub fn analytic_signal(p: usize, groups: &[(f64, f64)], drive: &DriveProgram, prefactor: f64, cfg: &ReadoutConfig) -> f64 {
    let t = p as f64 / cfg.nu;
    let sum: f64 = groups.iter().map(|(n, delta)| n * (TAU * isotropic_line(*delta, drive) * t).cos()).sum();
    prefactor * sum * cfg.damping(p)
}

/// Bloch-vector expectations `[<I_u>, <I_v>, <I_n>]` of a spin precessing
/// about `n` at `freq` from angles `(theta, phi)`.
pub fn ideal_expectations(theta: f64, phi: f64, freq: f64, t: f64) -> [f64; 3] {
    let a = phi + TAU * freq * t;
    let s = 0.5 * theta.sin();
    [s * a.cos(), s * a.sin(), 0.5 * theta.cos()]
}

/// Entry `(row, col)` of the Sylvester-Hadamard matrix of any power-of-two order.
pub fn hadamard_sign(row: usize, col: usize) -> f64 {
    if (row & col).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cnot_truth_tables() {
        let e = cnot(0).unwrap();
        // |10> -> |11>, |00> -> |00>
        assert_eq!(e.get(3, 2), C64::new(1.0, 0.0));
        assert_eq!(e.get(0, 0), C64::new(1.0, 0.0));
        let n = cnot(1).unwrap();
        // |01> -> |11>
        assert_eq!(n.get(3, 1), C64::new(1.0, 0.0));
        assert_eq!(n.get(2, 2), C64::new(1.0, 0.0));
    }

    #[test]
    fn rotation_matches_exponential() {
        let norm = (0.09f64 + 0.64 + 0.2704).sqrt();
        let axis = [0.3 / norm, -0.8 / norm, 0.52 / norm];
        let a = rotation(axis, 1.3, 0).unwrap();
        let b = spinalg::spin_component(axis, 0, 2).unwrap().unitary_exp(1.3).unwrap();
        assert!(a.sub(&b).unwrap().frobenius_norm() < 1e-12);
    }
}
