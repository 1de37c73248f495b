//! Time-dependent spin Hamiltonians and window-by-window propagation.
//!
//! Three frames are supported. `LabExact` integrates the laboratory
//! Hamiltonian with dense exact-exponential steps. `IpFull` works in the
//! interaction picture of the (co-rotating) carrier and keeps the
//! counter-rotating terms; `IpRwaBs` drops them and adds the Bloch-Siegert
//! offset. The interaction-picture frames use a fast split-step kernel by
//! default, with the dense path available as a reference.

use crate::consts::TAU;
use crate::control::{DriveProgram, FieldMode};
use crate::geom::{Mat3, Vec3};
use crate::sample::{PairCluster, ShiftTensor};
use crate::spinalg::{self, DensityState, Operator, SpinError, C64};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Spin(#[from] SpinError),
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("non-finite state at step {step}")]
    NonFinite { step: u64 },
    #[error("{steps} steps per period exceed the budget of {limit}")]
    StepBudget { steps: usize, limit: usize },
    #[error("quadrature did not converge (relative change {change:.3e} at n = {n})")]
    Quadrature { n: usize, change: f64 },
}

pub type Result<T> = std::result::Result<T, EngineError>;

fn invalid(field: &'static str, reason: impl Into<String>) -> EngineError {
    EngineError::Invalid { field, reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    LabExact,
    IpFull,
    IpRwaBs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// Split kernel in the interaction-picture frames, dense in the lab.
    #[default]
    Auto,
    /// Strang splitting of single-spin kicks and the secular dipolar term.
    Split,
    /// Exact exponential of the full midpoint Hamiltonian.
    Dense,
}

pub const MIN_OVERSAMPLE: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationMode {
    pub frame: Frame,
    /// Steps per period of the fastest retained frequency.
    pub oversample: f64,
    pub integrator: Integrator,
    pub max_steps_per_period: usize,
}

impl PropagationMode {
    pub fn new(frame: Frame, oversample: f64) -> Result<Self> {
        if !(oversample >= MIN_OVERSAMPLE) {
            return Err(invalid("oversample", format!("{oversample} < {MIN_OVERSAMPLE}")));
        }
        Ok(Self { frame, oversample, integrator: Integrator::Auto, max_steps_per_period: 50_000_000 })
    }

    pub fn with_integrator(mut self, integrator: Integrator) -> Self {
        self.integrator = integrator;
        self
    }

    fn uses_split(&self) -> bool {
        match self.integrator {
            Integrator::Auto => self.frame != Frame::LabExact,
            Integrator::Split => true,
            Integrator::Dense => false,
        }
    }
}

/// One or two like spins with their body-frame shift tensors (Hz) and an
/// optional dipolar coupling `(b, unit axis)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinCluster {
    pub tensors: Vec<Mat3>,
    pub isotropic: Vec<f64>,
    pub dipolar: Option<(f64, Vec3)>,
}

impl SpinCluster {
    pub fn single(tensor: &ShiftTensor) -> Self {
        Self { tensors: vec![tensor.lab_tensor()], isotropic: vec![tensor.iso()], dipolar: None }
    }

    pub fn pair(tensors: [&ShiftTensor; 2], dipolar_b: f64, axis: Vec3) -> Self {
        Self {
            tensors: tensors.iter().map(|t| t.lab_tensor()).collect(),
            isotropic: tensors.iter().map(|t| t.iso()).collect(),
            dipolar: Some((dipolar_b, axis.normalize())),
        }
    }

    pub fn from_pair(p: &PairCluster) -> Self {
        Self::pair([&p.tensors[0], &p.tensors[1]], p.dipolar_b, p.axis())
    }

    pub fn n_spins(&self) -> usize {
        self.tensors.len()
    }

    pub fn dim(&self) -> usize {
        1 << self.n_spins()
    }

    pub fn max_shift(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.symmetric_eigenvalues().iter().fold(0.0_f64, |a, v| a.max(v.abs())))
            .fold(0.0, f64::max)
    }

    pub fn max_dipolar(&self) -> f64 {
        self.dipolar.map_or(0.0, |(b, _)| b.abs())
    }
}

/// Largest shift and dipolar constant over a set of clusters, Hz.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SpinBounds {
    pub max_shift: f64,
    pub max_dipolar: f64,
}

impl SpinBounds {
    pub fn of(clusters: &[SpinCluster]) -> Self {
        clusters.iter().fold(Self::default(), |b, c| Self {
            max_shift: b.max_shift.max(c.max_shift()),
            max_dipolar: b.max_dipolar.max(c.max_dipolar()),
        })
    }
}

/// Spin-spin term of an instantaneous Hamiltonian, Hz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coupling {
    None,
    /// `d [3 I_z^1 I_z^2 - I^1 . I^2]` in the frame's z.
    Secular(f64),
    /// `b [3 (I^1 . r)(I^2 . r) - I^1 . I^2]`.
    Full { b: f64, axis: Vec3 },
}

/// Instantaneous Hamiltonian `2 pi [sum_k h_k . I^k + coupling]` in Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinFields {
    pub h: Vec<Vec3>,
    pub coupling: Coupling,
}

impl SpinFields {
    /// Angular-frequency operator.
    pub fn operator(&self) -> Result<Operator> {
        let n = self.h.len();
        let dim = 1 << n;
        let mut m = Operator::zeros(dim)?;
        for (k, h) in self.h.iter().enumerate() {
            m.add_scaled(&spinalg::spin_component([h.x, h.y, h.z], k, n)?, TAU)?;
        }
        let (b, axis) = match self.coupling {
            Coupling::None => return Ok(m),
            Coupling::Secular(d) => (d, Vec3::z()),
            Coupling::Full { b, axis } => (b, axis),
        };
        if n != 2 {
            return Err(invalid("coupling", "needs exactly two spins"));
        }
        let comp = |v: Vec3, k| spinalg::spin_component([v.x, v.y, v.z], k, 2);
        let along = comp(axis, 0)?.mul(&comp(axis, 1)?)?;
        let mut dot = Operator::zeros(4)?;
        for e in [Vec3::x(), Vec3::y(), Vec3::z()] {
            dot.add_scaled(&comp(e, 0)?.mul(&comp(e, 1)?)?, 1.0)?;
        }
        m.add_scaled(&along, 3.0 * TAU * b)?;
        m.add_scaled(&dot, -TAU * b)?;
        Ok(m)
    }
}

/// Time grid shared by every cluster of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepGrid {
    pub f_max: f64,
    pub steps_per_segment: usize,
    pub segments_per_period: usize,
    pub period: f64,
    pub dt: f64,
}

impl StepGrid {
    pub fn steps_per_period(&self) -> usize {
        self.steps_per_segment * self.segments_per_period
    }
}

/// Expectations of one cluster at a window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowTrace {
    pub p: u64,
    pub t_ev: f64,
    /// `[<I_u>, <I_v>, <I_n>]` per nucleus.
    pub expectations: Vec<[f64; 3]>,
    pub state: Option<DensityState>,
}

/// Pure state of a cluster at global step `step`, in the engine's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub psi: Vec<C64>,
    pub step: u64,
}

/// Drive quantities per step of one period, sampled at step midpoints.
#[derive(Debug, Clone)]
struct DriveTable {
    base_z: Vec<f64>,
    rx: Vec<f64>,
    ry: Vec<f64>,
    bs: Vec<f64>,
    e: Vec<Vec3>,
    alpha: Vec<f64>,
    body_dir: Vec<Vec3>,
}

/// Cluster data precomputed over one period.
#[derive(Debug, Clone)]
pub struct PreparedCluster {
    cluster: SpinCluster,
    shifts: Vec<Vec<f64>>,
    dip: Vec<f64>,
    dip_merged: Vec<[C64; 3]>,
    dip_half: Vec<[C64; 3]>,
    kicks: Option<Vec<Su2>>,
}

impl PreparedCluster {
    pub fn cluster(&self) -> &SpinCluster {
        &self.cluster
    }

    /// Secular shift of spin `k` at step `n` of the period, Hz.
    pub fn shift(&self, k: usize, n: usize) -> f64 {
        self.shifts[k][n]
    }

    /// Secular dipolar coefficient at step `n`, Hz.
    pub fn dipolar(&self, n: usize) -> f64 {
        self.dip[n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Su2 {
    a: C64,
    b: C64,
    c: C64,
    d: C64,
}

impl Su2 {
    const ONE: Su2 = Su2 { a: C64::new(1.0, 0.0), b: C64::new(0.0, 0.0), c: C64::new(0.0, 0.0), d: C64::new(1.0, 0.0) };

    /// `exp(-i w (h . I))`.
    #[inline]
    fn kick(h: [f64; 3], w: f64) -> Self {
        let [hx, hy, hz] = h;
        let norm = (hx * hx + hy * hy + hz * hz).sqrt();
        if norm == 0.0 {
            return Self::ONE;
        }
        let (s, c) = (0.5 * w * norm).sin_cos();
        let k = s / norm;
        Su2 {
            a: C64::new(c, -k * hz),
            b: C64::new(-k * hy, -k * hx),
            c: C64::new(k * hy, -k * hx),
            d: C64::new(c, k * hz),
        }
    }

    #[inline]
    fn apply(&self, psi: &mut [C64], site: usize, n_sites: usize) {
        let stride = 1usize << (n_sites - 1 - site);
        for i in 0..psi.len() {
            if i & stride != 0 {
                continue;
            }
            let j = i | stride;
            let (x, y) = (psi[i], psi[j]);
            psi[i] = self.a * x + self.b * y;
            psi[j] = self.c * x + self.d * y;
        }
    }
}

/// Coefficients of `exp(-i phi [3 I_z I_z - I . I])` on two spins.
fn dipolar_coefficients(phi: f64) -> [C64; 3] {
    let outer = C64::from_polar(1.0, -0.5 * phi);
    let inner = C64::from_polar(1.0, 0.5 * phi);
    let (s, c) = (0.5 * phi).sin_cos();
    [outer, inner * c, inner * C64::new(0.0, s)]
}

#[inline]
fn apply_dipolar(psi: &mut [C64], k: &[C64; 3]) {
    psi[0] *= k[0];
    psi[3] *= k[0];
    let (x, y) = (psi[1], psi[2]);
    psi[1] = k[1] * x + k[2] * y;
    psi[2] = k[2] * x + k[1] * y;
}

/// Maps `(u, v, n)` coordinates to the interaction-picture basis
/// `(M0, A0, S0)` for aperture `eps`.
fn uvn_to_ip(c: [f64; 3], eps: f64) -> Vec3 {
    let (se, ce) = eps.sin_cos();
    Vec3::new(c[0], c[1] * ce + c[2] * se, -c[1] * se + c[2] * ce)
}

fn ip_to_uvn(x: Vec3, eps: f64) -> [f64; 3] {
    let (se, ce) = eps.sin_cos();
    [x.x, x.y * ce - x.z * se, x.y * se + x.z * ce]
}

/// `<sigma>/2` of every spin of a pure state.
fn spin_vectors(psi: &[C64], n_sites: usize) -> Vec<Vec3> {
    (0..n_sites)
        .map(|site| {
            let stride = 1usize << (n_sites - 1 - site);
            let mut s = Vec3::zeros();
            for i in 0..psi.len() {
                if i & stride != 0 {
                    continue;
                }
                let (a, b) = (psi[i], psi[i | stride]);
                let ab = a.conj() * b;
                s += Vec3::new(ab.re, ab.im, 0.5 * (a.norm_sqr() - b.norm_sqr()));
            }
            s
        })
        .collect()
}

fn pure_density(psi: &[C64]) -> Result<DensityState> {
    Ok(DensityState::pure(psi)?)
}

pub struct Engine {
    drive: DriveProgram,
    mode: PropagationMode,
    grid: StepGrid,
    table: DriveTable,
    berry: Vec3,
    zoff: f64,
}

impl Engine {
    pub fn new(drive: &DriveProgram, mode: PropagationMode, bounds: SpinBounds) -> Result<Self> {
        if !(mode.oversample >= MIN_OVERSAMPLE) {
            return Err(invalid("oversample", format!("{} < {MIN_OVERSAMPLE}", mode.oversample)));
        }
        if mode.frame == Frame::LabExact && mode.integrator == Integrator::Split {
            return Err(invalid("integrator", "the split kernel needs an interaction-picture frame"));
        }
        let field = drive.field();
        let berry = field.berry_field();
        let zoff = berry.z + drive.carrier_correction();
        let f_max = Self::f_max(drive, mode.frame, bounds, zoff);
        let segments = drive.fslg.segments_per_period;
        let period = field.period();
        let seg = period / segments as f64;
        let steps_per_segment = (seg * mode.oversample * f_max).ceil().max(1.0) as usize;
        let n = steps_per_segment * segments;
        if n > mode.max_steps_per_period {
            return Err(EngineError::StepBudget { steps: n, limit: mode.max_steps_per_period });
        }
        let grid = StepGrid { f_max, steps_per_segment, segments_per_period: segments, period, dt: period / n as f64 };
        let table = Self::drive_table(drive, &grid, zoff);
        Ok(Self { drive: drive.clone(), mode, grid, table, berry, zoff })
    }

    /// Highest frequency retained by `frame`, Hz.
    fn f_max(drive: &DriveProgram, frame: Frame, b: SpinBounds, zoff: f64) -> f64 {
        let internal = b.max_shift + 1.5 * b.max_dipolar;
        let field = drive.field();
        match frame {
            Frame::IpRwaBs => {
                let k = drive.fslg.segments_per_period * 32;
                let nutation = (0..k)
                    .map(|j| {
                        let t = (j as f64 + 0.5) * field.period() / k as f64;
                        let (x, y) = drive.rwa_field(t);
                        let z = drive.detuning(t) + zoff;
                        (x * x + y * y + z * z).sqrt() + drive.bloch_siegert(t)
                    })
                    .fold(0.0, f64::max);
                nutation + internal
            }
            Frame::IpFull => {
                let drive_amp = if drive.enabled { 2.0 * drive.omega * drive.amplitude_scale() } else { 0.0 };
                2.0 * drive.larmor + drive_amp + drive.delta() + field.nu + zoff.abs() + internal
            }
            Frame::LabExact => {
                let drive_amp = if drive.enabled { 2.0 * drive.omega * drive.amplitude_scale() } else { 0.0 };
                drive.larmor + drive_amp + field.nu + internal
            }
        }
    }

    fn drive_table(drive: &DriveProgram, grid: &StepGrid, zoff: f64) -> DriveTable {
        let n = grid.steps_per_period();
        let field = drive.field();
        let mut t = DriveTable {
            base_z: Vec::with_capacity(n),
            rx: Vec::with_capacity(n),
            ry: Vec::with_capacity(n),
            bs: Vec::with_capacity(n),
            e: Vec::with_capacity(n),
            alpha: Vec::with_capacity(n),
            body_dir: Vec::with_capacity(n),
        };
        for k in 0..n {
            let tm = (k as f64 + 0.5) * grid.dt;
            let (x, y) = drive.rwa_field(tm);
            t.base_z.push(drive.detuning(tm) + zoff);
            t.rx.push(x);
            t.ry.push(y);
            t.bs.push(drive.bloch_siegert(tm));
            t.e.push(drive.corotating_direction(tm));
            t.alpha.push(drive.phase_offset(tm));
            t.body_dir.push(field.sample_rotation(tm).transpose() * field.field_at(tm) / field.b0);
        }
        t
    }

    pub fn grid(&self) -> &StepGrid {
        &self.grid
    }

    pub fn mode(&self) -> &PropagationMode {
        &self.mode
    }

    pub fn drive(&self) -> &DriveProgram {
        &self.drive
    }

    pub fn steps_per_period(&self) -> usize {
        self.grid.steps_per_period()
    }

    /// Field direction in the sample's body frame.
    fn body_direction(&self, t: f64) -> Vec3 {
        let f = self.drive.field();
        f.sample_rotation(t).transpose() * f.field_at(t) / f.b0
    }

    /// Secular shift of every spin and the secular dipolar coefficient, Hz.
    pub fn secular_terms(&self, cluster: &SpinCluster, t: f64) -> (Vec<f64>, f64) {
        Self::secular_at(cluster, &self.body_direction(t))
    }

    fn secular_at(cluster: &SpinCluster, b: &Vec3) -> (Vec<f64>, f64) {
        let shifts = cluster.tensors.iter().map(|m| b.dot(&(m * b))).collect();
        let d = cluster.dipolar.map_or(0.0, |(bd, r)| {
            let c = r.dot(b);
            bd * (3.0 * c * c - 1.0) / 2.0
        });
        (shifts, d)
    }

    /// Instantaneous Hamiltonian of `cluster` in the engine's frame, Hz.
    pub fn fields_at(&self, cluster: &SpinCluster, t: f64, noise_factor: f64) -> SpinFields {
        let d = &self.drive;
        let f = noise_factor;
        match self.mode.frame {
            Frame::IpRwaBs => {
                let (shifts, dip) = self.secular_terms(cluster, t);
                let (rx, ry) = d.rwa_field(t);
                let z0 = d.detuning(t) + self.zoff + d.bloch_siegert(t) * f * f;
                SpinFields {
                    h: shifts.iter().map(|a| Vec3::new(rx * f, ry * f, z0 + a)).collect(),
                    coupling: if cluster.dipolar.is_some() { Coupling::Secular(dip) } else { Coupling::None },
                }
            }
            Frame::IpFull => {
                let (shifts, dip) = self.secular_terms(cluster, t);
                let phi = d.frame_phase(t);
                let e = d.corotating_direction(t);
                let a = if d.enabled { 2.0 * d.omega * f * (phi + d.phase_offset(t)).cos() } else { 0.0 };
                let h = self.ip_full_field(phi, a, &e, d.detuning(t) + self.zoff);
                SpinFields {
                    h: shifts.iter().map(|s| h + Vec3::new(0.0, 0.0, *s)).collect(),
                    coupling: if cluster.dipolar.is_some() { Coupling::Secular(dip) } else { Coupling::None },
                }
            }
            Frame::LabExact => {
                let field = d.field();
                let s = field.field_at(t) / field.b0;
                let q = field.sample_rotation(t);
                let drv = d.drive_at(f, t);
                let h_drive = drv.direction * (drv.amplitude * drv.phase.cos());
                let h = cluster
                    .tensors
                    .iter()
                    .map(|m| s * d.larmor + q * m * q.transpose() * s + h_drive)
                    .collect();
                let coupling = match cluster.dipolar {
                    Some((b, r)) => Coupling::Full { b, axis: q * r },
                    None => Coupling::None,
                };
                SpinFields { h, coupling }
            }
        }
    }

    /// Single-spin part of the `IpFull` field without the shift, given the
    /// frame phase, the instantaneous carrier amplitude and `e`.
    #[inline]
    fn ip_full_field(&self, phi: f64, a: f64, e: &Vec3, z: f64) -> Vec3 {
        let (s, c) = phi.sin_cos();
        let by = self.berry.y;
        Vec3::new(a * (e.x * c + e.y * s) + by * s, a * (-e.x * s + e.y * c) + by * c, z + a * e.z)
    }

    /// Angular-frequency Hamiltonian at `t`.
    pub fn build_hamiltonian(&self, cluster: &SpinCluster, t: f64, noise_factor: f64) -> Result<Operator> {
        if !(t.is_finite() && noise_factor.is_finite()) {
            return Err(invalid("t", "non-finite time or noise factor"));
        }
        self.fields_at(cluster, t, noise_factor).operator()
    }

    /// Precomputes per-period tables for `cluster`.
    pub fn prepare(&self, cluster: &SpinCluster) -> Result<PreparedCluster> {
        let n_spins = cluster.n_spins();
        if !(1..=2).contains(&n_spins) {
            return Err(invalid("cluster", format!("{n_spins} spins; one or two supported")));
        }
        let n = self.steps_per_period();
        let mut shifts = vec![Vec::with_capacity(n); n_spins];
        let mut dip = Vec::with_capacity(n);
        for b in &self.table.body_dir {
            let (s, d) = Self::secular_at(cluster, b);
            for (k, v) in s.into_iter().enumerate() {
                shifts[k].push(v);
            }
            dip.push(d);
        }
        let w = TAU * self.grid.dt;
        let dip_merged = (0..n).map(|k| dipolar_coefficients(w * 0.5 * (dip[k] + dip[(k + 1) % n]))).collect();
        let dip_half = dip.iter().map(|d| dipolar_coefficients(w * 0.5 * d)).collect();
        let kicks = (self.mode.frame == Frame::IpRwaBs).then(|| {
            let t = &self.table;
            (0..n)
                .flat_map(|k| {
                    shifts.iter().map(move |s| Su2::kick([t.rx[k], t.ry[k], t.base_z[k] + t.bs[k] + s[k]], w))
                })
                .collect()
        });
        Ok(PreparedCluster { cluster: cluster.clone(), shifts, dip, dip_merged, dip_half, kicks })
    }

    /// Product state at step 0 from Bloch angles `(theta, phi)` per spin,
    /// measured in the `(u, v, n)` triad with `theta` from `n`.
    pub fn initial_state(&self, angles: &[(f64, f64)]) -> Result<ClusterState> {
        if !(1..=2).contains(&angles.len()) {
            return Err(invalid("angles", "one or two spins supported"));
        }
        let eps = self.drive.field().epsilon;
        let mut psi = vec![C64::new(1.0, 0.0)];
        for &(theta, phi) in angles {
            let (st, ct) = theta.sin_cos();
            let (sp, cp) = phi.sin_cos();
            let x = uvn_to_ip([st * cp, st * sp, ct], eps);
            let spinor = spinalg::bloch_spinor(x.z.clamp(-1.0, 1.0).acos(), x.y.atan2(x.x));
            psi = psi.iter().flat_map(|a| spinor.iter().map(move |b| a * b)).collect();
        }
        Ok(ClusterState { psi, step: 0 })
    }

    /// Advances `state` by `n_steps` steps. `noise` holds one factor
    /// `1 + xi` per global step, or `None` for a noiseless drive.
    pub fn advance(&self, prep: &PreparedCluster, state: &mut ClusterState, n_steps: u64, noise: Option<&[f64]>) -> Result<()> {
        if state.psi.len() != prep.cluster.dim() {
            return Err(invalid("state", "dimension does not match the cluster"));
        }
        if n_steps == 0 {
            return Ok(());
        }
        if let Some(path) = noise {
            let need = state.step + n_steps;
            if (path.len() as u64) < need {
                return Err(invalid("noise", format!("path has {} steps, {need} needed", path.len())));
            }
        }
        if self.mode.uses_split() {
            self.advance_split(prep, state, n_steps, noise);
        } else {
            self.advance_dense(prep, state, n_steps, noise)?;
        }
        if state.psi.iter().any(|c| !(c.re.is_finite() && c.im.is_finite())) {
            return Err(EngineError::NonFinite { step: state.step });
        }
        Ok(())
    }

    fn advance_split(&self, prep: &PreparedCluster, state: &mut ClusterState, n_steps: u64, noise: Option<&[f64]>) {
        let n = self.steps_per_period() as u64;
        let n_spins = prep.cluster.n_spins();
        let pair = prep.cluster.dipolar.is_some() && n_spins == 2;
        let w = TAU * self.grid.dt;
        let t = &self.table;
        let psi = &mut state.psi[..];
        let start = state.step;
        let end = start + n_steps;
        if pair {
            apply_dipolar(psi, &prep.dip_half[(start % n) as usize]);
        }
        for g in start..end {
            let k = (g % n) as usize;
            match (self.mode.frame, noise, &prep.kicks) {
                (Frame::IpRwaBs, None, Some(kicks)) => {
                    for s in 0..n_spins {
                        kicks[k * n_spins + s].apply(psi, s, n_spins);
                    }
                }
                (Frame::IpRwaBs, _, _) => {
                    let f = noise.map_or(1.0, |p| p[g as usize]);
                    let (hx, hy, z) = (t.rx[k] * f, t.ry[k] * f, t.base_z[k] + t.bs[k] * f * f);
                    for s in 0..n_spins {
                        Su2::kick([hx, hy, z + prep.shifts[s][k]], w).apply(psi, s, n_spins);
                    }
                }
                _ => {
                    let f = noise.map_or(1.0, |p| p[g as usize]);
                    let tm = (g as f64 + 0.5) * self.grid.dt;
                    let phi = self.drive.frame_phase(tm);
                    let a = if self.drive.enabled { 2.0 * self.drive.omega * f * (phi + t.alpha[k]).cos() } else { 0.0 };
                    let h = self.ip_full_field(phi, a, &t.e[k], t.base_z[k]);
                    for s in 0..n_spins {
                        Su2::kick([h.x, h.y, h.z + prep.shifts[s][k]], w).apply(psi, s, n_spins);
                    }
                }
            }
            if pair {
                let coeff = if g + 1 < end { &prep.dip_merged[k] } else { &prep.dip_half[k] };
                apply_dipolar(psi, coeff);
            }
        }
        state.step = end;
    }

    fn advance_dense(&self, prep: &PreparedCluster, state: &mut ClusterState, n_steps: u64, noise: Option<&[f64]>) -> Result<()> {
        let dim = state.psi.len();
        let dt = self.grid.dt;
        for g in state.step..state.step + n_steps {
            let f = noise.map_or(1.0, |p| p[g as usize]);
            let h = self.build_hamiltonian(&prep.cluster, (g as f64 + 0.5) * dt, f)?;
            let u = spinalg::propagator(&h, dt)?;
            let m = u.matrix();
            let next: Vec<C64> = (0..dim).map(|r| (0..dim).map(|c| m[(r, c)] * state.psi[c]).sum()).collect();
            state.psi = next;
        }
        state.step += n_steps;
        Ok(())
    }

    /// Time of global step `step`, s.
    pub fn time_of(&self, step: u64) -> f64 {
        step as f64 * self.grid.dt
    }

    /// State expressed in the interaction picture of the carrier.
    pub fn ip_state(&self, state: &ClusterState) -> Vec<C64> {
        if self.mode.frame != Frame::LabExact {
            return state.psi.clone();
        }
        let t = self.time_of(state.step);
        let field = self.drive.field();
        let n_spins = state.psi.len().trailing_zeros() as usize;
        let mut psi = state.psi.clone();
        if field.mode == FieldMode::RotatingField {
            let nv = field.axis_frame.n;
            let u = Su2::kick([nv.x, nv.y, nv.z], -TAU * field.nu * t);
            for s in 0..n_spins {
                u.apply(&mut psi, s, n_spins);
            }
        }
        let u = Su2::kick([0.0, 0.0, 1.0], -self.drive.frame_phase(t));
        for s in 0..n_spins {
            u.apply(&mut psi, s, n_spins);
        }
        psi
    }

    /// `[<I_u>, <I_v>, <I_n>]` per spin at the state's time.
    pub fn expectations(&self, state: &ClusterState) -> Vec<[f64; 3]> {
        let psi = self.ip_state(state);
        let n_spins = psi.len().trailing_zeros() as usize;
        let eps = self.drive.field().epsilon;
        spin_vectors(&psi, n_spins).into_iter().map(|s| ip_to_uvn(s, eps)).collect()
    }

    fn trace(&self, state: &ClusterState, p: u64, record_state: bool) -> Result<WindowTrace> {
        let state_snapshot = if record_state { Some(pure_density(&self.ip_state(state))?) } else { None };
        Ok(WindowTrace {
            p,
            t_ev: p as f64 * self.grid.period,
            expectations: self.expectations(state),
            state: state_snapshot,
        })
    }

    /// Steps `state` through windows `p_from..=p_to`, recording a trace at
    /// each. A state behind window `p_from` is first advanced to it.
    pub fn propagate_window(
        &self,
        prep: &PreparedCluster,
        state: &mut ClusterState,
        p_from: u64,
        p_to: u64,
        noise: Option<&[f64]>,
        record_state: bool,
    ) -> Result<Vec<WindowTrace>> {
        if p_to <= p_from {
            return Err(invalid("p_to", "must exceed p_from"));
        }
        let n = self.steps_per_period() as u64;
        let first = p_from * n;
        if state.step > first {
            return Err(invalid("state", "already past the first window"));
        }
        self.advance(prep, state, first - state.step, noise)?;
        let mut out = Vec::with_capacity((p_to - p_from + 1) as usize);
        out.push(self.trace(state, p_from, record_state)?);
        for p in p_from + 1..=p_to {
            self.advance(prep, state, n, noise)?;
            out.push(self.trace(state, p, record_state)?);
        }
        Ok(out)
    }

    /// Unit effective-field axis at `t` in interaction-picture coordinates.
    pub fn nutation_axis(&self, t: f64) -> Result<Vec3> {
        let (rx, ry) = self.drive.rwa_field(t);
        let axis = Vec3::new(rx, ry, self.drive.detuning(t) + self.zoff);
        if axis.norm() == 0.0 {
            return Err(invalid("drive", "no nutation axis with the drive off"));
        }
        Ok(axis.normalize())
    }

    /// Secular Hamiltonian in the frame of the effective nutation: each
    /// shift projected onto the nutation axis, `A_k (a . z)(a . I^k)`,
    /// angular. The axis is taken at `axis_time`.
    pub fn nutation_frame_hamiltonian(&self, cluster: &SpinCluster, t: f64, axis_time: f64) -> Result<Operator> {
        let a = self.nutation_axis(axis_time)?;
        let (shifts, _) = self.secular_terms(cluster, t);
        let n = cluster.n_spins();
        let mut h = Operator::zeros(1 << n)?;
        for (k, s) in shifts.iter().enumerate() {
            h.add_scaled(&spinalg::spin_component([a.x, a.y, a.z], k, n)?, TAU * s * a.z)?;
        }
        Ok(h)
    }
}

/// Line of a nucleus with isotropic shift `delta_iso` on `I_n`, Hz:
/// `(delta_iso + Omega^2/(4 omega))/sqrt(3)`.
pub fn isotropic_line(delta_iso: f64, drive: &DriveProgram) -> f64 {
    let bs = if drive.enabled { drive.nominal_bloch_siegert() } else { 0.0 };
    (delta_iso + bs) / 3f64.sqrt()
}

/// [`isotropic_line`] of every nucleus of `cluster`.
pub fn predicted_effective_hamiltonian(cluster: &SpinCluster, drive: &DriveProgram) -> Vec<f64> {
    cluster.isotropic.iter().map(|d| isotropic_line(*d, drive)).collect()
}

/// First two Magnus terms over one period.
#[derive(Debug, Clone)]
pub struct MagnusOrders {
    pub h1: Operator,
    pub h2: Operator,
    /// Final quadrature size.
    pub n_quadrature: usize,
    /// Relative change of the last refinement.
    pub change: f64,
}

const MAGNUS_TOL: f64 = 1e-3;
const MAGNUS_MAX_N: usize = 1 << 24;

/// Trapezoid `H1` and `H2 = (1/2iT) int [H(t), C(t)] dt` with `C` the
/// running integral, on `n` intervals.
fn magnus_trapezoid<F: Fn(f64) -> Operator>(h: &F, period: f64, n: usize) -> Result<(Operator, Operator)> {
    let dt = period / n as f64;
    let h0 = h(0.0);
    let dim = h0.dim();
    let mut cum = Operator::zeros(dim)?;
    let mut sum = h0.scale(0.5 * dt);
    let mut acc = Operator::zeros(dim)?;
    let mut prev_h = h0;
    let mut prev_comm = Operator::zeros(dim)?;
    for j in 1..=n {
        let hj = h(j as f64 * dt);
        if hj.dim() != dim {
            return Err(invalid("sampler", "operator dimension changed"));
        }
        cum.add_scaled(&prev_h.add(&hj)?, 0.5 * dt)?;
        let comm = hj.commutator(&cum)?;
        acc.add_scaled(&prev_comm.add(&comm)?, 0.5 * dt)?;
        sum.add_scaled(&hj, if j == n { 0.5 * dt } else { dt })?;
        prev_h = hj;
        prev_comm = comm;
    }
    let h1 = sum.scale(1.0 / period);
    // (1/(2iT)) X = -i X / (2T)
    let m = acc.matrix() * C64::new(0.0, -1.0 / (2.0 * period));
    let h2 = Operator::from_matrix((&m + m.adjoint()) * C64::new(0.5, 0.0))?;
    Ok((h1, h2))
}

/// First and second Magnus terms of the angular Hamiltonian `h(t)` over
/// `period`, refined by doubling from `n_quadrature` until the Richardson
/// estimate changes by less than 1e-3 relative.
pub fn magnus_orders<F: Fn(f64) -> Operator>(h: F, period: f64, n_quadrature: usize) -> Result<MagnusOrders> {
    if !(period > 0.0 && period.is_finite()) {
        return Err(invalid("period", "must be positive"));
    }
    let mut n = n_quadrature.max(2);
    let (mut h1_prev, mut h2_prev) = magnus_trapezoid(&h, period, n)?;
    let mut est_prev: Option<(Operator, Operator)> = None;
    let mut change = f64::INFINITY;
    while n < MAGNUS_MAX_N {
        n *= 2;
        let (h1, h2) = magnus_trapezoid(&h, period, n)?;
        let r1 = h1.scale(4.0 / 3.0).sub(&h1_prev.scale(1.0 / 3.0))?;
        let r2 = h2.scale(4.0 / 3.0).sub(&h2_prev.scale(1.0 / 3.0))?;
        if let Some((p1, p2)) = &est_prev {
            let scale1 = r1.frobenius_norm().max(1e-300);
            let floor2 = 1e-12 * scale1 * scale1 * period;
            let c1 = r1.sub(p1)?.frobenius_norm() / scale1;
            let c2 = r2.sub(p2)?.frobenius_norm() / r2.frobenius_norm().max(floor2);
            change = c1.max(c2);
            if change < MAGNUS_TOL {
                let h1 = Operator::from_matrix((r1.matrix() + r1.matrix().adjoint()) * C64::new(0.5, 0.0))?;
                return Ok(MagnusOrders { h1, h2: r2, n_quadrature: n, change });
            }
        }
        est_prev = Some((r1, r2));
        h1_prev = h1;
        h2_prev = h2;
    }
    Err(EngineError::Quadrature { n, change })
}

/// Order-preserving parallel map over `0..n` on a dedicated pool of
/// `threads` workers (0 for the rayon default). Results come back in index
/// order so any reduction over them is reproducible.
pub fn parallel_map<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if threads == 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        Err(_) => (0..n).map(f).collect(),
    }
}
