//! Experiment configuration: TOML schema, defaults, validation and
//! resolution into core objects.

use nvnmr::consts::{magic_angle, BOLTZMANN, GAMMA_1H, PLANCK};
use nvnmr::control::{DriveProgram, DriveVariant, FieldMode, FieldProgram, Misalignment, MisalignmentModel};
use nvnmr::engine::{Engine, Frame, PropagationMode, SpinBounds};
use nvnmr::sample::{dipolar_prefactor, GeometryConfig, SpinSpecies};
use nvnmr::sensor::{DdSequence, ReadoutConfig};
use nvnmr::spectra::{predict_lines, Window, MIN_SAMPLES};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

pub const SCHEMA_VERSION: u32 = 1;
/// Temperature behind the default `x = beta gamma B0`, K.
pub const ROOM_TEMPERATURE: f64 = 300.0;

/// One validation failure, tied to a config path such as `drive.p`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn violation(field: &str, message: impl Into<String>) -> Violation {
    Violation { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleBlock {
    /// Principal values of each nucleus group, Hz. Default: the two protons of the Fig. 2 sample.
    pub principal_values: Vec<[f64; 3]>,
    /// Distance between the two nuclei of a pair, m. Default 0.25 nm.
    pub internuclear_distance: f64,
    /// Pairs per sensor. Default 16.
    pub pair_count: usize,
    /// NV depth, which is also the radius of the detection region, m. Default 5 nm.
    pub nv_depth: f64,
    /// Minimum distance between pair centres, m. Default 0.4 nm.
    pub exclusion_radius: f64,
    /// Nuclear gyromagnetic ratio, Hz/T. Default 1H.
    pub gyromagnetic_ratio: f64,
    /// `x = beta gamma B0`. Default: computed from `field.b0` at 300 K.
    pub beta_field_product: Option<f64>,
}

impl Default for SampleBlock {
    fn default() -> Self {
        let g = GeometryConfig::default();
        Self {
            principal_values: g.principal_values.to_vec(),
            internuclear_distance: g.internuclear_distance,
            pair_count: g.pair_count,
            nv_depth: g.nv_depth,
            exclusion_radius: g.exclusion_radius,
            gyromagnetic_ratio: GAMMA_1H,
            beta_field_product: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldBlock {
    /// Field strength, T. Default 2.
    pub b0: f64,
    /// Rotation rate, Hz. Default 1000.
    pub nu: f64,
    /// Cone aperture in degrees. Default: the magic angle.
    pub epsilon_deg: Option<f64>,
    /// Default `rotating_field`.
    pub mode: FieldMode,
}

impl Default for FieldBlock {
    fn default() -> Self {
        Self { b0: 2.0, nu: 1e3, epsilon_deg: None, mode: FieldMode::RotatingField }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriveBlock {
    /// Nuclear Larmor frequency, Hz. Default 84 MHz.
    pub larmor: f64,
    /// Carrier-commensurability integer; fixes `Omega = sqrt(2/3) larmor / p`. Default 448.
    pub p: u32,
    /// Default `modulated`.
    pub variant: DriveVariant,
    /// Misalignment angle, degrees. Default 1.
    pub phi_error_deg: f64,
    /// Default `rigid_rotation`.
    pub misalignment_model: MisalignmentModel,
    /// Relative amplitude noise. Default 0.0025.
    pub noise_sigma: f64,
    /// Noise correlation time, s. Default 1 ms.
    pub noise_tau_c: f64,
    /// fsLG segments per field period (even). Default: one nutation per segment.
    pub fslg_segments: Option<usize>,
    /// Drive on or off. Default on.
    pub enabled: bool,
}

impl Default for DriveBlock {
    fn default() -> Self {
        Self {
            larmor: 84e6,
            p: 448,
            variant: DriveVariant::Modulated,
            phi_error_deg: 1.0,
            misalignment_model: MisalignmentModel::RigidRotation,
            noise_sigma: 0.0025,
            noise_tau_c: 1e-3,
            fslg_segments: None,
            enabled: true,
        }
    }
}

/// Carrier assumed by the decoupling filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CarrierChoice {
    /// `sqrt(2) Omega`.
    Sqrt2Omega,
    /// `sqrt(3/2) Omega`, the effective nutation frequency.
    OmegaEff,
    /// `Omega`.
    Rabi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReadoutBlock {
    /// Default `xy8`.
    pub dd_sequence: DdSequence,
    /// Default `sqrt2_omega`.
    pub carrier: CarrierChoice,
    /// Nitrogen memory lifetime, s; `inf` for no decay. Default 1.
    pub t1_memory: f64,
    /// Interrogation windows M. Default 512.
    pub windows: usize,
    /// Sensors per shot. Default 64.
    pub sensors: usize,
    /// Independent repetitions (new polarisation and noise). Default 1.
    pub shots: usize,
    /// Gaussian noise added to every correlation value. Default 0.
    pub readout_noise: f64,
}

impl Default for ReadoutBlock {
    fn default() -> Self {
        Self {
            dd_sequence: DdSequence::Xy8,
            carrier: CarrierChoice::Sqrt2Omega,
            t1_memory: 1.0,
            windows: 512,
            sensors: 64,
            shots: 1,
            readout_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunBlock {
    /// Default `ip_rwa_bs`.
    pub frame: Frame,
    /// Steps per period of the fastest retained frequency. Default 20.
    pub oversample: f64,
    /// Default 1.
    pub seed: u64,
    /// Default `out`.
    pub output_dir: PathBuf,
    /// Keep wall-clock data out of the artifacts. Default true.
    pub bit_reproducible: bool,
    /// Limit on integration steps per field period. Default 10^6.
    pub max_steps_per_period: usize,
    /// Default `hann`.
    pub window: Window,
    /// Default 4.
    pub zero_pad: usize,
    /// Peak prominence as a fraction of the largest magnitude. Default 0.05.
    pub peak_prominence: f64,
    /// Write `spectrum.svg`. Default false.
    pub svg: bool,
}

impl Default for RunBlock {
    fn default() -> Self {
        Self {
            frame: Frame::IpRwaBs,
            oversample: 20.0,
            seed: 1,
            output_dir: PathBuf::from("out"),
            bit_reproducible: true,
            max_steps_per_period: 1_000_000,
            window: Window::Hann,
            zero_pad: 4,
            peak_prominence: 0.05,
            svg: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub sample: SampleBlock,
    pub field: FieldBlock,
    pub drive: DriveBlock,
    pub readout: ReadoutBlock,
    pub run: RunBlock,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            sample: SampleBlock::default(),
            field: FieldBlock::default(),
            drive: DriveBlock::default(),
            readout: ReadoutBlock::default(),
            run: RunBlock::default(),
        }
    }
}

/// Every core object a run needs, built from a valid config.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub field: FieldProgram,
    pub drive: DriveProgram,
    pub geometry: GeometryConfig,
    pub readout: ReadoutConfig,
    pub mode: PropagationMode,
    pub bounds: SpinBounds,
    pub beta_field_product: f64,
    /// Orientation-independent dipolar prefactor `b`, Hz.
    pub dipolar_b: f64,
    /// Largest secular splitting `2 b`, Hz.
    pub dipolar_max: f64,
    pub lines: Vec<f64>,
    pub bloch_siegert_line: f64,
    pub warnings: Vec<String>,
}

pub fn default_beta_field_product(b0: f64, gamma: f64) -> f64 {
    PLANCK * gamma * b0 / (BOLTZMANN * ROOM_TEMPERATURE)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serialisable")
    }

    pub fn epsilon(&self) -> f64 {
        self.field.epsilon_deg.map_or_else(magic_angle, f64::to_radians)
    }

    /// Isotropic shift of each group, Hz.
    pub fn isotropic_shifts(&self) -> Vec<f64> {
        self.sample.principal_values.iter().map(|v| v.iter().sum::<f64>() / 3.0).collect()
    }

    /// Field checks that need no core objects.
    fn check_fields(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let mut positive = |name: &str, x: f64| {
            if !(x > 0.0 && x.is_finite()) {
                v.push(violation(name, format!("must be positive and finite, got {x}")));
            }
        };
        positive("sample.internuclear_distance", self.sample.internuclear_distance);
        positive("sample.nv_depth", self.sample.nv_depth);
        positive("sample.gyromagnetic_ratio", self.sample.gyromagnetic_ratio);
        positive("field.b0", self.field.b0);
        positive("field.nu", self.field.nu);
        positive("drive.larmor", self.drive.larmor);
        positive("drive.noise_tau_c", self.drive.noise_tau_c);
        positive("run.oversample", self.run.oversample);
        positive("run.peak_prominence", self.run.peak_prominence);
        if !(self.readout.t1_memory > 0.0) {
            v.push(violation("readout.t1_memory", format!("must be positive, got {}", self.readout.t1_memory)));
        }
        if let Some(x) = self.sample.beta_field_product {
            if !(x >= 0.0 && x.is_finite()) {
                v.push(violation("sample.beta_field_product", format!("must be non-negative, got {x}")));
            }
        }
        if self.schema_version != SCHEMA_VERSION {
            v.push(violation("schema_version", format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version)));
        }
        if self.sample.principal_values.len() != 2 {
            v.push(violation(
                "sample.principal_values",
                format!("pair clusters need exactly two groups, got {}", self.sample.principal_values.len()),
            ));
        }
        if self.sample.principal_values.iter().flatten().any(|x| !x.is_finite()) {
            v.push(violation("sample.principal_values", "must be finite"));
        }
        if self.sample.pair_count == 0 {
            v.push(violation("sample.pair_count", "the sample is empty; need at least one pair"));
        }
        if !(self.sample.exclusion_radius >= 0.0) {
            v.push(violation("sample.exclusion_radius", "must be non-negative"));
        }
        if let Some(e) = self.field.epsilon_deg {
            if !(e > 0.0 && e < 180.0) {
                v.push(violation("field.epsilon_deg", format!("must lie in (0, 180), got {e}")));
            }
        }
        if self.drive.p == 0 {
            v.push(violation("drive.p", "must be a positive integer"));
        }
        if !(self.drive.noise_sigma >= 0.0 && self.drive.noise_sigma.is_finite()) {
            v.push(violation("drive.noise_sigma", "must be non-negative"));
        }
        if !self.drive.phi_error_deg.is_finite() {
            v.push(violation("drive.phi_error_deg", "must be finite"));
        }
        if let Some(s) = self.drive.fslg_segments {
            if s == 0 || s % 2 != 0 {
                v.push(violation("drive.fslg_segments", format!("must be a positive even number, got {s}")));
            }
        }
        if self.readout.windows < MIN_SAMPLES {
            v.push(violation("readout.windows", format!("need at least {MIN_SAMPLES} windows, got {}", self.readout.windows)));
        }
        if self.readout.sensors == 0 {
            v.push(violation("readout.sensors", "must be at least 1"));
        }
        if self.readout.shots == 0 {
            v.push(violation("readout.shots", "must be at least 1"));
        }
        if !(self.readout.readout_noise >= 0.0 && self.readout.readout_noise.is_finite()) {
            v.push(violation("readout.readout_noise", "must be non-negative"));
        }
        if self.run.oversample.is_finite() && self.run.oversample < nvnmr::engine::MIN_OVERSAMPLE {
            v.push(violation("run.oversample", format!("must be at least {}", nvnmr::engine::MIN_OVERSAMPLE)));
        }
        if self.run.zero_pad == 0 {
            v.push(violation("run.zero_pad", "must be at least 1"));
        }
        v
    }

    /// Full validation; on success every derived object is built.
    pub fn resolve(&self) -> Result<Resolved, Vec<Violation>> {
        let mut errors = self.check_fields();
        if !errors.is_empty() {
            return Err(errors);
        }
        let field = FieldProgram::new(self.field.b0, self.field.nu, self.epsilon(), self.field.mode)
            .map_err(|e| vec![violation("field", e.to_string())])?;
        let misalignment = Misalignment {
            phi_error: self.drive.phi_error_deg.to_radians(),
            model: self.drive.misalignment_model,
            seed: self.run.seed,
        };
        let mut drive =
            DriveProgram::new(&field, self.drive.larmor, self.drive.p, self.drive.variant, misalignment, self.drive.fslg_segments)
                .map_err(|e| vec![violation("drive", e.to_string())])?;
        drive.enabled = self.drive.enabled;

        let pv = &self.sample.principal_values;
        let geometry = GeometryConfig {
            nv_depth: self.sample.nv_depth,
            pair_count: self.sample.pair_count,
            internuclear_distance: self.sample.internuclear_distance,
            exclusion_radius: self.sample.exclusion_radius,
            principal_values: [pv[0], pv[1]],
            species: SpinSpecies { gyromagnetic_ratio: self.sample.gyromagnetic_ratio, label: "nucleus".into() },
            ..GeometryConfig::default()
        };
        let dipolar_b = dipolar_prefactor(self.sample.gyromagnetic_ratio, self.sample.internuclear_distance).abs();
        let bounds = SpinBounds {
            max_shift: pv.iter().flatten().fold(0.0_f64, |a, x| a.max(x.abs())),
            max_dipolar: dipolar_b,
        };

        let prediction = predict_lines(&self.isotropic_shifts(), &drive);
        let nyquist = 0.5 * self.field.nu;
        for (i, f) in prediction.lines.iter().enumerate() {
            if f.abs() >= nyquist {
                errors.push(violation(
                    "field.nu",
                    format!("predicted line {i} at {f:.1} Hz is above the Nyquist frequency {nyquist:.1} Hz"),
                ));
            }
        }

        let mut mode = PropagationMode::new(self.run.frame, self.run.oversample).map_err(|e| vec![violation("run.oversample", e.to_string())])?;
        mode.max_steps_per_period = self.run.max_steps_per_period;
        if let Err(e) = Engine::new(&drive, mode, bounds) {
            let hint = match self.run.frame {
                Frame::IpRwaBs => "reduce run.oversample or raise run.max_steps_per_period",
                _ => "use frame = \"ip_rwa_bs\" or scale drive.larmor down",
            };
            errors.push(violation("run.frame", format!("time-step budget cannot be met: {e}; {hint}")));
        }

        let carrier = match self.readout.carrier {
            CarrierChoice::Sqrt2Omega => 2f64.sqrt() * drive.omega,
            CarrierChoice::OmegaEff => drive.omega_eff(),
            CarrierChoice::Rabi => drive.omega,
        };
        let mut readout = ReadoutConfig::new(carrier, self.field.nu, self.readout.windows, self.readout.dd_sequence);
        readout.t1_memory = Some(self.readout.t1_memory).filter(|t| t.is_finite());
        readout.readout_noise = self.readout.readout_noise;
        let warnings = match readout.validate() {
            Ok(w) => w,
            Err(e) => {
                errors.push(violation("readout", e.to_string()));
                Vec::new()
            }
        };
        if !errors.is_empty() {
            return Err(errors);
        }
        let beta_field_product = self
            .sample
            .beta_field_product
            .unwrap_or_else(|| default_beta_field_product(self.field.b0, self.sample.gyromagnetic_ratio));
        Ok(Resolved {
            config: self.clone(),
            field,
            drive,
            geometry,
            readout,
            mode,
            bounds,
            beta_field_product,
            dipolar_b,
            dipolar_max: 2.0 * dipolar_b,
            lines: prediction.lines,
            bloch_siegert_line: prediction.bloch_siegert,
            warnings,
        })
    }
}

impl Resolved {
    /// The config with every optional field made explicit.
    pub fn normalized(&self) -> ExperimentConfig {
        let mut c = self.config.clone();
        c.field.epsilon_deg = Some(self.field.epsilon.to_degrees());
        c.sample.beta_field_product = Some(self.beta_field_product);
        c.drive.fslg_segments = Some(self.drive.fslg.segments_per_period);
        c
    }
}
