//! Full simulation: pair clusters per sensor through the engine, readout per
//! sensor, ensemble average and spectrum.

use crate::config::Resolved;
use crate::CliError;
use nvnmr::consts::{BOLTZMANN, GAMMA_15N, GAMMA_1H, GAMMA_E, MU0, PLANCK};
use nvnmr::control::NoiseProcess;
use nvnmr::engine::{parallel_map, Engine, SpinCluster};
use nvnmr::rng::{substream, tag};
use nvnmr::sample::{coupling_scale, detection_volume, f2_integral, mean_sin2_theta, place_pairs, sample_bloch};
use nvnmr::sensor::{ensemble_average, field_quadratures, signal_prefactor, CorrelationCircuit, SensorRecord};
use nvnmr::spectra::{find_peaks, to_spectrum, Spectrum, TimeSeries};
use serde::Serialize;
use std::time::Instant;

#[derive(Debug, Clone, Serialize)]
pub struct Constants {
    pub mu0: f64,
    pub planck: f64,
    pub boltzmann: f64,
    pub gamma_1h: f64,
    pub gamma_e: f64,
    pub gamma_15n: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Self { mu0: MU0, planck: PLANCK, boltzmann: BOLTZMANN, gamma_1h: GAMMA_1H, gamma_e: GAMMA_E, gamma_15n: GAMMA_15N }
    }
}

/// Derived physical and numerical quantities of a run.
#[derive(Debug, Clone, Serialize)]
pub struct Derived {
    pub rabi_hz: f64,
    pub detuning_hz: f64,
    pub omega_eff_hz: f64,
    pub larmor_hz: f64,
    pub epsilon_rad: f64,
    pub bloch_siegert_shift_hz: f64,
    pub bloch_siegert_line_hz: f64,
    pub predicted_lines_hz: Vec<f64>,
    pub dipolar_b_hz: f64,
    pub dipolar_max_hz: f64,
    pub fslg_segments: usize,
    pub steps_per_period: usize,
    pub dt_s: f64,
    pub f_max_hz: f64,
    pub filter_carrier_hz: f64,
    pub interpulse_spacing_s: f64,
    pub t_prob_s: f64,
    pub beta_field_product: f64,
    pub signal_prefactor: f64,
    pub nyquist_hz: f64,
    pub resolution_hz: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub tool: &'static str,
    pub version: &'static str,
    pub schema_version: u32,
    pub seed: u64,
    pub sensors: usize,
    pub shots: usize,
    pub windows: usize,
    pub constants: Constants,
    pub derived: Derived,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub series: TimeSeries,
    pub stderr: Vec<f64>,
    pub spectrum: Spectrum,
    /// Largest magnitude within two bins of each predicted line.
    pub line_heights: Vec<f64>,
    pub meta: Meta,
}

fn numerical(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

pub fn build_engine(res: &Resolved) -> Result<Engine, CliError> {
    Engine::new(&res.drive, res.mode, res.bounds).map_err(numerical)
}

pub fn derived(res: &Resolved, engine: &Engine) -> Derived {
    let d = &res.drive;
    let g = &res.geometry;
    Derived {
        rabi_hz: d.omega,
        detuning_hz: d.delta(),
        omega_eff_hz: d.omega_eff(),
        larmor_hz: d.larmor,
        epsilon_rad: res.field.epsilon,
        bloch_siegert_shift_hz: d.nominal_bloch_siegert(),
        bloch_siegert_line_hz: res.bloch_siegert_line,
        predicted_lines_hz: res.lines.clone(),
        dipolar_b_hz: res.dipolar_b,
        dipolar_max_hz: res.dipolar_max,
        fslg_segments: d.fslg.segments_per_period,
        steps_per_period: engine.steps_per_period(),
        dt_s: engine.grid().dt,
        f_max_hz: engine.grid().f_max,
        filter_carrier_hz: res.readout.carrier,
        interpulse_spacing_s: res.readout.spacing,
        t_prob_s: res.readout.t_prob,
        beta_field_product: res.beta_field_product,
        signal_prefactor: signal_prefactor(
            coupling_scale(g.species.gyromagnetic_ratio),
            f2_integral(g.nv_depth),
            detection_volume(g.nv_depth),
            mean_sin2_theta(res.beta_field_product),
            &res.readout,
        ),
        nyquist_hz: 0.5 * res.field.nu,
        resolution_hz: res.field.nu / (res.readout.windows * res.config.run.zero_pad) as f64,
    }
}

/// Amplitude-noise factors for one shot, one per integration step.
pub fn noise_path(res: &Resolved, engine: &Engine, shot: usize) -> Result<Option<Vec<f64>>, CliError> {
    let sigma = res.config.drive.noise_sigma;
    if sigma == 0.0 || !res.drive.enabled {
        return Ok(None);
    }
    let steps = (res.readout.windows - 1) * engine.steps_per_period() + 1;
    let rng = substream(res.config.run.seed, tag::NOISE, shot as u64);
    let mut process = NoiseProcess::new(sigma, res.config.drive.noise_tau_c, engine.grid().dt, rng).map_err(numerical)?;
    Ok(Some(process.path(steps)))
}

/// Per-window field quadratures `(b_cos, b_sin)` of one sensor in one shot.
pub fn sensor_quadratures(
    res: &Resolved,
    engine: &Engine,
    sensor: usize,
    shot: usize,
    noise: Option<&[f64]>,
) -> Result<Vec<(f64, f64)>, CliError> {
    let seed = res.config.run.seed;
    let index = (shot * res.config.readout.sensors + sensor) as u64;
    let (geometry, pairs) = place_pairs(&res.geometry, &mut substream(seed, tag::GEOMETRY, sensor as u64)).map_err(numerical)?;
    let bloch = sample_bloch(2 * pairs.len(), res.beta_field_product, &mut substream(seed, tag::BLOCH, index));
    let m = res.readout.windows;
    let mut quads = vec![(0.0, 0.0); m];
    for (k, pair) in pairs.iter().enumerate() {
        let cluster = SpinCluster::from_pair(pair);
        let prep = engine.prepare(&cluster).map_err(numerical)?;
        let mut state = engine.initial_state(&bloch.angles[2 * k..2 * k + 2]).map_err(numerical)?;
        let traces = engine.propagate_window(&prep, &mut state, 0, (m - 1) as u64, noise, false).map_err(numerical)?;
        let w = &geometry.coupling_weights[2 * k..2 * k + 2];
        for (q, tr) in quads.iter_mut().zip(&traces) {
            let (c, s) = field_quadratures(&tr.expectations, w).map_err(numerical)?;
            q.0 += c;
            q.1 += s;
        }
    }
    Ok(quads)
}

/// Time series, spectrum and peaks from an ensemble of sensor records.
pub fn analyse(res: &Resolved, records: &[SensorRecord]) -> Result<(TimeSeries, Vec<f64>, Spectrum, Vec<f64>), CliError> {
    let avg = ensemble_average(records).map_err(numerical)?;
    let mut series = TimeSeries::new(1.0 / res.field.nu, avg.mean).map_err(numerical)?;
    series.metadata.insert("sensors".into(), res.config.readout.sensors.to_string());
    series.metadata.insert("shots".into(), res.config.readout.shots.to_string());
    let mut spectrum = to_spectrum(&series, res.config.run.window, res.config.run.zero_pad).map_err(numerical)?;
    let top = spectrum.magnitude.iter().cloned().fold(0.0, f64::max);
    spectrum.peaks = if top > 0.0 { find_peaks(&spectrum, res.config.run.peak_prominence * top).map_err(numerical)? } else { Vec::new() };
    spectrum.predicted = res.lines.clone();
    let heights = res.lines.iter().map(|f| spectrum.height_near(*f, nvnmr::spectra::LINE_SEARCH_BINS)).collect();
    Ok((series, avg.stderr, spectrum, heights))
}

/// Runs the whole experiment on `threads` workers (0: all cores). Results do
/// not depend on `threads`.
pub fn simulate(res: &Resolved, threads: usize) -> Result<RunOutput, CliError> {
    let start = Instant::now();
    let engine = build_engine(res)?;
    let circuit = CorrelationCircuit::new(res.readout.readout_pulse).map_err(numerical)?;
    let sensors = res.config.readout.sensors;
    let mut records = Vec::with_capacity(sensors * res.config.readout.shots);
    for shot in 0..res.config.readout.shots {
        let noise = noise_path(res, &engine, shot)?;
        let out = parallel_map(sensors, threads, |j| -> Result<SensorRecord, CliError> {
            let q = sensor_quadratures(res, &engine, j, shot, noise.as_deref())?;
            let index = shot * sensors + j;
            let mut rng = substream(res.config.run.seed, tag::READOUT, index as u64);
            SensorRecord::from_quadratures(index, &q, &res.readout, &circuit, Some(&mut rng)).map_err(numerical)
        });
        for r in out {
            records.push(r?);
        }
    }
    let (series, stderr, spectrum, line_heights) = analyse(res, &records)?;
    let reproducible = res.config.run.bit_reproducible;
    let meta = Meta {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        schema_version: res.config.schema_version,
        seed: res.config.run.seed,
        sensors,
        shots: res.config.readout.shots,
        windows: res.readout.windows,
        constants: Constants::default(),
        derived: derived(res, &engine),
        warnings: res.warnings.clone(),
        elapsed_s: (!reproducible).then(|| start.elapsed().as_secs_f64()),
        threads: (!reproducible).then_some(threads),
    };
    Ok(RunOutput { series, stderr, spectrum, line_heights, meta })
}
