//! Run directories and sweep summaries.

use crate::config::{ExperimentConfig, Resolved};
use crate::pipeline::{simulate, RunOutput};
use crate::CliError;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const CONFIG_FILE: &str = "config.resolved";
pub const TIMESERIES_FILE: &str = "timeseries.csv";
pub const SPECTRUM_FILE: &str = "spectrum.csv";
pub const PEAKS_FILE: &str = "peaks.json";
pub const META_FILE: &str = "meta.json";
pub const SVG_FILE: &str = "spectrum.svg";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Serialize)]
struct PeaksFile<'a> {
    peaks: &'a [nvnmr::spectra::Peak],
    predicted_hz: &'a [f64],
    bloch_siegert_line_hz: f64,
    line_heights: &'a [f64],
    df_hz: f64,
    window: nvnmr::spectra::Window,
    zero_pad: usize,
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write(dir: &Path, name: &str, body: &str) -> Result<(), CliError> {
    let p = dir.join(name);
    fs::write(&p, body).map_err(|e| io(&p, e))
}

/// Writes the artifact set of one run into `dir`.
pub fn write_run(dir: &Path, res: &Resolved, out: &RunOutput, svg: bool) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    write(dir, CONFIG_FILE, &res.normalized().to_toml())?;
    let mut ts = String::from("p,t_s,value,stderr\n");
    for (p, (v, e)) in out.series.values.iter().zip(&out.stderr).enumerate() {
        let _ = writeln!(ts, "{p},{:.9e},{v:.12e},{e:.6e}", p as f64 * out.series.tau);
    }
    write(dir, TIMESERIES_FILE, &ts)?;
    write(dir, SPECTRUM_FILE, &out.spectrum.to_csv())?;
    let peaks = PeaksFile {
        peaks: &out.spectrum.peaks,
        predicted_hz: &out.spectrum.predicted,
        bloch_siegert_line_hz: res.bloch_siegert_line,
        line_heights: &out.line_heights,
        df_hz: out.spectrum.df,
        window: out.spectrum.window,
        zero_pad: out.spectrum.zero_pad,
    };
    write(dir, PEAKS_FILE, &(serde_json::to_string_pretty(&peaks).expect("plain data") + "\n"))?;
    write(dir, META_FILE, &(serde_json::to_string_pretty(&out.meta).expect("plain data") + "\n"))?;
    if svg {
        let title = format!("{:?} field, phi_error {} deg", res.config.field.mode, res.config.drive.phi_error_deg);
        write(dir, SVG_FILE, &out.spectrum.to_svg(&title))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SweepAxis {
    PhiError,
    NoiseSigma,
    Nu,
    PairCount,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::PhiError => "phi_error",
            SweepAxis::NoiseSigma => "noise_sigma",
            SweepAxis::Nu => "nu",
            SweepAxis::PairCount => "pair_count",
        }
    }

    /// Copy of `base` with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig, CliError> {
        let mut c = base.clone();
        match self {
            SweepAxis::PhiError => c.drive.phi_error_deg = value,
            SweepAxis::NoiseSigma => c.drive.noise_sigma = value,
            SweepAxis::Nu => c.field.nu = value,
            SweepAxis::PairCount => {
                if !(value >= 0.0 && value.fract() == 0.0) {
                    return Err(CliError::Usage(format!("pair_count values must be whole numbers, got {value}")));
                }
                c.sample.pair_count = value as usize;
            }
        }
        Ok(c)
    }
}

/// One row of the sweep summary.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub lines: Vec<f64>,
    /// Detected peak nearest each predicted line (NaN if none).
    pub peaks: Vec<f64>,
    pub heights: Vec<f64>,
}

impl SweepRow {
    pub fn from_run(value: f64, out: &RunOutput) -> Self {
        let lines = out.spectrum.predicted.clone();
        let peaks = lines
            .iter()
            .map(|l| {
                out.spectrum
                    .peaks
                    .iter()
                    .map(|p| p.freq)
                    .min_by(|a, b| (a - l).abs().total_cmp(&(b - l).abs()))
                    .unwrap_or(f64::NAN)
            })
            .collect();
        Self { value, lines, peaks, heights: out.line_heights.clone() }
    }
}

pub fn summary_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let n = rows.first().map_or(0, |r| r.lines.len());
    let mut s = axis.name().to_string();
    for i in 1..=n {
        let _ = write!(s, ",line_{i}_hz,peak_{i}_hz,height_{i},shift_{i}_hz");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{}", r.value);
        for i in 0..n {
            let _ = write!(s, ",{:.6},{:.6},{:.9e},{:.6}", r.lines[i], r.peaks[i], r.heights[i], r.peaks[i] - r.lines[i]);
        }
        s.push('\n');
    }
    s
}

/// Directory of one sweep point under `root`.
pub fn sweep_dir(root: &Path, axis: SweepAxis, value: f64) -> PathBuf {
    root.join(format!("{}_{value}", axis.name()))
}

/// Runs every value and writes one artifact set each plus `summary.csv`.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64], root: &Path, threads: usize) -> Result<Vec<SweepRow>, CliError> {
    if values.is_empty() {
        return Err(CliError::Usage("a sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let cfg = axis.apply(base, v)?;
        let res = cfg.resolve().map_err(CliError::Validation)?;
        let out = simulate(&res, threads)?;
        write_run(&sweep_dir(root, axis, v), &res, &out, cfg.run.svg)?;
        rows.push(SweepRow::from_run(v, &out));
    }
    fs::create_dir_all(root).map_err(|e| io(root, e))?;
    write(root, SUMMARY_FILE, &summary_csv(axis, &rows))?;
    Ok(rows)
}
