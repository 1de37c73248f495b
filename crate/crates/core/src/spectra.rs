//! Spectra of the per-window ensemble signal, peak detection and line predictions.

use crate::control::DriveProgram;
use crate::engine::isotropic_line;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

pub const MIN_SAMPLES: usize = 16;
/// Half-width, in bins, of the search around a predicted line.
pub const LINE_SEARCH_BINS: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum SpectraError {
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("frequency grids differ")]
    GridMismatch,
    #[error("reference spectrum has zero height at {freq} Hz")]
    ZeroDenominator { freq: f64 },
}

pub type Result<T> = std::result::Result<T, SpectraError>;

fn invalid(field: &'static str, reason: impl Into<String>) -> SpectraError {
    SpectraError::Invalid { field, reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    /// Sampling period, s.
    pub tau: f64,
    pub values: Vec<f64>,
    pub metadata: BTreeMap<String, String>,
}

impl TimeSeries {
    pub fn new(tau: f64, values: Vec<f64>) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(invalid("tau", format!("{tau}")));
        }
        if values.len() < MIN_SAMPLES {
            return Err(invalid("values", format!("{} samples, need at least {MIN_SAMPLES}", values.len())));
        }
        if let Some(p) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid("values", format!("non-finite sample at {p}")));
        }
        Ok(Self { tau, values, metadata: BTreeMap::new() })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `timeseries.csv` body with header `p,t_s,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("p,t_s,value\n");
        for (p, v) in self.values.iter().enumerate() {
            let _ = writeln!(s, "{p},{:.9e},{v:.12e}", p as f64 * self.tau);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Rectangular,
    #[default]
    Hann,
}

impl Window {
    fn weight(self, p: usize, n: usize) -> f64 {
        match self {
            Window::Rectangular => 1.0,
            Window::Hann => 0.5 - 0.5 * (std::f64::consts::TAU * p as f64 / n as f64).cos(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub freq: f64,
    pub height: f64,
    /// Full width at half height, Hz.
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub freqs: Vec<f64>,
    /// `|tau sum_p y_p exp(-2 pi i f p tau)|` of the processed series `y`.
    pub magnitude: Vec<f64>,
    pub df: f64,
    pub window: Window,
    pub zero_pad: usize,
    pub n_samples: usize,
    pub peaks: Vec<Peak>,
    pub predicted: Vec<f64>,
    /// `tau sum |y|^2` of the mean-removed, windowed series.
    pub energy: f64,
}

impl Spectrum {
    /// Two-sided `integral |X|^2 df` reconstructed from the one-sided bins.
    pub fn integrated_power(&self) -> f64 {
        let n_fft = self.n_samples * self.zero_pad;
        let last = self.magnitude.len() - 1;
        let mut s = 0.0;
        for (k, m) in self.magnitude.iter().enumerate() {
            let both = k != 0 && !(n_fft % 2 == 0 && k == last);
            s += if both { 2.0 } else { 1.0 } * m * m;
        }
        s * self.df
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.freqs.len() == other.freqs.len() && (self.df - other.df).abs() <= 1e-12 * self.df.abs()
    }

    /// Bin nearest to `freq`.
    pub fn bin(&self, freq: f64) -> usize {
        ((freq / self.df).round().max(0.0) as usize).min(self.freqs.len() - 1)
    }

    /// Largest magnitude within `half_width` bins of `freq`.
    pub fn height_near(&self, freq: f64, half_width: usize) -> f64 {
        let k = self.bin(freq);
        let lo = k.saturating_sub(half_width);
        let hi = (k + half_width).min(self.freqs.len() - 1);
        self.magnitude[lo..=hi].iter().cloned().fold(0.0, f64::max)
    }

    /// CSV with header `freq_hz,magnitude`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("freq_hz,magnitude\n");
        for (f, m) in self.freqs.iter().zip(&self.magnitude) {
            let _ = writeln!(s, "{f:.9e},{m:.12e}");
        }
        s
    }

    /// Self-contained line plot normalised to unit maximum, predicted lines dashed.
    pub fn to_svg(&self, title: &str) -> String {
        let (w, h, pad) = (800.0, 400.0, 50.0);
        let fmax = self.freqs.last().copied().unwrap_or(1.0).max(f64::MIN_POSITIVE);
        let mmax = self.magnitude.iter().cloned().fold(0.0, f64::max);
        let scale = if mmax > 0.0 { 1.0 / mmax } else { 0.0 };
        let x = |f: f64| pad + (w - 2.0 * pad) * f / fmax;
        let y = |m: f64| h - pad - (h - 2.0 * pad) * m * scale;
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="25" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
        let _ = writeln!(
            s,
            r#"<path d="M{pad} {b} H{r} M{pad} {b} V{pad}" stroke="black" fill="none"/>"#,
            b = h - pad,
            r = w - pad
        );
        for k in 0..=4 {
            let f = fmax * k as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{f:.0}</text>"#,
                x(f),
                h - pad + 16.0
            );
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">frequency (Hz)</text>"#, w / 2.0, h - 10.0);
        for f in &self.predicted {
            let _ = writeln!(
                s,
                r##"<line x1="{0:.2}" y1="{pad}" x2="{0:.2}" y2="{1}" stroke="#c33" stroke-dasharray="4 3"/>"##,
                x(*f),
                h - pad
            );
        }
        let mut d = String::new();
        for (i, (f, m)) in self.freqs.iter().zip(&self.magnitude).enumerate() {
            let _ = write!(d, "{}{:.2} {:.2}", if i == 0 { "M" } else { " L" }, x(*f), y(*m));
        }
        let _ = writeln!(s, r##"<path d="{d}" stroke="#236" stroke-width="1.2" fill="none"/>"##);
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Magnitude spectrum after mean removal, windowing and zero padding.
pub fn to_spectrum(series: &TimeSeries, window: Window, zero_pad: usize) -> Result<Spectrum> {
    let n = series.len();
    if n < MIN_SAMPLES {
        return Err(invalid("series", format!("{n} samples, need at least {MIN_SAMPLES}")));
    }
    if zero_pad == 0 {
        return Err(invalid("zero_pad", "must be at least 1"));
    }
    let mean = series.values.iter().sum::<f64>() / n as f64;
    let n_fft = n * zero_pad;
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let mut energy = 0.0;
    for (p, v) in series.values.iter().enumerate() {
        let y = (v - mean) * window.weight(p, n);
        buf[p] = Complex64::new(y, 0.0);
        energy += y * y;
    }
    FftPlanner::new().plan_fft_forward(n_fft).process(&mut buf);
    let df = 1.0 / (n_fft as f64 * series.tau);
    let bins = n_fft / 2 + 1;
    Ok(Spectrum {
        freqs: (0..bins).map(|k| k as f64 * df).collect(),
        magnitude: buf[..bins].iter().map(|z| z.norm() * series.tau).collect(),
        df,
        window,
        zero_pad,
        n_samples: n,
        peaks: Vec::new(),
        predicted: Vec::new(),
        energy: energy * series.tau,
    })
}

/// Local maxima with topographic prominence of at least `min_prominence`,
/// positions and heights refined by a three-point parabola, sorted by height.
pub fn find_peaks(spectrum: &Spectrum, min_prominence: f64) -> Result<Vec<Peak>> {
    if !(min_prominence > 0.0) {
        return Err(invalid("min_prominence", format!("must be positive, got {min_prominence}")));
    }
    let m = &spectrum.magnitude;
    let n = m.len();
    let mut out = Vec::new();
    for k in 1..n.saturating_sub(1) {
        if !(m[k] > m[k - 1] && m[k] >= m[k + 1]) {
            continue;
        }
        let mut left = m[k];
        let mut i = k;
        while i > 0 && m[i - 1] <= m[k] {
            i -= 1;
            left = left.min(m[i]);
        }
        let mut right = m[k];
        let mut j = k;
        while j + 1 < n && m[j + 1] <= m[k] {
            j += 1;
            right = right.min(m[j]);
        }
        let base = left.max(right);
        if m[k] - base < min_prominence {
            continue;
        }
        let (a, b, c) = (m[k - 1], m[k], m[k + 1]);
        let denom = a - 2.0 * b + c;
        let delta = if denom < 0.0 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
        let height = b - 0.25 * (a - c) * delta;
        out.push(Peak { freq: (k as f64 + delta) * spectrum.df, height, width: half_width(m, k, height) * spectrum.df });
    }
    out.sort_by(|p, q| q.height.total_cmp(&p.height));
    Ok(out)
}

fn half_width(m: &[f64], k: usize, height: f64) -> f64 {
    let half = 0.5 * height;
    let mut i = k;
    while i > 0 && m[i - 1] > half {
        i -= 1;
    }
    let left = if i == 0 { 0.0 } else { i as f64 - (m[i] - half) / (m[i] - m[i - 1]) };
    let mut j = k;
    while j + 1 < m.len() && m[j + 1] > half {
        j += 1;
    }
    let right = if j + 1 == m.len() { j as f64 } else { j as f64 + (m[j] - half) / (m[j] - m[j + 1]) };
    right - left
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinePrediction {
    /// `(delta_iso + Omega^2/(4 omega))/sqrt(3)` per group, Hz.
    pub lines: Vec<f64>,
    /// Bloch-Siegert part `Omega^2/(4 omega)/sqrt(3)`, Hz.
    pub bloch_siegert: f64,
}

pub fn predict_lines(groups: &[f64], drive: &DriveProgram) -> LinePrediction {
    LinePrediction {
        lines: groups.iter().map(|d| isotropic_line(*d, drive)).collect(),
        bloch_siegert: isotropic_line(0.0, drive),
    }
}

/// Ratio of the largest height near each predicted line of `a` (within
/// [`LINE_SEARCH_BINS`]) to the same quantity in `b`.
pub fn broadening_metric(a: &Spectrum, b: &Spectrum, lines: &[f64]) -> Result<Vec<f64>> {
    if !a.same_grid(b) {
        return Err(SpectraError::GridMismatch);
    }
    if lines.is_empty() {
        return Err(invalid("lines", "no predicted lines"));
    }
    lines
        .iter()
        .map(|f| {
            let den = b.height_near(*f, LINE_SEARCH_BINS);
            if den > 0.0 {
                Ok(a.height_near(*f, LINE_SEARCH_BINS) / den)
            } else {
                Err(SpectraError::ZeroDenominator { freq: *f })
            }
        })
        .collect()
}
