//! Signal processing on photocount records: spectra, homodyne quadratures,
//! resonance fits, displacement calibration, g² spectroscopy and the
//! resolution metric.

mod calibration;
mod filter;
mod fit;
mod g2;
mod lockin;
mod resolution;
mod welch;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use calibration::{calibrate_displacement, CalibrationResult, CalibrationTone, ContrastPoint};
pub use filter::{
    cascade_noise_bandwidth, cutoff_for_noise_bandwidth, lorentzian_equivalent_cutoff, lowpass,
    pole_frequency, OnePoleCascade,
};
pub use fit::{lorentzian_fit, lorentzian_model, FitInit, LorentzianFit};
pub use g2::{g2_spectrum, line_width_bins, G2Options};
pub use lockin::{lockin, std_dev, FilterSpec, QuadratureRecord};
pub use resolution::{enbw_lorentzian, resolution_metric, Resolution};
pub use welch::{heterodyne, welch_band, welch_psd, welch_real, Baseband, Window};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PsdUnits {
    /// (counts/s)²/Hz
    Rate,
    /// m²/Hz
    Displacement,
}

impl PsdUnits {
    pub fn label(self) -> &'static str {
        match self {
            PsdUnits::Rate => "counts^2/s^2/Hz",
            PsdUnits::Displacement => "m^2/Hz",
        }
    }
}

/// One-sided power spectral density estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdEstimate {
    /// Hz, strictly increasing.
    pub freqs: Vec<f64>,
    pub values: Vec<f64>,
    /// Noise-equivalent bandwidth of one analysis bin, Hz.
    pub rbw: f64,
    pub units: PsdUnits,
    pub n_averages: usize,
}

impl PsdEstimate {
    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    /// Frequency spacing of the grid.
    pub fn df(&self) -> f64 {
        if self.freqs.len() < 2 {
            return self.rbw;
        }
        (self.freqs[self.freqs.len() - 1] - self.freqs[0]) / (self.freqs.len() - 1) as f64
    }

    /// Index of the bin closest to `f`.
    pub fn index_of(&self, f: f64) -> usize {
        let i = self.freqs.partition_point(|&g| g < f);
        if i == 0 {
            0
        } else if i >= self.freqs.len() {
            self.freqs.len() - 1
        } else if (self.freqs[i] - f).abs() < (f - self.freqs[i - 1]).abs() {
            i
        } else {
            i - 1
        }
    }

    /// Rectangle-rule integral of the density over `[lo, hi]`.
    pub fn integrate(&self, lo: f64, hi: f64) -> f64 {
        let df = self.df();
        self.freqs
            .iter()
            .zip(&self.values)
            .filter(|(f, _)| **f >= lo && **f <= hi)
            .map(|(_, v)| v * df)
            .sum()
    }

    /// Converts a rate spectrum to displacement using a calibration.
    pub fn to_displacement(&self, cal: &CalibrationResult) -> PsdEstimate {
        if self.units == PsdUnits::Displacement {
            return self.clone();
        }
        PsdEstimate {
            values: self.values.iter().map(|v| v * cal.scale).collect(),
            units: PsdUnits::Displacement,
            ..self.clone()
        }
    }

    /// Sub-spectrum with `lo <= f <= hi`.
    pub fn band(&self, lo: f64, hi: f64) -> PsdEstimate {
        let (freqs, values) = self
            .freqs
            .iter()
            .zip(&self.values)
            .filter(|(f, _)| **f >= lo && **f <= hi)
            .map(|(f, v)| (*f, *v))
            .unzip();
        PsdEstimate {
            freqs,
            values,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.freqs.len() != self.values.len() {
            return Err(Error::analysis("psd", "frequency and value lengths differ"));
        }
        if self.freqs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::analysis("psd", "frequencies are not strictly increasing"));
        }
        if self.values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::analysis("psd", "negative or NaN density"));
        }
        if !(self.rbw > 0.0) {
            return Err(Error::analysis("psd", "resolution bandwidth must be > 0"));
        }
        Ok(())
    }

    /// CSV `f_hz,density,units`.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "f_hz,density,units")?;
        let unit = self.units.label();
        for (f, v) in self.freqs.iter().zip(&self.values) {
            writeln!(w, "{:.9e},{:.9e},{}", f, v, unit)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        crate::harness::io::write_atomic(path, |w| self.write_csv(w))
    }
}

/// Power of a narrow line at `f`: density above the local pedestal summed
/// over `|f' - f| <= half_width`, with the pedestal taken as the mean density
/// for `half_width < |f' - f| <= outer`. Returns `(power, pedestal)`.
pub fn line_power(psd: &PsdEstimate, f: f64, half_width: f64, outer: f64) -> (f64, f64) {
    let (mut sum, mut n) = (0.0, 0usize);
    for (g, v) in psd.freqs.iter().zip(&psd.values) {
        let d = (g - f).abs();
        if d > half_width && d <= outer {
            sum += v;
            n += 1;
        }
    }
    let pedestal = if n > 0 { sum / n as f64 } else { 0.0 };
    let df = psd.df();
    let power = psd
        .freqs
        .iter()
        .zip(&psd.values)
        .filter(|(g, _)| (**g - f).abs() <= half_width)
        .map(|(_, v)| (v - pedestal) * df)
        .sum();
    (power, pedestal)
}

/// Pairwise sum of equally long vectors in fixed index order, so the result
/// does not depend on how the inputs were produced in parallel.
pub(crate) fn tree_sum(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    if parts.is_empty() {
        return Vec::new();
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap_or_default()
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
