//! Dual-mixer homodyne demodulation of a photocount record into the slowly
//! varying quadratures X₁, X₂.
//!
//! Photons are mixed down one by one and boxcar-decimated to an intermediate
//! rate before the low-pass cascade runs, so a 20 s record costs one pass over
//! the photons plus a few million filter updates.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::filter::OnePoleCascade;
use super::welch::heterodyne;
use super::CalibrationResult;
use crate::detection::CountSeries;
use crate::error::{Error, Result};

/// Intermediate sample rate as a multiple of the filter cutoff.
const INTERMEDIATE_OVERSAMPLE: f64 = 1000.0;
const MIN_INTERMEDIATE_RATE: f64 = 5e4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub order: u32,
    /// Cumulative -3 dB frequency, Hz.
    pub cutoff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRecord {
    /// Output sample rate, Hz.
    pub fs: f64,
    pub start_time: f64,
    /// m, or (counts/s) when `calibrated` is false.
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub filter_spec: FilterSpec,
    pub calibrated: bool,
}

impl QuadratureRecord {
    pub fn len(&self) -> usize {
        self.x1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x1.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.start_time + (i + 1) as f64 / self.fs
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.x1.iter().zip(&self.x2).map(|(a, b)| a.hypot(*b)).collect()
    }

    /// Drops the first `seconds` (filter settling).
    pub fn skip(&self, seconds: f64) -> QuadratureRecord {
        let n = ((seconds * self.fs).ceil() as usize).min(self.len());
        QuadratureRecord {
            start_time: self.start_time + n as f64 / self.fs,
            x1: self.x1[n..].to_vec(),
            x2: self.x2[n..].to_vec(),
            ..self.clone()
        }
    }

    /// CSV `t_s,x1_m,x2_m`.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "t_s,x1_m,x2_m")?;
        for i in 0..self.len() {
            writeln!(w, "{:.9e},{:.9e},{:.9e}", self.time(i), self.x1[i], self.x2[i])?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        crate::harness::io::write_atomic(path, |w| self.write_csv(w))
    }
}

/// Population standard deviation.
pub fn std_dev(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
}

/// X₁ = LP[2 r cos θ], X₂ = LP[2 r sin θ] with θ = 2π f_lo t + φ, sampled at
/// `out_fs`. With a calibration the output is in meters of displacement;
/// without one it stays in rate units and `calibrated` is false.
pub fn lockin(
    series: &CountSeries,
    f_lo: f64,
    lo_phase: f64,
    filter: FilterSpec,
    out_fs: f64,
    scale: Option<&CalibrationResult>,
) -> Result<QuadratureRecord> {
    if !(f_lo > 0.0 && f_lo < 0.5 / series.bin_dt) {
        return Err(Error::config(
            "f_lo",
            format!("{f_lo} Hz must lie below the count Nyquist {} Hz", 0.5 / series.bin_dt),
        ));
    }
    if !(out_fs >= 2.0 * filter.cutoff) {
        return Err(Error::config("out_fs", "must be at least twice the filter cutoff"));
    }
    let decim = ((MIN_INTERMEDIATE_RATE.max(INTERMEDIATE_OVERSAMPLE * filter.cutoff)) / out_fs)
        .ceil()
        .max(1.0) as usize;
    let fs_bb = out_fs * decim as f64;
    if fs_bb > 0.5 / series.bin_dt {
        return Err(Error::config("out_fs", "intermediate rate exceeds the count bin rate"));
    }
    let bb = heterodyne(series, f_lo, fs_bb)?;
    let mut re = OnePoleCascade::new(filter.order, filter.cutoff, fs_bb)?;
    let mut im = OnePoleCascade::new(filter.order, filter.cutoff, fs_bb)?;

    let gain = match scale {
        Some(cal) => cal.scale.sqrt(),
        None => 1.0,
    };
    let rot = Complex64::from_polar(1.0, -lo_phase);
    let n_out = bb.samples.len() / decim;
    let mut x1 = Vec::with_capacity(n_out);
    let mut x2 = Vec::with_capacity(n_out);
    for (i, z) in bb.samples.iter().take(n_out * decim).enumerate() {
        // z = r e^{-i 2π f t}; multiplying by e^{-iφ} gives r e^{-iθ}
        let w = z * rot;
        let a = re.push(w.re);
        let b = im.push(w.im);
        if (i + 1) % decim == 0 {
            x1.push(2.0 * a * gain);
            x2.push(-2.0 * b * gain);
        }
    }
    Ok(QuadratureRecord {
        fs: out_fs,
        start_time: series.start_time,
        x1,
        x2,
        filter_spec: filter,
        calibrated: scale.is_some(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    /// Count series whose rate is `i0 + g·a·cos(2π f t + ψ)`, rounded to
    /// integers with uniform dither so the rounding error carries no tone.
    fn coherent_series(i0: f64, ga: f64, f: f64, psi: f64, duration: f64) -> CountSeries {
        use rand::{Rng, SeedableRng};
        let bin = 1e-7;
        let n = (duration / bin) as usize;
        let mut rng = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(1);
        let counts: Vec<u32> = (0..n)
            .map(|i| {
                let t = (i as f64 + 0.5) * bin;
                let mu = (i0 + ga * (2.0 * PI * f * t + psi).cos()) * bin;
                (mu + rng.gen::<f64>()).floor() as u32
            })
            .collect();
        CountSeries::from_counts(bin, 0.0, &counts).unwrap()
    }

    #[test]
    fn magnitude_recovers_amplitude_for_any_phase() {
        let g = 5e7 / 100e-9; // rate per meter
        let a = 30e-9;
        let cal = CalibrationResult {
            scale: 1.0 / (g * g),
            drive_to_amplitude: 0.0,
            residual: 0.0,
        };
        let spec = FilterSpec { order: 4, cutoff: 30.0 };
        let mut mags = Vec::new();
        for psi in [0.0, 0.7, 2.0, -2.9] {
            let s = coherent_series(1e9, g * a, 123_000.0, psi, 0.3);
            let q = lockin(&s, 123_000.0, 0.0, spec, 2500.0, Some(&cal)).unwrap().skip(0.15);
            let m = q.magnitude();
            let mean = m.iter().sum::<f64>() / m.len() as f64;
            assert!((mean / a - 1.0).abs() < 0.01, "psi {psi}: {mean}");
            let x1 = q.x1.iter().sum::<f64>() / q.len() as f64;
            assert!((x1 - a * psi.cos()).abs() < 0.01 * a, "{x1}");
            mags.push(mean);
        }
        let lo = mags.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = mags.iter().cloned().fold(0.0, f64::max);
        assert!(hi / lo - 1.0 < 1e-3, "{mags:?}");
    }

    #[test]
    fn raw_output_is_flagged() {
        let s = coherent_series(1e6, 1e5, 50_000.0, 0.0, 0.05);
        let spec = FilterSpec { order: 2, cutoff: 100.0 };
        let q = lockin(&s, 50_000.0, 0.0, spec, 1000.0, None).unwrap();
        assert!(!q.calibrated);
        assert_eq!(q.x1.len(), q.x2.len());
        let mut buf = Vec::new();
        q.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t_s,x1_m,x2_m\n"));
    }

    #[test]
    fn rejects_bad_rates() {
        let s = coherent_series(1e6, 0.0, 1.0, 0.0, 0.01);
        let spec = FilterSpec { order: 4, cutoff: 30.0 };
        assert!(lockin(&s, 6e6, 0.0, spec, 2500.0, None).is_err());
        assert!(lockin(&s, 1e5, 0.0, spec, 50.0, None).is_err());
    }
}
