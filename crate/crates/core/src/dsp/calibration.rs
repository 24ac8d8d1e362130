//! Displacement calibration from a coherent drive tone.
//!
//! A coherent oscillation of amplitude `a` washes out the time-averaged
//! fringe contrast as `V0·J0(κ a)` with κ = 2k cosΘ. Fitting the contrast at
//! several drive levels gives meters per drive unit; the tone's area in the
//! raw spectrum must then equal `a²/2`, which fixes the PSD scale.

use serde::{Deserialize, Serialize};

use super::PsdEstimate;
use crate::consts::bessel_j0;
use crate::detection::DetectionParams;
use crate::error::{Error, Result};

const MAX_CONTRAST_RESIDUAL: f64 = 0.10;
/// Half-width of the tone integration window, in units of rbw.
const TONE_HALF_WIDTH: f64 = 3.0;
/// Outer edge of the side bands used for the local floor, in units of rbw.
const FLOOR_OUTER: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationTone {
    /// Hz
    pub frequency: f64,
    /// Drive units (N for a force drive).
    pub drive_amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastPoint {
    pub drive_amplitude: f64,
    pub contrast: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// m²/Hz per raw PSD unit.
    pub scale: f64,
    /// Motional amplitude per drive unit, m.
    pub drive_to_amplitude: f64,
    /// RMS relative residual of the contrast fit.
    pub residual: f64,
}

impl CalibrationResult {
    /// Scale implied by the detection model alone, `1/(I0 V κ)²`.
    pub fn from_model(det: &DetectionParams) -> Result<Self> {
        let g = det.transduction_gain();
        if !(g > 0.0) {
            return Err(Error::InfiniteFloor("transduction gain is zero"));
        }
        Ok(CalibrationResult {
            scale: 1.0 / (g * g),
            drive_to_amplitude: 0.0,
            residual: 0.0,
        })
    }
}

/// Least-squares fit of `V0 J0(κ g d)`; returns `(g, V0, rms relative residual)`.
pub(crate) fn fit_contrast(points: &[ContrastPoint], kappa: f64) -> Result<(f64, f64, f64)> {
    let d_max = points.iter().map(|p| p.drive_amplitude).fold(0.0, f64::max);
    let nonzero: Vec<f64> = points
        .iter()
        .map(|p| p.drive_amplitude)
        .filter(|d| *d > 0.0)
        .collect();
    let d_min = nonzero.iter().cloned().fold(f64::INFINITY, f64::min);
    if points.len() < 3 || nonzero.is_empty() || d_max < 2.0 * d_min {
        return Err(Error::Calibration(
            "need at least 3 contrast measurements spanning a 2x drive range".into(),
        ));
    }
    if points.iter().any(|p| !(p.contrast > 0.0) || p.drive_amplitude < 0.0) {
        return Err(Error::Calibration("contrasts must be positive".into()));
    }
    // V0 is linear: weighted least squares for fixed g
    let cost = |g: f64| {
        let b: Vec<f64> = points.iter().map(|p| bessel_j0(kappa * g * p.drive_amplitude)).collect();
        let (mut num, mut den) = (0.0, 0.0);
        for (p, bi) in points.iter().zip(&b) {
            num += bi / p.contrast;
            den += bi * bi / (p.contrast * p.contrast);
        }
        let v0 = num / den;
        let ss: f64 = points
            .iter()
            .zip(&b)
            .map(|(p, bi)| ((p.contrast - v0 * bi) / p.contrast).powi(2))
            .sum();
        (ss, v0)
    };
    // stay below the first zero of J0 at the largest drive
    let g_hi = 2.404 / (kappa * d_max);
    let n = 4000;
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..=n {
        let g = g_hi * i as f64 / n as f64;
        let c = cost(g).0;
        if c < best.0 {
            best = (c, g);
        }
    }
    let step = g_hi / n as f64;
    let (mut lo, mut hi) = ((best.1 - step).max(0.0), (best.1 + step).min(g_hi));
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..100 {
        let a = hi - phi * (hi - lo);
        let b = lo + phi * (hi - lo);
        if cost(a).0 < cost(b).0 {
            hi = b;
        } else {
            lo = a;
        }
    }
    let g = 0.5 * (lo + hi);
    let (ss, v0) = cost(g);
    Ok((g, v0, (ss / points.len() as f64).sqrt()))
}

/// Tone power above the local floor in a raw spectrum.
pub(crate) fn tone_area(psd: &PsdEstimate, frequency: f64) -> Result<f64> {
    let w = TONE_HALF_WIDTH * psd.rbw;
    let outer = FLOOR_OUTER * psd.rbw;
    if frequency - outer < psd.freqs[0] || frequency + outer > psd.freqs[psd.len() - 1] {
        return Err(Error::Calibration(format!(
            "tone at {frequency} Hz is too close to the edge of the spectrum"
        )));
    }
    let (area, floor) = super::line_power(psd, frequency, w, outer);
    let noise = floor * psd.df() * psd.freqs.iter().filter(|f| (**f - frequency).abs() <= w).count() as f64;
    // tone must stand well clear of the floor fluctuation in the window
    let sigma = noise / (psd.n_averages.max(1) as f64).sqrt();
    if !(area > 5.0 * sigma) {
        return Err(Error::Calibration(format!(
            "drive tone at {frequency} Hz not resolved (area {area:.3e}, noise {sigma:.3e})"
        )));
    }
    Ok(area)
}

/// Calibrates a raw rate spectrum containing the drive tone into m²/Hz.
pub fn calibrate_displacement(
    psd_with_drive: &PsdEstimate,
    tone: &CalibrationTone,
    contrast_measurements: &[ContrastPoint],
    det: &DetectionParams,
) -> Result<CalibrationResult> {
    psd_with_drive.validate()?;
    let (g, _v0, residual) = fit_contrast(contrast_measurements, det.fringe_slope())?;
    if residual > MAX_CONTRAST_RESIDUAL {
        return Err(Error::Calibration(format!(
            "contrast fit residual {:.1}% exceeds {:.0}%",
            100.0 * residual,
            100.0 * MAX_CONTRAST_RESIDUAL
        )));
    }
    let a = g * tone.drive_amplitude;
    let area = tone_area(psd_with_drive, tone.frequency)?;
    Ok(CalibrationResult {
        scale: 0.5 * a * a / area,
        drive_to_amplitude: g,
        residual,
    })
}
