//! Interferometric photodetection: ion displacement modulates the scattered
//! fluorescence through the ion-mirror fringe, and the detector records a
//! shot-noise-limited photocount stream.
//!
//! Counts are generated by time rescaling of an inhomogeneous Poisson
//! process: the integrated rate is accumulated step by step and a photon is
//! emitted each time it crosses the next unit-exponential threshold. The
//! count in any bin is therefore exactly Poisson with mean equal to the
//! integrated rate over that bin, and only one random draw is spent per
//! photon.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::Exp1;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oscillator::{IonParams, Trajectory};

pub(crate) const DETECTION_STREAM: u64 = 0x7068_6f74_6f6e_7321;

/// How displacement maps to scattering rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transduction {
    /// `I0 (1 + 2 V k x cosΘ)`, clipped at zero rate.
    #[default]
    Linearized,
    /// `I0 (1 + V sin(2 k x cosΘ))`.
    Sine,
}

/// Photodetection channel parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionParams {
    /// Mean detected fluorescence rate, counts/s.
    pub i0: f64,
    /// Fringe visibility.
    pub visibility: f64,
    /// Angle between trap axis and optical axis, rad.
    pub theta: f64,
    /// m
    pub wavelength: f64,
    pub transduction: Transduction,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            // Small-signal floor 1/(2 I0 V²k²cos²Θ) is 0.927 nm²/Hz. At the
            // default 51 nm thermal amplitude the clipped fringe passes a
            // 25 nm calibration tone with gain 0.963, so the tone-calibrated
            // floor comes out at 1.0 nm²/Hz.
            i0: 1.894e4,
            visibility: 0.73,
            theta: 55f64.to_radians(),
            wavelength: 493e-9,
            transduction: Transduction::Linearized,
        }
    }
}

impl DetectionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.i0 >= 0.0 && self.i0.is_finite()) {
            return Err(Error::config("detection.i0", "must be >= 0 and finite"));
        }
        if !(0.0..=1.0).contains(&self.visibility) {
            return Err(Error::config("detection.visibility", "must lie in [0, 1]"));
        }
        if !(self.theta >= 0.0 && self.theta < PI / 2.0) {
            return Err(Error::config("detection.theta", "must lie in [0, π/2)"));
        }
        if !(self.wavelength > 0.0 && self.wavelength.is_finite()) {
            return Err(Error::config("detection.wavelength", "must be > 0"));
        }
        Ok(())
    }

    pub fn wavevector(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    /// Fringe phase per unit displacement, `2 k cosΘ`, rad/m.
    pub fn fringe_slope(&self) -> f64 {
        2.0 * self.wavevector() * self.theta.cos()
    }

    /// Small-signal rate change per metre, `2 I0 V k cosΘ`, counts/s/m.
    pub fn transduction_gain(&self) -> f64 {
        self.i0 * self.visibility * self.fringe_slope()
    }

    #[inline(always)]
    fn rate_and_slope(&self, x: f64) -> (f64, f64) {
        let kappa = self.fringe_slope();
        match self.transduction {
            Transduction::Linearized => {
                let r = self.i0 * (1.0 + self.visibility * kappa * x);
                if r > 0.0 {
                    (r, self.i0 * self.visibility * kappa)
                } else {
                    (0.0, 0.0)
                }
            }
            Transduction::Sine => {
                let (s, c) = (kappa * x).sin_cos();
                (
                    self.i0 * (1.0 + self.visibility * s),
                    self.i0 * self.visibility * kappa * c,
                )
            }
        }
    }
}

/// Full fringe response `I0 [1 + V sin(2 k x cosΘ)]`, counts/s.
pub fn scattering_rate(x: f64, params: &DetectionParams) -> f64 {
    params.i0 * (1.0 + params.visibility * (params.fringe_slope() * x).sin())
}

/// Lamb-Dicke linearization `I0 (1 + 2 V k x cosΘ)`, counts/s. Not clipped;
/// meaningful while `|2 k x cosΘ|` is well below one.
pub fn linearized_rate(x: f64, params: &DetectionParams) -> f64 {
    params.i0 * (1.0 + params.visibility * params.fringe_slope() * x)
}

/// Fringe phase above which [`linearized_rate`] should not be trusted.
pub const LINEARIZATION_WARN_PHASE: f64 = 0.3;

pub fn linearization_is_valid(x: f64, params: &DetectionParams) -> bool {
    (params.fringe_slope() * x).abs() <= LINEARIZATION_WARN_PHASE
}

/// Uniformly binned photocounts, stored sparsely as one bin index per
/// detected photon (indices are non-decreasing).
#[derive(Debug, Clone, PartialEq)]
pub struct CountSeries {
    pub bin_dt: f64,
    pub start_time: f64,
    pub n_bins: u64,
    events: Vec<u64>,
    /// Exact arrival times, when recorded.
    timestamps: Option<Vec<f64>>,
}

impl CountSeries {
    pub fn new(bin_dt: f64, start_time: f64, n_bins: u64) -> Result<Self> {
        if !(bin_dt > 0.0 && bin_dt.is_finite()) {
            return Err(Error::config("bin_dt", "must be > 0"));
        }
        Ok(Self {
            bin_dt,
            start_time,
            n_bins,
            events: Vec::new(),
            timestamps: None,
        })
    }

    /// Builds a series from dense per-bin counts.
    pub fn from_counts(bin_dt: f64, start_time: f64, counts: &[u32]) -> Result<Self> {
        let mut s = Self::new(bin_dt, start_time, counts.len() as u64)?;
        for (i, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                s.events.push(i as u64);
            }
        }
        Ok(s)
    }

    /// Bins photon arrival times; times outside the record are dropped.
    pub fn from_timestamps(
        bin_dt: f64,
        start_time: f64,
        duration: f64,
        times: &[f64],
    ) -> Result<Self> {
        let n_bins = (duration / bin_dt).round() as u64;
        let mut s = Self::new(bin_dt, start_time, n_bins)?;
        let mut kept = Vec::with_capacity(times.len());
        for &t in times {
            let b = ((t - start_time) / bin_dt).floor();
            if b >= 0.0 && (b as u64) < n_bins {
                kept.push(t);
            }
        }
        kept.sort_by(f64::total_cmp);
        s.events = kept
            .iter()
            .map(|&t| ((t - start_time) / bin_dt).floor() as u64)
            .collect();
        s.timestamps = Some(kept);
        Ok(s)
    }

    pub(crate) fn push_photon(&mut self, t: f64) {
        let b = (((t - self.start_time) / self.bin_dt) as u64).min(self.n_bins.saturating_sub(1));
        self.events.push(b);
        if let Some(ts) = self.timestamps.as_mut() {
            ts.push(t);
        }
    }

    pub(crate) fn record_timestamps(&mut self) {
        self.timestamps.get_or_insert_with(Vec::new);
    }

    pub fn duration(&self) -> f64 {
        self.n_bins as f64 * self.bin_dt
    }

    pub fn total_counts(&self) -> u64 {
        self.events.len() as u64
    }

    /// Bin index of every photon, in time order.
    pub fn events(&self) -> &[u64] {
        &self.events
    }

    pub fn timestamps(&self) -> Option<&[f64]> {
        self.timestamps.as_deref()
    }

    pub fn mean_rate(&self) -> f64 {
        self.total_counts() as f64 / self.duration()
    }

    /// Centre time of bin `b`.
    #[inline(always)]
    pub fn bin_center(&self, b: u64) -> f64 {
        self.start_time + (b as f64 + 0.5) * self.bin_dt
    }

    /// Non-empty bins as `(bin, count)`.
    pub fn nonzero_bins(&self) -> impl Iterator<Item = (u64, u32)> + '_ {
        let mut i = 0;
        std::iter::from_fn(move || {
            let b = *self.events.get(i)?;
            let mut n = 0;
            while i < self.events.len() && self.events[i] == b {
                n += 1;
                i += 1;
            }
            Some((b, n))
        })
    }

    /// Dense per-bin counts. Intended for short records.
    pub fn to_dense(&self) -> Vec<u32> {
        let mut out = vec![0u32; self.n_bins as usize];
        for &b in &self.events {
            out[b as usize] += 1;
        }
        out
    }

    /// Count rate per bin (counts / bin_dt), counts/s.
    pub fn rates(&self) -> Vec<f64> {
        let inv = 1.0 / self.bin_dt;
        self.to_dense().into_iter().map(|c| c as f64 * inv).collect()
    }

    /// Sub-record `[first_bin, first_bin + n_bins)`.
    pub fn slice(&self, first_bin: u64, n_bins: u64) -> CountSeries {
        let end = first_bin + n_bins;
        let lo = self.events.partition_point(|&b| b < first_bin);
        let hi = self.events.partition_point(|&b| b < end);
        CountSeries {
            bin_dt: self.bin_dt,
            start_time: self.start_time + first_bin as f64 * self.bin_dt,
            n_bins,
            events: self.events[lo..hi].iter().map(|b| b - first_bin).collect(),
            timestamps: self.timestamps.as_ref().map(|ts| ts[lo..hi].to_vec()),
        }
    }

    /// Merges groups of `factor` bins.
    pub fn rebin(&self, factor: u64) -> CountSeries {
        let factor = factor.max(1);
        CountSeries {
            bin_dt: self.bin_dt * factor as f64,
            start_time: self.start_time,
            n_bins: self.n_bins / factor,
            events: self
                .events
                .iter()
                .map(|b| b / factor)
                .filter(|&b| b < self.n_bins / factor)
                .collect(),
            timestamps: None,
        }
    }

    /// CSV `t_s,counts`, one row per non-empty bin (bin centre time).
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "t_s,counts")?;
        for (b, n) in self.nonzero_bins() {
            writeln!(w, "{:.12e},{}", self.bin_center(b), n)?;
        }
        Ok(())
    }

    /// One arrival time per row in seconds, 12 significant digits. Falls back
    /// to bin centres when exact times were not recorded.
    pub fn write_timestamps_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        match &self.timestamps {
            Some(ts) => {
                for t in ts {
                    writeln!(w, "{:.11e}", t)?;
                }
            }
            None => {
                for &b in &self.events {
                    writeln!(w, "{:.11e}", self.bin_center(b))?;
                }
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        crate::harness::io::write_atomic(path, |w| self.write_csv(w))
    }
}

/// Streaming photon generator fed with successive `(x, dx/dt)` samples.
pub(crate) struct PhotonSampler {
    det: DetectionParams,
    rng: Xoshiro256PlusPlus,
    threshold: f64,
    prev: Option<(f64, f64, f64)>,
}

impl PhotonSampler {
    pub(crate) fn new(det: DetectionParams, seed: u64) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ DETECTION_STREAM);
        let threshold = rng.sample(Exp1);
        Self {
            det,
            rng,
            threshold,
            prev: None,
        }
    }

    /// Feeds the sample at time `t`. Photons emitted in the interval since
    /// the previous sample are reported through `emit`.
    #[inline(always)]
    pub(crate) fn push(&mut self, t: f64, x: f64, v: f64, mut emit: impl FnMut(f64)) {
        let (r, dr) = self.det.rate_and_slope(x);
        let slope = dr * v;
        if let Some((t0, r0, s0)) = self.prev {
            let h = t - t0;
            // cubic Hermite quadrature of the rate over the step
            let area = (0.5 * h * (r0 + r) + h * h * (s0 - slope) / 12.0).max(0.0);
            let mut used = 0.0;
            while self.threshold <= area - used {
                used += self.threshold;
                emit(t0 + h * used / area);
                self.threshold = self.rng.sample(Exp1);
            }
            self.threshold -= area - used;
        }
        self.prev = Some((t, r, slope));
    }
}

/// Draws a photocount record for a stored trajectory. Bins must be an
/// integer multiple of the trajectory step.
pub fn sample_counts(
    trajectory: &Trajectory,
    params: &DetectionParams,
    bin_dt: f64,
    seed: u64,
) -> Result<CountSeries> {
    params.validate()?;
    let ratio = bin_dt / trajectory.dt;
    if !(ratio >= 1.0 - 1e-9) || (ratio - ratio.round()).abs() > 1e-6 * ratio {
        return Err(Error::config(
            "bin_dt",
            format!(
                "{bin_dt:e} s must be an integer multiple (>= 1) of the trajectory step {:e} s",
                trajectory.dt
            ),
        ));
    }
    let n_bins = trajectory.len() as u64 / ratio.round() as u64;
    let mut series = CountSeries::new(bin_dt, trajectory.start_time, n_bins)?;
    let xs = &trajectory.x_samples;
    let mut sampler = PhotonSampler::new(*params, seed);
    let inv2dt = 0.5 / trajectory.dt;
    let end = series.start_time + series.duration();
    for i in 0..xs.len() {
        let v = match (i.checked_sub(1), xs.get(i + 1)) {
            (Some(a), Some(b)) => (b - xs[a]) * inv2dt,
            (None, Some(b)) => (b - xs[i]) * 2.0 * inv2dt,
            (Some(a), None) => (xs[i] - xs[a]) * 2.0 * inv2dt,
            (None, None) => 0.0,
        };
        sampler.push(trajectory.time(i), xs[i], v, |t| {
            if t < end {
                series.push_photon(t)
            }
        });
    }
    Ok(series)
}

/// Time-averaged fringe contrast seen while the mirror is scanned across
/// the fringes: `V |⟨exp(i 2 k x cosΘ)⟩|`.
#[derive(Debug, Clone, Default)]
pub struct FringeContrastMeter {
    sum_cos: f64,
    sum_sin: f64,
    n: u64,
}

impl FringeContrastMeter {
    #[inline]
    pub fn push(&mut self, x: f64, det: &DetectionParams) {
        let (s, c) = (det.fringe_slope() * x).sin_cos();
        self.sum_cos += c;
        self.sum_sin += s;
        self.n += 1;
    }

    pub fn contrast(&self, det: &DetectionParams) -> f64 {
        if self.n == 0 {
            return det.visibility;
        }
        let n = self.n as f64;
        det.visibility * ((self.sum_cos / n).powi(2) + (self.sum_sin / n).powi(2)).sqrt()
    }
}

pub fn fringe_contrast(trajectory: &Trajectory, det: &DetectionParams) -> f64 {
    let mut m = FringeContrastMeter::default();
    for &x in &trajectory.x_samples {
        m.push(x, det);
    }
    m.contrast(det)
}

/// One-sided photocount-rate spectrum, (counts/s)²/Hz, excluding the DC
/// delta: Poisson floor `2 I0` plus the motional term
/// `4 I0² V² k² cos²Θ S_x(f)`.
pub fn photocurrent_psd_model(ion: &IonParams, det: &DetectionParams, f: f64) -> f64 {
    shot_floor_rate_density(det)
        + det.transduction_gain().powi(2) * crate::oscillator::analytic_psd(ion, f)
}

/// One-sided shot-noise density of the count rate, `2 I0`.
pub fn shot_floor_rate_density(det: &DetectionParams) -> f64 {
    2.0 * det.i0
}

/// Shot floor expressed as displacement, `2 I0 / (2 I0 V k cosΘ)²`
/// = `1 / (2 I0 V² k² cos²Θ)`, m²/Hz.
pub fn shot_floor_displacement_density(det: &DetectionParams) -> Result<f64> {
    if det.i0 <= 0.0 {
        return Err(Error::InfiniteFloor("mean count rate is zero"));
    }
    if det.visibility <= 0.0 {
        return Err(Error::InfiniteFloor("fringe visibility is zero"));
    }
    Ok(shot_floor_rate_density(det) / det.transduction_gain().powi(2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oscillator::{simulate, DriveSignal};

    fn det() -> DetectionParams {
        DetectionParams::default()
    }

    #[test]
    fn fringe_midpoint_and_extremum() {
        let d = det();
        assert_eq!(scattering_rate(0.0, &d), d.i0);
        let x_max = PI / (4.0 * d.wavevector() * d.theta.cos());
        assert!((x_max - 107.4e-9).abs() < 0.1e-9, "{x_max:e}");
        let r = scattering_rate(x_max, &d);
        assert!((r - d.i0 * (1.0 + d.visibility)).abs() < 1e-9 * d.i0);
        let flat = DetectionParams {
            visibility: 0.0,
            ..d
        };
        assert_eq!(scattering_rate(3e-8, &flat), flat.i0);
        assert_eq!(linearized_rate(0.0, &d), d.i0);
    }

    #[test]
    fn linearization_remainder_bound() {
        let d = det();
        let kappa = d.fringe_slope();
        for &x in &[1e-9, 10e-9, 51e-9, -51e-9, 80e-9] {
            let diff = (linearized_rate(x, &d) - scattering_rate(x, &d)).abs();
            let bound = d.i0 * d.visibility * (kappa * x).abs().powi(3) / 6.0;
            assert!(diff <= bound * (1.0 + 1e-12), "x = {x:e}");
        }
        // the fringe phase at 51 nm is 0.746 rad, so the deviation is ~3.3 %
        let rel = (linearized_rate(51e-9, &d) / scattering_rate(51e-9, &d)) - 1.0;
        assert!((rel - 0.0328).abs() < 0.001, "{rel}");
        assert!(linearization_is_valid(10e-9, &d));
        assert!(!linearization_is_valid(51e-9, &d));
    }

    #[test]
    fn small_signal_gradient() {
        // 2 I0 V k cosΘ with I0 = 8.8e3 counts/s
        let d = DetectionParams { i0: 8.8e3, ..det() };
        let per_pm = d.transduction_gain() * 1e-12;
        assert!((per_pm - 9.39e-2).abs() < 0.005e-2, "{per_pm}");
        let h = 1e-13;
        let fd = (scattering_rate(h, &d) - scattering_rate(-h, &d)) / (2.0 * h);
        assert!((fd / d.transduction_gain() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shot_floor_values() {
        let d = det();
        let floor = shot_floor_displacement_density(&d).unwrap();
        assert!((floor / 0.9270e-18 - 1.0).abs() < 0.001, "{floor:e}");
        let bright = DetectionParams { i0: 4.0 * d.i0, ..d };
        let f4 = shot_floor_displacement_density(&bright).unwrap();
        assert!((f4 / (floor / 4.0) - 1.0).abs() < 1e-12);
        let aligned = DetectionParams { theta: 0.0, ..d };
        let ratio = shot_floor_displacement_density(&aligned).unwrap() / floor;
        assert!((ratio - 0.329).abs() < 0.001, "{ratio}");
        assert!(matches!(
            shot_floor_displacement_density(&DetectionParams { i0: 0.0, ..d }),
            Err(Error::InfiniteFloor(_))
        ));
        assert!(shot_floor_displacement_density(&DetectionParams {
            visibility: 0.0,
            ..d
        })
        .is_err());
    }

    #[test]
    fn psd_model_structure() {
        let ion = IonParams::default();
        let d = det();
        let flat = DetectionParams {
            visibility: 0.0,
            ..d
        };
        for f in [1e3, ion.f0(), 3e6] {
            assert_eq!(photocurrent_psd_model(&ion, &flat, f), 2.0 * d.i0);
        }
        let g2 = d.transduction_gain().powi(2);
        let far = photocurrent_psd_model(&ion, &d, 0.5 * ion.f0());
        assert!(((far / g2) / 0.9270e-18 - 1.0).abs() < 0.001);
        let peak = photocurrent_psd_model(&ion, &d, ion.f0());
        let floor = shot_floor_rate_density(&d);
        let expected = floor * (1.0 + crate::oscillator::analytic_psd(&ion, ion.f0()) / (floor / g2));
        assert!((peak / expected - 1.0).abs() < 1e-12);
        assert!((peak / floor - (1.0 + 4.36 / 0.927)).abs() < 0.05);
    }

    #[test]
    fn poisson_statistics_for_static_ion() {
        let traj = Trajectory {
            dt: 1e-3,
            x_samples: vec![0.0; 1_000_001],
            start_time: 0.0,
            seed: 0,
        };
        let d = DetectionParams { i0: 1e4, ..det() };
        let s = sample_counts(&traj, &d, 1e-3, 9).unwrap();
        let c = s.to_dense();
        let n = 1_000_000usize;
        let mean = c[..n].iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = c[..n].iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 10.0).abs() < 0.03, "{mean}");
        let fano = var / mean;
        assert!((0.99..=1.01).contains(&fano), "{fano}");
    }

    #[test]
    fn zero_visibility_ignores_motion() {
        let ion = IonParams::default();
        let traj = simulate(&ion, &DriveSignal::None, None, 0.05, 4e-8, 4).unwrap();
        let still = Trajectory {
            x_samples: vec![0.0; traj.len()],
            ..traj.clone()
        };
        let d = DetectionParams {
            visibility: 0.0,
            ..det()
        };
        let a = sample_counts(&traj, &d, 4e-8, 11).unwrap();
        let b = sample_counts(&still, &d, 4e-8, 11).unwrap();
        // with V = 0 the rate does not depend on x, so the draws coincide
        assert_eq!(a.events(), b.events());
    }

    #[test]
    fn rejects_incompatible_bins() {
        let traj = Trajectory {
            dt: 4e-8,
            x_samples: vec![0.0; 100],
            start_time: 0.0,
            seed: 0,
        };
        assert!(sample_counts(&traj, &det(), 6e-8, 1).is_err());
        assert!(sample_counts(&traj, &det(), 2e-8, 1).is_err());
        assert!(sample_counts(&traj, &det(), 8e-8, 1).is_ok());
    }

    #[test]
    fn rate_bounds_for_sine_transduction() {
        let ion = IonParams::default();
        let traj = simulate(&ion, &DriveSignal::None, None, 0.02, 4e-8, 8).unwrap();
        let d = DetectionParams {
            transduction: Transduction::Sine,
            ..det()
        };
        for &x in &traj.x_samples {
            let (r, _) = d.rate_and_slope(x);
            assert!(r >= d.i0 * (1.0 - d.visibility) - 1e-9);
            assert!(r <= d.i0 * (1.0 + d.visibility) + 1e-9);
        }
    }

    #[test]
    fn count_series_helpers() {
        let s = CountSeries::from_counts(1.0, 0.0, &[0, 2, 0, 1, 3]).unwrap();
        assert_eq!(s.total_counts(), 6);
        assert_eq!(s.nonzero_bins().collect::<Vec<_>>(), vec![(1, 2), (3, 1), (4, 3)]);
        assert_eq!(s.slice(1, 3).to_dense(), vec![2, 0, 1]);
        assert_eq!(s.rebin(2).to_dense(), vec![2, 1]);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t_s,counts\n1.5"));
        let t = CountSeries::from_timestamps(0.5, 0.0, 2.0, &[1.9, 0.1, 0.7, 5.0]).unwrap();
        assert_eq!(t.to_dense(), vec![1, 1, 0, 1]);
        let mut buf = Vec::new();
        t.write_timestamps_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "1.00000000000e-1\n7.00000000000e-1\n1.90000000000e0\n"
        );
    }

    #[test]
    fn contrast_of_coherent_motion_follows_bessel() {
        let d = det();
        let a = PI / (2.0 * d.fringe_slope());
        let n = 100_000;
        let mut m = FringeContrastMeter::default();
        for i in 0..n {
            m.push(a * (2.0 * PI * i as f64 / 997.0).cos(), &d);
        }
        let ratio = m.contrast(&d) / d.visibility;
        assert!((ratio - crate::consts::bessel_j0(PI / 2.0)).abs() < 1e-3);
        assert!((ratio - 0.472).abs() < 1e-3);
    }
}
