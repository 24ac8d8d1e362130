//! Phase locking of the ion's oscillation to a reference by steering the trap
//! frequency: reference generators, the phase detector, the loop itself and
//! the spectral figures of merit of a locked record.
//!
//! The ion plays the voltage-controlled oscillator. The detector mixes the
//! photocount rate with `2 sin θ_ref`, which for an ion moving as
//! `a cos(θ_ref − δ)` averages to `a sin δ` once converted to meters. A
//! positive error (ion lagging) raises the trap frequency.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::{CountSeries, DetectionParams};
use crate::dsp::{
    line_power, lockin, lorentzian_equivalent_cutoff, welch_band, CalibrationResult, FilterSpec,
    OnePoleCascade, PsdEstimate, QuadratureRecord, Window,
};
use crate::error::{Error, Result};
use crate::oscillator::{DriveSignal, IonParams};
use crate::pipeline::{self, multiple_of, MotionStats, PipelineConfig, TrapController};

/// Proportional gain used when a scenario does not set one, rad/s of trap
/// frequency shift per meter of filtered error.
pub const DEFAULT_GAIN: f64 = 8.0e10;
/// Output rate of the decimated loop signals and quadratures, Hz.
pub const RECORD_RATE: f64 = 2500.0;
const SATURATION_WINDOW: f64 = 1.0;
const SATURATION_DUTY_LIMIT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSignal {
    Sine {
        /// Hz
        frequency: f64,
        #[serde(default)]
        phase0: f64,
    },
    Fm {
        /// Hz
        carrier: f64,
        /// Hz
        mod_freq: f64,
        index: f64,
        #[serde(default)]
        phase0: f64,
    },
}

impl Default for ReferenceSignal {
    fn default() -> Self {
        ReferenceSignal::Sine {
            frequency: IonParams::default().f0(),
            phase0: 0.0,
        }
    }
}

impl ReferenceSignal {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ReferenceSignal::Sine { frequency, phase0 } => {
                if !(frequency > 0.0) || !phase0.is_finite() {
                    return Err(Error::config("reference.frequency", "must be > 0"));
                }
            }
            ReferenceSignal::Fm {
                carrier,
                mod_freq,
                index,
                phase0,
            } => {
                if !(carrier > 0.0 && mod_freq > 0.0) || !phase0.is_finite() {
                    return Err(Error::config("reference", "frequencies must be > 0"));
                }
                if !(index >= 0.0 && index.is_finite()) {
                    return Err(Error::config("reference.index", "must be >= 0"));
                }
            }
        }
        Ok(())
    }

    /// Carrier frequency, Hz.
    pub fn carrier(&self) -> f64 {
        match *self {
            ReferenceSignal::Sine { frequency, .. } => frequency,
            ReferenceSignal::Fm { carrier, .. } => carrier,
        }
    }

    pub fn phase0(&self) -> f64 {
        match *self {
            ReferenceSignal::Sine { phase0, .. } | ReferenceSignal::Fm { phase0, .. } => phase0,
        }
    }

    /// Instantaneous phase, rad, reduced so that it stays accurate for long
    /// records.
    #[inline]
    pub fn phase(&self, t: f64) -> f64 {
        use std::f64::consts::TAU;
        match *self {
            ReferenceSignal::Sine { frequency, phase0 } => TAU * (frequency * t).fract() + phase0,
            ReferenceSignal::Fm {
                carrier,
                mod_freq,
                index,
                phase0,
            } => {
                TAU * (carrier * t).fract() + index * (TAU * (mod_freq * t).fract()).sin() + phase0
            }
        }
    }
}

/// Unit-amplitude reference, `cos(phase(t))`.
pub fn reference_value(reference: &ReferenceSignal, t: f64) -> f64 {
    reference.phase(t).cos()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub reference: ReferenceSignal,
    /// Cumulative -3 dB frequency of the loop filter, Hz.
    pub loop_cutoff: f64,
    pub loop_order: u32,
    /// rad/s per meter.
    pub gain: f64,
    /// Integral gain, rad/s per meter per second. Zero disables it.
    pub integral_gain: f64,
    /// Largest trap-frequency excursion from ω₀, rad/s.
    pub actuator_limit: f64,
    /// s
    pub update_dt: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            reference: ReferenceSignal::default(),
            loop_cutoff: 300.0,
            loop_order: 1,
            gain: DEFAULT_GAIN,
            integral_gain: 0.0,
            actuator_limit: std::f64::consts::TAU * 5e3,
            update_dt: 4e-7,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        self.reference.validate()?;
        if !(self.loop_cutoff > 0.0) || self.loop_order == 0 {
            return Err(Error::config("loop.loop_cutoff", "need cutoff > 0 and order >= 1"));
        }
        if !self.gain.is_finite() || !self.integral_gain.is_finite() {
            return Err(Error::config("loop.gain", "must be finite"));
        }
        if !(self.actuator_limit > 0.0) {
            return Err(Error::config("loop.actuator_limit", "must be > 0"));
        }
        if !(self.update_dt > 0.0) || self.loop_cutoff >= 0.5 / self.update_dt {
            return Err(Error::config(
                "loop.update_dt",
                "must be > 0 with the loop cutoff below its Nyquist rate",
            ));
        }
        Ok(())
    }
}

/// Raw detector output averaged over bins of `bin_dt`: photons weighted by
/// `2 sin θ_ref`, per second (counts/s). Divide by the transduction gain for
/// meters.
pub fn phase_detector(
    counts: &CountSeries,
    reference: &ReferenceSignal,
    bin_dt: f64,
) -> Result<Vec<f64>> {
    reference.validate()?;
    if reference.carrier() >= 0.5 / counts.bin_dt {
        return Err(Error::config("reference", "frequency above the count Nyquist"));
    }
    let factor = multiple_of(bin_dt, counts.bin_dt, "bin_dt")?;
    let n = (counts.n_bins / factor) as usize;
    let mut out = vec![0.0; n];
    let mut add = |t: f64, c: f64| {
        let k = ((t - counts.start_time) / bin_dt) as usize;
        if k < n {
            out[k] += 2.0 * c * reference.phase(t).sin() / bin_dt;
        }
    };
    match counts.timestamps() {
        Some(ts) => ts.iter().for_each(|&t| add(t, 1.0)),
        None => counts
            .nonzero_bins()
            .for_each(|(b, c)| add(counts.bin_center(b), c as f64)),
    }
    Ok(out)
}

/// Streaming phase-locked loop acting on the trap frequency.
#[derive(Debug, Clone)]
pub struct Pll {
    cfg: LoopConfig,
    omega0: f64,
    to_meters: f64,
    acc: f64,
    filter: OnePoleCascade,
    integral: f64,
    log_every: u64,
    updates: u64,
    sum_error: f64,
    sum_shift: f64,
    saturated: u64,
    errors: Vec<f64>,
    omegas: Vec<f64>,
    saturation: Vec<f64>,
}

impl Pll {
    pub fn new(cfg: &LoopConfig, ion: &IonParams, det: &DetectionParams) -> Result<Self> {
        cfg.validate()?;
        let g = det.transduction_gain();
        if !(g > 0.0) {
            return Err(Error::InfiniteFloor("transduction gain is zero"));
        }
        let log_every = multiple_of(1.0 / RECORD_RATE, cfg.update_dt, "loop.update_dt")?;
        Ok(Pll {
            cfg: *cfg,
            omega0: ion.omega0,
            to_meters: 1.0 / g,
            acc: 0.0,
            filter: OnePoleCascade::new(cfg.loop_order, cfg.loop_cutoff, 1.0 / cfg.update_dt)?,
            integral: 0.0,
            log_every,
            updates: 0,
            sum_error: 0.0,
            sum_shift: 0.0,
            saturated: 0,
            errors: Vec::new(),
            omegas: Vec::new(),
            saturation: Vec::new(),
        })
    }
}

impl TrapController for Pll {
    #[inline]
    fn on_photon(&mut self, t: f64) {
        self.acc += 2.0 * self.cfg.reference.phase(t).sin();
    }

    fn update(&mut self, _t: f64) -> f64 {
        let raw = self.acc / self.cfg.update_dt * self.to_meters;
        self.acc = 0.0;
        let e = self.filter.push(raw);
        self.integral += self.cfg.integral_gain * e * self.cfg.update_dt;
        self.integral = self.integral.clamp(-self.cfg.actuator_limit, self.cfg.actuator_limit);
        let command = self.cfg.gain * e + self.integral;
        let shift = command.clamp(-self.cfg.actuator_limit, self.cfg.actuator_limit);
        let omega = self.omega0 + shift;

        self.sum_error += e;
        self.sum_shift += shift;
        if shift != command {
            self.saturated += 1;
        }
        self.updates += 1;
        if self.updates % self.log_every == 0 {
            let n = self.log_every as f64;
            self.errors.push(self.sum_error / n);
            self.omegas.push(self.omega0 + self.sum_shift / n);
            self.saturation.push(self.saturated as f64 / n);
            self.sum_error = 0.0;
            self.sum_shift = 0.0;
            self.saturated = 0;
        }
        omega
    }
}

/// Everything recorded by a closed-loop run. The decimated series share the
/// quadrature time base (`RECORD_RATE`).
#[derive(Debug, Clone)]
pub struct ClosedLoopRecord {
    pub counts: CountSeries,
    pub quadratures: QuadratureRecord,
    /// rad/s, mean over each record interval.
    pub trap_freq_series: Vec<f64>,
    /// m, loop-filtered detector output averaged over each interval.
    pub error_signal: Vec<f64>,
    pub reference: ReferenceSignal,
    pub motion: MotionStats,
    /// Lock-failure and other diagnostics.
    pub warnings: Vec<String>,
}

impl ClosedLoopRecord {
    pub fn len(&self) -> usize {
        self.quadratures
            .len()
            .min(self.trap_freq_series.len())
            .min(self.error_signal.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration(&self) -> f64 {
        self.counts.duration()
    }

    /// CSV `t_s,counts,x1_m,x2_m,trap_freq_rad_s,error_m`, one row per
    /// record interval.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "t_s,counts,x1_m,x2_m,trap_freq_rad_s,error_m")?;
        let factor = ((1.0 / RECORD_RATE) / self.counts.bin_dt).round() as u64;
        let coarse = self.counts.rebin(factor.max(1)).to_dense();
        let q = &self.quadratures;
        for i in 0..self.len() {
            writeln!(
                w,
                "{:.9e},{},{:.9e},{:.9e},{:.12e},{:.9e}",
                q.time(i),
                coarse.get(i).copied().unwrap_or(0),
                q.x1[i],
                q.x2[i],
                self.trap_freq_series[i],
                self.error_signal[i]
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        crate::harness::io::write_atomic(path, |w| self.write_csv(w))
    }
}

/// Quadrature filter used for the record: four poles with the noise
/// bandwidth of a 30 Hz wide line.
pub fn record_filter() -> FilterSpec {
    FilterSpec {
        order: 4,
        cutoff: lorentzian_equivalent_cutoff(4, 30.0),
    }
}

/// Runs oscillator, detector and loop together. Counts are binned at `dt`.
pub fn run_closed_loop(
    ion: &IonParams,
    det: &DetectionParams,
    loop_cfg: &LoopConfig,
    duration: f64,
    dt: f64,
    seed: u64,
) -> Result<ClosedLoopRecord> {
    run_closed_loop_with_drive(ion, det, &DriveSignal::None, loop_cfg, duration, dt, seed)
}

pub fn run_closed_loop_with_drive(
    ion: &IonParams,
    det: &DetectionParams,
    drive: &DriveSignal,
    loop_cfg: &LoopConfig,
    duration: f64,
    dt: f64,
    seed: u64,
) -> Result<ClosedLoopRecord> {
    loop_cfg.validate()?;
    if loop_cfg.update_dt < dt {
        return Err(Error::config("loop.update_dt", "must be at least dt"));
    }
    let mut pll = Pll::new(loop_cfg, ion, det)?;
    let cfg = PipelineConfig {
        duration,
        dt,
        bin_dt: dt,
        update_dt: loop_cfg.update_dt,
        seed,
        record_timestamps: false,
    };
    let out = pipeline::run(ion, det, drive, &cfg, &mut pll, |_, _| {})?;
    let cal = CalibrationResult::from_model(det)?;
    let quadratures = lockin(
        &out.counts,
        loop_cfg.reference.carrier(),
        loop_cfg.reference.phase0(),
        record_filter(),
        RECORD_RATE,
        Some(&cal),
    )?;

    let mut warnings = Vec::new();
    let window = (SATURATION_WINDOW * RECORD_RATE).round() as usize;
    if let Some(worst) = max_window_mean(&pll.saturation, window) {
        if worst > SATURATION_DUTY_LIMIT {
            warnings.push(format!(
                "lock failure: actuator saturated {:.0}% of a {SATURATION_WINDOW} s window",
                100.0 * worst
            ));
        }
    }
    Ok(ClosedLoopRecord {
        counts: out.counts,
        quadratures,
        trap_freq_series: pll.omegas,
        error_signal: pll.errors,
        reference: loop_cfg.reference,
        motion: out.motion,
        warnings,
    })
}

/// Largest mean over any `window` consecutive values (the whole series if
/// it is shorter).
fn max_window_mean(v: &[f64], window: usize) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let w = window.clamp(1, v.len());
    let mut sum: f64 = v[..w].iter().sum();
    let mut best = sum;
    for i in w..v.len() {
        sum += v[i] - v[i - w];
        best = best.max(sum);
    }
    Some(best / w as f64)
}

/// Welch settings for the sideband analyses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidebandSettings {
    /// Analysed band around the carrier, Hz.
    pub span: f64,
    pub segment_len: usize,
    /// Half-width of the band holding the motional energy, Hz.
    pub energy_half_width: f64,
}

impl Default for SidebandSettings {
    fn default() -> Self {
        SidebandSettings {
            span: 25_000.0,
            // 10 Hz resolution with the Hann window
            segment_len: 3750,
            energy_half_width: 5_000.0,
        }
    }
}

/// Displacement-calibrated sideband spectrum around `center`, with the
/// model calibration.
pub fn sideband_psd(
    counts: &CountSeries,
    center: f64,
    det: &DetectionParams,
    settings: &SidebandSettings,
) -> Result<PsdEstimate> {
    let cal = CalibrationResult::from_model(det)?;
    Ok(welch_band(
        counts,
        center,
        settings.span,
        settings.segment_len,
        Window::Hann,
        0.5,
    )?
    .to_displacement(&cal))
}

/// Shot-noise floor of a record in the same units as [`sideband_psd`]:
/// twice the measured mean rate over the squared transduction gain.
pub fn measured_floor(counts: &CountSeries, det: &DetectionParams) -> Result<f64> {
    let cal = CalibrationResult::from_model(det)?;
    Ok(2.0 * counts.mean_rate() * cal.scale)
}

/// Motional power above `floor` within `center ± half_width`.
pub fn sideband_energy(psd: &PsdEstimate, center: f64, half_width: f64, floor: f64) -> f64 {
    let df = psd.df();
    psd.freqs
        .iter()
        .zip(&psd.values)
        .filter(|(f, _)| (**f - center).abs() <= half_width)
        .map(|(_, v)| (v - floor) * df)
        .sum()
}

/// Half-width of the window around a line, in rbw units.
const LINE_HALF_WIDTH: f64 = 2.0;
const LINE_OUTER: f64 = 8.0;

/// Power of the resolution-limited line at `f` over its local pedestal, and
/// the pedestal density.
pub fn line_at(psd: &PsdEstimate, f: f64) -> (f64, f64) {
    line_power(psd, f, LINE_HALF_WIDTH * psd.rbw, LINE_OUTER * psd.rbw)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LockMetrics {
    /// m²
    pub central_peak_power: f64,
    /// m²
    pub sideband_energy: f64,
    pub central_peak_fraction: f64,
    /// Pedestal density next to the central peak, m²/Hz.
    pub residual_floor: f64,
}

pub fn lock_metrics(
    psd: &PsdEstimate,
    center: f64,
    floor: f64,
    settings: &SidebandSettings,
) -> LockMetrics {
    let (peak, pedestal) = line_at(psd, center);
    let energy = sideband_energy(psd, center, settings.energy_half_width, floor);
    LockMetrics {
        central_peak_power: peak,
        sideband_energy: energy,
        central_peak_fraction: if energy > 0.0 { peak / energy } else { 0.0 },
        residual_floor: pedestal,
    }
}

/// Mean over `2·half + 1` neighbouring bins.
fn smooth(v: &[f64], half: usize) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(v.len());
            v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Bins averaged on each side when comparing two spectra.
const COMPARE_SMOOTH: usize = 4;

/// Contiguous bandwidth around `center` where `on` lies below `off`, after
/// excluding the resolution-limited central bins. Both spectra must share
/// one grid.
pub fn suppression_band(on: &PsdEstimate, off: &PsdEstimate, center: f64) -> Result<f64> {
    if on.freqs != off.freqs {
        return Err(Error::analysis("suppression", "spectra are on different grids"));
    }
    let a = smooth(&on.values, COMPARE_SMOOTH);
    let b = smooth(&off.values, COMPARE_SMOOTH);
    let ic = on.index_of(center);
    let skip = (LINE_HALF_WIDTH * on.rbw / on.df()).ceil() as usize + COMPARE_SMOOTH;
    let (mut hi, mut lo) = (ic, ic);
    for i in ic + skip..on.len() {
        if a[i] >= b[i] {
            break;
        }
        hi = i;
    }
    for i in (0..=ic.saturating_sub(skip)).rev() {
        if a[i] >= b[i] {
            break;
        }
        lo = i;
    }
    if hi == ic && lo == ic {
        return Ok(0.0);
    }
    // a one-sided band still spans the excluded centre
    let hi = if hi == ic { ic + skip - 1 } else { hi };
    let lo = if lo == ic { ic - skip + 1 } else { lo };
    Ok(on.freqs[hi] - on.freqs[lo] + on.df())
}

/// Phase-noise suppression band of a locked record against a free-running
/// one of the same duration, Hz.
pub fn phase_noise_suppression_band(
    record_on: &ClosedLoopRecord,
    record_off: &ClosedLoopRecord,
    det: &DetectionParams,
    settings: &SidebandSettings,
) -> Result<f64> {
    if (record_on.duration() - record_off.duration()).abs() > 1e-9 * record_on.duration() {
        return Err(Error::analysis("suppression", "records differ in duration"));
    }
    let center = record_on.reference.carrier();
    let on = sideband_psd(&record_on.counts, center, det, settings)?;
    let off = sideband_psd(&record_off.counts, center, det, settings)?;
    let floor = measured_floor(&record_off.counts, det)?;
    let peak = smooth(&off.values, COMPARE_SMOOTH).into_iter().fold(0.0, f64::max);
    let noise = floor * 3.0 / ((2 * COMPARE_SMOOTH + 1) as f64 * off.n_averages as f64).sqrt();
    if !(peak - floor > 5.0 * noise) {
        return Err(Error::analysis(
            "suppression",
            "free-running record shows no resolvable sideband",
        ));
    }
    suppression_band(&on, &off, center)
}
