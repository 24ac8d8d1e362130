//! Axial motion of the ion as a damped harmonic oscillator driven by thermal
//! (recoil) noise, and the closed-form spectra it has to reproduce.
//!
//! The Langevin equation
//!
//! ```text
//! dx = (p/M) dt
//! dp = (-M ω² x - γ p + F) dt + sqrt(2 M γ k_B T) dW
//! ```
//!
//! is linear, so each step is integrated exactly: the deterministic part is
//! the damped-rotation propagator `Φ(dt)` and the noise increment is a
//! bivariate Gaussian with covariance `Σ∞ - Φ Σ∞ Φᵀ`, where `Σ∞` is the
//! stationary (equipartition) covariance. There is no step-size bias, so the
//! simulated variance matches `k_B T / (M ω²)` for any `dt`.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::consts::{AMU, HBAR, K_B};
use crate::error::{Error, Result};

/// Largest trajectory (in samples) that [`simulate`] will hold in memory.
pub const TRAJECTORY_SAMPLE_BUDGET: u64 = 1 << 27;

/// Seed salt separating the oscillator noise stream from other streams
/// derived from the same scenario seed.
pub(crate) const OSCILLATOR_STREAM: u64 = 0x6f73_6369_6c6c_6174;

/// Mechanical parameters of the trapped-ion oscillator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IonParams {
    /// kg
    pub mass: f64,
    /// Axial trap frequency, rad/s.
    pub omega0: f64,
    /// Energy damping (laser cooling) rate, rad/s. Equals the FWHM of the
    /// motional resonance in angular units.
    pub gamma: f64,
    /// Bath temperature, K.
    pub temperature: f64,
}

impl Default for IonParams {
    fn default() -> Self {
        Self {
            mass: 138.0 * AMU,
            omega0: 2.0 * PI * 1.039e6,
            gamma: 2.0 * PI * 380.0,
            // back-solved so that sqrt(k_B T / (M ω0²)) = 51 nm
            temperature: 1.84e-3,
        }
    }
}

impl IonParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(Error::config("ion.mass", "must be positive and finite"));
        }
        if !(self.omega0 > 0.0 && self.omega0.is_finite()) {
            return Err(Error::config("ion.omega0", "must be positive and finite"));
        }
        if !(self.gamma > 0.0 && self.gamma < self.omega0) {
            return Err(Error::config(
                "ion.gamma",
                "must satisfy 0 < gamma < omega0 (underdamped)",
            ));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("ion.temperature", "must be >= 0 and finite"));
        }
        Ok(())
    }

    /// Resonance frequency in Hz.
    pub fn f0(&self) -> f64 {
        self.omega0 / (2.0 * PI)
    }

    /// Resonance FWHM in Hz.
    pub fn fwhm_hz(&self) -> f64 {
        self.gamma / (2.0 * PI)
    }
}

/// Instantaneous oscillator state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OscillatorState {
    /// Displacement along the trap axis, m.
    pub x: f64,
    /// Momentum, kg m/s.
    pub p: f64,
    /// s
    pub t: f64,
}

impl OscillatorState {
    pub fn at_rest(x: f64) -> Self {
        Self { x, p: 0.0, t: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.p.is_finite() && self.t.is_finite()
    }

    /// Mechanical energy at trap frequency `omega`, J.
    pub fn energy(&self, mass: f64, omega: f64) -> f64 {
        0.5 * self.p * self.p / mass + 0.5 * mass * omega * omega * self.x * self.x
    }
}

/// External force applied to the ion (the calibration tone on a trap
/// electrode).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriveSignal {
    #[default]
    None,
    Sine {
        /// N
        force_amplitude: f64,
        /// rad/s
        frequency: f64,
        /// rad
        phase: f64,
    },
    /// Uniformly spaced force samples (N), zero-order hold, zero after the end.
    Samples { dt: f64, forces: Vec<f64> },
}

impl DriveSignal {
    pub fn validate(&self) -> Result<()> {
        match self {
            DriveSignal::None => Ok(()),
            DriveSignal::Sine {
                force_amplitude,
                frequency,
                phase,
            } => {
                if !(*force_amplitude >= 0.0 && force_amplitude.is_finite()) {
                    return Err(Error::config("drive.force_amplitude", "must be >= 0"));
                }
                if !(*frequency > 0.0 && frequency.is_finite()) {
                    return Err(Error::config("drive.frequency", "must be > 0"));
                }
                if !phase.is_finite() {
                    return Err(Error::config("drive.phase", "must be finite"));
                }
                Ok(())
            }
            DriveSignal::Samples { dt, forces } => {
                if !(*dt > 0.0) {
                    return Err(Error::config("drive.dt", "must be > 0"));
                }
                if forces.iter().any(|f| !f.is_finite()) {
                    return Err(Error::config("drive.forces", "must be finite"));
                }
                Ok(())
            }
        }
    }

    pub fn force_at(&self, t: f64) -> f64 {
        match self {
            DriveSignal::None => 0.0,
            DriveSignal::Sine {
                force_amplitude,
                frequency,
                phase,
            } => force_amplitude * (frequency * t + phase).cos(),
            DriveSignal::Samples { dt, forces } => {
                if t < 0.0 {
                    return 0.0;
                }
                forces.get((t / dt) as usize).copied().unwrap_or(0.0)
            }
        }
    }

    /// Steady-state displacement amplitude of a sine drive in the absence of
    /// noise, `F / (M sqrt((ω0² - ω²)² + γ² ω²))`.
    pub fn steady_state_amplitude(&self, ion: &IonParams) -> Option<f64> {
        match self {
            DriveSignal::Sine {
                force_amplitude,
                frequency,
                ..
            } => {
                let w = *frequency;
                let w0 = ion.omega0;
                let den = ((w0 * w0 - w * w).powi(2) + (ion.gamma * w).powi(2)).sqrt();
                Some(force_amplitude / (ion.mass * den))
            }
            _ => None,
        }
    }
}

/// Piecewise-constant trap frequency schedule (rad/s), one value per
/// `hold_dt`. The last value is held past the end.
#[derive(Debug, Clone, PartialEq)]
pub struct TrapSchedule {
    pub hold_dt: f64,
    pub values: Vec<f64>,
}

/// Sampled displacement record.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    /// m, sample `i` taken at `start_time + i * dt`.
    pub x_samples: Vec<f64>,
    pub start_time: f64,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.x_samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.x_samples.len() as f64 * self.dt
    }

    pub fn time(&self, i: usize) -> f64 {
        self.start_time + i as f64 * self.dt
    }

    /// CSV with header `t_s,x_m`.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "t_s,x_m")?;
        for (i, x) in self.x_samples.iter().enumerate() {
            writeln!(w, "{:.12e},{:.12e}", self.time(i), x)?;
        }
        Ok(())
    }

    /// Little-endian `f64` pairs `(t_s, x_m)`, no header.
    pub fn write_binary(&self, mut w: impl Write) -> std::io::Result<()> {
        for (i, x) in self.x_samples.iter().enumerate() {
            w.write_all(&self.time(i).to_le_bytes())?;
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        crate::harness::io::write_atomic(path, |w| self.write_csv(w))
    }
}

/// Exact one-step propagator of the linear Langevin equation for a fixed
/// trap frequency, in the variables `(x, v = p / M)`.
#[derive(Debug, Clone)]
pub struct Propagator {
    dt: f64,
    gamma: f64,
    kt_over_m: f64,
    decay: f64,
    base_wd: f64,
    base_cos: f64,
    base_sin: f64,
    omega: f64,
    omega_sq: f64,
    phi: [[f64; 2]; 2],
    // Cholesky factor of the step noise covariance
    l11: f64,
    l21: f64,
    l22: f64,
}

impl Propagator {
    pub fn new(ion: &IonParams, omega_trap: f64, dt: f64) -> Result<Self> {
        check_step(omega_trap, ion.gamma, dt)?;
        let base_wd = damped_frequency(ion.omega0, ion.gamma);
        let (base_sin, base_cos) = (base_wd * dt).sin_cos();
        let mut prop = Self {
            dt,
            gamma: ion.gamma,
            kt_over_m: K_B * ion.temperature / ion.mass,
            decay: (-0.5 * ion.gamma * dt).exp(),
            base_wd,
            base_cos,
            base_sin,
            omega: f64::NAN,
            omega_sq: 0.0,
            phi: [[0.0; 2]; 2],
            l11: 0.0,
            l21: 0.0,
            l22: 0.0,
        };
        prop.set_trap_frequency(omega_trap);
        Ok(prop)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn trap_frequency(&self) -> f64 {
        self.omega
    }

    /// Re-tunes the propagator. Small shifts reuse the nominal rotation via
    /// angle addition, which keeps closed-loop actuation cheap.
    pub fn set_trap_frequency(&mut self, omega: f64) {
        if omega == self.omega {
            return;
        }
        let wd = damped_frequency(omega, self.gamma);
        let eps = (wd - self.base_wd) * self.dt;
        let (s, c) = if eps.abs() < 0.05 {
            let e2 = eps * eps;
            let ce = 1.0 - e2 * (0.5 - e2 * (1.0 / 24.0 - e2 / 720.0));
            let se = eps * (1.0 - e2 * (1.0 / 6.0 - e2 * (1.0 / 120.0 - e2 / 5040.0)));
            (
                self.base_sin * ce + self.base_cos * se,
                self.base_cos * ce - self.base_sin * se,
            )
        } else {
            (wd * self.dt).sin_cos()
        };
        let g2 = 0.5 * self.gamma / wd;
        let e = self.decay;
        let w2 = omega * omega;
        self.phi = [
            [e * (c + g2 * s), e * s / wd],
            [-e * w2 * s / wd, e * (c - g2 * s)],
        ];
        self.omega = omega;
        self.omega_sq = w2;

        let sv = self.kt_over_m;
        let sx = sv / w2;
        let [[a, b], [cc, d]] = self.phi;
        let q11 = (sx - (a * a * sx + b * b * sv)).max(0.0);
        let q12 = -(a * cc * sx + b * d * sv);
        let q22 = (sv - (cc * cc * sx + d * d * sv)).max(0.0);
        self.l11 = q11.sqrt();
        self.l21 = if self.l11 > 0.0 { q12 / self.l11 } else { 0.0 };
        self.l22 = (q22 - self.l21 * self.l21).max(0.0).sqrt();
    }

    /// Advances `(x, v)` by one step under a force held constant at
    /// `accel = F / M` during the step. `n1`, `n2` are independent standard
    /// normal deviates.
    #[inline(always)]
    pub fn advance(&self, x: f64, v: f64, accel: f64, n1: f64, n2: f64) -> (f64, f64) {
        let x_eq = accel / self.omega_sq;
        let dx = x - x_eq;
        let [[a, b], [c, d]] = self.phi;
        (
            x_eq + a * dx + b * v + self.l11 * n1,
            c * dx + d * v + self.l21 * n1 + self.l22 * n2,
        )
    }
}

fn damped_frequency(omega: f64, gamma: f64) -> f64 {
    (omega * omega - 0.25 * gamma * gamma).sqrt()
}

/// Upper bound on the integrator step at a given trap frequency.
pub fn max_step(omega_trap: f64) -> f64 {
    2.0 * PI / (20.0 * omega_trap)
}

fn check_step(omega_trap: f64, gamma: f64, dt: f64) -> Result<()> {
    if !(omega_trap > gamma && omega_trap.is_finite()) {
        return Err(Error::config(
            "omega_trap",
            format!("{omega_trap} rad/s is not an underdamped trap frequency"),
        ));
    }
    if !(dt > 0.0) {
        return Err(Error::config("dt", "must be > 0"));
    }
    // 1e-9 slack so that dt = 2π/(20ω) computed elsewhere is accepted
    if dt > max_step(omega_trap) * (1.0 + 1e-9) {
        return Err(Error::config(
            "dt",
            format!(
                "{dt:e} s exceeds 2π/(20 ω_trap) = {:e} s",
                max_step(omega_trap)
            ),
        ));
    }
    Ok(())
}

/// One stochastic integration step of the Langevin equation.
pub fn step<R: Rng + ?Sized>(
    state: OscillatorState,
    params: &IonParams,
    force: f64,
    omega_trap: f64,
    dt: f64,
    rng: &mut R,
) -> Result<OscillatorState> {
    if !state.is_finite() {
        return Err(Error::NonFinite { t: state.t });
    }
    let prop = Propagator::new(params, omega_trap, dt)?;
    let n1: f64 = rng.sample(StandardNormal);
    let n2: f64 = rng.sample(StandardNormal);
    let (x, v) = prop.advance(state.x, state.p / params.mass, force / params.mass, n1, n2);
    let next = OscillatorState {
        x,
        p: v * params.mass,
        t: state.t + dt,
    };
    if !next.is_finite() {
        return Err(Error::NonFinite { t: next.t });
    }
    Ok(next)
}

/// Configured oscillator run. [`Simulation::run`] stores the trajectory;
/// [`Simulation::stream`] hands every sample to a callback instead.
#[derive(Debug, Clone)]
pub struct Simulation<'a> {
    pub ion: IonParams,
    pub drive: &'a DriveSignal,
    pub trap: Option<&'a TrapSchedule>,
    pub dt: f64,
    pub seed: u64,
    /// Starting state. `None` draws it from the thermal distribution.
    pub initial: Option<OscillatorState>,
}

impl<'a> Simulation<'a> {
    pub fn new(ion: IonParams, drive: &'a DriveSignal, dt: f64, seed: u64) -> Self {
        Self {
            ion,
            drive,
            trap: None,
            dt,
            seed,
            initial: None,
        }
    }

    pub fn with_trap_schedule(mut self, trap: &'a TrapSchedule) -> Self {
        self.trap = Some(trap);
        self
    }

    pub fn with_initial(mut self, state: OscillatorState) -> Self {
        self.initial = Some(state);
        self
    }

    pub fn n_steps(&self, duration: f64) -> Result<u64> {
        if !(duration >= 0.0 && duration.is_finite()) {
            return Err(Error::config("duration", "must be >= 0"));
        }
        Ok((duration / self.dt).round() as u64)
    }

    pub fn run(&self, duration: f64) -> Result<Trajectory> {
        let n = self.n_steps(duration)?;
        if n > TRAJECTORY_SAMPLE_BUDGET {
            return Err(Error::MemoryBudget {
                samples: n,
                budget: TRAJECTORY_SAMPLE_BUDGET,
            });
        }
        let mut x_samples = Vec::with_capacity(n as usize);
        self.stream(duration, |_, x, _| x_samples.push(x))?;
        Ok(Trajectory {
            dt: self.dt,
            x_samples,
            start_time: 0.0,
            seed: self.seed,
        })
    }

    /// Calls `sink(t, x, v)` for each of the `round(duration / dt)` samples,
    /// where `v = p / M`. Sample `i` is the state at `t = i dt`.
    pub fn stream(&self, duration: f64, mut sink: impl FnMut(f64, f64, f64)) -> Result<()> {
        let n = self.n_steps(duration)?;
        let mut engine = MotionEngine::new(self)?;
        for i in 0..n {
            if let Some(trap) = self.trap {
                let k = ((i as f64 * self.dt) / trap.hold_dt + 1e-9) as usize;
                let w = trap.values.get(k).or(trap.values.last()).copied();
                if let Some(w) = w {
                    engine.set_trap_frequency(w)?;
                }
            }
            let (t, x, v) = engine.current();
            sink(t, x, v);
            engine.advance()?;
        }
        Ok(())
    }
}

/// Oscillator integrator state machine shared by the open- and closed-loop
/// pipelines.
pub(crate) struct MotionEngine {
    prop: Propagator,
    ion: IonParams,
    rng: Xoshiro256PlusPlus,
    drive: DriveEval,
    x: f64,
    v: f64,
    step: u64,
    dt: f64,
}

impl MotionEngine {
    pub(crate) fn new(sim: &Simulation<'_>) -> Result<Self> {
        sim.ion.validate()?;
        sim.drive.validate()?;
        let prop = Propagator::new(&sim.ion, sim.ion.omega0, sim.dt)?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(sim.seed ^ OSCILLATOR_STREAM);
        let (x, v) = match sim.initial {
            Some(s) => (s.x, s.p / sim.ion.mass),
            None => {
                let sv = K_B * sim.ion.temperature / sim.ion.mass;
                let sx = sv / (sim.ion.omega0 * sim.ion.omega0);
                let n1: f64 = rng.sample(StandardNormal);
                let n2: f64 = rng.sample(StandardNormal);
                (sx.sqrt() * n1, sv.sqrt() * n2)
            }
        };
        Ok(Self {
            prop,
            ion: sim.ion,
            rng,
            drive: DriveEval::new(sim.drive.clone(), sim.dt),
            x,
            v,
            step: 0,
            dt: sim.dt,
        })
    }

    #[inline(always)]
    pub(crate) fn current(&self) -> (f64, f64, f64) {
        (self.step as f64 * self.dt, self.x, self.v)
    }

    pub(crate) fn set_trap_frequency(&mut self, omega: f64) -> Result<()> {
        if omega != self.prop.trap_frequency() {
            if !(omega > self.ion.gamma) || self.dt > max_step(omega) * (1.0 + 1e-9) {
                return Err(Error::config(
                    "omega_trap",
                    format!("{omega} rad/s incompatible with dt = {:e} s", self.dt),
                ));
            }
            self.prop.set_trap_frequency(omega);
        }
        Ok(())
    }

    #[inline(always)]
    pub(crate) fn advance(&mut self) -> Result<()> {
        let accel = self.drive.next_midpoint_force() / self.ion.mass;
        let n1: f64 = self.rng.sample(StandardNormal);
        let n2: f64 = self.rng.sample(StandardNormal);
        let (x, v) = self.prop.advance(self.x, self.v, accel, n1, n2);
        self.step += 1;
        if !(x.is_finite() && v.is_finite()) {
            return Err(Error::NonFinite {
                t: self.step as f64 * self.dt,
            });
        }
        self.x = x;
        self.v = v;
        Ok(())
    }
}

/// Evaluates the drive at step midpoints. Sine drives use a rotating
/// phasor, re-anchored to the exact phase every 1024 steps.
struct DriveEval {
    drive: DriveSignal,
    dt: f64,
    step: u64,
    rot: (f64, f64),
    phasor: (f64, f64),
}

impl DriveEval {
    fn new(drive: DriveSignal, dt: f64) -> Self {
        let rot = match &drive {
            DriveSignal::Sine { frequency, .. } => {
                let (s, c) = (frequency * dt).sin_cos();
                (c, s)
            }
            _ => (1.0, 0.0),
        };
        Self {
            drive,
            dt,
            step: 0,
            rot,
            phasor: (0.0, 0.0),
        }
    }

    #[inline(always)]
    fn next_midpoint_force(&mut self) -> f64 {
        let k = self.step;
        self.step += 1;
        match &self.drive {
            DriveSignal::None => 0.0,
            DriveSignal::Sine {
                force_amplitude,
                frequency,
                phase,
            } => {
                if k % 1024 == 0 {
                    let t = (k as f64 + 0.5) * self.dt;
                    let (s, c) = (frequency * t + phase).sin_cos();
                    self.phasor = (c, s);
                } else {
                    let (c, s) = self.phasor;
                    let (rc, rs) = self.rot;
                    self.phasor = (c * rc - s * rs, s * rc + c * rs);
                }
                force_amplitude * self.phasor.0
            }
            d @ DriveSignal::Samples { .. } => d.force_at((k as f64 + 0.5) * self.dt),
        }
    }
}

/// Runs the oscillator and stores the full trajectory.
pub fn simulate(
    params: &IonParams,
    drive: &DriveSignal,
    omega_trap_series: Option<&TrapSchedule>,
    duration: f64,
    dt: f64,
    seed: u64,
) -> Result<Trajectory> {
    let mut sim = Simulation::new(*params, drive, dt, seed);
    if let Some(trap) = omega_trap_series {
        sim = sim.with_trap_schedule(trap);
    }
    sim.run(duration)
}

/// One-sided displacement spectral density in ordinary frequency, m²/Hz:
/// `4 k_B T γ / M / ((ω0² - ω²)² + γ² ω²)` at `ω = 2π f`.
pub fn analytic_psd(params: &IonParams, f: f64) -> f64 {
    let w = 2.0 * PI * f;
    let w0 = params.omega0;
    let num = 4.0 * K_B * params.temperature * params.gamma / params.mass;
    num / ((w0 * w0 - w * w).powi(2) + (params.gamma * w).powi(2))
}

/// Thermal mean-square displacement `k_B T / (M ω0²)`, m².
pub fn mean_square_displacement(params: &IonParams) -> f64 {
    K_B * params.temperature / (params.mass * params.omega0 * params.omega0)
}

/// Ground-state wavepacket size `sqrt(ħ / (2 M ω0))`, m.
pub fn sql_displacement(mass: f64, omega0: f64) -> f64 {
    (HBAR / (2.0 * mass * omega0)).sqrt()
}

/// Doppler cooling limit `ħ Γ / (2 k_B)`, K.
pub fn doppler_temperature(linewidth: f64) -> f64 {
    HBAR * linewidth / (2.0 * K_B)
}
