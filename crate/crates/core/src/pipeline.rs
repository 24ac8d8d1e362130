//! Streaming oscillator → photodetector loop with an optional trap-frequency
//! controller in the feedback path. Nothing proportional to the number of
//! integrator steps is stored; the output is the sparse photocount record.

use crate::detection::{CountSeries, DetectionParams, PhotonSampler};
use crate::error::{Error, Result};
use crate::oscillator::{DriveSignal, IonParams, MotionEngine, Simulation};

/// Feedback element acting on the trap frequency.
pub trait TrapController {
    /// Called for every detected photon, in time order.
    fn on_photon(&mut self, t: f64);
    /// Called at the end of each update interval (time `t`). Returns the
    /// trap frequency (rad/s) for the next interval.
    fn update(&mut self, t: f64) -> f64;
}

/// Open loop: the trap stays at its nominal frequency.
#[derive(Debug, Clone, Copy)]
pub struct FreeRunning {
    pub omega0: f64,
}

impl TrapController for FreeRunning {
    fn on_photon(&mut self, _t: f64) {}
    fn update(&mut self, _t: f64) -> f64 {
        self.omega0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    /// s
    pub duration: f64,
    /// Integrator step, s.
    pub dt: f64,
    /// Count bin width, integer multiple of `dt`.
    pub bin_dt: f64,
    /// Controller update interval, integer multiple of `dt`.
    pub update_dt: f64,
    pub seed: u64,
    /// Keep exact photon arrival times alongside the bins.
    pub record_timestamps: bool,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return Err(Error::config("duration", "must be >= 0"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("dt", "must be > 0"));
        }
        multiple_of(self.bin_dt, self.dt, "bin_dt")?;
        multiple_of(self.update_dt, self.dt, "update_dt")?;
        Ok(())
    }
}

pub(crate) fn multiple_of(value: f64, base: f64, key: &str) -> Result<u64> {
    let ratio = value / base;
    if !(ratio.is_finite() && ratio >= 1.0 - 1e-9 && (ratio - ratio.round()).abs() < 1e-6 * ratio)
    {
        return Err(Error::config(
            key,
            format!("{value:e} s must be a positive integer multiple of {base:e} s"),
        ));
    }
    Ok(ratio.round() as u64)
}

/// Running moments of the displacement.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MotionStats {
    pub n: u64,
    pub sum_x: f64,
    pub sum_x2: f64,
}

impl MotionStats {
    #[inline(always)]
    fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum_x += x;
        self.sum_x2 += x * x;
    }

    pub fn mean(&self) -> f64 {
        self.sum_x / self.n.max(1) as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        (self.sum_x2 / self.n.max(1) as f64 - m * m).max(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub counts: CountSeries,
    pub motion: MotionStats,
}

/// Runs the oscillator and detector together. `observe(t, x)` sees every
/// integrator sample.
pub fn run<C: TrapController>(
    ion: &IonParams,
    det: &DetectionParams,
    drive: &DriveSignal,
    cfg: &PipelineConfig,
    controller: &mut C,
    mut observe: impl FnMut(f64, f64),
) -> Result<PipelineOutput> {
    cfg.validate()?;
    det.validate()?;
    let sim = Simulation::new(*ion, drive, cfg.dt, cfg.seed);
    let n = sim.n_steps(cfg.duration)?;
    let bin_steps = multiple_of(cfg.bin_dt, cfg.dt, "bin_dt")?;
    let update_steps = multiple_of(cfg.update_dt, cfg.dt, "update_dt")?;
    let mut counts = CountSeries::new(cfg.bin_dt, 0.0, n / bin_steps)?;
    if cfg.record_timestamps {
        counts.record_timestamps();
    }
    let end = counts.duration();
    let mut engine = MotionEngine::new(&sim)?;
    let mut sampler = PhotonSampler::new(*det, cfg.seed);
    let mut motion = MotionStats::default();

    for i in 0..=n {
        let (t, x, v) = engine.current();
        sampler.push(t, x, v, |tp| {
            if tp < end {
                counts.push_photon(tp);
                controller.on_photon(tp);
            }
        });
        if i == n {
            break;
        }
        motion.push(x);
        observe(t, x);
        if (i + 1) % update_steps == 0 {
            let w = controller.update(t);
            engine.set_trap_frequency(w)?;
        }
        engine.advance()?;
    }
    Ok(PipelineOutput { counts, motion })
}

/// Open-loop convenience wrapper.
pub fn run_free(
    ion: &IonParams,
    det: &DetectionParams,
    drive: &DriveSignal,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    let mut ctl = FreeRunning { omega0: ion.omega0 };
    run(ion, det, drive, cfg, &mut ctl, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::sample_counts;
    use crate::oscillator::simulate;

    fn cfg(duration: f64, seed: u64) -> PipelineConfig {
        PipelineConfig {
            duration,
            dt: 4e-8,
            bin_dt: 4e-8,
            update_dt: 4e-7,
            seed,
            record_timestamps: false,
        }
    }

    #[test]
    fn streaming_matches_stored_trajectory_draws() {
        let ion = IonParams::default();
        let det = DetectionParams::default();
        let c = cfg(0.05, 21);
        let out = run_free(&ion, &det, &DriveSignal::None, &c).unwrap();
        let traj = simulate(&ion, &DriveSignal::None, None, 0.05, 4e-8, 21).unwrap();
        let stored = sample_counts(&traj, &det, 4e-8, 21).unwrap();
        // identical noise streams; photon times differ only through the
        // slope estimate, so totals agree closely
        let a = out.counts.total_counts() as f64;
        let b = stored.total_counts() as f64;
        assert!((a - b).abs() <= 0.01 * a, "{a} vs {b}");
        assert_eq!(out.motion.n, traj.len() as u64);
        let var = traj.x_samples.iter().map(|x| x * x).sum::<f64>() / traj.len() as f64;
        assert!((out.motion.sum_x2 / out.motion.n as f64 / var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_per_seed() {
        let ion = IonParams::default();
        let det = DetectionParams::default();
        let a = run_free(&ion, &det, &DriveSignal::None, &cfg(0.02, 5)).unwrap();
        let b = run_free(&ion, &det, &DriveSignal::None, &cfg(0.02, 5)).unwrap();
        assert_eq!(a.counts, b.counts);
    }

    #[test]
    fn equipartition_over_long_record() {
        // 200/γ ≈ 84 ms; 2 s keeps the estimator scatter near 1.5%
        let ion = IonParams::default();
        let det = DetectionParams::default();
        let out = run_free(&ion, &det, &DriveSignal::None, &cfg(2.0, 77)).unwrap();
        let msd = crate::oscillator::mean_square_displacement(&ion);
        let r = out.motion.variance() / msd;
        assert!((r - 1.0).abs() < 0.05, "{r}");
    }

    #[test]
    fn rejects_misaligned_update() {
        let ion = IonParams::default();
        let det = DetectionParams::default();
        let mut c = cfg(0.001, 1);
        c.update_dt = 5e-8;
        assert!(matches!(
            run_free(&ion, &det, &DriveSignal::None, &c),
            Err(Error::Config { .. })
        ));
    }
}
