//! Named experiments: preset scenarios, the stage runner and its outputs.
//!
//! Each run writes into its output directory the scenario echo
//! (`scenario.toml`), one or more CSV files per analysis, optional SVG
//! plots and the report in text and JSON form.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::render::{Plot, Series};
use super::report::{export_report, Expectation, ExperimentReport, ReportFormat};
use super::scenario::*;
use crate::consts::{bessel_j0, bessel_j1};
use crate::control::{
    line_at, lock_metrics, measured_floor, run_closed_loop_with_drive, sideband_energy,
    sideband_psd, suppression_band, ClosedLoopRecord, LoopConfig, ReferenceSignal,
    SidebandSettings,
};
use crate::detection::{CountSeries, FringeContrastMeter};
use crate::dsp::{
    calibrate_displacement, enbw_lorentzian, g2_spectrum, line_width_bins,
    lorentzian_equivalent_cutoff, lorentzian_fit, lockin, resolution_metric, std_dev, welch_band,
    CalibrationResult, CalibrationTone, ContrastPoint, FilterSpec, FitInit, G2Options,
    LorentzianFit, PsdEstimate,
};
use crate::error::{Error, Result};
use crate::oscillator::{DriveSignal, IonParams, Simulation};
use crate::pipeline::{run_free, PipelineConfig};

pub const EXPERIMENTS: [&str; 7] = ["fig2a", "fig2b", "fig2cd", "fig3a", "fig3b", "fig3c", "fig3d"];

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "IONLOCK_OUT_DIR";

/// Record length in fast mode, s.
pub const FAST_DURATION: f64 = 2.0;
/// Statistical tolerances scale with √(record length).
pub const FAST_WIDEN: f64 = 3.1622776601683795;
/// Coarsest g² resolution used in fast mode, Hz.
const FAST_G2_RBW: f64 = 0.5;
/// Minimum Welch averages kept when fast mode shortens the record.
const FAST_MIN_SEGMENTS: f64 = 8.0;

/// Binning of the coarse count file, s.
const COUNTS_FILE_BIN: f64 = 1e-3;

/// Calibration tone: offset from resonance (Hz) and motional amplitude (m).
pub const TONE_OFFSET: f64 = 2_500.0;
pub const TONE_AMPLITUDE: f64 = 25e-9;
/// Amplitudes of the fringe-contrast sweep, m.
pub const SWEEP_AMPLITUDES: [f64; 5] = [0.0, 30e-9, 60e-9, 90e-9, 120e-9];

pub const FM_MOD_FREQ: f64 = 56.3;
pub const FM_INDEX: f64 = 1.0;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    /// Short records with widened statistical tolerances.
    pub fast: bool,
    /// Also write SVG plots.
    pub render: bool,
    /// Replaces the scenario seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub scenario: Scenario,
    pub expectations: Vec<Expectation>,
}

/// `$IONLOCK_OUT_DIR`, or `./out`.
pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Force amplitude of a drive at `frequency` (rad/s) giving steady-state
/// amplitude `amplitude`.
fn force_for_amplitude(ion: &IonParams, frequency: f64, amplitude: f64) -> f64 {
    let unit = DriveSignal::Sine {
        force_amplitude: 1.0,
        frequency,
        phase: 0.0,
    };
    amplitude / unit.steady_state_amplitude(ion).unwrap_or(f64::INFINITY)
}

fn spectrum_analyses(calibrate: Option<CalibrateAnalysis>) -> Vec<Analysis> {
    let mut v = vec![Analysis::Welch(WelchAnalysis::default())];
    if let Some(c) = calibrate {
        v.push(Analysis::Calibrate(c));
    }
    v.push(Analysis::Fit(FitAnalysis::default()));
    v.push(Analysis::Resolution(ResolutionAnalysis::default()));
    v
}

fn spectrum_expectations() -> Vec<Expectation> {
    vec![
        Expectation::relative("fwhm", 380.0, 0.10),
        Expectation::range("f0_offset", -20.0, 20.0),
        Expectation::relative("sqrt_area", 51e-9, 0.05),
        Expectation::relative("floor", 1.0e-18, 0.10),
        Expectation::relative("resolution", 24e-9, 0.10),
        Expectation::range("resolution_ratio", 3.7, 4.5),
    ]
}

/// Free-running record with the detuned calibration tone, calibrated by
/// the tone and a fringe-contrast sweep.
fn tone_calibrated(ion: &IonParams) -> Scenario {
    let w = 2.0 * PI * (ion.f0() + TONE_OFFSET);
    let sweep = SWEEP_AMPLITUDES
        .iter()
        .map(|a| force_for_amplitude(ion, w, *a))
        .collect();
    Scenario {
        drive: DriveSignal::Sine {
            force_amplitude: force_for_amplitude(ion, w, TONE_AMPLITUDE),
            frequency: w,
            phase: 0.0,
        },
        analyses: spectrum_analyses(Some(CalibrateAnalysis {
            sweep_forces: sweep,
            sweep_duration: 2.0,
        })),
        ..Default::default()
    }
}

fn locked(reference: ReferenceSignal, analyses: Vec<Analysis>) -> Scenario {
    Scenario {
        loop_cfg: Some(LoopConfig {
            reference,
            ..Default::default()
        }),
        analyses,
        ..Default::default()
    }
}

/// The preset scenario and expectations for a named experiment.
pub fn preset(name: &str) -> Result<Preset> {
    let ion = IonParams::default();
    let f0 = ion.f0();
    let p = match name {
        "fig2a" => Preset {
            scenario: tone_calibrated(&ion),
            expectations: spectrum_expectations(),
        },
        // the calibrated view of the same measurement
        "fig2b" => Preset {
            scenario: tone_calibrated(&ion),
            expectations: vec![
                Expectation::relative("floor", 1.0e-18, 0.10),
                Expectation::relative("resolution", 24e-9, 0.10),
                Expectation::range("resolution_ratio", 3.7, 4.5),
            ],
        },
        "fig2cd" => {
            let mut analyses = spectrum_analyses(None);
            analyses.push(Analysis::Lockin(LockinAnalysis::default()));
            Preset {
                scenario: Scenario {
                    analyses,
                    ..Default::default()
                },
                expectations: vec![
                    Expectation::relative("x1_std_on", 15e-9, 0.2),
                    Expectation::relative("x1_std_+6000hz", 7e-9, 0.2),
                    Expectation::range("bandwidth_scaling_relative", 0.8, 1.2),
                ],
            }
        }
        "fig3a" => Preset {
            scenario: locked(
                ReferenceSignal::Sine {
                    frequency: f0,
                    phase0: 0.0,
                },
                vec![Analysis::Lock(LockAnalysis::default())],
            ),
            expectations: vec![
                Expectation::range("central_peak_fraction", 0.05, 0.25),
                Expectation::at_most("central_peak_width", 2.0).exact(),
                Expectation::range("central_peak_offset", -1.0, 1.0).exact(),
                Expectation::range("energy_ratio", 0.8, 1.2),
                Expectation::at_least("suppression_band", 500.0),
            ],
        },
        "fig3b" => Preset {
            scenario: locked(
                ReferenceSignal::Sine {
                    frequency: f0,
                    phase0: 0.0,
                },
                vec![Analysis::Lock(LockAnalysis {
                    // 1 Hz resolution
                    segment_len: 37_500,
                    compare_off: false,
                    ..Default::default()
                })],
            ),
            expectations: vec![Expectation::at_most("residual_ratio_to_sql", 0.5)],
        },
        "fig3c" => Preset {
            scenario: locked(
                ReferenceSignal::Fm {
                    carrier: f0,
                    mod_freq: FM_MOD_FREQ,
                    index: FM_INDEX,
                    phase0: 0.0,
                },
                vec![Analysis::FmBands(FmBandsAnalysis::default())],
            ),
            expectations: vec![
                Expectation::relative(
                    "fm_sideband_ratio",
                    (bessel_j1(FM_INDEX) / bessel_j0(FM_INDEX)).powi(2),
                    0.2,
                ),
                Expectation::at_most("fm_band_offset_max", 1.0).exact(),
            ],
        },
        "fig3d" => Preset {
            scenario: locked(
                ReferenceSignal::Sine {
                    frequency: f0,
                    phase0: 0.0,
                },
                vec![Analysis::G2(G2Analysis::default())],
            ),
            expectations: vec![Expectation::at_most("g2_line_width", 2.0).exact()],
        },
        other => {
            return Err(Error::config(
                "experiment",
                format!("unknown experiment `{other}`; expected one of {}", EXPERIMENTS.join(", ")),
            ))
        }
    };
    Ok(p)
}

/// Shortens the record and coarsens resolutions so that every analysis
/// still has enough averages.
pub fn fast_scenario(s: &Scenario) -> Scenario {
    let mut s = s.clone();
    s.duration = s.duration.min(FAST_DURATION);
    let max_seg = |span: f64, seg: usize| -> usize {
        seg.min((s.duration * span / (FAST_MIN_SEGMENTS / 2.0 + 0.5)) as usize)
    };
    let duration = s.duration;
    for a in &mut s.analyses {
        match a {
            Analysis::Welch(w) => w.segment_len = max_seg(w.span, w.segment_len),
            Analysis::Calibrate(c) => c.sweep_duration = c.sweep_duration.min(0.5 * duration),
            Analysis::G2(g) => g.rbw = g.rbw.max(FAST_G2_RBW),
            Analysis::Lock(l) => l.segment_len = max_seg(l.span, l.segment_len),
            Analysis::FmBands(f) => f.segment_len = max_seg(f.span, f.segment_len),
            Analysis::Fit(_) | Analysis::Lockin(_) | Analysis::Resolution(_) => {}
        }
    }
    s
}

/// Runs a named experiment with optional TOML overrides.
pub fn run_experiment(
    name: &str,
    overrides: Option<&str>,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<ExperimentReport> {
    let preset = preset(name)?;
    let mut scenario = match overrides {
        Some(text) => apply_overrides(&preset.scenario, text)?,
        None => preset.scenario,
    };
    if let Some(seed) = opts.seed {
        scenario.seed = seed;
    }
    let mut expectations = preset.expectations;
    if opts.fast {
        scenario = fast_scenario(&scenario);
        expectations = expectations.iter().map(|e| e.widened(FAST_WIDEN)).collect();
    }
    run_scenario(name, &scenario, &expectations, out_dir, opts)
}

/// Runs an arbitrary scenario and evaluates `expectations` on the result.
pub fn run_scenario(
    name: &str,
    scenario: &Scenario,
    expectations: &[Expectation],
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<ExperimentReport> {
    scenario.validate()?;
    let echo = scenario_to_toml(scenario)?;
    let hash = format!("{:x}", Sha256::digest(echo.as_bytes()));
    let mut ctx = Context {
        scenario,
        out_dir,
        render: opts.render,
        report: ExperimentReport::new(name, hash, scenario.seed, opts.fast),
        counts: None,
        record: None,
        psd: None,
        cal: None,
        fit: None,
    };
    ctx.write("scenario.toml", |p| super::io::write_string(p, &echo))?;

    stage("simulate", || ctx.simulate())?;
    let kinds: Vec<&str> = scenario.analyses.iter().map(|a| a.kind()).collect();
    for (i, a) in scenario.analyses.iter().enumerate() {
        let stem = if kinds.iter().filter(|k| **k == a.kind()).count() > 1 {
            format!("{}{i}", a.kind())
        } else {
            a.kind().to_string()
        };
        stage(&format!("analyses[{i}] {}", a.kind()), || ctx.analyse(a, &stem))?;
    }

    ctx.report.evaluate(expectations);
    let mut report = ctx.report;
    report.outputs.push("report.txt".into());
    report.outputs.push("report.json".into());
    super::io::write_string(&out_dir.join("report.txt"), &export_report(&report, ReportFormat::Text))?;
    super::io::write_string(
        &out_dir.join("report.json"),
        &export_report(&report, ReportFormat::Structured),
    )?;
    Ok(report)
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| Error::Stage {
        stage: name.to_string(),
        source: Box::new(e),
    })
}

struct Context<'a> {
    scenario: &'a Scenario,
    out_dir: &'a Path,
    render: bool,
    report: ExperimentReport,
    counts: Option<CountSeries>,
    record: Option<ClosedLoopRecord>,
    /// Latest raw (rate) Welch spectrum and its centre.
    psd: Option<(PsdEstimate, f64)>,
    cal: Option<CalibrationResult>,
    fit: Option<LorentzianFit>,
}

impl Context<'_> {
    fn write(&mut self, file: &str, f: impl FnOnce(&Path) -> Result<()>) -> Result<String> {
        f(&self.out_dir.join(file))?;
        self.report.outputs.push(file.to_string());
        Ok(file.to_string())
    }

    fn metric(&mut self, name: &str, value: f64, unit: &str, source: &str) {
        self.report.push_metric(name, value, unit, source);
    }

    fn plot(&mut self, file: &str, plot: Plot<'_>) -> Result<()> {
        if self.render {
            self.write(file, |p| plot.save(p))?;
        }
        Ok(())
    }

    fn counts(&self) -> &CountSeries {
        self.counts.as_ref().expect("simulation runs first")
    }

    fn calibration(&self) -> Result<CalibrationResult> {
        match self.cal {
            Some(c) => Ok(c),
            None => CalibrationResult::from_model(&self.scenario.det),
        }
    }

    /// Carrier of the loop reference, or the ion resonance.
    fn carrier(&self) -> f64 {
        self.scenario
            .loop_cfg
            .map_or(self.scenario.ion.f0(), |l| l.reference.carrier())
    }

    fn simulate(&mut self) -> Result<()> {
        let s = self.scenario;
        let counts = match &s.loop_cfg {
            Some(l) => {
                let rec = run_closed_loop_with_drive(&s.ion, &s.det, &s.drive, l, s.duration, s.dt, s.seed)?;
                self.write("record.csv", |p| rec.save_csv(p))?;
                self.report.warnings.extend(rec.warnings.iter().cloned());
                let counts = rec.counts.clone();
                self.record = Some(rec);
                counts
            }
            None => {
                let cfg = PipelineConfig {
                    duration: s.duration,
                    dt: s.dt,
                    bin_dt: s.bin_dt,
                    update_dt: s.dt,
                    seed: s.seed,
                    record_timestamps: false,
                };
                run_free(&s.ion, &s.det, &s.drive, &cfg)?.counts
            }
        };
        let factor = (COUNTS_FILE_BIN / counts.bin_dt).round().max(1.0) as u64;
        let coarse = counts.rebin(factor);
        let src = self.write("counts.csv", |p| coarse.save_csv(p))?;
        self.metric("mean_rate", counts.mean_rate(), "counts/s", &src);
        self.counts = Some(counts);
        Ok(())
    }

    fn analyse(&mut self, a: &Analysis, stem: &str) -> Result<()> {
        match a {
            Analysis::Welch(w) => self.welch(w, stem),
            Analysis::Calibrate(c) => self.calibrate(c, stem),
            Analysis::Fit(f) => self.fit(f, stem),
            Analysis::Lockin(l) => self.lockin(l, stem),
            Analysis::Resolution(r) => self.resolution(r, stem),
            Analysis::G2(g) => self.g2(g, stem),
            Analysis::Lock(l) => self.lock(l, stem),
            Analysis::FmBands(f) => self.fm_bands(f, stem),
        }
    }

    fn welch(&mut self, w: &WelchAnalysis, stem: &str) -> Result<()> {
        let center = if w.center > 0.0 { w.center } else { self.carrier() };
        let psd = welch_band(self.counts(), center, w.span, w.segment_len, w.window, w.overlap)?;
        let file = format!("{stem}.csv");
        self.write(&file, |p| psd.save_csv(p))?;
        self.metric("rbw", psd.rbw, "Hz", &file);
        self.metric("welch_averages", psd.n_averages as f64, "1", &file);
        let title = format!("count-rate spectrum, rbw {:.3} Hz", psd.rbw);
        let offsets: Vec<f64> = psd.freqs.iter().map(|f| f - center).collect();
        self.plot(
            &format!("{stem}.svg"),
            Plot {
                title: &title,
                x_label: "offset from centre (Hz)",
                y_label: "S (counts^2/s^2/Hz)",
                log_y: true,
                series: vec![Series { label: "rate PSD", x: &offsets, y: &psd.values }],
            },
        )?;
        self.psd = Some((psd, center));
        Ok(())
    }

    fn tone(&self) -> Option<CalibrationTone> {
        match self.scenario.drive {
            DriveSignal::Sine {
                force_amplitude,
                frequency,
                ..
            } => Some(CalibrationTone {
                frequency: frequency / (2.0 * PI),
                drive_amplitude: force_amplitude,
            }),
            _ => None,
        }
    }

    fn calibrate(&mut self, c: &CalibrateAnalysis, stem: &str) -> Result<()> {
        let s = self.scenario;
        let file = format!("{stem}.csv");
        let (cal, points) = match self.tone() {
            Some(tone) if !c.sweep_forces.is_empty() => {
                let w = 2.0 * PI * tone.frequency;
                let points = c
                    .sweep_forces
                    .par_iter()
                    .enumerate()
                    .map(|(i, &force)| {
                        let drive = DriveSignal::Sine {
                            force_amplitude: force,
                            frequency: w,
                            phase: 0.0,
                        };
                        let mut meter = FringeContrastMeter::default();
                        Simulation::new(s.ion, &drive, s.dt, s.seed.wrapping_add(1000 + i as u64))
                            .stream(c.sweep_duration, |_, x, _| meter.push(x, &s.det))?;
                        Ok(ContrastPoint {
                            drive_amplitude: force,
                            contrast: meter.contrast(&s.det),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (psd, _) = self.psd.as_ref().expect("validated: welch precedes calibrate");
                (calibrate_displacement(psd, &tone, &points, &s.det)?, points)
            }
            _ => (CalibrationResult::from_model(&s.det)?, Vec::new()),
        };
        self.write(&file, |p| {
            super::io::write_atomic(p, |w| {
                writeln!(w, "drive_force_n,contrast")?;
                for pt in &points {
                    writeln!(w, "{:.9e},{:.9e}", pt.drive_amplitude, pt.contrast)?;
                }
                Ok(())
            })
        })?;
        self.metric("calibration_scale", cal.scale, "m^2 s^2/counts^2", &file);
        if !points.is_empty() {
            self.metric("drive_to_amplitude", cal.drive_to_amplitude, "m/N", &file);
            self.metric("contrast_fit_residual", cal.residual, "1", &file);
            if let Some(t) = self.tone() {
                self.metric("tone_amplitude", cal.drive_to_amplitude * t.drive_amplitude, "m", &file);
            }
        }
        self.cal = Some(cal);
        Ok(())
    }

    fn fit(&mut self, f: &FitAnalysis, stem: &str) -> Result<()> {
        let cal = self.calibration()?;
        let (raw, center) = self.psd.as_ref().expect("validated: welch precedes fit");
        let center = *center;
        let disp = raw.to_displacement(&cal).band(center - f.half_width, center + f.half_width);
        let mut data = disp.clone();
        if let (true, Some(tone)) = (f.exclude_tone, self.tone()) {
            let keep: Vec<bool> = data
                .freqs
                .iter()
                .map(|x| (x - tone.frequency).abs() > 5.0 * data.rbw)
                .collect();
            let mut it = keep.iter();
            data.freqs.retain(|_| *it.next().unwrap());
            let mut it = keep.iter();
            data.values.retain(|_| *it.next().unwrap());
        }
        let init = FitInit {
            f0: Some(self.scenario.ion.f0()),
            ..Default::default()
        };
        let fit = lorentzian_fit(&data, Some(init))?;
        let psd_file = format!("{stem}_psd.csv");
        self.write(&psd_file, |p| disp.save_csv(p))?;
        let model: Vec<f64> = disp.freqs.iter().map(|x| fit.model(*x)).collect();
        let file = format!("{stem}.csv");
        self.write(&file, |p| {
            super::io::write_atomic(p, |w| {
                writeln!(w, "f_hz,data_m2_hz,model_m2_hz")?;
                for (i, x) in disp.freqs.iter().enumerate() {
                    writeln!(w, "{:.6},{:.9e},{:.9e}", x, disp.values[i], model[i])?;
                }
                Ok(())
            })
        })?;
        self.metric("fwhm", fit.fwhm, "Hz", &file);
        self.metric("f0_offset", fit.f0 - self.scenario.ion.f0(), "Hz", &file);
        self.metric("sqrt_area", fit.sqrt_area(), "m", &file);
        self.metric("floor", fit.floor, "m^2/Hz", &file);
        self.metric("fit_chi2_per_dof", fit.chi2 / fit.dof.max(1) as f64, "1", &file);
        let offsets: Vec<f64> = disp.freqs.iter().map(|x| x - center).collect();
        self.plot(
            &format!("{stem}.svg"),
            Plot {
                title: "displacement spectrum and Lorentzian fit",
                x_label: "offset from resonance (Hz)",
                y_label: "S_x (m^2/Hz)",
                log_y: true,
                series: vec![
                    Series { label: "data", x: &offsets, y: &disp.values },
                    Series { label: "fit", x: &offsets, y: &model },
                ],
            },
        )?;
        self.fit = Some(fit);
        Ok(())
    }

    fn resolution(&mut self, r: &ResolutionAnalysis, stem: &str) -> Result<()> {
        let fit = self.fit.as_ref().expect("validated: fit precedes resolution");
        let bandwidth = if r.bandwidth > 0.0 { r.bandwidth } else { enbw_lorentzian(fit.fwhm) };
        let floor = fit.floor;
        let res = resolution_metric(floor, bandwidth, &self.scenario.ion)?;
        let file = format!("{stem}.csv");
        self.write(&file, |p| {
            super::io::write_string(
                p,
                &format!(
                    "floor_m2_hz,bandwidth_hz,resolution_m,ratio_to_sql\n{floor:.9e},{bandwidth:.9e},{:.9e},{:.9e}\n",
                    res.meters, res.ratio_to_sql
                ),
            )
        })?;
        self.metric("resolution_bandwidth", bandwidth, "Hz", &file);
        self.metric("resolution", res.meters, "m", &file);
        self.metric("resolution_ratio", res.ratio_to_sql, "1", &file);
        Ok(())
    }

    fn lockin(&mut self, l: &LockinAnalysis, stem: &str) -> Result<()> {
        let cal = self.calibration()?;
        let filter = FilterSpec {
            order: l.order,
            cutoff: lorentzian_equivalent_cutoff(l.order, l.equivalent_linewidth),
        };
        let f0 = self.scenario.ion.f0();
        let mut on = None;
        let mut off = None;
        for (i, &offset) in l.offsets.iter().enumerate() {
            let q = lockin(self.counts(), f0 + offset, 0.0, filter, l.out_fs, Some(&cal))?;
            let file = format!("{stem}_{i}.csv");
            self.write(&file, |p| q.save_csv(p))?;
            let q = q.skip(l.settle);
            let sd = std_dev(&q.x1);
            let name = if offset == 0.0 {
                on = Some(sd);
                "x1_std_on".to_string()
            } else {
                off.get_or_insert(sd);
                format!("x1_std_{offset:+.0}hz")
            };
            self.metric(&name, sd, "m", &file);
            let t: Vec<f64> = (0..q.len()).map(|k| q.time(k)).collect();
            let title = format!("homodyne quadratures, LO offset {offset:+.0} Hz");
            self.plot(
                &format!("{stem}_{i}.svg"),
                Plot {
                    title: &title,
                    x_label: "t (s)",
                    y_label: "m",
                    log_y: false,
                    series: vec![
                        Series { label: "X1", x: &t, y: &q.x1 },
                        Series { label: "X2", x: &t, y: &q.x2 },
                    ],
                },
            )?;
        }
        // thermal part of the on-resonance quadrature against the full
        // motional amplitude: √(linewidth / filter linewidth)
        if let (Some(on), Some(off)) = (on, off) {
            let sqrt_area = match &self.fit {
                Some(f) => f.sqrt_area(),
                None => crate::oscillator::mean_square_displacement(&self.scenario.ion).sqrt(),
            };
            let thermal = (on * on - off * off).max(0.0).sqrt();
            let ratio = sqrt_area / thermal;
            let expected = (self.scenario.ion.fwhm_hz() / l.equivalent_linewidth).sqrt();
            let file = format!("{stem}_0.csv");
            self.metric("bandwidth_scaling_ratio", ratio, "1", &file);
            self.metric("bandwidth_scaling_expected", expected, "1", &file);
            self.metric("bandwidth_scaling_relative", ratio / expected, "1", &file);
        }
        Ok(())
    }

    fn g2(&mut self, g: &G2Analysis, stem: &str) -> Result<()> {
        let center = self.carrier();
        let opts = G2Options {
            center,
            span: g.span,
            max_lag: 1.0 / g.rbw,
            rbw: g.rbw,
        };
        let psd = g2_spectrum(self.counts(), &opts)?;
        let file = format!("{stem}.csv");
        self.write(&file, |p| psd.save_csv(p))?;
        let imax = psd
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i);
        self.metric("g2_rbw", psd.rbw, "Hz", &file);
        self.metric("g2_line_width", line_width_bins(&psd) as f64, "bins", &file);
        self.metric("g2_peak_offset", psd.freqs[imax] - center, "Hz", &file);
        let offsets: Vec<f64> = psd.freqs.iter().map(|f| f - center).collect();
        self.plot(
            &format!("{stem}.svg"),
            Plot {
                title: "autocorrelation spectrum",
                x_label: "offset from reference (Hz)",
                y_label: "counts^2/s^2/Hz",
                log_y: true,
                series: vec![Series { label: "g2 spectrum", x: &offsets, y: &psd.values }],
            },
        )?;
        Ok(())
    }

    fn lock(&mut self, l: &LockAnalysis, stem: &str) -> Result<()> {
        let s = self.scenario;
        let det = &s.det;
        let settings = SidebandSettings {
            span: l.span,
            segment_len: l.segment_len,
            energy_half_width: l.energy_half_width,
        };
        let center = self.carrier();
        let on = sideband_psd(self.counts(), center, det, &settings)?;
        let floor = measured_floor(self.counts(), det)?;
        let m = lock_metrics(&on, center, floor, &settings);
        let file_on = format!("{stem}_on.csv");
        self.write(&file_on, |p| on.save_csv(p))?;
        self.metric("sideband_rbw", on.rbw, "Hz", &file_on);
        self.metric("central_peak_power", m.central_peak_power, "m^2", &file_on);
        self.metric("sideband_energy", m.sideband_energy, "m^2", &file_on);
        self.metric("central_peak_fraction", m.central_peak_fraction, "1", &file_on);
        self.metric("residual_floor", m.residual_floor, "m^2/Hz", &file_on);
        // shape of the central peak: contiguous half-maximum width and
        // position, both in units of the resolution bandwidth
        let near = on.band(center - 10.0 * on.rbw, center + 10.0 * on.rbw);
        let width = line_width_bins(&near) as f64 * near.df() / on.rbw;
        let imax = near
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i);
        self.metric("central_peak_width", width, "rbw", &file_on);
        self.metric("central_peak_offset", (near.freqs[imax] - center) / on.rbw, "rbw", &file_on);
        let res = resolution_metric(m.residual_floor, l.resolution_bandwidth, &s.ion)?;
        self.metric("residual_resolution", res.meters, "m", &file_on);
        self.metric("residual_ratio_to_sql", res.ratio_to_sql, "1", &file_on);

        let offsets: Vec<f64> = on.freqs.iter().map(|f| f - center).collect();
        let mut off_psd = None;
        if l.compare_off {
            let cfg = LoopConfig {
                gain: 0.0,
                integral_gain: 0.0,
                ..s.loop_cfg.expect("validated: lock needs a loop")
            };
            let rec = run_closed_loop_with_drive(
                &s.ion,
                det,
                &s.drive,
                &cfg,
                s.duration,
                s.dt,
                s.seed.wrapping_add(1),
            )?;
            let rec_file = format!("{stem}_off_record.csv");
            self.write(&rec_file, |p| rec.save_csv(p))?;
            let off = sideband_psd(&rec.counts, center, det, &settings)?;
            let file_off = format!("{stem}_off.csv");
            self.write(&file_off, |p| off.save_csv(p))?;
            let floor_off = measured_floor(&rec.counts, det)?;
            let e_off = sideband_energy(&off, center, l.energy_half_width, floor_off);
            self.metric("sideband_energy_off", e_off, "m^2", &file_off);
            self.metric("energy_ratio", m.sideband_energy / e_off, "1", &file_off);
            let band = suppression_band(&on, &off, center)?;
            self.metric("suppression_band", band, "Hz", &file_off);
            off_psd = Some(off);
        }
        let mut series = Vec::new();
        if let Some(off) = &off_psd {
            series.push(Series { label: "PLL off", x: &offsets, y: &off.values });
        }
        series.push(Series { label: "PLL on", x: &offsets, y: &on.values });
        let title = format!("sideband spectrum, rbw {:.3} Hz", on.rbw);
        self.plot(
            &format!("{stem}.svg"),
            Plot {
                title: &title,
                x_label: "offset from reference (Hz)",
                y_label: "S_x (m^2/Hz)",
                log_y: true,
                series,
            },
        )
    }

    fn fm_bands(&mut self, f: &FmBandsAnalysis, stem: &str) -> Result<()> {
        let Some(ReferenceSignal::Fm { carrier, mod_freq, .. }) = self.scenario.loop_cfg.map(|l| l.reference)
        else {
            unreachable!("validated: fm_bands needs an FM reference");
        };
        let settings = SidebandSettings {
            span: f.span,
            segment_len: f.segment_len,
            ..Default::default()
        };
        let psd = sideband_psd(self.counts(), carrier, &self.scenario.det, &settings)?;
        let file = format!("{stem}.csv");
        self.write(&file, |p| psd.save_csv(p))?;
        // strongest bin within ±2 rbw of each expected band
        let peak_offset = |target: f64| {
            let w = 2.0 * psd.rbw;
            psd.freqs
                .iter()
                .zip(&psd.values)
                .filter(|(x, _)| (**x - target).abs() <= w)
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map_or(f64::NAN, |(x, _)| x - target)
        };
        let offs = [
            peak_offset(carrier),
            peak_offset(carrier + mod_freq),
            peak_offset(carrier - mod_freq),
        ];
        let (c, _) = line_at(&psd, carrier);
        let (u, _) = line_at(&psd, carrier + mod_freq);
        let (lo, _) = line_at(&psd, carrier - mod_freq);
        self.metric("fm_rbw", psd.rbw, "Hz", &file);
        self.metric("fm_carrier_offset", offs[0], "Hz", &file);
        self.metric("fm_upper_offset", offs[1], "Hz", &file);
        self.metric("fm_lower_offset", offs[2], "Hz", &file);
        let worst = offs.iter().fold(0.0f64, |m, o| m.max(o.abs())) / psd.rbw;
        self.metric("fm_band_offset_max", worst, "rbw", &file);
        self.metric("fm_sideband_ratio", 0.5 * (u + lo) / c, "1", &file);
        let offsets: Vec<f64> = psd.freqs.iter().map(|x| x - carrier).collect();
        self.plot(
            &format!("{stem}.svg"),
            Plot {
                title: "locked spectrum with FM reference",
                x_label: "offset from carrier (Hz)",
                y_label: "S_x (m^2/Hz)",
                log_y: true,
                series: vec![Series { label: "PLL on", x: &offsets, y: &psd.values }],
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_echo() {
        for name in EXPERIMENTS {
            let p = preset(name).unwrap();
            p.scenario.validate().unwrap();
            let back = parse_scenario(&scenario_to_toml(&p.scenario).unwrap()).unwrap();
            assert_eq!(back, p.scenario, "{name}");
            fast_scenario(&p.scenario).validate().unwrap();
        }
        assert!(preset("fig9").is_err());
    }

    #[test]
    fn tone_preset_amplitudes() {
        let p = preset("fig2a").unwrap();
        let ion = p.scenario.ion;
        assert!((p.scenario.drive.steady_state_amplitude(&ion).unwrap() - 25e-9).abs() < 1e-15);
        let Analysis::Calibrate(c) = &p.scenario.analyses[1] else { panic!() };
        assert_eq!(c.sweep_forces.len(), 5);
        assert_eq!(c.sweep_forces[0], 0.0);
        assert!((c.sweep_forces[4] / c.sweep_forces[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn fast_mode_keeps_averages() {
        let s = fast_scenario(&preset("fig3b").unwrap().scenario);
        assert_eq!(s.duration, FAST_DURATION);
        let Analysis::Lock(l) = s.analyses[0] else { panic!() };
        assert!(s.duration * l.span / l.segment_len as f64 >= 4.5);
        let s = fast_scenario(&preset("fig3d").unwrap().scenario);
        let Analysis::G2(g) = s.analyses[0] else { panic!() };
        assert_eq!(g.rbw, FAST_G2_RBW);
    }

    #[test]
    fn short_run_writes_files_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = preset("fig2cd").unwrap().scenario;
        s.duration = 0.3;
        if let Analysis::Lockin(l) = s.analyses.last_mut().unwrap() {
            l.settle = 0.1;
        }
        let opts = RunOptions { render: true, ..Default::default() };
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        // the short record may not support a fit; only file coverage matters
        let s = Scenario {
            analyses: vec![
                Analysis::Welch(WelchAnalysis::default()),
                s.analyses.last().unwrap().clone(),
            ],
            ..s
        };
        let r = run_scenario("short", &s, &[], &a, &opts).unwrap();
        run_scenario("short", &s, &[], &b, &opts).unwrap();
        for f in &r.outputs {
            assert!(a.join(f).exists(), "{f}");
        }
        for f in ["welch.csv", "lockin_0.csv", "lockin_1.csv", "counts.csv"] {
            let x = std::fs::read(a.join(f)).unwrap();
            let y = std::fs::read(b.join(f)).unwrap();
            assert!(x == y, "{f} differs between identical runs");
        }
        for m in &r.metrics {
            assert!(r.outputs.contains(&m.source), "{} from {}", m.name, m.source);
        }
        let echo = std::fs::read_to_string(a.join("scenario.toml")).unwrap();
        assert!(echo.starts_with("schema_version = 1"));
    }

    #[test]
    fn stage_errors_name_the_analysis() {
        let dir = tempfile::tempdir().unwrap();
        let s = Scenario {
            duration: 0.01,
            analyses: vec![Analysis::G2(G2Analysis::default())],
            ..Default::default()
        };
        match run_scenario("g2", &s, &[], dir.path(), &RunOptions::default()) {
            Err(Error::Stage { stage, source }) => {
                assert!(stage.contains("g2"), "{stage}");
                assert!(matches!(*source, Error::RecordTooShort { .. }));
            }
            other => panic!("{other:?}"),
        }
    }
}
