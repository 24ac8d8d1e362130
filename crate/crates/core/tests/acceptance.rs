//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Full-length (20 s) records; outputs go to
//! `$IONLOCK_OUT_DIR/acceptance` when set, otherwise to a temporary
//! directory.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use ionlock::consts::{AMU, K_B};
use ionlock::control::{run_closed_loop, LoopConfig};
use ionlock::detection::{
    shot_floor_rate_density, CountSeries, DetectionParams, FringeContrastMeter,
};
use ionlock::dsp::{
    calibrate_displacement, lockin, welch_band, welch_real, CalibrationResult, CalibrationTone,
    ContrastPoint, FilterSpec, PsdUnits, Window,
};
use ionlock::harness::{run_experiment, ExperimentReport, RunOptions};
use ionlock::oscillator::{analytic_psd, sql_displacement, DriveSignal, IonParams, Simulation};
use ionlock::pipeline::{run_free, PipelineConfig};

const DT: f64 = 4e-8;

// criterion 1
const SQL_TARGET: f64 = 5.94e-9;
const SQL_TOL: f64 = 0.005;
// criterion 2
const FIT_FWHM: (f64, f64) = (380.0, 0.10);
const FIT_F0_ABS: f64 = 20.0;
const FIT_SQRT_AREA: (f64, f64) = (51e-9, 0.05);
const FIT_FLOOR: (f64, f64) = (1.0e-18, 0.10);
const RESOLUTION: (f64, f64) = (24e-9, 0.10);
const RESOLUTION_RATIO: (f64, f64) = (4.1, 0.4);
const FIG2_RUNTIME_LIMIT: f64 = 180.0;
// criterion 3
const EQUIPARTITION_TOL: f64 = 1e-3;
// criterion 4
const X1_ON: (f64, f64) = (15e-9, 0.20);
const X1_OFF: (f64, f64) = (7e-9, 0.20);
const SCALING_TOL: f64 = 0.20;
// criterion 5
const SHOT_TOL: f64 = 0.05;
const SHOT_MIN_AVERAGES: usize = 100;
// criterion 6
const PEAK_FRACTION: (f64, f64) = (0.05, 0.25);
const ENERGY_RATIO: (f64, f64) = (1.0, 0.2);
const MIN_SUPPRESSION_BAND: f64 = 500.0;
const MAX_RESIDUAL_RATIO: f64 = 0.5;
const MAX_PEAK_WIDTH_RBW: f64 = 2.0;
// criterion 7
const FM_RATIO_TOL: f64 = 0.20;
const FM_MAX_OFFSET_RBW: f64 = 1.0;
// criterion 8
const MAX_G2_WIDTH_BINS: f64 = 2.0;
// criterion 9
const PARSEVAL_TOL: f64 = 0.01;
const PHASE_INVARIANCE_TOL: f64 = 1e-3;
const CALIBRATION_TOL: f64 = 0.05;
const Z95: f64 = 1.96;

struct Suite {
    failures: usize,
}

impl Suite {
    fn check(&mut self, id: &str, name: &str, pass: bool, detail: String) {
        println!("{} [{id}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failures += 1;
        }
    }
}

fn within(value: f64, (target, rel): (f64, f64)) -> bool {
    (value / target - 1.0).abs() <= rel
}

fn within_abs(value: f64, (target, abs): (f64, f64)) -> bool {
    (value - target).abs() <= abs
}

fn metric(r: &ExperimentReport, name: &str) -> f64 {
    r.metric(name).unwrap_or(f64::NAN)
}

fn experiment(out: &Path, name: &str) -> Result<(ExperimentReport, f64), String> {
    let t = Instant::now();
    run_experiment(name, None, &out.join(name), &RunOptions::default())
        .map(|r| (r, t.elapsed().as_secs_f64()))
        .map_err(|e| e.to_string())
}

fn sql(s: &mut Suite) {
    let v = sql_displacement(138.0 * AMU, 2.0 * PI * 1.039e6);
    s.check(
        "1",
        "standard quantum limit",
        within(v, (SQL_TARGET, SQL_TOL)),
        format!("{:.4} nm (target {:.2} nm ± {:.1}%)", v * 1e9, SQL_TARGET * 1e9, SQL_TOL * 100.0),
    );
}

fn free_spectrum(s: &mut Suite, out: &Path) {
    match experiment(out, "fig2a") {
        Ok((r, secs)) => {
            let fwhm = metric(&r, "fwhm");
            let df0 = metric(&r, "f0_offset");
            let amp = metric(&r, "sqrt_area");
            let floor = metric(&r, "floor");
            let res = metric(&r, "resolution");
            let ratio = metric(&r, "resolution_ratio");
            let pass = within(fwhm, FIT_FWHM)
                && df0.abs() <= FIT_F0_ABS
                && within(amp, FIT_SQRT_AREA)
                && within(floor, FIT_FLOOR)
                && within(res, RESOLUTION)
                && within_abs(ratio, RESOLUTION_RATIO)
                && secs <= FIG2_RUNTIME_LIMIT;
            s.check(
                "2",
                "free-running spectrum",
                pass,
                format!(
                    "fwhm {fwhm:.1} Hz (380 ± 10%), f0 {df0:+.2} Hz (± {FIT_F0_ABS}), \
                     sqrt(area) {:.2} nm (51 ± 5%), floor {:.3} nm^2/Hz (1.0 ± 10%), \
                     resolution {:.2} nm (24 ± 10%), ratio {ratio:.2} (4.1 ± 0.4), runtime {secs:.0} s (<= {FIG2_RUNTIME_LIMIT} s)",
                    amp * 1e9,
                    floor * 1e18,
                    res * 1e9
                ),
            );
        }
        Err(e) => s.check("2", "free-running spectrum", false, e),
    }
}

/// ∫ S_x df by Simpson's rule in u = atan((f - f0)/(fwhm/2)), which maps
/// the Lorentzian onto a nearly flat integrand.
fn equipartition(s: &mut Suite) {
    let ion = IonParams::default();
    let (f0, h) = (ion.f0(), ion.fwhm_hz() / 2.0);
    let (u0, u1) = ((-f0 / h).atan(), PI / 2.0);
    let n = 400_000;
    let du = (u1 - u0) / n as f64;
    let g = |u: f64| {
        if u >= PI / 2.0 {
            // the tail falls as f^-4 while df/du grows as f^2
            return 0.0;
        }
        let c = u.cos();
        analytic_psd(&ion, f0 + h * u.tan()) * h / (c * c)
    };
    let mut sum = g(u0) + g(u1);
    for i in 1..n {
        sum += g(u0 + i as f64 * du) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let integral = sum * du / 3.0;
    let expect = K_B * ion.temperature / (ion.mass * ion.omega0 * ion.omega0);
    let rel = integral / expect - 1.0;
    s.check(
        "3",
        "spectrum integrates to equipartition",
        rel.abs() < EQUIPARTITION_TOL,
        format!("relative deviation {rel:+.2e} (tolerance {EQUIPARTITION_TOL:.0e})"),
    );
}

fn quadratures(s: &mut Suite, out: &Path) {
    match experiment(out, "fig2cd") {
        Ok((r, _)) => {
            let on = metric(&r, "x1_std_on");
            let off = metric(&r, "x1_std_+6000hz");
            let rel = metric(&r, "bandwidth_scaling_relative");
            let ratio = metric(&r, "bandwidth_scaling_ratio");
            s.check(
                "4",
                "homodyne quadratures",
                within(on, X1_ON) && within(off, X1_OFF) && (rel - 1.0).abs() <= SCALING_TOL,
                format!(
                    "X1 std {:.2} nm on (15 ± 20%), {:.2} nm at +6 kHz (7 ± 20%); \
                     sqrt(area)/thermal std {ratio:.3} vs sqrt(380/30) = {:.3} ({:+.1}%, ± 20%)",
                    on * 1e9,
                    off * 1e9,
                    (380.0f64 / 30.0).sqrt(),
                    (rel - 1.0) * 100.0
                ),
            );
        }
        Err(e) => s.check("4", "homodyne quadratures", false, e),
    }
}

fn shot_floor(s: &mut Suite) {
    // zero temperature from rest and no drive: the ion never moves
    let ion = IonParams {
        temperature: 0.0,
        ..Default::default()
    };
    let det = DetectionParams::default();
    let cfg = PipelineConfig {
        duration: 4.0,
        dt: DT,
        bin_dt: DT,
        update_dt: DT,
        seed: 5,
        record_timestamps: false,
    };
    let result = run_free(&ion, &det, &DriveSignal::None, &cfg).and_then(|o| {
        welch_band(&o.counts, ion.f0(), 25e3, 1250, Window::Hann, 0.5)
    });
    let psd = match result {
        Ok(p) => p,
        Err(e) => return s.check("5", "shot-noise floor", false, e.to_string()),
    };
    // flatness: each quarter of the band against the one-sided density 2 I0
    let expect = shot_floor_rate_density(&det);
    let q = psd.len() / 4;
    let quarters: Vec<f64> = (0..4)
        .map(|k| psd.values[k * q..(k + 1) * q].iter().sum::<f64>() / q as f64 / expect)
        .collect();
    let flat = quarters.iter().all(|r| (r - 1.0).abs() < SHOT_TOL);
    let mean = psd.values.iter().sum::<f64>() / psd.len() as f64;
    let cal = CalibrationResult::from_model(&det).unwrap();
    let disp = mean * cal.scale;
    let k = 2.0 * PI / det.wavelength;
    let disp_expect = 1.0 / (2.0 * det.i0 * (det.visibility * k * det.theta.cos()).powi(2));
    s.check(
        "5",
        "shot-noise floor",
        flat && psd.n_averages >= SHOT_MIN_AVERAGES && (disp / disp_expect - 1.0).abs() < SHOT_TOL,
        format!(
            "{} averages; band quarters / 2 I0 = {:.3?} (± 5%); displacement floor {:.4} nm^2/Hz \
             vs 1/(2 I0 V^2 k^2 cos^2) = {:.4} (± 5%)",
            psd.n_averages,
            quarters,
            disp * 1e18,
            disp_expect * 1e18
        ),
    );
}

fn pll_lock(s: &mut Suite, out: &Path) {
    let a = experiment(out, "fig3a");
    let b = experiment(out, "fig3b");
    match (a, b) {
        (Ok((a, _)), Ok((b, _))) => {
            let frac = metric(&a, "central_peak_fraction");
            let energy = metric(&a, "energy_ratio");
            let band = metric(&a, "suppression_band");
            let width = metric(&a, "central_peak_width");
            let offset = metric(&a, "central_peak_offset");
            let resid = metric(&b, "residual_ratio_to_sql");
            let pass = (PEAK_FRACTION.0..=PEAK_FRACTION.1).contains(&frac)
                && within_abs(energy, ENERGY_RATIO)
                && band >= MIN_SUPPRESSION_BAND
                && width <= MAX_PEAK_WIDTH_RBW
                && offset.abs() <= 1.0
                && resid < MAX_RESIDUAL_RATIO;
            s.check(
                "6",
                "phase lock",
                pass,
                format!(
                    "central peak {width:.2} rbw wide at {offset:+.2} rbw from f_LO (<= 2, <= 1); \
                     fraction {frac:.3} ([0.05, 0.25]); energy on/off {energy:.3} (1 ± 0.2); \
                     suppression band {band:.0} Hz (>= 500); residual at 1 Hz {resid:.3} x SQL (< 0.5)"
                ),
            );
        }
        (Err(e), _) | (_, Err(e)) => s.check("6", "phase lock", false, e),
    }
}

fn fm_tracking(s: &mut Suite, out: &Path) {
    match experiment(out, "fig3c") {
        Ok((r, _)) => {
            let ratio = metric(&r, "fm_sideband_ratio");
            let off = metric(&r, "fm_band_offset_max");
            let expect = (ionlock::consts::bessel_j1(1.0) / ionlock::consts::bessel_j0(1.0)).powi(2);
            s.check(
                "7",
                "FM tracking",
                (ratio / expect - 1.0).abs() <= FM_RATIO_TOL && off <= FM_MAX_OFFSET_RBW,
                format!(
                    "sideband/carrier {ratio:.3} vs J1(1)^2/J0(1)^2 = {expect:.3} ({:+.1}%, ± 20%); \
                     worst band offset {off:.2} rbw (<= 1)",
                    (ratio / expect - 1.0) * 100.0
                ),
            );
        }
        Err(e) => s.check("7", "FM tracking", false, e),
    }
}

fn g2(s: &mut Suite, out: &Path) {
    match experiment(out, "fig3d") {
        Ok((r, _)) => {
            let width = metric(&r, "g2_line_width");
            let rbw = metric(&r, "g2_rbw");
            s.check(
                "8",
                "autocorrelation spectroscopy",
                width <= MAX_G2_WIDTH_BINS && (rbw - 0.05).abs() < 1e-3,
                format!("locked line {width:.0} bins wide at {:.1} mHz resolution (<= 2 bins)", rbw * 1e3),
            );
        }
        Err(e) => s.check("8", "autocorrelation spectroscopy", false, e),
    }
}

fn parseval() -> (bool, String) {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
    let x: Vec<f64> = (0..1 << 18).map(|_| rng.gen::<f64>() - 0.5).collect();
    let var = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let mut worst = 0.0f64;
    for (window, overlap) in [(Window::Rect, 0.0), (Window::Hann, 0.5)] {
        let psd = welch_real(&x, 1e4, 1024, window, overlap, PsdUnits::Rate).unwrap();
        let p: f64 = psd.values.iter().sum::<f64>() * psd.df();
        worst = worst.max((p / var - 1.0).abs());
    }
    (worst < PARSEVAL_TOL, format!("Parseval {worst:.1e} (< 1%)"))
}

fn phase_invariance() -> (bool, String) {
    // rate i0 + g a cos(2π f t + ψ), integer counts by dithered rounding
    let (i0, g, a, f, bin) = (1e9, 5e7 / 100e-9, 30e-9, 123_000.0, 1e-7);
    let cal = CalibrationResult {
        scale: 1.0 / (g * g),
        drive_to_amplitude: 0.0,
        residual: 0.0,
    };
    let spec = FilterSpec { order: 4, cutoff: 30.0 };
    let mags: Vec<f64> = [0.0, 0.7, 2.0, -2.9]
        .iter()
        .map(|&psi| {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
            let counts: Vec<u32> = (0..3_000_000)
                .map(|i| {
                    let t = (i as f64 + 0.5) * bin;
                    ((i0 + g * a * (2.0 * PI * f * t + psi).cos()) * bin + rng.gen::<f64>()).floor() as u32
                })
                .collect();
            let s = CountSeries::from_counts(bin, 0.0, &counts).unwrap();
            let q = lockin(&s, f, 0.0, spec, 2500.0, Some(&cal)).unwrap().skip(0.15);
            let m = q.magnitude();
            m.iter().sum::<f64>() / m.len() as f64
        })
        .collect();
    let lo = mags.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mags.iter().cloned().fold(0.0, f64::max);
    let spread = hi / lo - 1.0;
    (spread < PHASE_INVARIANCE_TOL, format!("lock-in phase spread {spread:.1e} (< 0.1%)"))
}

fn calibration_round_trip() -> (bool, String) {
    let ion = IonParams {
        temperature: 2e-5,
        ..Default::default()
    };
    let det = DetectionParams {
        visibility: 0.5,
        i0: 2e5,
        ..Default::default()
    };
    let truth = CalibrationResult::from_model(&det).unwrap().scale;
    let w = 2.0 * PI * (ion.f0() + 2_500.0);
    let unit = DriveSignal::Sine { force_amplitude: 1.0, frequency: w, phase: 0.0 }
        .steady_state_amplitude(&ion)
        .unwrap();
    let sine = |a: f64| DriveSignal::Sine { force_amplitude: a / unit, frequency: w, phase: 0.0 };
    let points: Vec<ContrastPoint> = [0.0, 40e-9, 80e-9, 120e-9]
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let mut m = FringeContrastMeter::default();
            Simulation::new(ion, &sine(a), DT, 100 + i as u64)
                .stream(0.3, |_, x, _| m.push(x, &det))
                .unwrap();
            ContrastPoint { drive_amplitude: a / unit, contrast: m.contrast(&det) }
        })
        .collect();
    let mut worst = 0.0f64;
    for (k, a) in [10e-9, 30e-9, 100e-9].into_iter().enumerate() {
        let cfg = PipelineConfig {
            duration: 4.0,
            dt: DT,
            bin_dt: DT,
            update_dt: DT,
            seed: 7 + k as u64,
            record_timestamps: false,
        };
        let counts = run_free(&ion, &det, &sine(a), &cfg).unwrap().counts;
        let psd = welch_band(&counts, ion.f0(), 25e3, 12_500, Window::Hann, 0.5).unwrap();
        let tone = CalibrationTone { frequency: w / (2.0 * PI), drive_amplitude: a / unit };
        match calibrate_displacement(&psd, &tone, &points, &det) {
            Ok(cal) => worst = worst.max((cal.scale / truth - 1.0).abs()),
            Err(_) => worst = f64::INFINITY,
        }
    }
    (worst < CALIBRATION_TOL, format!("calibration round trip 10-100 nm {:.1}% (< 5%)", worst * 100.0))
}

fn determinism_and_open_loop() -> (bool, bool, String) {
    let ion = IonParams::default();
    let det = DetectionParams::default();
    let cfg = LoopConfig::default();
    let a = run_closed_loop(&ion, &det, &cfg, 0.2, DT, 3).unwrap();
    let b = run_closed_loop(&ion, &det, &cfg, 0.2, DT, 3).unwrap();
    let exact = a.counts.events() == b.counts.events()
        && a.trap_freq_series == b.trap_freq_series
        && a.quadratures.x1 == b.quadratures.x1;

    let open = LoopConfig { gain: 0.0, integral_gain: 0.0, ..cfg };
    let t = 4.0;
    let closed = run_closed_loop(&ion, &det, &open, t, DT, 11).unwrap();
    let free_cfg = PipelineConfig {
        duration: t,
        dt: DT,
        bin_dt: DT,
        update_dt: open.update_dt,
        seed: 12,
        record_timestamps: false,
    };
    let free = run_free(&ion, &det, &DriveSignal::None, &free_cfg).unwrap();
    let (n1, n2) = (closed.counts.total_counts() as f64, free.counts.total_counts() as f64);
    let z_counts = (n1 - n2) / (n1 + n2).sqrt();
    let se = (2.0 / (ion.gamma * t)).sqrt() * 2f64.sqrt();
    let z_var = (closed.motion.variance() / free.motion.variance() - 1.0) / se;
    let open_ok = z_counts.abs() < Z95 && z_var.abs() < Z95;
    (
        exact,
        open_ok,
        format!(
            "determinism {}; gain-0 vs free z-scores: counts {z_counts:+.2}, variance {z_var:+.2} (|z| < 1.96)",
            if exact { "bit-exact" } else { "DIFFERS" }
        ),
    )
}

fn properties(s: &mut Suite) {
    let (p_ok, p) = parseval();
    let (l_ok, l) = phase_invariance();
    let (c_ok, c) = calibration_round_trip();
    let (d_ok, o_ok, d) = determinism_and_open_loop();
    s.check(
        "9",
        "property suite",
        p_ok && l_ok && c_ok && d_ok && o_ok,
        format!("{p}; {l}; {c}; {d}"),
    );
}

fn main() {
    let tmp;
    let out: PathBuf = match std::env::var_os("IONLOCK_OUT_DIR") {
        Some(d) => PathBuf::from(d).join("acceptance"),
        None => {
            tmp = tempfile::tempdir().expect("temporary directory");
            tmp.path().to_path_buf()
        }
    };
    let mut s = Suite { failures: 0 };
    let t = Instant::now();
    sql(&mut s);
    free_spectrum(&mut s, &out);
    equipartition(&mut s);
    quadratures(&mut s, &out);
    shot_floor(&mut s);
    pll_lock(&mut s, &out);
    fm_tracking(&mut s, &out);
    g2(&mut s, &out);
    properties(&mut s);
    println!(
        "acceptance: {} of 9 criteria passed in {:.0} s",
        9 - s.failures,
        t.elapsed().as_secs_f64()
    );
    if s.failures > 0 {
        std::process::exit(1);
    }
}
