//! Versioned scenario documents (TOML).
//!
//! Every field has a default, so an empty document is a complete scenario.
//! Unknown keys are rejected. [`scenario_to_toml`] writes every value
//! explicitly, and that echo is what lands next to each experiment's outputs.

use serde::{Deserialize, Serialize};

use crate::control::LoopConfig;
use crate::detection::DetectionParams;
use crate::dsp::Window;
use crate::error::{Error, Result};
use crate::oscillator::{DriveSignal, IonParams};
use crate::pipeline::multiple_of;

pub const SCHEMA_VERSION: u32 = 1;

/// Welch spectrum of the count record around `center`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WelchAnalysis {
    /// Hz; zero means the ion resonance.
    pub center: f64,
    /// Hz
    pub span: f64,
    pub segment_len: usize,
    pub window: Window,
    pub overlap: f64,
}

impl Default for WelchAnalysis {
    fn default() -> Self {
        WelchAnalysis {
            center: 0.0,
            span: 25_000.0,
            // 30 Hz resolution with the Hann window
            segment_len: 1250,
            window: Window::Hann,
            overlap: 0.5,
        }
    }
}

/// Displacement calibration. With a sine drive and a non-empty sweep, the
/// drive's tone and a fringe-contrast sweep calibrate the spectrum;
/// otherwise the detection model does.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateAnalysis {
    /// Drive force amplitudes (N) of the trajectory-only contrast runs.
    pub sweep_forces: Vec<f64>,
    /// s
    pub sweep_duration: f64,
}

impl Default for CalibrateAnalysis {
    fn default() -> Self {
        CalibrateAnalysis {
            sweep_forces: Vec::new(),
            sweep_duration: 2.0,
        }
    }
}

/// Lorentzian fit of the calibrated spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitAnalysis {
    /// Fitted band is `center ± half_width`, Hz.
    pub half_width: f64,
    /// Drop the bins around a sine drive tone before fitting.
    pub exclude_tone: bool,
}

impl Default for FitAnalysis {
    fn default() -> Self {
        FitAnalysis {
            half_width: 5_000.0,
            exclude_tone: true,
        }
    }
}

/// Homodyne quadratures at local oscillators offset from the resonance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LockinAnalysis {
    /// Hz from the ion resonance.
    pub offsets: Vec<f64>,
    pub order: u32,
    /// Width (Hz) of the Lorentzian line whose noise bandwidth the filter
    /// matches.
    pub equivalent_linewidth: f64,
    /// Hz
    pub out_fs: f64,
    /// Filter settling time dropped from the statistics, s.
    pub settle: f64,
}

impl Default for LockinAnalysis {
    fn default() -> Self {
        LockinAnalysis {
            offsets: vec![0.0, 6_000.0],
            order: 4,
            equivalent_linewidth: 30.0,
            out_fs: 2_500.0,
            settle: 0.2,
        }
    }
}

/// Position resolution from the fitted floor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResolutionAnalysis {
    /// Hz; zero means the noise bandwidth of the fitted line.
    pub bandwidth: f64,
}

/// Spectrum from the photon autocorrelation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct G2Analysis {
    /// Hz
    pub span: f64,
    /// Hz
    pub rbw: f64,
}

impl Default for G2Analysis {
    fn default() -> Self {
        G2Analysis {
            span: 500.0,
            rbw: 0.05,
        }
    }
}

/// Lock quality of a closed-loop record, optionally against a free-running
/// record of the same length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LockAnalysis {
    /// Hz
    pub span: f64,
    pub segment_len: usize,
    /// Hz
    pub energy_half_width: f64,
    /// Also run the loop with zero gain and compare.
    pub compare_off: bool,
    /// Bandwidth for the residual-floor resolution, Hz.
    pub resolution_bandwidth: f64,
}

impl Default for LockAnalysis {
    fn default() -> Self {
        LockAnalysis {
            span: 25_000.0,
            segment_len: 3750,
            energy_half_width: 5_000.0,
            compare_off: true,
            resolution_bandwidth: 1.0,
        }
    }
}

/// Carrier and first-sideband powers of a record locked to an FM reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FmBandsAnalysis {
    /// Hz
    pub span: f64,
    pub segment_len: usize,
}

impl Default for FmBandsAnalysis {
    fn default() -> Self {
        FmBandsAnalysis {
            span: 25_000.0,
            segment_len: 32_768,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Analysis {
    Welch(WelchAnalysis),
    Calibrate(CalibrateAnalysis),
    Fit(FitAnalysis),
    Lockin(LockinAnalysis),
    Resolution(ResolutionAnalysis),
    G2(G2Analysis),
    Lock(LockAnalysis),
    FmBands(FmBandsAnalysis),
}

impl Analysis {
    pub fn kind(&self) -> &'static str {
        match self {
            Analysis::Welch(_) => "welch",
            Analysis::Calibrate(_) => "calibrate",
            Analysis::Fit(_) => "fit",
            Analysis::Lockin(_) => "lockin",
            Analysis::Resolution(_) => "resolution",
            Analysis::G2(_) => "g2",
            Analysis::Lock(_) => "lock",
            Analysis::FmBands(_) => "fm_bands",
        }
    }
}

pub fn default_analyses() -> Vec<Analysis> {
    vec![
        Analysis::Welch(WelchAnalysis::default()),
        Analysis::Fit(FitAnalysis::default()),
        Analysis::Resolution(ResolutionAnalysis::default()),
    ]
}

/// A complete simulation-plus-analysis description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    /// s
    pub duration: f64,
    /// Integrator step, s.
    pub dt: f64,
    /// Count bin width, s.
    pub bin_dt: f64,
    pub seed: u64,
    pub ion: IonParams,
    pub det: DetectionParams,
    pub drive: DriveSignal,
    #[serde(rename = "loop", skip_serializing_if = "Option::is_none")]
    pub loop_cfg: Option<LoopConfig>,
    pub analyses: Vec<Analysis>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            schema_version: SCHEMA_VERSION,
            duration: 20.0,
            dt: 4e-8,
            bin_dt: 4e-8,
            seed: 1,
            ion: IonParams::default(),
            det: DetectionParams::default(),
            drive: DriveSignal::None,
            loop_cfg: None,
            analyses: default_analyses(),
        }
    }
}

fn positive(value: f64, key: &str) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, "must be positive and finite"))
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        positive(self.duration, "duration")?;
        positive(self.dt, "dt")?;
        multiple_of(self.bin_dt, self.dt, "bin_dt")?;
        self.ion.validate()?;
        self.det.validate()?;
        self.drive.validate()?;
        if let Some(l) = &self.loop_cfg {
            l.validate()?;
            if (self.bin_dt - self.dt).abs() > 1e-9 * self.dt {
                return Err(Error::config("bin_dt", "must equal dt when a loop is configured"));
            }
            multiple_of(l.update_dt, self.dt, "loop.update_dt")?;
        }
        if self.analyses.is_empty() {
            return Err(Error::config("analyses", "must list at least one analysis"));
        }
        let mut have_welch = false;
        let mut have_fit = false;
        for (i, a) in self.analyses.iter().enumerate() {
            let key = |field: &str| format!("analyses[{i}].{field}");
            match a {
                Analysis::Welch(w) => {
                    positive(w.span, &key("span"))?;
                    if !(0.0..1.0).contains(&w.overlap) {
                        return Err(Error::config(key("overlap"), "must lie in [0, 1)"));
                    }
                    if w.segment_len < 2 {
                        return Err(Error::config(key("segment_len"), "must be at least 2"));
                    }
                    have_welch = true;
                }
                Analysis::Calibrate(c) => {
                    if !have_welch {
                        return Err(Error::config(key("kind"), "calibrate needs an earlier welch"));
                    }
                    positive(c.sweep_duration, &key("sweep_duration"))?;
                    if c.sweep_forces.iter().any(|f| !(*f >= 0.0 && f.is_finite())) {
                        return Err(Error::config(key("sweep_forces"), "must be >= 0"));
                    }
                }
                Analysis::Fit(f) => {
                    if !have_welch {
                        return Err(Error::config(key("kind"), "fit needs an earlier welch"));
                    }
                    positive(f.half_width, &key("half_width"))?;
                    have_fit = true;
                }
                Analysis::Lockin(l) => {
                    if l.offsets.is_empty() {
                        return Err(Error::config(key("offsets"), "must not be empty"));
                    }
                    if l.order == 0 {
                        return Err(Error::config(key("order"), "must be at least 1"));
                    }
                    positive(l.equivalent_linewidth, &key("equivalent_linewidth"))?;
                    positive(l.out_fs, &key("out_fs"))?;
                    if !(l.settle >= 0.0 && l.settle < self.duration) {
                        return Err(Error::config(key("settle"), "must lie in [0, duration)"));
                    }
                }
                Analysis::Resolution(r) => {
                    if !have_fit {
                        return Err(Error::config(key("kind"), "resolution needs an earlier fit"));
                    }
                    if !(r.bandwidth >= 0.0) {
                        return Err(Error::config(key("bandwidth"), "must be >= 0"));
                    }
                }
                Analysis::G2(g) => {
                    positive(g.span, &key("span"))?;
                    positive(g.rbw, &key("rbw"))?;
                }
                Analysis::Lock(l) => {
                    if self.loop_cfg.is_none() {
                        return Err(Error::config(key("kind"), "lock needs a [loop] table"));
                    }
                    positive(l.span, &key("span"))?;
                    positive(l.energy_half_width, &key("energy_half_width"))?;
                    positive(l.resolution_bandwidth, &key("resolution_bandwidth"))?;
                }
                Analysis::FmBands(f) => {
                    let fm = matches!(
                        self.loop_cfg.map(|l| l.reference),
                        Some(crate::control::ReferenceSignal::Fm { .. })
                    );
                    if !fm {
                        return Err(Error::config(key("kind"), "fm_bands needs an FM loop reference"));
                    }
                    positive(f.span, &key("span"))?;
                }
            }
        }
        Ok(())
    }
}

/// Parses and validates a scenario document.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let scenario: Scenario = toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    scenario.validate()?;
    Ok(scenario)
}

/// Full echo of a scenario with every default written out.
pub fn scenario_to_toml(scenario: &Scenario) -> Result<String> {
    toml::to_string(scenario).map_err(|e| Error::Schema(e.to_string()))
}

/// Recursively overlays `top` on `base`. Tables merge key by key; any other
/// value (arrays included) replaces the base value.
pub fn merge_toml(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies a TOML fragment on top of a scenario and re-validates.
pub fn apply_overrides(scenario: &Scenario, overrides: &str) -> Result<Scenario> {
    let mut base = toml::Value::try_from(scenario).map_err(|e| Error::Schema(e.to_string()))?;
    let top: toml::Value = toml::from_str(overrides).map_err(|e| Error::Schema(e.to_string()))?;
    merge_toml(&mut base, top);
    let merged: Scenario = base.try_into().map_err(|e: toml::de::Error| Error::Schema(e.to_string()))?;
    merged.validate()?;
    Ok(merged)
}
