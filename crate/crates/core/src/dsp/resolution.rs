//! Position resolution implied by a flat noise floor.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oscillator::{sql_displacement, IonParams};

/// Noise-equivalent bandwidth of a Lorentzian line, `(π/2)·fwhm`.
pub fn enbw_lorentzian(fwhm: f64) -> f64 {
    PI / 2.0 * fwhm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    /// m
    pub meters: f64,
    /// `meters` over the ground-state size √(ħ/2Mω₀).
    pub ratio_to_sql: f64,
}

/// `√(floor · bandwidth)` and its ratio to the standard quantum limit.
pub fn resolution_metric(floor: f64, bandwidth: f64, ion: &IonParams) -> Result<Resolution> {
    if !(floor >= 0.0) || !(bandwidth > 0.0) {
        return Err(Error::config("resolution", "need floor >= 0 and bandwidth > 0"));
    }
    let meters = (floor * bandwidth).sqrt();
    Ok(Resolution {
        meters,
        ratio_to_sql: meters / sql_displacement(ion.mass, ion.omega0),
    })
}
