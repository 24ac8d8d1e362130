//! Cascaded identical one-pole low-pass filters.
//!
//! The cutoff is the frequency where the whole cascade is 3 dB down, so each
//! section sits at `fc / sqrt(2^(1/n) - 1)`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Pole frequency of each section for a cascade of `order` sections whose
/// cumulative -3 dB point is `cutoff`.
pub fn pole_frequency(order: u32, cutoff: f64) -> f64 {
    cutoff / (2f64.powf(1.0 / order as f64) - 1.0).sqrt()
}

/// One-sided noise-equivalent bandwidth of the (continuous-time) cascade.
pub fn cascade_noise_bandwidth(order: u32, cutoff: f64) -> f64 {
    // ∫0^∞ (1 + (f/fp)²)^-n df = fp √π Γ(n - 1/2) / (2 Γ(n))
    let mut ratio = PI.sqrt();
    for k in 1..order {
        ratio *= (k as f64 - 0.5) / k as f64;
    }
    pole_frequency(order, cutoff) * PI.sqrt() * ratio / 2.0
}

/// Inverse of [`cascade_noise_bandwidth`].
pub fn cutoff_for_noise_bandwidth(order: u32, bandwidth: f64) -> f64 {
    bandwidth / cascade_noise_bandwidth(order, 1.0)
}

/// Cumulative cutoff whose two-sided noise bandwidth equals that of a
/// Lorentzian line of width `fwhm`, i.e. one-sided bandwidth `(π/4) fwhm`.
pub fn lorentzian_equivalent_cutoff(order: u32, fwhm: f64) -> f64 {
    cutoff_for_noise_bandwidth(order, PI / 4.0 * fwhm)
}

/// Streaming cascade of `order` identical one-pole sections.
#[derive(Debug, Clone, PartialEq)]
pub struct OnePoleCascade {
    alpha: f64,
    state: Vec<f64>,
}

impl OnePoleCascade {
    /// `cutoff` is the cumulative -3 dB frequency, `fs` the sample rate.
    pub fn new(order: u32, cutoff: f64, fs: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::config("order", "need at least one pole"));
        }
        if !(cutoff > 0.0 && cutoff < fs / 2.0) {
            return Err(Error::config(
                "cutoff",
                format!("{cutoff} Hz must lie in (0, fs/2 = {} Hz)", fs / 2.0),
            ));
        }
        Self::with_pole(order, pole_frequency(order, cutoff), fs)
    }

    /// Cascade with each section's pole at `pole` Hz.
    pub fn with_pole(order: u32, pole: f64, fs: f64) -> Result<Self> {
        if order == 0 || !(pole > 0.0) || !(fs > 0.0) {
            return Err(Error::config("filter", "need order >= 1, pole > 0, fs > 0"));
        }
        Ok(OnePoleCascade {
            alpha: 1.0 - (-2.0 * PI * pole / fs).exp(),
            state: vec![0.0; order as usize],
        })
    }

    pub fn order(&self) -> u32 {
        self.state.len() as u32
    }

    /// Sets every section to `value`, the steady state for a constant input.
    pub fn reset(&mut self, value: f64) {
        self.state.iter_mut().for_each(|s| *s = value);
    }

    #[inline]
    pub fn push(&mut self, x: f64) -> f64 {
        let mut y = x;
        for s in &mut self.state {
            *s += self.alpha * (y - *s);
            y = *s;
        }
        y
    }

    pub fn output(&self) -> f64 {
        *self.state.last().unwrap_or(&0.0)
    }

    /// Power gain of the discrete cascade at frequency `f`.
    pub fn power_response(&self, f: f64, fs: f64) -> f64 {
        let a = self.alpha;
        let w = 2.0 * PI * f / fs;
        let one = a * a / (1.0 - 2.0 * (1.0 - a) * w.cos() + (1.0 - a) * (1.0 - a));
        one.powi(self.state.len() as i32)
    }
}

/// Filters a uniformly sampled sequence, starting from the first sample's
/// steady state.
pub fn lowpass(samples: &[f64], fs: f64, order: u32, cutoff: f64) -> Result<Vec<f64>> {
    let mut f = OnePoleCascade::new(order, cutoff, fs)?;
    if let Some(&x0) = samples.first() {
        f.reset(x0);
    }
    Ok(samples.iter().map(|&x| f.push(x)).collect())
}
