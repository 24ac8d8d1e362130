//! Spectroscopy through the photon autocorrelation.
//!
//! The count stream is mixed down around a centre frequency, its complex
//! autocorrelation is formed over lags up to `max_lag`, and the lag function
//! is Fourier transformed. Output stays in raw rate units.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{PsdEstimate, PsdUnits};
use crate::detection::CountSeries;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct G2Options {
    /// Centre of the analysed band, Hz.
    pub center: f64,
    /// Width of the analysed band (baseband sample rate), Hz.
    pub span: f64,
    /// Longest lag, s. The output grid spacing is `1/max_lag`.
    pub max_lag: f64,
    /// Requested resolution, Hz.
    pub rbw: f64,
}

impl G2Options {
    pub fn validate(&self) -> Result<()> {
        if !(self.center > 0.0 && self.span > 0.0 && self.rbw > 0.0) {
            return Err(Error::config("g2", "center, span and rbw must be > 0"));
        }
        if !(self.span < 2.0 * self.center) {
            return Err(Error::config("g2.span", "band must stay above 0 Hz"));
        }
        if self.max_lag * self.rbw < 1.0 - 1e-9 {
            return Err(Error::config(
                "g2.max_lag",
                format!("must be at least 1/rbw = {} s", 1.0 / self.rbw),
            ));
        }
        Ok(())
    }
}

/// Photon arrival times: exact when recorded, otherwise bin centres.
fn mix_down(series: &CountSeries, center: f64, fs: f64, n: usize) -> Vec<Complex64> {
    let mut z = vec![Complex64::new(0.0, 0.0); n];
    let mut add = |t: f64, c: f64| {
        let k = ((t - series.start_time) * fs) as usize;
        if k < n {
            let (s, co) = (2.0 * PI * (center * t).fract()).sin_cos();
            z[k] += Complex64::new(co, -s) * (c * fs);
        }
    };
    match series.timestamps() {
        Some(ts) => ts.iter().for_each(|&t| add(t, 1.0)),
        None => series
            .nonzero_bins()
            .for_each(|(b, c)| add(series.bin_center(b), c as f64)),
    }
    z
}

/// Fourier transform of the count-rate autocorrelation around `opts.center`.
pub fn g2_spectrum(series: &CountSeries, opts: &G2Options) -> Result<PsdEstimate> {
    opts.validate()?;
    let need = 1.0 / opts.rbw;
    let have = series.duration();
    if have < need * (1.0 - 1e-9) {
        return Err(Error::RecordTooShort {
            have,
            need,
            rbw: opts.rbw,
        });
    }
    if opts.center + opts.span / 2.0 >= 0.5 / series.bin_dt {
        return Err(Error::config("g2.center", "band extends above the count Nyquist"));
    }
    let fs = opts.span;
    let n = (have * fs).floor() as usize;
    let z = mix_down(series, opts.center, fs, n);
    let lags = ((opts.max_lag * fs).round() as usize).min(n - 1).max(1);

    // biased autocorrelation R[k] = (1/N) Σ z[j+k] z*[j] via zero-padded FFT
    let m = (n + lags).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(m);
    let inv = planner.plan_fft_inverse(m);
    let mut buf = z;
    buf.resize(m, Complex64::new(0.0, 0.0));
    fwd.process(&mut buf);
    for v in &mut buf {
        *v = Complex64::new(v.norm_sqr(), 0.0);
    }
    inv.process(&mut buf);
    let norm = 1.0 / (m as f64 * n as f64);
    // buf[k] now holds Σ z[j] z*[j-k]·m, i.e. R[k] for the lag convention
    // R[k] = ⟨z(t+k) z*(t)⟩

    // lag sequence on a 2K ring, transformed to the spectrum
    let k2 = 2 * lags;
    let mut r = vec![Complex64::new(0.0, 0.0); k2];
    r[0] = buf[0] * norm;
    for k in 1..lags {
        r[k] = buf[k] * norm;
        r[k2 - k] = buf[m - k] * norm;
    }
    r[lags] = 0.5 * (buf[lags] + buf[m - lags]) * norm;
    let fft = planner.plan_fft_forward(k2);
    fft.process(&mut r);

    // FFT of R over +k gives Σ R[k] e^{-i2π j k / 2K}; keep every other bin
    let spacing = fs / k2 as f64;
    let mut freqs = Vec::with_capacity(lags);
    let mut values = Vec::with_capacity(lags);
    for j in (0..k2).step_by(2) {
        let signed = if j < lags { j as i64 } else { j as i64 - k2 as i64 };
        freqs.push((signed as f64, (2.0 * r[j].re / fs).max(0.0)));
    }
    freqs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (grid, vals): (Vec<f64>, Vec<f64>) = freqs
        .into_iter()
        .map(|(k, v)| (opts.center + k * spacing, v))
        .unzip();
    values.extend(vals);
    Ok(PsdEstimate {
        freqs: grid,
        values,
        rbw: 2.0 * spacing,
        units: PsdUnits::Rate,
        n_averages: 1,
    })
}

/// Number of contiguous bins around the maximum at or above half of it.
pub fn line_width_bins(psd: &PsdEstimate) -> usize {
    let Some((imax, &peak)) = psd.values.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1))
    else {
        return 0;
    };
    let half = 0.5 * peak;
    let hi = (imax..psd.len()).take_while(|&i| psd.values[i] >= half).count();
    let lo = (0..imax).rev().take_while(|&i| psd.values[i] >= half).count();
    hi + lo
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::Poisson;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn opts(rbw: f64) -> G2Options {
        G2Options {
            center: 200_000.0,
            span: 1000.0,
            max_lag: 1.0 / rbw,
            rbw,
        }
    }

    fn series(duration: f64, rate: impl Fn(f64) -> f64, seed: u64) -> CountSeries {
        let bin = 1e-6;
        let n = (duration / bin) as usize;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let counts: Vec<u32> = (0..n)
            .map(|i| {
                let mu = rate((i as f64 + 0.5) * bin) * bin;
                if mu > 0.0 {
                    rng.sample(Poisson::new(mu).unwrap()) as u32
                } else {
                    0
                }
            })
            .collect();
        CountSeries::from_counts(bin, 0.0, &counts).unwrap()
    }

    #[test]
    fn short_record_names_required_duration() {
        let s = series(1.0, |_| 1e4, 1);
        match g2_spectrum(&s, &opts(0.05)) {
            Err(Error::RecordTooShort { need, .. }) => assert!((need - 20.0).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn poisson_stream_is_flat() {
        let i0 = 2e4;
        let s = series(20.0, |_| i0, 2);
        let psd = g2_spectrum(&s, &opts(0.5)).unwrap();
        assert!((psd.rbw - 0.5).abs() < 1e-12);
        let mean = psd.values.iter().sum::<f64>() / psd.len() as f64;
        // boxcar decimation rolls off toward the band edges
        assert!((mean / (2.0 * i0) - 1.0).abs() < 0.2, "{mean}");
        let inner: Vec<f64> = psd.band(199_700.0, 200_300.0).values;
        let m_inner = inner.iter().sum::<f64>() / inner.len() as f64;
        assert!((m_inner / (2.0 * i0) - 1.0).abs() < 0.1, "{m_inner}");
        // no line: largest bin within the exponential tail of a flat spectrum
        let max = inner.iter().cloned().fold(0.0, f64::max);
        assert!(max < 15.0 * m_inner, "{max} vs {m_inner}");
    }

    #[test]
    fn coherent_line_is_resolution_limited() {
        let i0 = 2e4;
        let f = 200_000.0 + 3.3;
        let s = series(20.0, |t| i0 * (1.0 + 0.2 * (2.0 * PI * f * t).cos()), 3);
        let psd = g2_spectrum(&s, &opts(0.05)).unwrap();
        let peak = psd.freqs[psd.index_of(f)];
        let imax = psd
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!((psd.freqs[imax] - peak).abs() <= psd.df() + 1e-9);
        assert!(line_width_bins(&psd) <= 2, "{}", line_width_bins(&psd));
        // line power ≈ (0.2 i0)²/2
        let p = psd.integrate(f - 0.2, f + 0.2) - 2.0 * i0 * 0.4;
        let expect = 0.5 * (0.2 * i0).powi(2);
        assert!((p / expect - 1.0).abs() < 0.1, "{p} vs {expect}");
    }
}
