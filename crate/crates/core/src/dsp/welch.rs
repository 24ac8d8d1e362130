//! Welch-averaged periodograms.
//!
//! Two routes share the same segment machinery:
//! * [`welch_real`] / [`welch_psd`]: the full one-sided spectrum of a dense
//!   real sequence.
//! * [`welch_band`]: a zoomed spectrum around a centre frequency. The photon
//!   stream is heterodyned to complex baseband photon by photon and boxcar
//!   decimated, which is what makes 20 s records at 25 MHz bin rate cheap.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{tree_sum, PsdEstimate, PsdUnits};
use crate::detection::CountSeries;
use crate::error::{Error, Result};

const SEGMENTS_PER_TASK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    #[default]
    Hann,
    Rect,
}

impl Window {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rect => vec![1.0; n],
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

struct Segmentation {
    len: usize,
    step: usize,
    count: usize,
}

fn segmentation(total: usize, segment_len: usize, overlap: f64) -> Result<Segmentation> {
    if segment_len < 2 {
        return Err(Error::config("segment_len", "must be at least 2"));
    }
    if !(0.0..=0.9).contains(&overlap) {
        return Err(Error::config("overlap", "must lie in [0, 0.9]"));
    }
    if total < segment_len {
        return Err(Error::analysis(
            "welch",
            format!("series of {total} samples is shorter than one segment of {segment_len}"),
        ));
    }
    let step = ((segment_len as f64 * (1.0 - overlap)).round() as usize).max(1);
    Ok(Segmentation {
        len: segment_len,
        step,
        count: (total - segment_len) / step + 1,
    })
}

/// Sum over segments of `|FFT(w · (seg - mean?))|²`, computed in parallel
/// with a fixed reduction order.
fn periodogram_sum(
    samples: &[Complex64],
    seg: &Segmentation,
    window: &[f64],
    detrend: bool,
) -> Vec<f64> {
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(seg.len);
    let tasks: Vec<usize> = (0..seg.count).step_by(SEGMENTS_PER_TASK).collect();
    let parts: Vec<Vec<f64>> = tasks
        .par_iter()
        .map(|&first| {
            let mut acc = vec![0.0; seg.len];
            let mut buf = vec![Complex64::new(0.0, 0.0); seg.len];
            let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
            for s in first..(first + SEGMENTS_PER_TASK).min(seg.count) {
                let chunk = &samples[s * seg.step..s * seg.step + seg.len];
                let mean = if detrend {
                    chunk.iter().sum::<Complex64>() / seg.len as f64
                } else {
                    Complex64::new(0.0, 0.0)
                };
                for ((b, &x), &w) in buf.iter_mut().zip(chunk).zip(window) {
                    *b = (x - mean) * w;
                }
                fft.process_with_scratch(&mut buf, &mut scratch);
                for (a, b) in acc.iter_mut().zip(&buf) {
                    *a += b.norm_sqr();
                }
            }
            acc
        })
        .collect();
    tree_sum(parts)
}

fn window_stats(window: &[f64], fs: f64) -> (f64, f64) {
    let s1: f64 = window.iter().sum();
    let s2: f64 = window.iter().map(|w| w * w).sum();
    (s2, fs * s2 / (s1 * s1))
}

/// One-sided Welch PSD of a real sequence sampled at `fs`. Each segment has
/// its mean removed; the result satisfies Parseval against the variance.
pub fn welch_real(
    samples: &[f64],
    fs: f64,
    segment_len: usize,
    window: Window,
    overlap: f64,
    units: PsdUnits,
) -> Result<PsdEstimate> {
    let seg = segmentation(samples.len(), segment_len, overlap)?;
    let w = window.coefficients(seg.len);
    let data: Vec<Complex64> = samples.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let sum = periodogram_sum(&data, &seg, &w, true);
    let (s2, rbw) = window_stats(&w, fs);
    let norm = 1.0 / (fs * s2 * seg.count as f64);
    let n = seg.len;
    let half = n / 2;
    let mut freqs = Vec::with_capacity(half + 1);
    let mut values = Vec::with_capacity(half + 1);
    for k in 0..=half {
        let mut v = sum[k] * norm;
        if k != 0 && !(n % 2 == 0 && k == half) {
            v *= 2.0;
        }
        freqs.push(k as f64 * fs / n as f64);
        values.push(v);
    }
    Ok(PsdEstimate {
        freqs,
        values,
        rbw,
        units,
        n_averages: seg.count,
    })
}

/// One-sided Welch PSD of the count rate (counts/s) of a series.
pub fn welch_psd(
    series: &CountSeries,
    segment_len: usize,
    window: Window,
    overlap: f64,
) -> Result<PsdEstimate> {
    if (series.n_bins as usize) < segment_len {
        return Err(Error::analysis(
            "welch",
            format!(
                "series of {} bins is shorter than one segment of {segment_len}",
                series.n_bins
            ),
        ));
    }
    welch_real(
        &series.rates(),
        1.0 / series.bin_dt,
        segment_len,
        window,
        overlap,
        PsdUnits::Rate,
    )
}

/// Complex baseband image of a count-rate signal around `center` Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseband {
    pub center: f64,
    /// Sample rate of the decimated baseband, Hz.
    pub fs: f64,
    /// counts/s, mixed with `exp(-i 2π center t)`.
    pub samples: Vec<Complex64>,
}

/// Mixes every photon (at its bin centre) down by `center` and boxcar
/// decimates to `fs` samples/s.
pub fn heterodyne(series: &CountSeries, center: f64, fs: f64) -> Result<Baseband> {
    if !(fs > 0.0) || !(center >= 0.0) {
        return Err(Error::config("heterodyne", "need fs > 0 and center >= 0"));
    }
    if center >= 0.5 / series.bin_dt {
        return Err(Error::config(
            "center",
            format!("{center} Hz is above the Nyquist frequency of the bins"),
        ));
    }
    let n = (series.duration() * fs).floor() as usize;
    let mut samples = vec![Complex64::new(0.0, 0.0); n];
    for (b, c) in series.nonzero_bins() {
        let t = series.bin_center(b);
        let k = ((t - series.start_time) * fs) as usize;
        if k >= n {
            continue;
        }
        let (s, co) = (2.0 * PI * (center * t).fract()).sin_cos();
        samples[k] += Complex64::new(co, -s) * (c as f64 * fs);
    }
    Ok(Baseband {
        center,
        fs,
        samples,
    })
}

/// Zoomed one-sided PSD of the count rate on `center ± fs/2`.
///
/// The baseband is not mean-subtracted: a line exactly at `center` is kept.
pub fn welch_band(
    series: &CountSeries,
    center: f64,
    fs: f64,
    segment_len: usize,
    window: Window,
    overlap: f64,
) -> Result<PsdEstimate> {
    let bb = heterodyne(series, center, fs)?;
    welch_baseband(&bb, segment_len, window, overlap)
}

pub(crate) fn welch_baseband(
    bb: &Baseband,
    segment_len: usize,
    window: Window,
    overlap: f64,
) -> Result<PsdEstimate> {
    let seg = segmentation(bb.samples.len(), segment_len, overlap)?;
    let w = window.coefficients(seg.len);
    let sum = periodogram_sum(&bb.samples, &seg, &w, false);
    let (s2, rbw) = window_stats(&w, bb.fs);
    // two-sided baseband density doubled into the one-sided convention
    let norm = 2.0 / (bb.fs * s2 * seg.count as f64);
    let n = seg.len;
    let mut freqs = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for j in 0..n {
        // fftshift: k runs from -n/2 to n - n/2 - 1
        let k = j as i64 - (n / 2) as i64;
        let idx = k.rem_euclid(n as i64) as usize;
        freqs.push(bb.center + k as f64 * bb.fs / n as f64);
        values.push(sum[idx] * norm);
    }
    Ok(PsdEstimate {
        freqs,
        values,
        rbw,
        units: PsdUnits::Rate,
        n_averages: seg.count,
    })
}
