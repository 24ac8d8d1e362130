//! Weighted Levenberg-Marquardt fit of a thermal resonance on a flat floor.
//!
//! Model, one-sided in f with ω = 2πf, ω₀ = 2πf₀, γ = 2π·fwhm:
//! `S(f) = floor + 4·area·ω₀²γ / ((ω₀² − ω²)² + γ²ω²)`,
//! whose integral over f ∈ [0, ∞) is exactly `area`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{median, PsdEstimate, PsdUnits};
use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 200;
const REL_TOL: f64 = 1e-6;
const REWEIGHT_PASSES: usize = 3;
const MIN_POINTS_ABOVE_FLOOR: usize = 10;

/// Optional starting point; missing entries come from peak heuristics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitInit {
    pub f0: Option<f64>,
    pub fwhm: Option<f64>,
    pub area: Option<f64>,
    pub floor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LorentzianFit {
    /// Hz
    pub f0: f64,
    /// Hz
    pub fwhm: f64,
    /// Integrated line power in the spectrum's units × Hz (m² or counts²/s²).
    pub area: f64,
    /// Spectrum units.
    pub floor: f64,
    /// Parameter order: f0, fwhm, area, floor.
    pub covariance: [[f64; 4]; 4],
    pub chi2: f64,
    pub dof: usize,
    pub iterations: usize,
    pub units: PsdUnits,
}

impl LorentzianFit {
    pub fn sqrt_area(&self) -> f64 {
        self.area.max(0.0).sqrt()
    }

    /// One-sigma uncertainties in parameter order.
    pub fn std_errors(&self) -> [f64; 4] {
        std::array::from_fn(|i| self.covariance[i][i].max(0.0).sqrt())
    }

    pub fn model(&self, f: f64) -> f64 {
        lorentzian_model([self.f0, self.fwhm, self.area, self.floor], f)
    }

    /// Plain-text report: one `name = value ± sigma unit` line per parameter.
    pub fn report(&self) -> String {
        let e = self.std_errors();
        let (a_unit, d_unit) = match self.units {
            PsdUnits::Displacement => ("m^2", "m^2/Hz"),
            PsdUnits::Rate => ("counts^2/s^2", "counts^2/s^2/Hz"),
        };
        let mut s = String::new();
        let _ = writeln!(s, "f0 = {:.6e} ± {:.2e} Hz", self.f0, e[0]);
        let _ = writeln!(s, "fwhm = {:.6e} ± {:.2e} Hz", self.fwhm, e[1]);
        let _ = writeln!(s, "area = {:.6e} ± {:.2e} {a_unit}", self.area, e[2]);
        let _ = writeln!(s, "floor = {:.6e} ± {:.2e} {d_unit}", self.floor, e[3]);
        let _ = writeln!(s, "chi2 = {:.4e} (dof {})", self.chi2, self.dof);
        let _ = writeln!(s, "iterations = {}", self.iterations);
        s
    }
}

/// Model value at `f` for parameters `[f0, fwhm, area, floor]`.
pub fn lorentzian_model(p: [f64; 4], f: f64) -> f64 {
    let (w0, g, w) = (2.0 * PI * p[0], 2.0 * PI * p[1], 2.0 * PI * f);
    let u = w0 * w0 - w * w;
    p[3] + 4.0 * p[2] * w0 * w0 * g / (u * u + g * g * w * w)
}

fn model_and_jacobian(p: &[f64; 4], f: f64) -> (f64, [f64; 4]) {
    let (w0, g, w) = (2.0 * PI * p[0], 2.0 * PI * p[1], 2.0 * PI * f);
    let u = w0 * w0 - w * w;
    let d = u * u + g * g * w * w;
    let shape = 4.0 * w0 * w0 * g / d;
    let num = p[2] * shape * d;
    let d_w0 = 8.0 * p[2] * w0 * g / d - num * 4.0 * u * w0 / (d * d);
    let d_g = 4.0 * p[2] * w0 * w0 / d - num * 2.0 * g * w * w / (d * d);
    (p[3] + p[2] * shape, [2.0 * PI * d_w0, 2.0 * PI * d_g, shape, 1.0])
}

/// Solves the symmetric positive system `a x = b` by Cholesky; None if
/// not positive definite.
fn cholesky_solve(a: &[[f64; 4]; 4], b: &[f64; 4]) -> Option<[f64; 4]> {
    let mut l = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = [0.0; 4];
    for i in 0..4 {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = [0.0; 4];
    for i in (0..4).rev() {
        let mut s = y[i];
        for k in i + 1..4 {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    Some(x)
}

fn invert(a: &[[f64; 4]; 4]) -> Option<[[f64; 4]; 4]> {
    let mut inv = [[0.0; 4]; 4];
    for c in 0..4 {
        let mut e = [0.0; 4];
        e[c] = 1.0;
        let col = cholesky_solve(a, &e)?;
        for r in 0..4 {
            inv[r][c] = col[r];
        }
    }
    Some(inv)
}

struct Normal {
    jtj: [[f64; 4]; 4],
    jtr: [f64; 4],
    chi2: f64,
}

fn normal_equations(psd: &PsdEstimate, p: &[f64; 4], sigma: &[f64]) -> Normal {
    let mut jtj = [[0.0; 4]; 4];
    let mut jtr = [0.0; 4];
    let mut chi2 = 0.0;
    for ((&f, &y), &s) in psd.freqs.iter().zip(&psd.values).zip(sigma) {
        let (m, j) = model_and_jacobian(p, f);
        let r = (y - m) / s;
        chi2 += r * r;
        for a in 0..4 {
            jtr[a] += j[a] / s * r;
            for b in 0..=a {
                jtj[a][b] += j[a] * j[b] / (s * s);
            }
        }
    }
    for a in 0..4 {
        for b in a + 1..4 {
            jtj[a][b] = jtj[b][a];
        }
    }
    Normal { jtj, jtr, chi2 }
}

fn chi2(psd: &PsdEstimate, p: &[f64; 4], sigma: &[f64]) -> f64 {
    psd.freqs
        .iter()
        .zip(&psd.values)
        .zip(sigma)
        .map(|((&f, &y), &s)| ((y - lorentzian_model(*p, f)) / s).powi(2))
        .sum()
}

fn moving_average(v: &[f64], half: usize) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(v.len());
            v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

fn initial_guess(psd: &PsdEstimate, init: Option<FitInit>) -> Result<[f64; 4]> {
    let init = init.unwrap_or_default();
    let mut sorted = psd.values.clone();
    let floor = init.floor.unwrap_or_else(|| {
        // lower-decile level of a mostly flat spectrum, nudged up toward the mean
        sorted.sort_by(f64::total_cmp);
        let tenth = sorted[sorted.len() / 10];
        let mut low: Vec<f64> = sorted[..sorted.len() / 3].to_vec();
        tenth.max(median(&mut low))
    });
    let smooth = moving_average(&psd.values, 2);
    let n_avg = psd.n_averages.max(1) as f64;
    let threshold = floor * (1.0 + 4.0 / (5.0 * n_avg).sqrt()) + f64::MIN_POSITIVE;
    let above = smooth.iter().filter(|v| **v > threshold).count();
    if above < MIN_POINTS_ABOVE_FLOOR {
        return Err(Error::Fit {
            iterations: 0,
            reason: format!(
                "only {above} points rise above the floor; need {MIN_POINTS_ABOVE_FLOOR}"
            ),
        });
    }
    let (imax, &peak) = smooth
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty spectrum");
    let f0 = init.f0.unwrap_or(psd.freqs[imax]);
    let fwhm = init.fwhm.unwrap_or_else(|| {
        let half = floor + 0.5 * (peak - floor);
        let hi = (imax..smooth.len()).find(|&i| smooth[i] < half).unwrap_or(smooth.len() - 1);
        let lo = (0..=imax).rev().find(|&i| smooth[i] < half).unwrap_or(0);
        (psd.freqs[hi] - psd.freqs[lo]).max(2.0 * psd.df())
    });
    let area = init.area.unwrap_or(PI / 2.0 * fwhm * (peak - floor).max(0.0));
    Ok([f0, fwhm, area, floor])
}

/// Fits the resonance model to `psd`, weighting each point by the model
/// value over √(n_averages) and re-weighting a few times.
pub fn lorentzian_fit(psd: &PsdEstimate, init: Option<FitInit>) -> Result<LorentzianFit> {
    psd.validate()?;
    if psd.len() < 5 {
        return Err(Error::Fit {
            iterations: 0,
            reason: "fewer than five spectral points".into(),
        });
    }
    let mut p = initial_guess(psd, init)?;
    let sqrt_n = (psd.n_averages.max(1) as f64).sqrt();
    let mut total_iter = 0;
    let mut sigma = Vec::new();
    let mut last = None;
    for _ in 0..REWEIGHT_PASSES {
        sigma = psd
            .freqs
            .iter()
            .map(|&f| lorentzian_model(p, f).abs().max(f64::MIN_POSITIVE) / sqrt_n)
            .collect();
        let (q, it) = levenberg_marquardt(psd, p, &sigma, total_iter)?;
        total_iter += it;
        let settled = last.is_some_and(|prev: [f64; 4]| converged(&prev, &q, REL_TOL * 10.0));
        p = q;
        last = Some(q);
        if settled {
            break;
        }
    }
    let normal = normal_equations(psd, &p, &sigma);
    let covariance = invert(&normal.jtj).ok_or(Error::Fit {
        iterations: total_iter,
        reason: "singular curvature matrix at the solution".into(),
    })?;
    Ok(LorentzianFit {
        f0: p[0],
        fwhm: p[1],
        area: p[2],
        floor: p[3],
        covariance,
        chi2: normal.chi2,
        dof: psd.len().saturating_sub(4),
        iterations: total_iter,
        units: psd.units,
    })
}

fn converged(a: &[f64; 4], b: &[f64; 4], tol: f64) -> bool {
    // f0 is judged on the scale of the linewidth, the rest relatively
    let scales = [b[1].abs(), b[1].abs(), b[2].abs(), b[3].abs()];
    (0..4).all(|i| (a[i] - b[i]).abs() <= tol * scales[i].max(f64::MIN_POSITIVE))
}

fn levenberg_marquardt(
    psd: &PsdEstimate,
    mut p: [f64; 4],
    sigma: &[f64],
    prior_iter: usize,
) -> Result<([f64; 4], usize)> {
    let mut lambda = 1e-3;
    let mut current = chi2(psd, &p, sigma);
    for it in 1..=MAX_ITERATIONS {
        let n = normal_equations(psd, &p, sigma);
        let mut accepted = false;
        while lambda < 1e12 {
            let mut a = n.jtj;
            for d in 0..4 {
                a[d][d] += lambda * n.jtj[d][d].max(f64::MIN_POSITIVE);
            }
            let Some(step) = cholesky_solve(&a, &n.jtr) else {
                lambda *= 10.0;
                continue;
            };
            let mut q = p;
            for d in 0..4 {
                q[d] += step[d];
            }
            q[1] = q[1].max(1e-3 * p[1]);
            q[2] = q[2].max(0.0);
            q[3] = q[3].max(0.0);
            let c = chi2(psd, &q, sigma);
            if c.is_finite() && c <= current {
                let done = converged(&p, &q, REL_TOL) || current - c <= 1e-15 * current;
                p = q;
                current = c;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if done {
                    return Ok((p, it));
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no downhill step at any damping: already at the minimum
            if current.is_finite() {
                return Ok((p, it));
            }
            break;
        }
    }
    Err(Error::Fit {
        iterations: prior_iter + MAX_ITERATIONS,
        reason: format!(
            "no convergence: f0 {:.6e} Hz, fwhm {:.4e} Hz, area {:.4e}, floor {:.4e}, chi2 {:.4e}",
            p[0], p[1], p[2], p[3], current
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oscillator::{analytic_psd, mean_square_displacement, IonParams};
    use rand::SeedableRng;
    use rand_distr::{Distribution, Gamma};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn grid(center: f64, span: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| center - span / 2.0 + span * i as f64 / (n - 1) as f64).collect()
    }

    fn synthetic(f: &[f64], p: [f64; 4], n_avg: usize) -> PsdEstimate {
        PsdEstimate {
            freqs: f.to_vec(),
            values: f.iter().map(|&x| lorentzian_model(p, x)).collect(),
            rbw: f[1] - f[0],
            units: PsdUnits::Displacement,
            n_averages: n_avg,
        }
    }

    #[test]
    fn area_is_integral() {
        let p = [1e6, 400.0, 2.5e-15, 0.0];
        // Simpson over a wide band; tails beyond contribute ~ fwhm/(π·span)
        let n = 400_001;
        let (a, b) = (0.0, 4e6);
        let h = (b - a) / (n - 1) as f64;
        let s: f64 = (0..n)
            .map(|i| {
                let w = if i == 0 || i == n - 1 { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                w * lorentzian_model(p, a + i as f64 * h)
            })
            .sum::<f64>()
            * h
            / 3.0;
        assert!((s / p[2] - 1.0).abs() < 1e-3, "{s}");
    }

    #[test]
    fn exact_lorentzian_recovered() {
        let p = [1.039e6, 380.0, (51e-9f64).powi(2), 1e-18];
        let f = grid(p[0] + 37.0, 8000.0, 801);
        let fit = lorentzian_fit(&synthetic(&f, p, 1), None).unwrap();
        let got = [fit.f0, fit.fwhm, fit.area, fit.floor];
        for i in 0..4 {
            let scale = if i == 0 { 1.0 } else { p[i] };
            assert!(((got[i] - p[i]) / scale).abs() < 1e-6, "{i}: {} vs {}", got[i], p[i]);
        }
    }

    #[test]
    fn analytic_psd_plus_floor_recovered() {
        let ion = IonParams::default();
        let floor = 1e-18;
        let f = grid(ion.f0(), 10_000.0, 1001);
        let psd = PsdEstimate {
            freqs: f.clone(),
            values: f.iter().map(|&x| analytic_psd(&ion, x) + floor).collect(),
            rbw: 10.0,
            units: PsdUnits::Displacement,
            n_averages: 100,
        };
        let fit = lorentzian_fit(&psd, None).unwrap();
        assert!((fit.f0 - ion.f0()).abs() / ion.fwhm_hz() < 1e-4);
        assert!((fit.fwhm / ion.fwhm_hz() - 1.0).abs() < 1e-4);
        assert!((fit.area / mean_square_displacement(&ion) - 1.0).abs() < 1e-4);
        assert!((fit.floor / floor - 1.0).abs() < 1e-4);
    }

    #[test]
    fn noisy_periodogram_fit_is_unbiased() {
        // averaged periodogram values are Gamma(n, model/n) distributed
        let p = [1e6, 380.0, 2.6e-15, 1e-18];
        let n_avg = 200;
        let f = grid(p[0], 6000.0, 601);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(8);
        let mut psd = synthetic(&f, p, n_avg);
        for v in &mut psd.values {
            *v = Gamma::new(n_avg as f64, *v / n_avg as f64).unwrap().sample(&mut rng);
        }
        let fit = lorentzian_fit(&psd, None).unwrap();
        let e = fit.std_errors();
        assert!((fit.fwhm - p[1]).abs() < 4.0 * e[1], "{} ± {}", fit.fwhm, e[1]);
        assert!((fit.area - p[2]).abs() < 4.0 * e[2]);
        assert!((fit.floor - p[3]).abs() < 4.0 * e[3]);
        assert!(fit.report().contains("fwhm = "));
    }

    #[test]
    fn floor_only_is_rejected_or_empty() {
        let f = grid(1e6, 5000.0, 501);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
        let n_avg = 100;
        let values = f
            .iter()
            .map(|_| Gamma::new(n_avg as f64, 1e-18 / n_avg as f64).unwrap().sample(&mut rng))
            .collect();
        let psd = PsdEstimate {
            freqs: f,
            values,
            rbw: 10.0,
            units: PsdUnits::Displacement,
            n_averages: n_avg,
        };
        match lorentzian_fit(&psd, None) {
            Err(Error::Fit { .. }) => {}
            Ok(fit) => assert!(fit.area < 1.96 * fit.std_errors()[2]),
            Err(e) => panic!("{e}"),
        }
    }
}
