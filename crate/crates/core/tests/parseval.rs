//! Integrated Welch spectra carry the signal power.

use ionlock::dsp::{welch_real, PsdUnits, Window};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

fn series(seed: u64, n: usize, scale: f64, offset: f64) -> Vec<f64> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    (0..n).map(|_| offset + scale * (rng.gen::<f64>() - 0.5)).collect()
}

/// Mean over segments of each segment's variance about its own mean.
fn segment_variance(x: &[f64], seg: usize) -> f64 {
    let k = x.len() / seg;
    (0..k)
        .map(|i| {
            let s = &x[i * seg..(i + 1) * seg];
            let m = s.iter().sum::<f64>() / seg as f64;
            s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / seg as f64
        })
        .sum::<f64>()
        / k as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rect_window_is_exact(seed in 0u64..1000, log_seg in 4u32..10, k in 1usize..20,
                            scale in 1e-3f64..1e3, offset in -10f64..10.0, fs in 1.0f64..1e6) {
        let seg = 1usize << log_seg;
        let x = series(seed, seg * k, scale, offset);
        let psd = welch_real(&x, fs, seg, Window::Rect, 0.0, PsdUnits::Rate).unwrap();
        let power: f64 = psd.values.iter().sum::<f64>() * psd.df();
        let var = segment_variance(&x, seg);
        prop_assert!((power / var - 1.0).abs() < 1e-9, "{} vs {}", power, var);
    }

    #[test]
    fn hann_window_within_one_percent(seed in 0u64..1000, scale in 1e-3f64..1e3) {
        let x = series(seed, 1 << 18, scale, 0.0);
        let psd = welch_real(&x, 1e4, 1024, Window::Hann, 0.5, PsdUnits::Rate).unwrap();
        let power: f64 = psd.values.iter().sum::<f64>() * psd.df();
        let var = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        prop_assert!((power / var - 1.0).abs() < 0.01, "{} vs {}", power, var);
    }
}
