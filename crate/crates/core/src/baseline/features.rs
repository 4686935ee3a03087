use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::BaselineError;
use crate::ingest::WindowRecord;

/// Named per-window features in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }
}

pub const CHANNEL_FEATURES: [&str; 12] = [
    "mean",
    "std",
    "min",
    "max",
    "median",
    "p25",
    "p75",
    "zero_crossing_rate",
    "dominant_frequency_hz",
    "spectral_entropy",
    "spectral_energy",
    "rms",
];

/// Feature names for a window with `n_channels` channels.
pub fn feature_names(n_channels: usize) -> Vec<String> {
    let mut names = Vec::new();
    for c in 0..n_channels {
        for f in CHANNEL_FEATURES {
            names.push(format!("ch{c}.{f}"));
        }
    }
    for a in 0..n_channels {
        for b in a + 1..n_channels {
            names.push(format!("corr.ch{a}.ch{b}"));
        }
    }
    names.push("magnitude.mean".into());
    names.push("magnitude.std".into());
    names
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Linear-interpolated percentile of sorted data, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Fraction of adjacent sample pairs whose mean-removed values change sign.
pub fn zero_crossing_rate(x: &[f64]) -> f64 {
    let (m, _) = mean_std(x);
    let crossings = x.windows(2).filter(|w| (w[0] - m) * (w[1] - m) < 0.0).count();
    crossings as f64 / (x.len() - 1) as f64
}

/// One-sided power spectrum `|X_k|²` (k = 0..=N/2) of the mean-removed signal.
pub fn power_spectrum(x: &[f64]) -> Vec<f64> {
    let (m, _) = mean_std(x);
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v - m, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf[..x.len() / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    if sa < 1e-12 || sb < 1e-12 {
        return 0.0;
    }
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
    (cov / (sa * sb)).clamp(-1.0, 1.0)
}

fn channel_features(x: &[f64], sample_rate: f64, out: &mut Vec<f64>) {
    let n = x.len();
    let (mean, std) = mean_std(x);
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let power = power_spectrum(x);
    let total: f64 = power.iter().sum();
    let mut peak = 0;
    for (k, &p) in power.iter().enumerate() {
        if p > power[peak] {
            peak = k;
        }
    }
    let entropy = if total > 0.0 && power.len() > 1 {
        let h: f64 = power
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| {
                let q = p / total;
                -q * q.ln()
            })
            .sum();
        h / (power.len() as f64).ln()
    } else {
        0.0
    };
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    out.extend([
        mean,
        std,
        sorted[0],
        sorted[n - 1],
        percentile(&sorted, 0.5),
        percentile(&sorted, 0.25),
        percentile(&sorted, 0.75),
        zero_crossing_rate(x),
        peak as f64 * sample_rate / n as f64,
        entropy,
        total / n as f64,
        rms,
    ]);
}

/// Deterministic engineered features for one window.
pub fn engineered_features(window: &WindowRecord) -> Result<FeatureVector, BaselineError> {
    let n = window.len();
    if n < 2 || window.channels.is_empty() {
        return Err(BaselineError::WindowTooShort(n));
    }
    let mut values = Vec::new();
    for c in &window.channels {
        channel_features(c, window.sample_rate, &mut values);
    }
    for a in 0..window.channels.len() {
        for b in a + 1..window.channels.len() {
            values.push(pearson(&window.channels[a], &window.channels[b]));
        }
    }
    let mag: Vec<f64> = (0..n)
        .map(|t| window.channels.iter().map(|c| c[t] * c[t]).sum::<f64>().sqrt())
        .collect();
    let (mm, ms) = mean_std(&mag);
    values.push(mm);
    values.push(ms);
    Ok(FeatureVector {
        names: feature_names(window.channels.len()),
        values,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use proptest::prelude::*;

    use super::*;

    fn win(channels: Vec<Vec<f64>>, rate: f64) -> WindowRecord {
        WindowRecord {
            channels,
            sample_rate: rate,
            label: 0,
            subject: String::new(),
        }
    }

    fn sine(freq: f64, rate: f64, n: usize, amp: f64, phase: f64) -> Vec<f64> {
        (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / rate + phase).sin()).collect()
    }

    #[test]
    fn constant_channel() {
        let f = engineered_features(&win(vec![vec![2.0; 50], sine(3.0, 50.0, 50, 1.0, 0.0)], 50.0)).unwrap();
        assert_eq!(f.get("ch0.std"), Some(0.0));
        assert_eq!(f.get("ch0.zero_crossing_rate"), Some(0.0));
        assert_eq!(f.get("corr.ch0.ch1"), Some(0.0));
        assert_eq!(f.names.len(), f.values.len());
        assert!(f.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dominant_frequency_of_pure_tones() {
        for freq in [5.0, 12.5, 20.0, 31.0] {
            let f = engineered_features(&win(vec![sine(freq, 100.0, 200, 1.0, 0.3)], 100.0)).unwrap();
            assert!((f.get("ch0.dominant_frequency_hz").unwrap() - freq).abs() <= 0.5, "{freq}");
        }
    }

    #[test]
    fn identical_channels_correlate_fully() {
        let s = sine(4.0, 100.0, 100, 1.0, 0.0);
        let f = engineered_features(&win(vec![s.clone(), s], 100.0)).unwrap();
        assert!((f.get("corr.ch0.ch1").unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn short_window_errors() {
        assert!(engineered_features(&win(vec![vec![1.0]], 10.0)).is_err());
    }

    proptest! {
        #[test]
        fn zcr_ignores_offset_and_frequency_ignores_scale(
            offset in -100.0f64..100.0, scale in 0.1f64..50.0, freq in 1u32..40, phase in 0.0f64..6.0,
        ) {
            let s = sine(freq as f64, 100.0, 200, 1.0, phase);
            let shifted: Vec<f64> = s.iter().map(|v| v + offset).collect();
            let scaled: Vec<f64> = s.iter().map(|v| v * scale).collect();
            let base = engineered_features(&win(vec![s], 100.0)).unwrap();
            let sh = engineered_features(&win(vec![shifted], 100.0)).unwrap();
            let sc = engineered_features(&win(vec![scaled], 100.0)).unwrap();
            prop_assert_eq!(base.get("ch0.zero_crossing_rate"), sh.get("ch0.zero_crossing_rate"));
            prop_assert_eq!(base.get("ch0.dominant_frequency_hz"), sc.get("ch0.dominant_frequency_hz"));
        }
    }
}
