//! First-layer conv filter ranking, frequency responses and band labels.

use std::fmt::Write as _;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("top_k = {top_k} exceeds the {channels} available filters")]
    TopK { top_k: usize, channels: usize },
    #[error("n_fft = {n_fft} must be a power of two no smaller than {taps} taps")]
    FftSize { n_fft: usize, taps: usize },
    #[error("expected conv weights of shape [C, 1, K], got {0:?}")]
    Shape(Vec<usize>),
    #[error("filter index {index} out of range for {channels} filters")]
    Index { index: usize, channels: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandClass {
    Lowpass,
    Highpass,
    Bandpass,
    Broadband,
}

impl BandClass {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Lowpass => "lowpass",
            Self::Highpass => "highpass",
            Self::Bandpass => "bandpass",
            Self::Broadband => "broadband",
        }
    }
}

/// Peak-position and edge-ratio thresholds for [`classify_response`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandThresholds {
    pub low_position: f64,
    pub high_position: f64,
    pub tail_ratio: f64,
    pub edge_ratio: f64,
    /// Share of bins at each end treated as an edge region.
    pub edge_fraction: f64,
}

impl Default for BandThresholds {
    fn default() -> Self {
        Self {
            low_position: 0.1,
            high_position: 0.9,
            tail_ratio: 0.3,
            edge_ratio: 0.5,
            edge_fraction: 0.1,
        }
    }
}

fn taps_matrix<T: Scalar>(conv0: &Tensor<T>) -> Result<(usize, usize), FilterError> {
    match conv0.shape() {
        &[c, 1, k] => Ok((c, k)),
        s => Err(FilterError::Shape(s.to_vec())),
    }
}

fn taps_of<T: Scalar>(conv0: &Tensor<T>, i: usize, k: usize) -> Vec<f64> {
    conv0.data()[i * k..(i + 1) * k].iter().map(|v| v.f64()).collect()
}

fn l2(taps: &[f64]) -> f64 {
    taps.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Indices of the `top_k` filters with the largest tap L2 norm, descending;
/// ties go to the lower index.
pub fn select_filters<T: Scalar>(conv0: &Tensor<T>, top_k: usize) -> Result<Vec<usize>, FilterError> {
    let (c, k) = taps_matrix(conv0)?;
    if top_k > c {
        return Err(FilterError::TopK { top_k, channels: c });
    }
    let norms: Vec<f64> = (0..c).map(|i| l2(&taps_of(conv0, i, k))).collect();
    let mut idx: Vec<usize> = (0..c).collect();
    idx.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    idx.truncate(top_k);
    Ok(idx)
}

fn dft(taps: &[f64], n_fft: usize) -> Result<Vec<Complex<f64>>, FilterError> {
    if !n_fft.is_power_of_two() || n_fft < taps.len() || taps.is_empty() {
        return Err(FilterError::FftSize { n_fft, taps: taps.len() });
    }
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for (b, &t) in buf.iter_mut().zip(taps) {
        b.re = t;
    }
    FftPlanner::new().plan_fft_forward(n_fft).process(&mut buf);
    Ok(buf)
}

/// `|DFT|` of the zero-padded taps at bins `0..=n_fft/2`.
pub fn frequency_response(taps: &[f64], n_fft: usize) -> Result<Vec<f64>, FilterError> {
    Ok(dft(taps, n_fft)?[..n_fft / 2 + 1].iter().map(|c| c.norm()).collect())
}

/// `|Σ taps² − mean(|X_k|²)|` over the full spectrum.
pub fn parseval_gap(taps: &[f64], n_fft: usize) -> Result<f64, FilterError> {
    let spec = dft(taps, n_fft)?;
    let time: f64 = taps.iter().map(|v| v * v).sum();
    let freq = spec.iter().map(|c| c.norm_sqr()).sum::<f64>() / n_fft as f64;
    Ok((time - freq).abs())
}

/// Labels a magnitude spectrum by where its peak sits and how much energy
/// remains at the edges.
pub fn classify_response(spectrum: &[f64], t: &BandThresholds) -> BandClass {
    let n = spectrum.len();
    if n < 2 {
        return BandClass::Broadband;
    }
    let mut peak_bin = 0;
    for (i, &v) in spectrum.iter().enumerate() {
        if v > spectrum[peak_bin] {
            peak_bin = i;
        }
    }
    let peak = spectrum[peak_bin];
    if peak <= 0.0 {
        return BandClass::Broadband;
    }
    let p = peak_bin as f64 / (n - 1) as f64;
    let edge = ((n as f64 * t.edge_fraction).ceil() as usize).clamp(1, n);
    let low = spectrum[..edge].iter().copied().fold(0.0, f64::max);
    let high = spectrum[n - edge..].iter().copied().fold(0.0, f64::max);
    if p <= t.low_position && high < t.tail_ratio * peak {
        BandClass::Lowpass
    } else if p >= t.high_position && low < t.tail_ratio * peak {
        BandClass::Highpass
    } else if p > t.low_position && p < t.high_position && low < t.edge_ratio * peak && high < t.edge_ratio * peak {
        BandClass::Bandpass
    } else {
        BandClass::Broadband
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub filter: usize,
    pub l2_norm: f64,
    pub taps: Vec<f64>,
    /// Magnitudes at normalized frequencies `bin / n_fft`, 0..=0.5.
    pub response: Vec<f64>,
    pub band: BandClass,
}

/// Reports for the filters in `indices`, or the top `top_k` by norm.
pub fn analyze_filters<T: Scalar>(
    conv0: &Tensor<T>,
    top_k: usize,
    indices: Option<&[usize]>,
    n_fft: usize,
    thresholds: &BandThresholds,
) -> Result<Vec<FilterReport>, FilterError> {
    let (c, k) = taps_matrix(conv0)?;
    let chosen = match indices {
        Some(ix) => {
            if let Some(&bad) = ix.iter().find(|&&i| i >= c) {
                return Err(FilterError::Index { index: bad, channels: c });
            }
            ix.to_vec()
        }
        None => select_filters(conv0, top_k)?,
    };
    chosen
        .into_iter()
        .map(|i| {
            let taps = taps_of(conv0, i, k);
            let response = frequency_response(&taps, n_fft)?;
            Ok(FilterReport {
                filter: i,
                l2_norm: l2(&taps),
                band: classify_response(&response, thresholds),
                taps,
                response,
            })
        })
        .collect()
}

/// `filter,bin,magnitude` rows.
pub fn responses_csv(reports: &[FilterReport]) -> String {
    let mut out = String::from("filter,bin,magnitude\n");
    for r in reports {
        for (bin, m) in r.response.iter().enumerate() {
            writeln!(out, "{},{bin},{m}", r.filter).expect("string write");
        }
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Line chart of the responses, each scaled to its own peak.
pub fn responses_svg(reports: &[FilterReport]) -> String {
    let (w, h, m) = (640.0, 360.0, 40.0);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .expect("string write");
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).expect("string write");
    writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    )
    .expect("string write");
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">normalized frequency (0 to 0.5)</text>"#,
        w / 2.0,
        h - 10.0
    )
    .expect("string write");
    for (j, r) in reports.iter().enumerate() {
        let peak = r.response.iter().copied().fold(0.0, f64::max).max(1e-300);
        let last = (r.response.len().max(2) - 1) as f64;
        let pts: Vec<String> = r
            .response
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let x = m + (w - 2.0 * m) * i as f64 / last;
                let y = h - m - (h - 2.0 * m) * v / peak;
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let color = PALETTE[j % PALETTE.len()];
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        )
        .expect("string write");
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">filter {} ({})</text>"#,
            w - m - 150.0,
            m + 14.0 * j as f64,
            r.filter,
            r.band.tag()
        )
        .expect("string write");
    }
    s.push_str("</svg>\n");
    s
}
