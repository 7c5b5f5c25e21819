//! Frequency-domain ANOVA for time series and Yates' algorithm for 2ⁿ
//! factorials.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralRow {
    /// Frequency in cycles per observation, `j / n`.
    pub frequency: f64,
    pub index: usize,
    pub df: usize,
    pub ss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralTable {
    pub n: usize,
    pub mean: f64,
    pub rows: Vec<SpectralRow>,
    /// `Σ(y - ȳ)²`; equals the sum of the row sums of squares.
    pub total_ss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralMethod {
    /// Direct O(n²) sums; always available.
    Direct,
    /// FFT; falls back to the direct sums unless `n` is a power of two.
    Fft,
}

/// Harmonic decomposition of the centered series: one row per Fourier
/// frequency `j = 1..⌊n/2⌋`, two degrees of freedom each except Nyquist.
pub fn periodogram_anova(y: &[f64]) -> Result<SpectralTable> {
    periodogram_anova_with(y, SpectralMethod::Direct)
}

pub fn periodogram_anova_with(y: &[f64], method: SpectralMethod) -> Result<SpectralTable> {
    let n = y.len();
    if n < 2 {
        return Err(Error::TooFewUnits(n, 2));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("series".into()));
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = y.iter().map(|v| v - mean).collect();
    let coefs = match method {
        SpectralMethod::Fft if n.is_power_of_two() => fourier_fft(&centered),
        _ => fourier_direct(&centered),
    };
    let half = n / 2;
    let rows = (1..=half)
        .map(|j| {
            let (a, b) = coefs[j - 1];
            let nyquist = n.is_multiple_of(2) && j == half;
            let ss = if nyquist {
                n as f64 * a * a
            } else {
                n as f64 / 2.0 * (a * a + b * b)
            };
            SpectralRow {
                frequency: j as f64 / n as f64,
                index: j,
                df: if nyquist { 1 } else { 2 },
                ss,
            }
        })
        .collect();
    Ok(SpectralTable {
        n,
        mean,
        rows,
        total_ss: centered.iter().map(|v| v * v).sum(),
    })
}

/// `(a_j, b_j)` for `j = 1..⌊n/2⌋`, with `a_j = (2/n)Σ y_t cos(2πjt/n)`
/// (`1/n` at Nyquist) and `b_j` the sine analog.
fn fourier_direct(y: &[f64]) -> Vec<(f64, f64)> {
    let n = y.len();
    let half = n / 2;
    let w = 2.0 * std::f64::consts::PI / n as f64;
    (1..=half)
        .map(|j| {
            let (mut c, mut s) = (0.0, 0.0);
            for (t, v) in y.iter().enumerate() {
                let arg = w * ((j * t) % n) as f64;
                c += v * arg.cos();
                s += v * arg.sin();
            }
            let scale = if n.is_multiple_of(2) && j == half {
                1.0
            } else {
                2.0
            } / n as f64;
            (scale * c, scale * s)
        })
        .collect()
}

fn fourier_fft(y: &[f64]) -> Vec<(f64, f64)> {
    let n = y.len();
    let half = n / 2;
    let mut buf: Vec<Complex<f64>> = y.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    (1..=half)
        .map(|j| {
            let scale = if n.is_multiple_of(2) && j == half {
                1.0
            } else {
                2.0
            } / n as f64;
            // forward FFT is Σ y e^{-iωt}: real part cos sum, minus imaginary sine sum
            (scale * buf[j].re, -scale * buf[j].im)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divisor {
    /// Raw contrast totals.
    #[default]
    Totals,
    /// Grand mean, then effects `total / 2ⁿ⁻¹`.
    Effects,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YatesEntry {
    pub label: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YatesResult {
    pub n_factors: usize,
    pub divisor: Divisor,
    pub entries: Vec<YatesEntry>,
}

/// Standard-order effect label: `(1)`, `A`, `B`, `AB`, `C`, …
pub fn yates_label(index: usize) -> String {
    if index == 0 {
        return "(1)".into();
    }
    (0..usize::BITS as usize)
        .filter(|b| index >> b & 1 == 1)
        .map(factor_letter)
        .collect()
}

fn factor_letter(b: usize) -> String {
    if b < 26 {
        ((b'A' + b as u8) as char).to_string()
    } else {
        format!("F{}", b + 1)
    }
}

/// Yates' algorithm on responses in standard order: `n` passes of pair sums
/// followed by pair differences. Entry 0 is the grand total.
pub fn yates_transform(y: &[f64], divisor: Divisor) -> Result<YatesResult> {
    let len = y.len();
    if len < 2 || !len.is_power_of_two() {
        return Err(Error::InvalidInput(format!(
            "Yates' algorithm needs 2^n responses with n >= 1, got {len}"
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("responses".into()));
    }
    let n = len.trailing_zeros() as usize;
    let mut col = y.to_vec();
    let mut next = vec![0.0; len];
    for _ in 0..n {
        for i in 0..len / 2 {
            next[i] = col[2 * i] + col[2 * i + 1];
            next[len / 2 + i] = col[2 * i + 1] - col[2 * i];
        }
        std::mem::swap(&mut col, &mut next);
    }
    if divisor == Divisor::Effects {
        col[0] /= len as f64;
        for v in col.iter_mut().skip(1) {
            *v /= (len / 2) as f64;
        }
    }
    Ok(YatesResult {
        n_factors: n,
        divisor,
        entries: col
            .into_iter()
            .enumerate()
            .map(|(i, value)| YatesEntry {
                label: yates_label(i),
                value,
            })
            .collect(),
    })
}
