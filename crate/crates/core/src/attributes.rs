//! Statistical attribute vectors standing in for semantic class descriptors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_ATTRIBUTES: usize = 9;

pub const ATTRIBUTE_NAMES: [&str; NUM_ATTRIBUTES] = [
    "mean", "median", "max", "argmax", "min", "argmin", "skew", "kurtosis", "apen",
];

/// Approximate entropy settings: embedding length `m` and tolerance
/// `r = r_factor * std(series)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApEnParams {
    pub m: usize,
    pub r_factor: f64,
}

impl Default for ApEnParams {
    fn default() -> Self {
        ApEnParams {
            m: 2,
            r_factor: 0.2,
        }
    }
}

/// `[mean, median, max, argmax, min, argmin, skew, kurtosis, apen]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector(pub [f64; NUM_ATTRIBUTES]);

impl AttributeVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        ATTRIBUTE_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.0[i])
    }
}

fn first_extremum(v: &[f64], better: impl Fn(f64, f64) -> bool) -> (f64, usize) {
    let mut best = (v[0], 0);
    for (i, &x) in v.iter().enumerate().skip(1) {
        if better(x, best.0) {
            best = (x, i);
        }
    }
    best
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Population central moments `(mean, m2, m3, m4)`.
fn moments(v: &[f64]) -> (f64, f64, f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in v {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    (mean, m2 / n, m3 / n, m4 / n)
}

fn is_degenerate(m2: f64, mean: f64) -> bool {
    m2.sqrt() <= 1e-12 * mean.abs().max(1.0)
}

/// The nine attributes in fixed order. Zero-variance series get skew,
/// kurtosis and ApEn of 0. Ties in argmax/argmin resolve to the first index.
pub fn compute_attributes(series: &[f64], apen: ApEnParams) -> Result<AttributeVector> {
    if series.len() < 2 {
        return Err(Error::invalid(
            "compute_attributes",
            format!("series length {} < 2", series.len()),
        ));
    }
    let (mean, m2, m3, m4) = moments(series);
    let (max, argmax) = first_extremum(series, |a, b| a > b);
    let (min, argmin) = first_extremum(series, |a, b| a < b);
    let (skew, kurt, ap) = if is_degenerate(m2, mean) {
        (0.0, 0.0, 0.0)
    } else {
        let r = apen.r_factor * m2.sqrt();
        let ap = if series.len() > apen.m {
            approx_entropy(series, apen.m, r)?
        } else {
            0.0
        };
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0, ap)
    };
    Ok(AttributeVector([
        mean,
        median(series),
        max,
        argmax as f64,
        min,
        argmin as f64,
        skew,
        kurt,
        ap,
    ]))
}

/// Mean log fraction of length-`m` templates within Chebyshev distance `r`
/// of each template, self-match included.
fn phi(series: &[f64], m: usize, r: f64) -> f64 {
    let n = series.len() - m + 1;
    let mut total = 0.0;
    for i in 0..n {
        let a = &series[i..i + m];
        let count = (0..n)
            .filter(|&j| {
                series[j..j + m]
                    .iter()
                    .zip(a)
                    .all(|(x, y)| (x - y).abs() <= r)
            })
            .count();
        total += (count as f64 / n as f64).ln();
    }
    total / n as f64
}

/// `ApEn(m, r) = phi_m(r) - phi_{m+1}(r)`.
pub fn approx_entropy(series: &[f64], m: usize, r: f64) -> Result<f64> {
    if m == 0 || series.len() <= m {
        return Err(Error::invalid(
            "approx_entropy",
            format!("need m >= 1 and length > m (m={m}, length={})", series.len()),
        ));
    }
    if r.is_nan() || r < 0.0 {
        return Err(Error::invalid("approx_entropy", format!("tolerance {r} < 0")));
    }
    Ok(phi(series, m, r) - phi(series, m + 1, r))
}

pub fn compute_all(series: &[&[f64]], apen: ApEnParams) -> Result<Vec<AttributeVector>> {
    series.iter().map(|s| compute_attributes(s, apen)).collect()
}

/// CSV dump with header `series_index,mean,...,apen`.
pub fn to_csv(indices: &[usize], attrs: &[AttributeVector]) -> String {
    let mut out = String::from("series_index");
    for n in ATTRIBUTE_NAMES {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (i, a) in indices.iter().zip(attrs) {
        out.push_str(&i.to_string());
        for v in a.0 {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}
