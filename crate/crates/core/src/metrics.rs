//! Error metrics and summary statistics used to compare assimilation runs.

use crate::error::{invalid, Error, Result};

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "metric operands",
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.is_empty() {
        return Err(invalid("metric operands are empty"));
    }
    Ok(())
}

/// Root-mean-square error.
pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b)?;
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sum / a.len() as f64).sqrt())
}

/// Root-mean-square relative error of `est` against `truth`.
pub fn rmsre(est: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(est, truth)?;
    if truth.iter().any(|t| *t == 0.0) {
        return Err(invalid("relative error undefined for a zero truth value"));
    }
    let sum: f64 = est
        .iter()
        .zip(truth)
        .map(|(e, t)| ((e - t) / t).powi(2))
        .sum();
    Ok((sum / est.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width histogram over `[lo, hi]`; values outside are clamped into the end bins.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Histogram> {
    if bins == 0 || !(hi > lo) {
        return Err(invalid("histogram needs bins > 0 and hi > lo"));
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|k| lo + k as f64 * width).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        let b = ((v - lo) / width).floor();
        let b = if b.is_nan() { 0 } else { (b.max(0.0) as usize).min(bins - 1) };
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Fraction of values falling in any of the closed intervals.
pub fn fraction_in(values: &[f64], intervals: &[(f64, f64)]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let hits = values
        .iter()
        .filter(|v| intervals.iter().any(|(lo, hi)| **v >= *lo && **v <= *hi))
        .count();
    hits as f64 / values.len() as f64
}

/// Intervals around the two facies conductivities of the channelized case.
pub const BIMODAL_WINDOWS: [(f64, f64); 2] = [(0.35, 0.65), (2.0, 2.6)];

/// Fraction of nodes whose value lies near either facies value.
pub fn bimodality_index(values: &[f64]) -> f64 {
    fraction_in(values, &BIMODAL_WINDOWS)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_cases() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|x| x - 0.7).collect();
        assert!((rmse(&a, &b).unwrap() - 0.7).abs() < 1e-15);
        assert!(rmse(&a, &[1.0]).is_err());
    }

    #[test]
    fn rmsre_cases() {
        let t = [3.52, 4.44, 5.69, 7.88, 6.31, 1.49, 6.87, 5.55];
        assert_eq!(rmsre(&t, &t).unwrap(), 0.0);
        let e: Vec<f64> = t.iter().map(|x| 1.1 * x).collect();
        assert!((rmsre(&e, &t).unwrap() - 0.1).abs() < 1e-12);
        assert!(rmsre(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn histogram_counts_everything() {
        let v: Vec<f64> = (0..1681).map(|k| (k as f64 * 0.37).sin() * 2.0 + 1.0).collect();
        let h = histogram(&v, 0.0, 3.0, 30).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 1681);
        assert_eq!(h.edges.len(), 31);
    }

    #[test]
    fn bimodality_of_two_valued_field() {
        let v: Vec<f64> = (0..100).map(|k| if k % 3 == 0 { 2.3 } else { 0.5 }).collect();
        assert_eq!(bimodality_index(&v), 1.0);
        assert_eq!(bimodality_index(&[1.0, 1.4]), 0.0);
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
