//! Posterior summaries and convergence diagnostics.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub q025: f64,
    pub q975: f64,
}

impl Summary {
    pub fn covers(&self, value: f64) -> bool {
        self.q025 <= value && value <= self.q975
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample variance with the n - 1 divisor.
pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() as f64 - 1.0)
}

/// Quantile with linear interpolation between order statistics
/// (the "type 7" rule: h = (n - 1) p).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = math::floor(h) as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Empty("no draws to summarize".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("posterior summary"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Summary {
        mean: mean(values),
        sd: if values.len() > 1 {
            math::sqrt(variance(values))
        } else {
            0.0
        },
        median: quantile_sorted(&sorted, 0.5),
        q025: quantile_sorted(&sorted, 0.025),
        q975: quantile_sorted(&sorted, 0.975),
    })
}

/// Split potential scale reduction factor: every chain is cut in half and
/// the halves are treated as separate chains.
pub fn split_rhat(chains: &[&[f64]]) -> Result<f64> {
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0) / 2;
    if chains.is_empty() || n < 2 {
        return Err(Error::Empty(
            "split R-hat needs chains of at least 4 draws".into(),
        ));
    }
    let mut halves: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        // Use the trailing 2n draws so every half has n.
        let c = &c[c.len() - 2 * n..];
        halves.push(&c[..n]);
        halves.push(&c[n..]);
    }
    let m = halves.len() as f64;
    let nf = n as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let grand = mean(&means);
    let b = nf / (m - 1.0) * means.iter().map(|x| (x - grand) * (x - grand)).sum::<f64>();
    let w = halves.iter().map(|h| variance(h)).sum::<f64>() / m;
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    Ok(math::sqrt(var_plus / w))
}

/// Standard error of the mean from non-overlapping batch means.
pub fn batch_means_se(values: &[f64], batches: usize) -> Result<f64> {
    let size = values.len() / batches.max(1);
    if batches < 2 || size == 0 {
        return Err(Error::Empty("not enough draws for batch means".into()));
    }
    let bm: Vec<f64> = (0..batches)
        .map(|b| mean(&values[b * size..(b + 1) * size]))
        .collect();
    Ok(math::sqrt(variance(&bm) / batches as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn type7_quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        let s = summarize(&v).unwrap();
        assert_eq!(s.median, 3.0);
        assert!((s.q025 - 1.1).abs() < 1e-12);
        assert!((s.q975 - 4.9).abs() < 1e-12);
        assert_eq!(s.mean, 3.0);
        assert!((s.sd - 2.5f64.sqrt()).abs() < 1e-12);
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn rhat_detects_disagreement() {
        let a: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 0.003).collect();
        let r = split_rhat(&[&a, &b]).unwrap();
        assert!(r < 1.01, "{r}");
        let c: Vec<f64> = a.iter().map(|x| x + 5.0).collect();
        assert!(split_rhat(&[&a, &c]).unwrap() > 2.0);
        let trend: Vec<f64> = (0..200).map(|i| i as f64).collect();
        assert!(split_rhat(&[&trend]).unwrap() > 1.5);
        let constant = vec![1.0; 10];
        assert_eq!(split_rhat(&[&constant, &constant]).unwrap(), 1.0);
    }
}
