//! Small statistics helpers shared by the estimators.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self {
            value,
            stderr: 0.0,
            samples: 0,
        }
    }

    /// `|value - target| <= k * stderr`, with a tiny absolute floor for exact estimates.
    pub fn consistent_with(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.stderr + 1e-12
    }
}

/// Welford accumulator for mean and variance.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunningStats {
    n: usize,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Combines two accumulators (Chan et al. parallel update).
    pub fn merge(&mut self, other: &Self) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.mean += delta * other.n as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * (self.n as f64 * other.n as f64) / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate {
            value: self.mean,
            stderr: if self.n == 0 {
                0.0
            } else {
                (self.variance() / self.n as f64).sqrt()
            },
            samples: self.n,
        }
    }
}

pub fn binomial_stderr(fraction: f64, samples: usize) -> f64 {
    if samples == 0 {
        return 0.0;
    }
    (fraction * (1.0 - fraction) / samples as f64).sqrt()
}

/// Pearson chi-square goodness-of-fit p-value. Bins with expected count below 5 are pooled
/// into their neighbors before testing.
pub fn chi_square_p_value(observed: &[f64], expected: &[f64]) -> f64 {
    assert_eq!(observed.len(), expected.len());
    let mut pooled: Vec<(f64, f64)> = Vec::new();
    let (mut o_acc, mut e_acc) = (0.0, 0.0);
    for (&o, &e) in observed.iter().zip(expected) {
        o_acc += o;
        e_acc += e;
        if e_acc >= 5.0 {
            pooled.push((o_acc, e_acc));
            o_acc = 0.0;
            e_acc = 0.0;
        }
    }
    if e_acc > 0.0 || o_acc > 0.0 {
        match pooled.last_mut() {
            Some(last) => {
                last.0 += o_acc;
                last.1 += e_acc;
            }
            None => pooled.push((o_acc, e_acc)),
        }
    }
    if pooled.len() < 2 {
        return 1.0;
    }
    let stat: f64 = pooled.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let dof = (pooled.len() - 1) as f64;
    1.0 - ChiSquared::new(dof).expect("positive dof").cdf(stat)
}

/// Ordinary least-squares line `y = a + b x`; returns `(b, stderr of b)`.
pub fn linear_fit_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    if x.len() <= 2 {
        return (slope, 0.0);
    }
    let resid: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let r = b - my - slope * (a - mx);
            r * r
        })
        .sum();
    (slope, (resid / (n - 2.0) / sxx).sqrt())
}

/// Slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_fit_slope(&lx, &ly)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_matches_two_pass() {
        let xs: Vec<f64> = (0..100).map(|k| ((k * 37) % 11) as f64 * 0.3).collect();
        let mut s = RunningStats::new();
        xs.iter().for_each(|&x| s.push(x));
        let mean = xs.iter().sum::<f64>() / 100.0;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 99.0;
        assert!((s.mean() - mean).abs() < 1e-12);
        assert!((s.variance() - var).abs() < 1e-12);

        let mut a = RunningStats::new();
        let mut b = RunningStats::new();
        xs[..40].iter().for_each(|&x| a.push(x));
        xs[40..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        assert!((a.mean() - mean).abs() < 1e-12);
        assert!((a.variance() - var).abs() < 1e-12);
    }

    #[test]
    fn chi_square_extremes() {
        let e = vec![100.0; 10];
        assert!(chi_square_p_value(&e, &e) > 0.99);
        let mut o = e.clone();
        o[0] = 200.0;
        o[1] = 0.0;
        assert!(chi_square_p_value(&o, &e) < 1e-6);
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        let (b, se) = log_log_slope(&x, &y);
        assert!((b - 1.5).abs() < 1e-12);
        assert!(se < 1e-10);
    }
}
