//! Small statistics toolbox shared by the gas and estimator modules.

use rand::Rng;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

/// Compensated (Kahan–Babuška–Neumaier) running sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = NeumaierSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

pub fn sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().collect::<NeumaierSum>().value()
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = sum(xs.iter().copied()) / n;
    if xs.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = sum(xs.iter().map(|x| (x - mean) * (x - mean))) / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn variance(xs: &[f64]) -> f64 {
    let (m, _) = mean_stderr(xs);
    sum(xs.iter().map(|x| (x - m) * (x - m))) / (xs.len() as f64 - 1.0)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, _) = mean_stderr(xs);
    let (my, _) = mean_stderr(ys);
    let sxy = sum(xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)));
    let sxx = sum(xs.iter().map(|x| (x - mx) * (x - mx)));
    let syy = sum(ys.iter().map(|y| (y - my) * (y - my)));
    sxy / (sxx * syy).sqrt()
}

/// Standard normal upper-tail probability, two-sided, for a z-score.
pub fn two_sided_p(z: f64) -> f64 {
    let n = Normal::standard();
    2.0 * (1.0 - n.cdf(z.abs()))
}

/// One-sample Kolmogorov–Smirnov statistic against `cdf`.
pub fn ks_statistic(sample: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    sample.sort_by(f64::total_cmp);
    let n = sample.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sample.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

/// Asymptotic p-value of the KS statistic `d` with `n` samples
/// (Stephens' small-sample correction of the Kolmogorov distribution).
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

/// Pearson chi-square statistic and its upper-tail p-value.
pub fn chi_square(observed: &[f64], expected: &[f64]) -> (f64, f64) {
    let stat = sum(
        observed
            .iter()
            .zip(expected)
            .map(|(o, e)| (o - e) * (o - e) / e),
    );
    let dof = observed.len() as f64 - 1.0;
    let p = 1.0 - ChiSquared::new(dof).expect("positive degrees of freedom").cdf(stat);
    (stat, p)
}

/// Standard deviation over bootstrap replicates of `stat`, resampling
/// `n_units` units with replacement. `stat` receives the multiplicity of each
/// unit.
pub fn bootstrap_stderr<R, F>(n_units: usize, n_resamples: usize, rng: &mut R, mut stat: F) -> f64
where
    R: Rng + ?Sized,
    F: FnMut(&[u32]) -> f64,
{
    let mut weights = vec![0u32; n_units];
    let mut reps = Vec::with_capacity(n_resamples);
    for _ in 0..n_resamples {
        weights.iter_mut().for_each(|w| *w = 0);
        for _ in 0..n_units {
            weights[rng.random_range(0..n_units)] += 1;
        }
        let v = stat(&weights);
        if v.is_finite() {
            reps.push(v);
        }
    }
    if reps.len() < 2 {
        return f64::INFINITY;
    }
    variance(&reps).sqrt()
}

/// Value with its standard error and sample size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub n: u64,
}

impl Estimate {
    pub fn new(value: f64, stderr: f64, n: u64) -> Self {
        Self { value, stderr, n }
    }

    /// `|a - b| / sqrt(se_a² + se_b²)`.
    pub fn z_against(&self, other: &Estimate) -> f64 {
        (self.value - other.value).abs() / self.stderr.hypot(other.stderr)
    }

    /// Relative standard error.
    pub fn rel_err(&self) -> f64 {
        self.stderr / self.value.abs()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn neumaier_recovers_cancellation() {
        let xs = [1.0, 1e100, 1.0, -1e100];
        assert_eq!(sum(xs), 2.0);
        assert_ne!(xs.iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn mean_and_stderr() {
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ks_on_uniform_sample() {
        let mut rng = stream(1, "ks", 0);
        let mut xs: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let d = ks_statistic(&mut xs, |x| x.clamp(0.0, 1.0));
        assert!(ks_p_value(d, xs.len()) > 0.001);
        let mut ys: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let d = ks_statistic(&mut ys, |x| x.clamp(0.0, 1.0));
        assert!(ks_p_value(d, ys.len()) < 1e-6);
    }

    #[test]
    fn ks_p_value_known_point() {
        // Kolmogorov distribution: P[K > 1.358] ≈ 0.05.
        let n = 1_000_000;
        let d = 1.358 / (n as f64).sqrt();
        assert!((ks_p_value(d, n) - 0.05).abs() < 2e-3);
    }

    #[test]
    fn chi_square_reference_value() {
        let (stat, p) = chi_square(&[10.0, 10.0], &[10.0, 10.0]);
        assert_eq!(stat, 0.0);
        assert!((p - 1.0).abs() < 1e-12);
        // χ²₁ upper 5% point is 3.841.
        let d = (3.841_458_820_694_124f64 * 10.0 / 2.0).sqrt();
        let (_, p) = chi_square(&[10.0 - d, 10.0 + d], &[10.0, 10.0]);
        assert!((p - 0.05).abs() < 1e-6);
    }

    #[test]
    fn bootstrap_of_mean_matches_formula() {
        let mut rng = stream(2, "boot", 0);
        let xs: Vec<f64> = (0..2000).map(|_| rng.random::<f64>()).collect();
        let (_, se) = mean_stderr(&xs);
        let bse = bootstrap_stderr(xs.len(), 500, &mut rng, |w| {
            sum(xs.iter().zip(w).map(|(x, &k)| x * k as f64)) / xs.len() as f64
        });
        assert!((bse / se - 1.0).abs() < 0.15, "{bse} vs {se}");
    }
}
