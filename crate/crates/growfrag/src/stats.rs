//! Monte Carlo summary statistics: confidence intervals, goodness-of-fit
//! comparisons, and tail-exponent estimation.
//!
//! Every randomized procedure takes an explicit [`RngStream`] so results are
//! reproducible, and every estimate carries its seed provenance with it.

use rand::seq::SliceRandom;
use rand::RngExt;
use statrs::function::gamma::gamma_lr;

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// How the standard error attached to an estimate was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiMethod {
    /// Sample mean of iid replicates; stderr is the sample standard deviation
    /// over sqrt(n).
    IidMean,
    /// Logarithm of a sample mean; stderr via the delta method,
    /// sd / (mean * sqrt(n)).
    DeltaLog,
    /// Mean of contiguous batch means, for serially dependent sequences.
    BatchMeans,
}

/// A Monte Carlo estimate together with its standard error, the number of
/// underlying replicates, the method that produced the error bar, and the
/// random stream that generated the data.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct EstimateWithCI {
    pub point: f64,
    pub stderr: f64,
    pub n: u64,
    pub method: CiMethod,
    pub seed: RngStream,
}

impl EstimateWithCI {
    /// Half-width of the 95% confidence interval.
    pub fn ci_half_width(&self) -> f64 {
        1.96 * self.stderr
    }

    /// Whether `target` lies within `z` standard errors of the point estimate.
    pub fn within_z(&self, target: f64, z: f64) -> bool {
        (self.point - target).abs() <= z * self.stderr
    }

    /// Rescale by a constant (e.g. divide a terminal cumulant by the horizon);
    /// both the point and the standard error scale.
    pub fn scaled(self, factor: f64) -> Self {
        Self {
            point: self.point * factor,
            stderr: self.stderr * factor.abs(),
            ..self
        }
    }
}

pub fn mean_and_sd(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Sample mean of iid replicates with its standard error.
///
/// `seed` records which stream generated `samples`; it is carried through
/// unchanged. Requires at least two samples.
pub fn mean_with_ci(samples: &[f64], seed: RngStream) -> EstimateWithCI {
    assert!(samples.len() >= 2, "need at least two samples for a standard error");
    let (mean, sd) = mean_and_sd(samples);
    EstimateWithCI {
        point: mean,
        stderr: sd / (samples.len() as f64).sqrt(),
        n: samples.len() as u64,
        method: CiMethod::IidMean,
        seed,
    }
}

/// Logarithm of a sample mean, with the delta-method standard error
/// sd / (mean * sqrt(n)). The sample mean must be positive.
pub fn log_mean_with_ci(samples: &[f64], seed: RngStream) -> EstimateWithCI {
    assert!(samples.len() >= 2, "need at least two samples for a standard error");
    let (mean, sd) = mean_and_sd(samples);
    assert!(mean > 0.0, "log of a non-positive sample mean");
    EstimateWithCI {
        point: mean.ln(),
        stderr: sd / (mean * (samples.len() as f64).sqrt()),
        n: samples.len() as u64,
        method: CiMethod::DeltaLog,
        seed,
    }
}

/// Mean of a serially dependent sequence via non-overlapping batch means:
/// split into `n_batches` contiguous batches (dropping any remainder), average
/// each batch, and treat the batch means as approximately independent.
pub fn batch_means_with_ci(samples: &[f64], n_batches: usize, seed: RngStream) -> EstimateWithCI {
    assert!(n_batches >= 2, "need at least two batches");
    let batch = samples.len() / n_batches;
    assert!(batch >= 1, "fewer samples than batches");
    let means: Vec<f64> = (0..n_batches)
        .map(|k| samples[k * batch..(k + 1) * batch].iter().sum::<f64>() / batch as f64)
        .collect();
    let (mean, sd) = mean_and_sd(&means);
    EstimateWithCI {
        point: mean,
        stderr: sd / (n_batches as f64).sqrt(),
        n: (batch * n_batches) as u64,
        method: CiMethod::BatchMeans,
        seed,
    }
}

/// One-sample Kolmogorov-Smirnov statistic of `samples` against the reference
/// distribution function `cdf`.
pub fn ks_one_sample(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    assert!(!samples.is_empty());
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    d
}

/// Asymptotic 1% critical value for the one-sample KS statistic,
/// 1.62762 / sqrt(n).
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.62762 / (n as f64).sqrt()
}

/// Asymptotic 1% critical value for the two-sample KS statistic.
pub fn ks_two_sample_critical_1pct(n_a: usize, n_b: usize) -> f64 {
    1.62762 * ((n_a + n_b) as f64 / (n_a as f64 * n_b as f64)).sqrt()
}

/// Two-sample Kolmogorov-Smirnov statistic: the largest gap between the two
/// empirical distribution functions.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < sa.len() || j < sb.len() {
        let x = match (sa.get(i), sb.get(j)) {
            (Some(&xa), Some(&xb)) => xa.min(xb),
            (Some(&xa), None) => xa,
            (None, Some(&xb)) => xb,
            (None, None) => unreachable!(),
        };
        while i < sa.len() && sa[i] <= x {
            i += 1;
        }
        while j < sb.len() && sb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Number of relabelings drawn by the permutation test.
pub const PERMUTATION_REPS: usize = 500;

/// Seeded permutation p-value for the two-sample KS statistic: pool the
/// samples, reshuffle the labels `reps` times, and report the add-one-count
/// fraction of relabelings whose statistic is at least the observed one.
pub fn ks_permutation_p(a: &[f64], b: &[f64], reps: usize, stream: RngStream) -> f64 {
    let observed = ks_two_sample(a, b);
    let mut pool: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    let mut rng = stream.rng();
    let mut at_least = 0usize;
    for _ in 0..reps {
        pool.shuffle(&mut rng);
        let (pa, pb) = pool.split_at(a.len());
        if ks_two_sample(pa, pb) >= observed - 1e-12 {
            at_least += 1;
        }
    }
    (1 + at_least) as f64 / (reps + 1) as f64
}

/// Quantile summary of one sample: minimum, lower quartile, median, upper
/// quartile, maximum (linear interpolation between order statistics).
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

/// Compute the five-number summary of a nonempty sample.
pub fn quantiles(samples: &[f64]) -> Quantiles {
    assert!(!samples.is_empty());
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let at = |q: f64| -> f64 {
        let h = q * (sorted.len() - 1) as f64;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    Quantiles {
        min: sorted[0],
        q25: at(0.25),
        median: at(0.5),
        q75: at(0.75),
        max: *sorted.last().unwrap(),
    }
}

/// Distribution comparison of two samples: KS statistic, seeded permutation
/// p-value, and five-number summaries of both sides.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TwoSampleReport {
    pub n_a: usize,
    pub n_b: usize,
    pub ks_statistic: f64,
    pub ks_critical_1pct: f64,
    pub permutation_p: f64,
    pub quantiles_a: Quantiles,
    pub quantiles_b: Quantiles,
}

/// Compare two nonempty samples; the permutation test uses
/// [`PERMUTATION_REPS`] relabelings drawn from `stream`.
pub fn two_sample_report(a: &[f64], b: &[f64], stream: RngStream) -> TwoSampleReport {
    assert!(!a.is_empty() && !b.is_empty());
    TwoSampleReport {
        n_a: a.len(),
        n_b: b.len(),
        ks_statistic: ks_two_sample(a, b),
        ks_critical_1pct: ks_two_sample_critical_1pct(a.len(), b.len()),
        permutation_p: ks_permutation_p(a, b, PERMUTATION_REPS, stream),
        quantiles_a: quantiles(a),
        quantiles_b: quantiles(b),
    }
}

/// Grid resolution for the tail-slope regression.
const TAIL_GRID_POINTS: usize = 12;
/// Bootstrap resamples behind the tail-slope standard error.
const BOOTSTRAP_REPS: usize = 200;
/// Minimum number of samples that must exceed the lower cut.
const TAIL_MIN_SAMPLES: usize = 100;

fn slope_from_counts(counts: &[usize], n: usize, log_r: &[f64]) -> Option<f64> {
    let points: Vec<(f64, f64)> = counts
        .iter()
        .zip(log_r)
        .filter(|(&c, _)| c > 0)
        .map(|(&c, &lr)| (lr, (c as f64 / n as f64).ln()))
        .collect();
    if points.len() < 3 {
        return None;
    }
    let m = points.len() as f64;
    let x_bar = points.iter().map(|p| p.0).sum::<f64>() / m;
    let y_bar = points.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy = points.iter().map(|p| (p.0 - x_bar) * (p.1 - y_bar)).sum::<f64>();
    let sxx = points.iter().map(|p| (p.0 - x_bar) * (p.0 - x_bar)).sum::<f64>();
    Some(sxy / sxx)
}

/// Fit the tail exponent of the empirical survival function: least-squares
/// slope of log survival against log r over a geometric grid in
/// `[r_lo, r_hi]`, with a bootstrap standard error.
///
/// At least [`TAIL_MIN_SAMPLES`] samples must exceed `r_lo`; the survival
/// probability must stay positive on at least three grid points (per
/// bootstrap replicate as well).
pub fn fit_tail_slope(
    samples: &[f64],
    r_lo: f64,
    r_hi: f64,
    stream: RngStream,
) -> Result<(f64, f64)> {
    assert!(r_lo > 0.0 && r_hi > r_lo);
    let n = samples.len();
    let exceed = samples.iter().filter(|&&x| x > r_lo).count();
    if exceed < TAIL_MIN_SAMPLES {
        return Err(Error::InsufficientData {
            what: "samples exceeding the lower tail cut",
            needed: TAIL_MIN_SAMPLES,
            got: exceed,
        });
    }

    let ratio = (r_hi / r_lo).powf(1.0 / (TAIL_GRID_POINTS - 1) as f64);
    let grid: Vec<f64> = (0..TAIL_GRID_POINTS)
        .map(|k| r_lo * ratio.powi(k as i32))
        .collect();
    let log_r: Vec<f64> = grid.iter().map(|r| r.ln()).collect();

    // Bin each sample by the number of grid points it exceeds; exceedance
    // counts at every grid level are then suffix sums of the bin counts,
    // which makes bootstrap replicates cheap.
    let bin_of: Vec<usize> = samples
        .iter()
        .map(|&x| grid.partition_point(|&r| r < x))
        .collect();
    let mut bins = vec![0usize; TAIL_GRID_POINTS + 1];
    for &b in &bin_of {
        bins[b] += 1;
    }
    let suffix_counts = |bins: &[usize]| -> Vec<usize> {
        let mut counts = vec![0usize; TAIL_GRID_POINTS];
        let mut acc = 0usize;
        for k in (0..TAIL_GRID_POINTS).rev() {
            acc += bins[k + 1];
            counts[k] = acc;
        }
        counts
    };

    let slope = slope_from_counts(&suffix_counts(&bins), n, &log_r).ok_or(
        Error::InsufficientData {
            what: "grid points with positive empirical survival",
            needed: 3,
            got: suffix_counts(&bins).iter().filter(|&&c| c > 0).count(),
        },
    )?;

    let mut rng = stream.rng();
    let mut boot_slopes = Vec::with_capacity(BOOTSTRAP_REPS);
    for _ in 0..BOOTSTRAP_REPS {
        let mut rebins = vec![0usize; TAIL_GRID_POINTS + 1];
        for _ in 0..n {
            rebins[bin_of[rng.random_range(0..n)]] += 1;
        }
        if let Some(s) = slope_from_counts(&suffix_counts(&rebins), n, &log_r) {
            boot_slopes.push(s);
        }
    }
    if boot_slopes.len() < BOOTSTRAP_REPS / 2 {
        return Err(Error::InsufficientData {
            what: "bootstrap replicates with usable tail mass",
            needed: BOOTSTRAP_REPS / 2,
            got: boot_slopes.len(),
        });
    }
    let (_, sd) = mean_and_sd(&boot_slopes);
    Ok((slope, sd))
}

/// CDF of the Gamma distribution with shape 3/2 and the given mean
/// (scale = 2 mean / 3).
pub fn gamma_3_2_cdf(x: f64, mean: f64) -> f64 {
    assert!(mean > 0.0);
    if x <= 0.0 {
        return 0.0;
    }
    gamma_lr(1.5, 1.5 * x / mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed() -> RngStream {
        RngStream::root(7)
    }

    #[test]
    fn mean_ci_matches_hand_computation() {
        let est = mean_with_ci(&[1.0, 2.0, 3.0, 4.0], seed());
        assert!((est.point - 2.5).abs() < 1e-15);
        // Sample variance 5/3, so stderr = sqrt(5/3)/2.
        assert!((est.stderr - (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(est.n, 4);
        assert_eq!(est.method, CiMethod::IidMean);
        assert!((est.ci_half_width() - 1.96 * est.stderr).abs() < 1e-15);
    }

    #[test]
    fn constant_samples_have_zero_stderr() {
        let est = mean_with_ci(&[2.5; 10], seed());
        assert_eq!(est.point, 2.5);
        assert_eq!(est.stderr, 0.0);
        assert!(est.within_z(2.5, 3.0));
        assert!(!est.within_z(2.6, 3.0));
    }

    #[test]
    fn log_mean_delta_method() {
        // Mean 2, sample sd sqrt(2): stderr on the log scale is
        // sqrt(2) / (2 * sqrt(2)) = 1/2.
        let est = log_mean_with_ci(&[1.0, 3.0], seed());
        assert!((est.point - 2.0f64.ln()).abs() < 1e-15);
        assert!((est.stderr - 0.5).abs() < 1e-15);
        assert_eq!(est.method, CiMethod::DeltaLog);
    }

    #[test]
    fn scaling_scales_point_and_stderr() {
        let est = mean_with_ci(&[1.0, 2.0, 3.0], seed()).scaled(-2.0);
        assert!((est.point - -4.0).abs() < 1e-15);
        assert!(est.stderr > 0.0);
        let back = est.scaled(-0.5);
        assert!((back.point - 2.0).abs() < 1e-15);
    }

    #[test]
    fn batch_means_agree_with_global_mean() {
        let samples: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let est = batch_means_with_ci(&samples, 10, seed());
        assert!((est.point - 49.5).abs() < 1e-12);
        assert_eq!(est.method, CiMethod::BatchMeans);
        assert_eq!(est.n, 100);
    }

    #[test]
    fn ks_one_sample_stratified_uniform() {
        // Samples at the exact uniform plotting positions (i - 1/2)/n leave a
        // gap of 1/(2n) on each side.
        let n = 50usize;
        let samples: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let d = ks_one_sample(&samples, |x| x.clamp(0.0, 1.0));
        assert!((d - 0.5 / n as f64).abs() < 1e-12, "d = {d}");
    }

    #[test]
    fn ks_critical_values() {
        assert!((ks_critical_1pct(10_000) - 0.0162762).abs() < 1e-12);
        // Equal sizes: critical = 1.62762 * sqrt(2/n).
        let c = ks_two_sample_critical_1pct(200, 200);
        assert!((c - 1.62762 * (2.0f64 / 200.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ks_two_sample_identical_is_zero() {
        let a = [0.3, 1.2, 2.4, 5.0];
        assert_eq!(ks_two_sample(&a, &a), 0.0);
    }

    #[test]
    fn ks_two_sample_disjoint_is_one() {
        let a = [1.0, 2.0, 3.0];
        let b = [10.0, 11.0, 12.0, 13.0];
        assert_eq!(ks_two_sample(&a, &b), 1.0);
    }

    #[test]
    fn ks_two_sample_hand_case() {
        // a = {1, 3}, b = {2}: EDF gap peaks at 1/2 just after x = 1.
        assert!((ks_two_sample(&[1.0, 3.0], &[2.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn report_identical_arrays() {
        let a: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
        let rep = two_sample_report(&a, &a, seed());
        assert_eq!(rep.ks_statistic, 0.0);
        assert!(rep.permutation_p > 0.99);
        assert_eq!(rep.quantiles_a.median, rep.quantiles_b.median);
    }

    #[test]
    fn report_disjoint_arrays() {
        let a: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..30).map(|i| 100.0 + i as f64).collect();
        let rep = two_sample_report(&a, &b, seed());
        assert_eq!(rep.ks_statistic, 1.0);
        assert!(rep.permutation_p < 0.05, "p = {}", rep.permutation_p);
    }

    #[test]
    fn permutation_p_is_seeded_and_reproducible() {
        let a: Vec<f64> = (0..25).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..25).map(|i| (i as f64 * 0.53).cos()).collect();
        let p1 = ks_permutation_p(&a, &b, 199, seed());
        let p2 = ks_permutation_p(&a, &b, 199, seed());
        assert_eq!(p1, p2);
        assert!(p1 > 0.0 && p1 <= 1.0);
    }

    #[test]
    fn quantiles_of_small_sample() {
        let q = quantiles(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!(q.min, 1.0);
        assert_eq!(q.max, 4.0);
        assert!((q.median - 2.5).abs() < 1e-15);
        assert!((q.q25 - 1.75).abs() < 1e-15);
        assert!((q.q75 - 3.25).abs() < 1e-15);
    }

    /// Samples whose survival function is exactly r^(-k) for r >= 1: inverse
    /// transform of stratified uniforms.
    fn pareto_like(n: usize, k: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 0.5) / n as f64).powf(-1.0 / k)).collect()
    }

    #[test]
    fn tail_slope_recovers_minus_six() {
        let samples = pareto_like(200_000, 6.0);
        let (slope, stderr) = fit_tail_slope(&samples, 1.2, 2.0, seed()).unwrap();
        assert!((slope - -6.0).abs() < 0.05, "slope = {slope}");
        assert!(stderr > 0.0 && stderr < 0.5);
    }

    #[test]
    fn tail_slope_recovers_minus_two() {
        let samples = pareto_like(100_000, 2.0);
        let (slope, _) = fit_tail_slope(&samples, 1.5, 4.0, seed()).unwrap();
        assert!((slope - -2.0).abs() < 0.05, "slope = {slope}");
    }

    #[test]
    fn tail_slope_rejects_thin_tails() {
        let samples: Vec<f64> = (0..500).map(|i| i as f64 / 500.0).collect();
        let err = fit_tail_slope(&samples, 2.0, 4.0, seed()).unwrap_err();
        match err {
            Error::InsufficientData { needed, got, .. } => {
                assert_eq!(needed, 100);
                assert_eq!(got, 0);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn tail_slope_is_reproducible() {
        let samples = pareto_like(20_000, 6.0);
        let a = fit_tail_slope(&samples, 1.2, 1.8, seed()).unwrap();
        let b = fit_tail_slope(&samples, 1.2, 1.8, seed()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gamma_cdf_pinned_value() {
        // Shape 3/2, mean 1, evaluated at the mean.
        assert!((gamma_3_2_cdf(1.0, 1.0) - 0.6083748237289110445226396).abs() < 1e-13);
    }

    #[test]
    fn gamma_cdf_scale_invariance() {
        // CDF at x under mean m equals CDF at cx under mean cm.
        for &(x, m, c) in &[(0.7, 1.0, 4.0), (2.0, 0.5, 3.0), (1.3, 2.0, 0.25)] {
            let lhs = gamma_3_2_cdf(x, m);
            let rhs = gamma_3_2_cdf(c * x, c * m);
            assert!((lhs - rhs).abs() < 1e-13);
        }
    }

    #[test]
    fn gamma_cdf_boundaries() {
        assert_eq!(gamma_3_2_cdf(0.0, 1.0), 0.0);
        assert_eq!(gamma_3_2_cdf(-1.0, 1.0), 0.0);
        assert!(gamma_3_2_cdf(50.0, 1.0) > 1.0 - 1e-12);
        let mid = gamma_3_2_cdf(0.5, 1.0);
        let hi = gamma_3_2_cdf(1.5, 1.0);
        assert!(0.0 < mid && mid < hi && hi < 1.0);
    }
}
