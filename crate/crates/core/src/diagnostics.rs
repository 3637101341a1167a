//! Chain diagnostics: autocorrelation, integrated autocorrelation time,
//! Wasserstein-1 distance and per-level run summaries.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcmc::{
    compute_sample_plan, effective_cost, estimate_expectation, MultilevelEstimate, SamplePlan, SampleRecord,
};

fn mean_and_biased_variance(series: &[f64]) -> (f64, f64) {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// `ρ̂(τ) = 1/(N−τ) Σ_{i<N−τ} (Q_i − μ̂)(Q_{i+τ} − μ̂) / σ̂²` with the
/// biased variance `σ̂²`, so `ρ̂(0) = 1`.
pub fn autocorrelation(series: &[f64], lag: usize) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::InvalidArgument(
            "autocorrelation needs at least two values".into(),
        ));
    }
    if lag >= series.len() {
        return Err(Error::InvalidArgument(format!(
            "lag {lag} is out of range for a series of length {}",
            series.len()
        )));
    }
    let (mean, var) = mean_and_biased_variance(series);
    if !(var > 0.0) {
        return Err(Error::InvalidArgument("series has zero variance".into()));
    }
    Ok(lagged(series, mean, lag) / var)
}

fn lagged(series: &[f64], mean: f64, lag: usize) -> f64 {
    let n = series.len() - lag;
    let sum: f64 = series[..n]
        .iter()
        .zip(&series[lag..])
        .map(|(a, b)| (a - mean) * (b - mean))
        .sum();
    sum / n as f64
}

/// `lagged(series, mean, τ)` for `τ = 0..=max_lag`; by FFT once direct
/// summation would cost more.
fn lagged_all(series: &[f64], mean: f64, max_lag: usize) -> Vec<f64> {
    let n = series.len();
    let max_lag = max_lag.min(n - 1);
    if max_lag < 64 || (max_lag as f64) < 4.0 * (n as f64).log2() {
        return (0..=max_lag).map(|lag| lagged(series, mean, lag)).collect();
    }
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = series
        .iter()
        .map(|v| Complex::new(v - mean, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in &mut buf {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    (0..=max_lag)
        .map(|lag| buf[lag].re / size as f64 / (n - lag) as f64)
        .collect()
}

/// `ρ̂(0..=max_lag)`, truncated to the series length.
pub fn autocorrelation_curve(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    if series.len() < 2 {
        return Err(Error::InvalidArgument(
            "autocorrelation needs at least two values".into(),
        ));
    }
    let (mean, var) = mean_and_biased_variance(series);
    if !(var > 0.0) {
        return Err(Error::InvalidArgument("series has zero variance".into()));
    }
    let mut curve: Vec<f64> = lagged_all(series, mean, max_lag).into_iter().map(|c| c / var).collect();
    curve[0] = 1.0;
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IactEstimate {
    pub tau: f64,
    pub window: usize,
    /// False when the window reached its cap before `M ≥ 5 τ̂(M)`; `tau`
    /// then underestimates.
    pub converged: bool,
}

/// `τ̂ = 1 + 2 Σ_{τ=1}^{M} ρ̂(τ)` with the smallest window `M ≥ 5 τ̂(M)`,
/// capped at `N / 10`.
pub fn iact(series: &[f64]) -> Result<IactEstimate> {
    if series.len() < 10 {
        return Err(Error::InvalidArgument(format!(
            "IACT needs at least 10 values, got {}",
            series.len()
        )));
    }
    let (mean, var) = mean_and_biased_variance(series);
    if !(var > 0.0) {
        return Err(Error::InvalidArgument("series has zero variance".into()));
    }
    let cap = (series.len() / 10).max(1);
    let sums = lagged_all(series, mean, cap);
    let mut tau = 1.0;
    for m in 1..=cap {
        tau += 2.0 * sums[m] / var;
        if m as f64 >= 5.0 * tau {
            return Ok(IactEstimate {
                tau,
                window: m,
                converged: true,
            });
        }
    }
    Ok(IactEstimate {
        tau,
        window: cap,
        converged: false,
    })
}

/// Exact `W₁` between two empirical distributions.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument(
            "Wasserstein distance needs non-empty samples".into(),
        ));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN sample".into()));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    if x.len() == y.len() {
        let n = x.len() as f64;
        return Ok(x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>() / n);
    }
    // merge the quantile-function breakpoints i/n and j/m
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut t = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let next_x = (i + 1) as f64 / n as f64;
        let next_y = (j + 1) as f64 / m as f64;
        let next = next_x.min(next_y);
        total += (next - t) * (x[i] - y[j]).abs();
        t = next;
        if next_x <= next {
            i += 1;
        }
        if next_y <= next {
            j += 1;
        }
    }
    Ok(total)
}

/// Least-squares fit of `ln v` against the index; returns
/// `(slope, intercept, R²)`.
pub fn log_linear_fit(values: &[f64]) -> Result<(f64, f64, f64)> {
    if values.len() < 2 || values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidArgument(
            "log-linear fit needs at least two positive values".into(),
        ));
    }
    let ys: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = (0..ys.len()).map(|i| (i as f64 - mx).powi(2)).sum();
    let sxy: f64 = ys.iter().enumerate().map(|(i, y)| (i as f64 - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = ys
        .iter()
        .enumerate()
        .map(|(i, y)| (y - intercept - slope * i as f64).powi(2))
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok((slope, intercept, r2))
}

/// Density histogram on `bins` equal bins over `[lower, upper]`; samples
/// outside the range are dropped. Returns `(bin centre, density)`.
pub fn histogram(values: &[f64], lower: f64, upper: f64, bins: usize) -> Result<Vec<(f64, f64)>> {
    if bins == 0 || !(upper > lower) {
        return Err(Error::InvalidArgument(
            "histogram needs bins and a non-empty range".into(),
        ));
    }
    let width = (upper - lower) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        if v >= lower && v <= upper {
            let b = (((v - lower) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
    }
    let total = values.len().max(1) as f64;
    Ok(counts
        .iter()
        .enumerate()
        .map(|(b, &c)| (lower + (b as f64 + 0.5) * width, c as f64 / (total * width)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SummaryOptions {
    pub burn_in_fraction: f64,
    pub eps2: f64,
}

impl Default for SummaryOptions {
    fn default() -> Self {
        Self {
            burn_in_fraction: 0.1,
            eps2: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStatistics {
    pub level: usize,
    pub samples: usize,
    pub mean_q: f64,
    pub mean_y: f64,
    pub variance_y: f64,
    pub iact_q: Option<f64>,
    pub iact_y: Option<f64>,
    /// Whether the `iact_y` window closed before its cap.
    #[serde(default)]
    pub iact_y_converged: bool,
    pub effective_samples: Option<f64>,
    pub acceptance_rate: f64,
    pub stage1_rate: f64,
    /// Acceptances among first-stage acceptances.
    pub stage2_rate: f64,
    /// Mean wall time of one step of this level alone, in milliseconds.
    pub cost_per_sample_ms: f64,
    /// Cost of one independent sample including coarse subchain work.
    pub effective_cost_ms: Option<f64>,
    pub wall_ms: f64,
    pub wasserstein_q: Option<f64>,
    pub wasserstein_y: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStatistics {
    pub levels: Vec<LevelStatistics>,
    pub estimate: MultilevelEstimate,
    pub total_wall_ms: f64,
    pub sample_plan: Option<SamplePlan>,
    /// `Σ_ℓ C̄_ℓ N_ℓ` of the sample plan, in milliseconds.
    pub planned_cost_ms: Option<f64>,
    /// Reference total wall time over this run's.
    pub speedup: Option<f64>,
    /// Reference planned cost over this run's.
    pub theoretical_speedup: Option<f64>,
}

/// Splits records by level, keeping file order.
pub fn records_by_level(records: &[SampleRecord]) -> Vec<Vec<&SampleRecord>> {
    let levels = records.iter().map(|r| r.level + 1).max().unwrap_or(0);
    let mut out = vec![Vec::new(); levels];
    for r in records {
        out[r.level].push(r);
    }
    out
}

fn after_burn_in<'a>(records: &[&'a SampleRecord], fraction: f64) -> Vec<&'a SampleRecord> {
    let skip = (records.len() as f64 * fraction).floor() as usize;
    records[skip.min(records.len())..].to_vec()
}

/// Table and figure quantities for one run, compared against `reference`
/// when given.
pub fn summarize(
    records: &[SampleRecord],
    reference: Option<&[SampleRecord]>,
    options: &SummaryOptions,
) -> Result<ChainStatistics> {
    if !(0.0..1.0).contains(&options.burn_in_fraction) {
        return Err(Error::InvalidArgument("burn-in fraction must lie in [0, 1)".into()));
    }
    let by_level = records_by_level(records);
    if by_level.is_empty() || by_level.iter().any(|l| l.is_empty()) {
        return Err(Error::InvalidArgument("every level needs at least one record".into()));
    }
    let reference_levels = reference.map(records_by_level);
    if let Some(r) = &reference_levels {
        if r.len() != by_level.len() {
            return Err(Error::InvalidArgument(format!(
                "runs have {} and {} levels",
                by_level.len(),
                r.len()
            )));
        }
    }

    let mut levels = Vec::with_capacity(by_level.len());
    let mut y_series = Vec::with_capacity(by_level.len());
    for (level, all) in by_level.iter().enumerate() {
        let kept = after_burn_in(all, options.burn_in_fraction);
        let kept = if kept.is_empty() { all.clone() } else { kept };
        let q: Vec<f64> = kept.iter().map(|r| r.qoi).collect();
        let y: Vec<f64> = kept.iter().map(|r| r.y).collect();
        let n = kept.len();
        let (mean_q, _) = crate::mcmc::mean_variance(&q);
        let (mean_y, variance_y) = crate::mcmc::mean_variance(&y);
        let iact_q = iact(&q).ok().map(|e| e.tau.max(1.0));
        let iact_y_estimate = iact(&y).ok();
        let iact_y = iact_y_estimate.map(|e| e.tau.max(1.0));
        let count = |f: fn(&SampleRecord) -> bool| all.iter().filter(|r| f(r)).count() as u64;
        let accepted = count(|r| r.accepted);
        let stage1 = count(|r| r.stage1_accepted);
        let steps = all.len() as u64;
        let wall_ms: f64 = all.iter().map(|r| r.wall_ms).sum();
        let (wasserstein_q, wasserstein_y) = match &reference_levels {
            Some(r) => {
                let rk = after_burn_in(&r[level], options.burn_in_fraction);
                let rq: Vec<f64> = rk.iter().map(|r| r.qoi).collect();
                let ry: Vec<f64> = rk.iter().map(|r| r.y).collect();
                (wasserstein1(&q, &rq).ok(), wasserstein1(&y, &ry).ok())
            }
            None => (None, None),
        };
        levels.push(LevelStatistics {
            level,
            samples: n,
            mean_q,
            mean_y,
            variance_y,
            iact_q,
            iact_y,
            iact_y_converged: iact_y_estimate.is_some_and(|e| e.converged),
            effective_samples: iact_y.map(|t| n as f64 / t),
            acceptance_rate: accepted as f64 / steps as f64,
            stage1_rate: stage1 as f64 / steps as f64,
            stage2_rate: if stage1 == 0 {
                0.0
            } else {
                accepted as f64 / stage1 as f64
            },
            cost_per_sample_ms: wall_ms / steps as f64,
            effective_cost_ms: None,
            wall_ms,
            wasserstein_q,
            wasserstein_y,
        });
        y_series.push(y);
    }

    let estimate = estimate_expectation(&y_series)?;
    let taus: Option<Vec<f64>> = levels.iter().map(|l| l.iact_y).collect();
    let costs: Vec<f64> = levels.iter().map(|l| l.cost_per_sample_ms).collect();
    let mut sample_plan = None;
    let mut planned_cost_ms = None;
    if let Some(taus) = taus {
        if let Ok(effective) = effective_cost(&taus, &costs) {
            for (l, c) in levels.iter_mut().zip(&effective) {
                l.effective_cost_ms = Some(*c);
            }
            let variances: Vec<f64> = levels.iter().map(|l| l.variance_y).collect();
            if let Ok(plan) = compute_sample_plan(&variances, &effective, options.eps2) {
                planned_cost_ms = Some(plan.total_cost());
                sample_plan = Some(plan);
            }
        }
    }
    let total_wall_ms = levels.iter().map(|l| l.wall_ms).sum();
    let mut stats = ChainStatistics {
        levels,
        estimate,
        total_wall_ms,
        sample_plan,
        planned_cost_ms,
        speedup: None,
        theoretical_speedup: None,
    };
    if let Some(reference) = reference {
        let base = summarize(reference, None, options)?;
        if total_wall_ms > 0.0 {
            stats.speedup = Some(base.total_wall_ms / total_wall_ms);
        }
        if let (Some(a), Some(b)) = (base.planned_cost_ms, stats.planned_cost_ms) {
            stats.theoretical_speedup = Some(a / b);
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn ar1(a: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (1.0 - a * a).sqrt();
        let mut x = 0.0;
        (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                x = a * x + scale * e;
                x
            })
            .collect()
    }

    #[test]
    fn lag_zero_is_one() {
        let s = ar1(0.5, 100, 1);
        assert_eq!(autocorrelation(&s, 0).unwrap(), 1.0);
        assert!(autocorrelation(&s, 100).is_err());
        assert!(autocorrelation(&[1.0; 5], 1).is_err());
    }

    #[test]
    fn ar1_autocorrelation_and_iact() {
        let s = ar1(0.9, 100_000, 2);
        for lag in [1, 2, 5] {
            assert!((autocorrelation(&s, lag).unwrap() - 0.9f64.powi(lag as i32)).abs() < 0.03);
        }
        let tau = iact(&s).unwrap().tau;
        assert!((tau - 19.0).abs() < 0.15 * 19.0, "tau {tau}");
        let iid = ar1(0.0, 100_000, 3);
        assert!((iact(&iid).unwrap().tau - 1.0).abs() < 0.2);
        assert!(iact(&iid[..5]).is_err());
    }

    #[test]
    fn fft_lag_sums_match_direct_sums() {
        let s = ar1(0.8, 5000, 4);
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let fast = lagged_all(&s, mean, 500);
        assert_eq!(fast.len(), 501);
        for (lag, f) in fast.iter().enumerate() {
            assert!((f - lagged(&s, mean, lag)).abs() < 1e-12 * fast[0], "lag {lag}");
        }
    }

    #[test]
    fn random_walk_iact_is_flagged() {
        let steps = ar1(0.0, 20_000, 5);
        let walk: Vec<f64> = steps
            .iter()
            .scan(0.0, |acc, v| {
                *acc += v;
                Some(*acc)
            })
            .collect();
        let est = iact(&walk).unwrap();
        assert!(!est.converged);
        assert_eq!(est.window, 2000);
        assert!(iact(&ar1(0.5, 20_000, 6)).unwrap().converged);
    }

    #[test]
    fn wasserstein_basics() {
        let a = vec![0.3, -1.0, 2.0, 0.0];
        assert_eq!(wasserstein1(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|v| v + 1.5).collect();
        assert!((wasserstein1(&a, &b).unwrap() - 1.5).abs() < 1e-15);
        // {0, 1} against {0, 0.5, 1}: quantile gap 0.5 on [1/3, 1/2] and [1/2, 2/3]
        let w = wasserstein1(&[0.0, 1.0], &[0.0, 0.5, 1.0]).unwrap();
        assert!((w - 1.0 / 6.0).abs() < 1e-15);
        assert!(wasserstein1(&[], &a).is_err());
    }

    #[test]
    fn log_linear_fit_recovers_geometric_decay() {
        let (slope, _, r2) = log_linear_fit(&[1.0, 0.25, 0.0625]).unwrap();
        assert!((slope - 0.25f64.ln()).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
        assert!(log_linear_fit(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn histogram_integrates_to_one() {
        let s = ar1(0.0, 1000, 4);
        let h = histogram(&s, -10.0, 10.0, 40).unwrap();
        let total: f64 = h.iter().map(|(_, d)| d * 0.5).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    fn record(level: usize, i: u64, q: f64, accepted: bool) -> SampleRecord {
        SampleRecord {
            sample_index: i,
            level,
            qoi: q,
            y: q,
            accepted,
            stage1_accepted: accepted,
            wall_ms: 1.0,
        }
    }

    #[test]
    fn summary_counts_acceptances_and_self_compares() {
        let records: Vec<SampleRecord> = (0..10).map(|i| record(0, i, (i as f64 * 0.7).sin(), i < 7)).collect();
        let opts = SummaryOptions {
            burn_in_fraction: 0.0,
            ..SummaryOptions::default()
        };
        let stats = summarize(&records, Some(&records), &opts).unwrap();
        assert!((stats.levels[0].acceptance_rate - 0.7).abs() < 1e-15);
        assert_eq!(stats.speedup, Some(1.0));
        assert_eq!(stats.levels[0].wasserstein_q, Some(0.0));
        assert_eq!(stats, summarize(&records, Some(&records), &opts).unwrap());
        let two: Vec<SampleRecord> = records.iter().cloned().chain([record(1, 0, 0.0, true)]).collect();
        assert!(summarize(&two, Some(&records), &opts).is_err());
    }
}
