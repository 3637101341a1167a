//! Telescoping estimator, effective costs and optimal sample allocation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelEstimate {
    pub level: usize,
    pub count: usize,
    pub mean: f64,
    /// Unbiased sample variance (zero for a single sample).
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultilevelEstimate {
    pub value: f64,
    pub levels: Vec<LevelEstimate>,
}

/// `Ŷ₀ + Σ_ℓ Ŷ_ℓ` from the recorded `Y_ℓ` series of every level.
pub fn estimate_expectation(y_per_level: &[Vec<f64>]) -> Result<MultilevelEstimate> {
    if y_per_level.first().is_none_or(|y| y.is_empty()) {
        return Err(Error::InvalidArgument("level-0 record is empty".into()));
    }
    let mut levels = Vec::with_capacity(y_per_level.len());
    for (level, y) in y_per_level.iter().enumerate() {
        if y.is_empty() {
            return Err(Error::InvalidArgument(format!("level {level} has no samples")));
        }
        let (mean, variance) = mean_variance(y);
        levels.push(LevelEstimate {
            level,
            count: y.len(),
            mean,
            variance,
        });
    }
    Ok(MultilevelEstimate {
        value: levels.iter().map(|l| l.mean).sum(),
        levels,
    })
}

pub(crate) fn mean_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, variance)
}

/// `C̄_ℓ = ⌈τ_ℓ⌉ (C_ℓ + Σ_{i<ℓ} T_i C_i)` with `T_i = Π_{j≤i} ⌈τ_j⌉`.
pub fn effective_cost(iact: &[f64], raw_cost: &[f64]) -> Result<Vec<f64>> {
    if iact.len() != raw_cost.len() || iact.is_empty() {
        return Err(Error::InvalidArgument(
            "IACT and cost vectors must be non-empty and of equal length".into(),
        ));
    }
    if iact.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::InvalidArgument("IACT values must be positive".into()));
    }
    if raw_cost.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
        return Err(Error::InvalidArgument("per-sample costs must be positive".into()));
    }
    let ceil: Vec<f64> = iact.iter().map(|t| t.ceil()).collect();
    let mut rate = 1.0;
    let mut coarse_work = 0.0;
    let mut out = Vec::with_capacity(iact.len());
    for l in 0..iact.len() {
        out.push(ceil[l] * (raw_cost[l] + coarse_work));
        rate *= ceil[l];
        coarse_work += rate * raw_cost[l];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub eps2: f64,
    pub variances: Vec<f64>,
    pub costs: Vec<f64>,
    /// Minimiser before rounding.
    pub continuous: Vec<f64>,
    pub samples: Vec<u64>,
}

impl SamplePlan {
    pub fn total_cost(&self) -> f64 {
        self.samples.iter().zip(&self.costs).map(|(n, c)| *n as f64 * c).sum()
    }
}

/// `N_ℓ = (2/ε²) (Σ_k sqrt(σ²_k C̄_k)) sqrt(σ²_ℓ / C̄_ℓ)`, rounded up.
pub fn compute_sample_plan(variances: &[f64], costs: &[f64], eps2: f64) -> Result<SamplePlan> {
    if variances.len() != costs.len() || variances.is_empty() {
        return Err(Error::InvalidArgument(
            "variance and cost vectors must be non-empty and of equal length".into(),
        ));
    }
    let positive = |v: &f64| v.is_finite() && *v > 0.0;
    if !variances.iter().all(positive) || !costs.iter().all(positive) || !positive(&eps2) {
        return Err(Error::InvalidArgument(
            "variances, costs and tolerance must be positive".into(),
        ));
    }
    let lagrange: f64 = variances.iter().zip(costs).map(|(v, c)| (v * c).sqrt()).sum();
    let continuous: Vec<f64> = variances
        .iter()
        .zip(costs)
        .map(|(v, c)| 2.0 / eps2 * lagrange * (v / c).sqrt())
        .collect();
    let samples = continuous.iter().map(|n| (n.ceil() as u64).max(1)).collect();
    Ok(SamplePlan {
        eps2,
        variances: variances.to_vec(),
        costs: costs.to_vec(),
        continuous,
        samples,
    })
}
