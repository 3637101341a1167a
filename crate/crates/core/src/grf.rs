//! Gaussian random fields from the integer-order SPDE `(κ² − Δ) θ = g 𝒲`.
//!
//! The discrete system is `(κ² W + A) θ = g ζ` on the padded grid of a level,
//! with `A` the cell-centred Laplacian stiffness under zero-flux boundary
//! conditions and `ζ = W^{1/2} ξ`, `ξ ~ N(0, I)`. Solutions are scaled by the
//! marginal standard deviation and cut down to the physical cells.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{check_len, Error, Result};
use crate::grid::Hierarchy;
use crate::linalg::{conjugate_gradient, CgReport, CgSettings, FaceOperator};

/// Map from correlation length `λ` to the inverse length scale `κ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KappaConvention {
    /// `κ = sqrt(2ν) / λ`.
    #[default]
    Matern,
    /// `κ = 1 / λ`.
    Reciprocal,
}

impl KappaConvention {
    pub fn kappa(self, correlation_length: f64, nu: f64) -> f64 {
        match self {
            KappaConvention::Matern => (2.0 * nu).sqrt() / correlation_length,
            KappaConvention::Reciprocal => 1.0 / correlation_length,
        }
    }
}

/// How the scale `g` of the noise load is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VarianceNormalization {
    /// Unit stationary variance of the discrete operator on each level's
    /// cell size.
    #[default]
    Lattice,
    /// Unit variance of the continuous operator; the discrete field
    /// overshoots by `O(κh)` in 3D and `O((κh)² log κh)` in 2D.
    Continuum,
}

/// `e^{−x} I₀(x)`.
fn scaled_bessel_i0(x: f64) -> f64 {
    if x > 700.0 {
        let r = 1.0 / (8.0 * x);
        return (1.0 + r * (1.0 + r * (4.5 + r * 37.5))) / (2.0 * std::f64::consts::PI * x).sqrt();
    }
    // periodic trapezoid on (1/π) ∫_0^π e^{−x(1−cos φ)} dφ
    let m = 400;
    let step = std::f64::consts::PI / m as f64;
    let mut sum = 0.5 * (1.0 + (-2.0 * x).exp());
    for j in 1..m {
        sum += (-x * (1.0 - (j as f64 * step).cos())).exp();
    }
    sum / m as f64
}

/// Stationary variance of `(κ² − Δ_h)⁻¹ ξ / sqrt(V)` on the infinite lattice
/// with spacings `h`, per unit `g²`:
/// `V⁻¹ ∫_0^∞ t e^{−κ²t} Π_a e^{−x_a} I₀(x_a) dt`, `x_a = 2t / h_a²`.
pub fn lattice_variance(kappa: f64, cell_size: &[f64]) -> f64 {
    let volume: f64 = cell_size.iter().product();
    let h_min = cell_size.iter().copied().fold(f64::INFINITY, f64::min);
    // t = e^u, trapezoid in u
    let lo = (1e-6 * h_min * h_min).ln();
    let hi = (80.0 / (kappa * kappa)).ln();
    let n = ((hi - lo) / 0.01).ceil() as usize;
    let du = (hi - lo) / n as f64;
    let f = |u: f64| {
        let t = u.exp();
        let p: f64 = cell_size.iter().map(|h| scaled_bessel_i0(2.0 * t / (h * h))).product();
        t * t * (-kappa * kappa * t).exp() * p
    };
    let mut sum = 0.5 * (f(lo) + f(hi));
    for i in 1..n {
        sum += f(lo + i as f64 * du);
    }
    sum * du / volume
}

/// Parameters of the Matérn field. Only the `α = ν + d/2 = 2` family is
/// supported, so `ν = 1` in 2D and `ν = 1/2` in 3D.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrfConfig {
    kappa: f64,
    nu: f64,
    marginal_std: f64,
    dimension: usize,
    #[serde(default)]
    normalization: VarianceNormalization,
}

impl GrfConfig {
    pub fn new(kappa: f64, nu: f64, marginal_std: f64, dimension: usize) -> Result<Self> {
        if !(2..=3).contains(&dimension) {
            return Err(Error::InvalidArgument(format!(
                "fields are two- or three-dimensional, got d = {dimension}"
            )));
        }
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(Error::InvalidArgument(format!("kappa must be positive, got {kappa}")));
        }
        if !(marginal_std.is_finite() && marginal_std >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "marginal standard deviation must be non-negative, got {marginal_std}"
            )));
        }
        let required = Self::supported_nu(dimension);
        if (nu - required).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "only the integer-order operator is solved: d = {dimension} requires nu = {required}, got {nu}"
            )));
        }
        Ok(Self {
            kappa,
            nu,
            marginal_std,
            dimension,
            normalization: VarianceNormalization::default(),
        })
    }

    /// Builds the configuration from a correlation length and marginal variance.
    pub fn from_correlation_length(
        correlation_length: f64,
        variance: f64,
        dimension: usize,
        convention: KappaConvention,
    ) -> Result<Self> {
        if !(correlation_length.is_finite() && correlation_length > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "correlation length must be positive, got {correlation_length}"
            )));
        }
        if !(variance.is_finite() && variance >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "variance must be non-negative, got {variance}"
            )));
        }
        let nu = Self::supported_nu(dimension);
        let kappa = convention.kappa(correlation_length, nu);
        Self::new(kappa, nu, variance.sqrt(), dimension)
    }

    pub fn with_normalization(mut self, normalization: VarianceNormalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn normalization(&self) -> VarianceNormalization {
        self.normalization
    }

    pub fn supported_nu(dimension: usize) -> f64 {
        2.0 - dimension as f64 / 2.0
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn marginal_std(&self) -> f64 {
        self.marginal_std
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn alpha(&self) -> f64 {
        self.nu + self.dimension as f64 / 2.0
    }

    /// `g = (4π)^{d/4} κ^ν sqrt(Γ(ν + d/2) / Γ(ν))`, giving unit marginal
    /// variance for the continuous operator.
    pub fn scaling_g(&self) -> f64 {
        let d = self.dimension as f64;
        (4.0 * std::f64::consts::PI).powf(d / 4.0)
            * self.kappa.powf(self.nu)
            * (gamma(self.nu + d / 2.0) / gamma(self.nu)).sqrt()
    }

    /// The scale `g` used on a grid with the given cell size.
    pub fn scaling_on(&self, cell_size: &[f64]) -> f64 {
        match self.normalization {
            VarianceNormalization::Continuum => self.scaling_g(),
            VarianceNormalization::Lattice => lattice_variance(self.kappa, cell_size).sqrt().recip(),
        }
    }
}

/// Discrete white-noise load `ζ = W^{1/2} ξ` on the padded grid of a level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteNoise {
    pub level_index: usize,
    pub coefficients: Vec<f64>,
}

impl WhiteNoise {
    pub fn zeros(hierarchy: &Hierarchy, level: usize) -> Result<Self> {
        Ok(Self {
            level_index: level,
            coefficients: vec![0.0; hierarchy.level(level)?.num_cells()],
        })
    }
}

/// Piecewise-constant field on the physical cells of a level.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub level_index: usize,
    pub values: Vec<f64>,
}

pub fn sample_white_noise<R: Rng + ?Sized>(hierarchy: &Hierarchy, level: usize, rng: &mut R) -> Result<WhiteNoise> {
    let grid = hierarchy.level(level)?;
    let coefficients = grid
        .mass_diagonal()
        .iter()
        .map(|w| w.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(WhiteNoise {
        level_index: level,
        coefficients,
    })
}

/// `ζ̃_f = Πᵀ ζ_c + (I − Πᵀ Pᵀ) ζ_f`: fine noise whose coarse component is `ζ_c`.
pub fn condition_white_noise(hierarchy: &Hierarchy, coarse: &WhiteNoise, fine: &WhiteNoise) -> Result<WhiteNoise> {
    if fine.level_index != coarse.level_index + 1 {
        return Err(Error::LevelMismatch {
            coarse: coarse.level_index,
            fine: fine.level_index,
        });
    }
    let level = coarse.level_index;
    let lifted = hierarchy.restrict_transpose(&coarse.coefficients, level)?;
    let fine_coarse_part = hierarchy.prolongate_transpose(&fine.coefficients, level)?;
    let removed = hierarchy.restrict_transpose(&fine_coarse_part, level)?;
    let coefficients = lifted
        .iter()
        .zip(&fine.coefficients)
        .zip(&removed)
        .map(|((l, f), r)| l + (f - r))
        .collect();
    Ok(WhiteNoise {
        level_index: fine.level_index,
        coefficients,
    })
}

/// SPDE solver with one assembled operator per level.
#[derive(Debug, Clone)]
pub struct SpdeSampler {
    hierarchy: Hierarchy,
    config: GrfConfig,
    operators: Vec<FaceOperator>,
    scales: Vec<f64>,
    cg: CgSettings,
}

impl SpdeSampler {
    pub fn new(hierarchy: Hierarchy, config: GrfConfig) -> Result<Self> {
        if hierarchy.finest().dimension() != config.dimension() {
            return Err(Error::InvalidArgument(format!(
                "field dimension {} does not match grid dimension {}",
                config.dimension(),
                hierarchy.finest().dimension()
            )));
        }
        let kappa2 = config.kappa() * config.kappa();
        let operators = hierarchy
            .levels()
            .iter()
            .map(|grid| {
                let volume = grid.cell_volume();
                let h = grid.cell_size().to_vec();
                let shift = grid.mass_diagonal().iter().map(|w| kappa2 * w).collect();
                FaceOperator::from_faces(&grid.padded_dims(), shift, |axis, _| volume / (h[axis] * h[axis]))
            })
            .collect::<Result<Vec<_>>>()?;
        let scales = hierarchy
            .levels()
            .iter()
            .map(|grid| config.scaling_on(grid.cell_size()))
            .collect();
        Ok(Self {
            hierarchy,
            config,
            operators,
            scales,
            cg: CgSettings::default(),
        })
    }

    pub fn with_cg_settings(mut self, cg: CgSettings) -> Self {
        self.cg = cg;
        self
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    pub fn config(&self) -> &GrfConfig {
        &self.config
    }

    /// Unit-variance solution `(κ² W + A)⁻¹ g ζ` on the whole padded grid.
    pub fn solve_padded(&self, zeta: &WhiteNoise) -> Result<(Vec<f64>, CgReport)> {
        let level = zeta.level_index;
        let grid = self.hierarchy.level(level)?;
        check_len(grid.num_cells(), zeta.coefficients.len())?;
        let g = self.scales[level];
        let rhs: Vec<f64> = zeta.coefficients.iter().map(|z| g * z).collect();
        let mut theta = vec![0.0; rhs.len()];
        let report = conjugate_gradient(&self.operators[level], &rhs, &mut theta, self.cg)?;
        Ok((theta, report))
    }

    /// Solves the SPDE for `zeta` and returns `σ θ` on the physical cells.
    pub fn solve(&self, zeta: &WhiteNoise) -> Result<FieldSample> {
        let (theta, _) = self.solve_padded(zeta)?;
        let grid = self.hierarchy.level(zeta.level_index)?;
        let sigma = self.config.marginal_std();
        let values: Vec<f64> = grid
            .restrict_to_physical(&theta)?
            .into_iter()
            .map(|v| sigma * v)
            .collect();
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("field value {bad}")));
        }
        Ok(FieldSample {
            level_index: zeta.level_index,
            values,
        })
    }

    /// Conditions fresh noise level by level from `coarse_noise` up to
    /// `target_level` and solves there. Returns the field and the
    /// conditioned noise.
    pub fn sample_field_hierarchically<R: Rng + ?Sized>(
        &self,
        coarse_noise: &WhiteNoise,
        target_level: usize,
        rng: &mut R,
    ) -> Result<(FieldSample, WhiteNoise)> {
        if target_level < coarse_noise.level_index {
            return Err(Error::LevelMismatch {
                coarse: coarse_noise.level_index,
                fine: target_level,
            });
        }
        self.hierarchy.level(target_level)?;
        let mut noise = coarse_noise.clone();
        for level in coarse_noise.level_index..target_level {
            let fresh = sample_white_noise(&self.hierarchy, level + 1, rng)?;
            noise = condition_white_noise(&self.hierarchy, &noise, &fresh)?;
        }
        let field = self.solve(&noise)?;
        Ok((field, noise))
    }
}
