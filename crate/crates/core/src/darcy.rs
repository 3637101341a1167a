//! Darcy flow forward model: log-normal permeability, two-point flux
//! finite volumes, probe pressures, outflow QoI and Gaussian log-likelihood.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::grf::{sample_white_noise, FieldSample, SpdeSampler, WhiteNoise};
use crate::grid::{Extent, GridLevel};
use crate::linalg::{conjugate_gradient, CgSettings, FaceOperator};

/// `k = exp(θ)` on the physical cells of a level.
#[derive(Debug, Clone, PartialEq)]
pub struct PermeabilityField {
    pub level_index: usize,
    pub values: Vec<f64>,
}

impl PermeabilityField {
    pub fn new(level_index: usize, values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "permeability must be positive and finite, got {bad}"
            )));
        }
        Ok(Self { level_index, values })
    }

    pub fn from_log_field(field: &FieldSample) -> Result<Self> {
        Self::new(field.level_index, field.values.iter().map(|v| v.exp()).collect())
    }

    pub fn constant(level_index: usize, num_cells: usize, value: f64) -> Result<Self> {
        Self::new(level_index, vec![value; num_cells])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryCondition {
    /// Dirichlet pressure.
    Pressure(f64),
    NoFlux,
}

/// Boundary conditions per axis as `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BoundaryConditions {
    pub faces: Vec<[BoundaryCondition; 2]>,
}

impl BoundaryConditions {
    /// `p = 1` at `x = x_min`, `p = 0` at `x = x_max`, no flux elsewhere.
    pub fn flow_cell(dimension: usize) -> Self {
        let mut faces = vec![[BoundaryCondition::NoFlux; 2]; dimension];
        faces[0] = [BoundaryCondition::Pressure(1.0), BoundaryCondition::Pressure(0.0)];
        Self { faces }
    }

    pub fn validate(&self, dimension: usize) -> Result<()> {
        check_len(dimension, self.faces.len())?;
        let mut has_dirichlet = false;
        for bc in self.faces.iter().flatten() {
            if let BoundaryCondition::Pressure(p) = bc {
                if !p.is_finite() {
                    return Err(Error::InvalidArgument(format!("boundary pressure {p} is not finite")));
                }
                has_dirichlet = true;
            }
        }
        if !has_dirichlet {
            return Err(Error::InvalidArgument(
                "at least one boundary must fix the pressure".into(),
            ));
        }
        Ok(())
    }
}

/// Pressure and fluxes of one Darcy solve. Fluxes are normal velocities `u·n`.
#[derive(Debug, Clone, PartialEq)]
pub struct DarcySolution {
    pub level_index: usize,
    pub dims: Vec<usize>,
    pub cell_size: Vec<f64>,
    pub pressure: Vec<f64>,
    /// `face_fluxes[a][i]`: flux from cell `i` into its `+a` neighbour
    /// (zero for cells on the upper boundary of axis `a`).
    pub face_fluxes: Vec<Vec<f64>>,
    /// `boundary_fluxes[a][side]`: outward flux through each boundary face,
    /// ordered like the cells adjacent to that face.
    pub boundary_fluxes: Vec<[Vec<f64>; 2]>,
    pub iterations: usize,
}

impl DarcySolution {
    /// Area of one face normal to `axis`.
    pub fn face_area(&self, axis: usize) -> f64 {
        self.cell_size
            .iter()
            .enumerate()
            .filter(|(a, _)| *a != axis)
            .map(|(_, h)| h)
            .product()
    }

    /// Net volumetric outflow of every cell.
    pub fn net_outflow(&self) -> Vec<f64> {
        let n = self.pressure.len();
        let strides = crate::linalg::strides(&self.dims);
        let mut net = vec![0.0; n];
        for (a, fluxes) in self.face_fluxes.iter().enumerate() {
            let area = self.face_area(a);
            let s = strides[a];
            for i in 0..n - s {
                let q = fluxes[i] * area;
                net[i] += q;
                net[i + s] -= q;
            }
            for (side, cells) in boundary_cells(&self.dims, a).iter().enumerate() {
                for (&c, f) in cells.iter().zip(&self.boundary_fluxes[a][side]) {
                    net[c] += f * area;
                }
            }
        }
        net
    }
}

/// Linear indices of the cells touching the lower and upper faces of `axis`.
fn boundary_cells(dims: &[usize], axis: usize) -> [Vec<usize>; 2] {
    let n: usize = dims.iter().product();
    let strides = crate::linalg::strides(dims);
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for i in 0..n {
        let m = (i / strides[axis]) % dims[axis];
        if m == 0 {
            lower.push(i);
        }
        if m + 1 == dims[axis] {
            upper.push(i);
        }
    }
    [lower, upper]
}

/// Solves `u = −k ∇p`, `∇·u = f` on the physical cells of `grid`.
pub fn solve_darcy(
    grid: &GridLevel,
    k: &PermeabilityField,
    bc: &BoundaryConditions,
    source: Option<&[f64]>,
) -> Result<DarcySolution> {
    solve_darcy_with(grid, k, bc, source, CgSettings::default())
}

pub fn solve_darcy_with(
    grid: &GridLevel,
    k: &PermeabilityField,
    bc: &BoundaryConditions,
    source: Option<&[f64]>,
    cg: CgSettings,
) -> Result<DarcySolution> {
    let d = grid.dimension();
    let dims = grid.dims().to_vec();
    let n = grid.num_physical_cells();
    check_len(n, k.values.len())?;
    bc.validate(d)?;
    let h = grid.cell_size().to_vec();
    let volume = grid.cell_volume();
    let area: Vec<f64> = h.iter().map(|ha| volume / ha).collect();
    let strides = crate::linalg::strides(&dims);

    let mut shift = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    if let Some(f) = source {
        check_len(n, f.len())?;
        for (r, fi) in rhs.iter_mut().zip(f) {
            *r += fi * volume;
        }
    }
    let boundary: Vec<[Vec<usize>; 2]> = (0..d).map(|a| boundary_cells(&dims, a)).collect();
    for a in 0..d {
        for side in 0..2 {
            if let BoundaryCondition::Pressure(p) = bc.faces[a][side] {
                for &c in &boundary[a][side] {
                    let t = 2.0 * area[a] * k.values[c] / h[a];
                    shift[c] += t;
                    rhs[c] += t * p;
                }
            }
        }
    }
    let kv = &k.values;
    let op = FaceOperator::from_faces(&dims, shift, |a, i| {
        let j = i + strides[a];
        area[a] * harmonic(kv[i], kv[j]) / h[a]
    })?;
    let mut pressure = vec![0.0; n];
    let report = conjugate_gradient(&op, &rhs, &mut pressure, cg)?;

    let face_fluxes = (0..d)
        .map(|a| {
            let s = strides[a];
            (0..n)
                .map(|i| {
                    let t = op.transmissibility(a, i);
                    if t == 0.0 {
                        0.0
                    } else {
                        t * (pressure[i] - pressure[i + s]) / area[a]
                    }
                })
                .collect()
        })
        .collect();
    let boundary_fluxes = (0..d)
        .map(|a| {
            let side_flux = |side: usize| -> Vec<f64> {
                boundary[a][side]
                    .iter()
                    .map(|&c| match bc.faces[a][side] {
                        BoundaryCondition::Pressure(p) => 2.0 * kv[c] * (pressure[c] - p) / h[a],
                        BoundaryCondition::NoFlux => 0.0,
                    })
                    .collect()
            };
            [side_flux(0), side_flux(1)]
        })
        .collect();
    Ok(DarcySolution {
        level_index: grid.level_index(),
        dims,
        cell_size: h,
        pressure,
        face_fluxes,
        boundary_fluxes,
        iterations: report.iterations,
    })
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Area-averaged outward flux through the boundary face `(axis, side)`.
pub fn compute_qoi(sol: &DarcySolution, axis: usize, side: usize) -> Result<f64> {
    let fluxes = sol
        .boundary_fluxes
        .get(axis)
        .and_then(|f| f.get(side))
        .ok_or_else(|| Error::InvalidArgument(format!("no boundary ({axis}, {side})")))?;
    if fluxes.is_empty() {
        return Err(Error::InvalidArgument("outflow boundary is empty".into()));
    }
    // uniform face areas make the area weighting a plain mean
    Ok(fluxes.iter().sum::<f64>() / fluxes.len() as f64)
}

/// Fixed observation points in physical coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbeSet {
    pub points: Vec<Vec<f64>>,
}

impl ProbeSet {
    /// `n × n` interior lattice at `(i + 1) / (n + 1)` of each side.
    pub fn lattice(extent: &Extent, n: usize) -> Self {
        let d = extent.dimension();
        let total = n.pow(d as u32);
        let points = (0..total)
            .map(|mut idx| {
                (0..d)
                    .map(|a| {
                        let i = idx % n;
                        idx /= n;
                        extent.lower[a] + extent.length(a) * (i + 1) as f64 / (n + 1) as f64
                    })
                    .collect()
            })
            .collect();
        Self { points }
    }

    /// Deterministic scattered points (Halton sequence, bases 2, 3, 5)
    /// mapped into the central 70% of the box.
    pub fn scattered(extent: &Extent, count: usize) -> Self {
        const BASES: [usize; 3] = [2, 3, 5];
        let d = extent.dimension();
        let points = (1..=count)
            .map(|i| {
                (0..d)
                    .map(|a| {
                        let u = radical_inverse(i, BASES[a % 3]);
                        extent.lower[a] + extent.length(a) * (0.15 + 0.7 * u)
                    })
                    .collect()
            })
            .collect();
        Self { points }
    }

    /// 25 points: a 5×5 lattice in 2D, scattered points in 3D.
    pub fn default_for(extent: &Extent) -> Self {
        if extent.dimension() == 2 {
            Self::lattice(extent, 5)
        } else {
            Self::scattered(extent, 25)
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut out = 0.0;
    while i > 0 {
        out += (i % base) as f64 * inv;
        i /= base;
        inv /= base as f64;
    }
    out
}

/// Pressure at each probe, interpolated multilinearly between cell
/// centres. Points within half a cell of the boundary use the nearest
/// centre along that axis.
pub fn observe(grid: &GridLevel, sol: &DarcySolution, probes: &ProbeSet) -> Result<Vec<f64>> {
    check_len(grid.num_physical_cells(), sol.pressure.len())?;
    let extent = grid.physical_extent();
    let d = grid.dimension();
    let dims = grid.dims();
    let h = grid.cell_size();
    let mut out = Vec::with_capacity(probes.len());
    for point in &probes.points {
        if !extent.contains(point) {
            return Err(Error::InvalidArgument(format!(
                "probe {point:?} lies outside the physical domain"
            )));
        }
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for a in 0..d {
            let s = ((point[a] - extent.lower[a]) / h[a] - 0.5).clamp(0.0, (dims[a] - 1) as f64);
            let i = (s.floor() as usize).min(dims[a].saturating_sub(2));
            base[a] = i;
            frac[a] = if dims[a] == 1 { 0.0 } else { s - i as f64 };
        }
        let mut value = 0.0;
        for corner in 0..(1usize << d) {
            let mut weight = 1.0;
            let mut multi = base.clone();
            for a in 0..d {
                if corner >> a & 1 == 1 {
                    weight *= frac[a];
                    multi[a] += 1;
                } else {
                    weight *= 1.0 - frac[a];
                }
            }
            if weight != 0.0 {
                value += weight * sol.pressure[grid.physical_linear_index(&multi)];
            }
        }
        out.push(value);
    }
    Ok(out)
}

/// `−‖y − y_obs‖² / (2σ_η²)`.
pub fn log_likelihood(y: &[f64], y_obs: &[f64], sigma_eta: f64) -> Result<f64> {
    check_len(y_obs.len(), y.len())?;
    if !(sigma_eta.is_finite() && sigma_eta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "observation noise must be positive, got {sigma_eta}"
        )));
    }
    let sq: f64 = y.iter().zip(y_obs).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-sq / (2.0 * sigma_eta * sigma_eta))
}

/// Model output for one parameter sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardEvaluation {
    pub observations: Vec<f64>,
    pub qoi: f64,
    pub log_likelihood: f64,
}

/// The observation data a posterior is conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub probes: ProbeSet,
    pub y_obs: Vec<f64>,
    pub sigma_eta: f64,
}

/// `F_ℓ = D_ℓ ∘ S_ℓ` for every level of a sampler's hierarchy.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    sampler: SpdeSampler,
    bc: BoundaryConditions,
    /// Outflow boundary `(axis, side)`.
    outflow: (usize, usize),
    probes: ProbeSet,
}

impl ForwardModel {
    pub fn new(sampler: SpdeSampler, bc: BoundaryConditions, probes: ProbeSet) -> Result<Self> {
        let d = sampler.hierarchy().finest().dimension();
        bc.validate(d)?;
        let extent = sampler.hierarchy().finest().physical_extent();
        if let Some(p) = probes.points.iter().find(|p| !extent.contains(p)) {
            return Err(Error::InvalidArgument(format!(
                "probe {p:?} lies outside the physical domain"
            )));
        }
        Ok(Self {
            sampler,
            bc,
            outflow: (0, 1),
            probes,
        })
    }

    pub fn sampler(&self) -> &SpdeSampler {
        &self.sampler
    }

    pub fn boundary_conditions(&self) -> &BoundaryConditions {
        &self.bc
    }

    pub fn probes(&self) -> &ProbeSet {
        &self.probes
    }

    pub fn num_levels(&self) -> usize {
        self.sampler.hierarchy().num_levels()
    }

    /// Observations and QoI for a given log-permeability field.
    pub fn simulate_field(&self, field: &FieldSample) -> Result<(Vec<f64>, f64)> {
        let grid = self.sampler.hierarchy().level(field.level_index)?;
        let k = PermeabilityField::from_log_field(field)?;
        let sol = solve_darcy(grid, &k, &self.bc, None)?;
        let y = observe(grid, &sol, &self.probes)?;
        let q = compute_qoi(&sol, self.outflow.0, self.outflow.1)?;
        Ok((y, q))
    }

    pub fn simulate(&self, zeta: &WhiteNoise) -> Result<(Vec<f64>, f64)> {
        let field = self.sampler.solve(zeta)?;
        self.simulate_field(&field)
    }

    pub fn evaluate(&self, zeta: &WhiteNoise, data: &Observations) -> Result<ForwardEvaluation> {
        let (observations, qoi) = self.simulate(zeta)?;
        let log_likelihood = log_likelihood(&observations, &data.y_obs, data.sigma_eta)?;
        Ok(ForwardEvaluation {
            observations,
            qoi,
            log_likelihood,
        })
    }
}

pub const SYNTHETIC_DATA_VERSION: u32 = 1;

/// Persisted synthetic observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub format_version: u32,
    pub probes: Vec<Vec<f64>>,
    pub y_obs: Vec<f64>,
    pub noiseless_observations: Vec<f64>,
    pub sigma_eta: f64,
    pub seed: u64,
    pub reference_level: usize,
    pub reference_dims: Vec<usize>,
    pub true_qoi: f64,
}

impl SyntheticData {
    pub fn observations(&self) -> Observations {
        Observations {
            probes: ProbeSet {
                points: self.probes.clone(),
            },
            y_obs: self.y_obs.clone(),
            sigma_eta: self.sigma_eta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != SYNTHETIC_DATA_VERSION {
            return Err(Error::Format(format!(
                "unsupported synthetic data version {}",
                self.format_version
            )));
        }
        let m = self.probes.len();
        if m == 0 || self.y_obs.len() != m || self.noiseless_observations.len() != m {
            return Err(Error::Format(
                "probe, observation and noiseless vectors must be non-empty and of equal length".into(),
            ));
        }
        let d = self.probes[0].len();
        if !(2..=3).contains(&d) || self.probes.iter().any(|p| p.len() != d) {
            return Err(Error::Format("probes must all be 2D or all be 3D".into()));
        }
        if self.reference_dims.len() != d {
            return Err(Error::Format("reference grid dimension differs from probes".into()));
        }
        let finite = self
            .probes
            .iter()
            .flatten()
            .chain(&self.y_obs)
            .chain(&self.noiseless_observations)
            .chain([&self.true_qoi])
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Format("non-finite value in synthetic data".into()));
        }
        if !(self.sigma_eta.is_finite() && self.sigma_eta >= 0.0) {
            return Err(Error::Format(format!("invalid sigma_eta {}", self.sigma_eta)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let data: Self = serde_json::from_str(text)?;
        data.validate()?;
        Ok(data)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Draws a reference field on `reference_level` of `model`, records its
/// observations and QoI, and perturbs the observations with `N(0, σ_η²)`.
pub fn generate_synthetic_data(
    model: &ForwardModel,
    reference_level: usize,
    sigma_eta: f64,
    seed: u64,
) -> Result<SyntheticData> {
    if !(sigma_eta.is_finite() && sigma_eta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "observation noise must be non-negative, got {sigma_eta}"
        )));
    }
    let hierarchy = model.sampler().hierarchy();
    let grid = hierarchy.level(reference_level)?;
    let mut field_rng = ChaCha8Rng::seed_from_u64(seed);
    let zeta = sample_white_noise(hierarchy, reference_level, &mut field_rng)?;
    let (noiseless, true_qoi) = model.simulate(&zeta)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);
    let y_obs = if sigma_eta == 0.0 {
        noiseless.clone()
    } else {
        let normal = Normal::new(0.0, sigma_eta).expect("positive noise level");
        noiseless.iter().map(|y| y + normal.sample(&mut noise_rng)).collect()
    };
    Ok(SyntheticData {
        format_version: SYNTHETIC_DATA_VERSION,
        probes: model.probes().points.clone(),
        y_obs,
        noiseless_observations: noiseless,
        sigma_eta,
        seed,
        reference_level,
        reference_dims: grid.dims().to_vec(),
        true_qoi,
    })
}

/// Adds i.i.d. `N(0, σ²)` noise to a vector; exposed for diagnostics.
pub fn add_noise<R: Rng + ?Sized>(values: &[f64], sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(values.iter().map(|v| v + normal.sample(rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grf::{GrfConfig, KappaConvention};
    use crate::grid::Hierarchy;

    fn square(n: usize) -> Hierarchy {
        Hierarchy::build(&[n, n], 1, Extent::unit(2), &[0, 0]).unwrap()
    }

    fn solve_const(n: usize, c: f64) -> (Hierarchy, DarcySolution) {
        let h = square(n);
        let k = PermeabilityField::constant(0, n * n, c).unwrap();
        let sol = solve_darcy(h.level(0).unwrap(), &k, &BoundaryConditions::flow_cell(2), None).unwrap();
        (h, sol)
    }

    #[test]
    fn homogeneous_medium_gives_linear_pressure_and_unit_flux() {
        let (h, sol) = solve_const(8, 1.0);
        let grid = h.level(0).unwrap();
        for i in 0..64 {
            let x = grid.physical_cell_center(i)[0];
            assert!((sol.pressure[i] - (1.0 - x)).abs() < 1e-9);
        }
        assert!((compute_qoi(&sol, 0, 1).unwrap() - 1.0).abs() < 1e-9);
        assert!((compute_qoi(&sol, 0, 0).unwrap() + 1.0).abs() < 1e-9);
        for f in &sol.face_fluxes[0] {
            assert!(*f == 0.0 || (f - 1.0).abs() < 1e-9);
        }
        assert!(sol.face_fluxes[1].iter().all(|f| f.abs() < 1e-9));
    }

    #[test]
    fn flux_scales_with_constant_permeability() {
        let (_, sol) = solve_const(6, 3.5);
        assert!((compute_qoi(&sol, 0, 1).unwrap() - 3.5).abs() < 1e-8);
    }

    #[test]
    fn layers_in_series_give_harmonic_mean() {
        let h = square(32);
        let grid = h.level(0).unwrap();
        let values = (0..1024)
            .map(|i| {
                if grid.physical_cell_center(i)[0] < 0.5 {
                    1.0
                } else {
                    4.0
                }
            })
            .collect();
        let k = PermeabilityField::new(0, values).unwrap();
        let sol = solve_darcy(grid, &k, &BoundaryConditions::flow_cell(2), None).unwrap();
        assert!((compute_qoi(&sol, 0, 1).unwrap() - 1.6).abs() < 1e-8);
    }

    #[test]
    fn rejects_all_no_flux() {
        let h = square(4);
        let k = PermeabilityField::constant(0, 16, 1.0).unwrap();
        let bc = BoundaryConditions {
            faces: vec![[BoundaryCondition::NoFlux; 2]; 2],
        };
        assert!(solve_darcy(h.level(0).unwrap(), &k, &bc, None).is_err());
        assert!(PermeabilityField::new(0, vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn probes_read_interpolated_pressure() {
        let (h, sol) = solve_const(8, 1.0);
        let grid = h.level(0).unwrap();
        let probes = ProbeSet {
            points: vec![vec![0.5, 0.3], vec![0.2, 0.7], vec![0.8, 0.7]],
        };
        let y = observe(grid, &sol, &probes).unwrap();
        assert!((y[0] - 0.5).abs() < 1e-9);
        assert!((y[1] + y[2] - 1.0).abs() < 1e-9);
        let outside = ProbeSet {
            points: vec![vec![1.5, 0.5]],
        };
        assert!(observe(grid, &sol, &outside).is_err());
    }

    #[test]
    fn default_probes() {
        let p = ProbeSet::default_for(&Extent::unit(2));
        assert_eq!(p.len(), 25);
        assert!((p.points[0][0] - 1.0 / 6.0).abs() < 1e-15);
        assert!((p.points[24][1] - 5.0 / 6.0).abs() < 1e-15);
        let p3 = ProbeSet::default_for(&Extent::unit(3));
        assert_eq!(p3.len(), 25);
        assert!(p3.points.iter().flatten().all(|&v| (0.15..=0.85).contains(&v)));
    }

    #[test]
    fn log_likelihood_values() {
        assert_eq!(log_likelihood(&[1.0, 2.0], &[1.0, 2.0], 0.005).unwrap(), 0.0);
        let l = log_likelihood(&[0.005, 0.0], &[0.0, 0.0], 0.005).unwrap();
        assert!((l + 0.5).abs() < 1e-12);
        assert!(log_likelihood(&[0.0], &[0.0, 1.0], 0.005).is_err());
        assert!(log_likelihood(&[0.0], &[0.0], 0.0).is_err());
    }

    fn model(n: usize, levels: usize) -> ForwardModel {
        let h = Hierarchy::build(&[n, n], levels, Extent::unit(2), &[2, 2]).unwrap();
        let cfg = GrfConfig::from_correlation_length(0.3, 0.5, 2, KappaConvention::Matern).unwrap();
        let sampler = SpdeSampler::new(h, cfg).unwrap();
        ForwardModel::new(
            sampler,
            BoundaryConditions::flow_cell(2),
            ProbeSet::default_for(&Extent::unit(2)),
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_forward_map_is_homogeneous() {
        let m = model(8, 1);
        let zeta = WhiteNoise::zeros(m.sampler().hierarchy(), 0).unwrap();
        let (y, q) = m.simulate(&zeta).unwrap();
        assert!((q - 1.0).abs() < 1e-9);
        assert!((y[0] - 5.0 / 6.0).abs() < 1e-9);
    }

    #[test]
    fn synthetic_data_is_reproducible() {
        let m = model(4, 2);
        let a = generate_synthetic_data(&m, 1, 0.005, 9).unwrap();
        let b = generate_synthetic_data(&m, 1, 0.005, 9).unwrap();
        assert_eq!(a, b);
        let clean = generate_synthetic_data(&m, 1, 0.0, 9).unwrap();
        assert_eq!(clean.y_obs, clean.noiseless_observations);
        assert_eq!(clean.noiseless_observations, a.noiseless_observations);
        let back = SyntheticData::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
        assert!(SyntheticData::from_json("{}").is_err());
    }
}
