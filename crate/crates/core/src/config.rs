//! Run configuration: one JSON document covering the whole pipeline.
//!
//! Optional fields left out of a file are filled by [`RunConfig::resolve`],
//! and the resolved document is what gets written next to every output, so
//! re-loading it reproduces the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::darcy::{BoundaryConditions, ForwardModel, ProbeSet};
use crate::diagnostics::SummaryOptions;
use crate::error::{Error, Result};
use crate::grf::{GrfConfig, KappaConvention, SpdeSampler, VarianceNormalization};
use crate::grid::{default_padding, Extent, Hierarchy};
use crate::mcmc::CoarseMode;
use crate::surrogate::{HiddenLayer, SurrogateSpec, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchySection {
    /// Cells per axis on the coarsest level.
    pub coarse_dims: Vec<usize>,
    pub num_levels: usize,
    pub extent: Extent,
    /// Padding cells per axis on the coarsest level; `None` means one
    /// correlation length.
    pub padding: Option<Vec<usize>>,
}

impl Default for HierarchySection {
    fn default() -> Self {
        Self {
            coarse_dims: vec![16, 16],
            num_levels: 3,
            extent: Extent::unit(2),
            padding: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrfSection {
    pub correlation_length: f64,
    pub marginal_variance: f64,
    /// Must equal `2 − d/2` when given.
    pub nu: Option<f64>,
    pub kappa_convention: KappaConvention,
    pub normalization: VarianceNormalization,
}

impl Default for GrfSection {
    fn default() -> Self {
        Self {
            correlation_length: 0.3,
            marginal_variance: 0.5,
            nu: None,
            kappa_convention: KappaConvention::Matern,
            normalization: VarianceNormalization::Lattice,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DarcySection {
    pub boundary_conditions: Option<BoundaryConditions>,
    pub probes: Option<ProbeSet>,
    pub sigma_eta: f64,
    /// Level the synthetic data is generated on; `None` means the finest.
    pub reference_level: Option<usize>,
    pub data_seed: u64,
    /// Existing synthetic-data file to use instead of generating one.
    pub data_path: Option<PathBuf>,
}

impl Default for DarcySection {
    fn default() -> Self {
        Self {
            boundary_conditions: None,
            probes: None,
            sigma_eta: 0.005,
            reference_level: None,
            data_seed: 1,
            data_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateSection {
    pub hidden_layers: Vec<HiddenLayer>,
    pub n_train: usize,
    pub n_valid: usize,
    pub data_seed: u64,
    pub train: TrainConfig,
    /// Existing trained model to use instead of training one.
    pub model_path: Option<PathBuf>,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        Self {
            hidden_layers: SurrogateSpec::default_for(1, 1).hidden_layers,
            n_train: 10_000,
            n_valid: 5_000,
            data_seed: 2,
            train: TrainConfig::default(),
            model_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcSection {
    pub mode: CoarseMode,
    /// pCN step per level; `None` means 0.15 on level 0, halved per level.
    pub betas: Option<Vec<f64>>,
    pub n_fine_samples: usize,
    pub burn_in_fraction: f64,
    /// Coarse steps per proposal for each level below the top; `None`
    /// means pilot-estimated.
    pub subsample: Option<Vec<usize>>,
    /// Steps of each pilot chain.
    pub pilot_length: usize,
    pub max_subsample: usize,
    pub eps2: f64,
    pub seed: u64,
    /// Independent chains per mode.
    pub chains: usize,
}

impl Default for McmcSection {
    fn default() -> Self {
        Self {
            mode: CoarseMode::Reference,
            betas: None,
            n_fine_samples: 2000,
            burn_in_fraction: 0.1,
            subsample: None,
            pilot_length: 500,
            max_subsample: 20,
            eps2: 0.01,
            seed: 2024,
            chains: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
    /// Store per-step wall times; disable for byte-identical reruns.
    pub record_wall_time: bool,
    pub histogram_bins: usize,
    pub max_lag: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("runs"),
            record_wall_time: true,
            histogram_bins: 40,
            max_lag: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub hierarchy: HierarchySection,
    pub grf: GrfSection,
    pub darcy: DarcySection,
    pub surrogate: SurrogateSection,
    pub mcmc: McmcSection,
    pub output: OutputSection,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.resolve()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fills defaults that depend on other fields and validates everything.
    pub fn resolve(mut self) -> Result<Self> {
        let h = &self.hierarchy;
        let d = h.coarse_dims.len();
        if !(2..=3).contains(&d) {
            return Err(config_err(format!(
                "hierarchy.coarse_dims needs 2 or 3 entries, got {d}"
            )));
        }
        if h.extent.dimension() != d {
            return Err(config_err("hierarchy.extent dimension differs from coarse_dims"));
        }
        if h.num_levels == 0 {
            return Err(config_err("hierarchy.num_levels must be positive"));
        }
        if self.hierarchy.padding.is_none() {
            let cell: Vec<f64> = (0..d)
                .map(|a| h.extent.length(a) / h.coarse_dims[a].max(1) as f64)
                .collect();
            self.hierarchy.padding = Some(default_padding(self.grf.correlation_length, &cell));
        }
        let supported = GrfConfig::supported_nu(d);
        match self.grf.nu {
            None => self.grf.nu = Some(supported),
            Some(nu) if (nu - supported).abs() > 1e-12 => {
                return Err(config_err(format!(
                    "grf.nu = {nu} is not supported in {d}D; only {supported}"
                )))
            }
            _ => {}
        }
        let top = self.hierarchy.num_levels - 1;
        if self.darcy.boundary_conditions.is_none() {
            self.darcy.boundary_conditions = Some(BoundaryConditions::flow_cell(d));
        }
        if self.darcy.probes.is_none() {
            self.darcy.probes = Some(ProbeSet::default_for(&self.hierarchy.extent));
        }
        if self.darcy.reference_level.is_none() {
            self.darcy.reference_level = Some(top);
        }
        if self.mcmc.betas.is_none() {
            self.mcmc.betas = Some((0..=top).map(|l| 0.15 / (1u64 << l) as f64).collect());
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let top = self.hierarchy.num_levels - 1;
        self.build_hierarchy()?;
        self.grf_config()?;
        let bc = self.darcy.boundary_conditions.as_ref().expect("resolved");
        bc.validate(self.dimension())
            .map_err(|e| config_err(format!("darcy.boundary_conditions: {e}")))?;
        let probes = self.darcy.probes.as_ref().expect("resolved");
        if probes.is_empty() {
            return Err(config_err("darcy.probes is empty"));
        }
        if let Some(p) = probes.points.iter().find(|p| !self.hierarchy.extent.contains(p)) {
            return Err(config_err(format!("probe {p:?} lies outside the domain")));
        }
        if !(self.darcy.sigma_eta.is_finite() && self.darcy.sigma_eta > 0.0) {
            return Err(config_err("darcy.sigma_eta must be positive"));
        }
        if self.darcy.reference_level.expect("resolved") > top {
            return Err(config_err("darcy.reference_level exceeds the finest level"));
        }
        self.surrogate_spec()?;
        if self.surrogate.n_train == 0 || self.surrogate.n_valid == 0 {
            return Err(config_err("surrogate.n_train and n_valid must be positive"));
        }
        self.surrogate
            .train
            .validate()
            .map_err(|e| config_err(format!("surrogate.train: {e}")))?;
        let m = &self.mcmc;
        let betas = m.betas.as_ref().expect("resolved");
        if betas.len() != top + 1 {
            return Err(config_err(format!(
                "mcmc.betas needs {} entries, got {}",
                top + 1,
                betas.len()
            )));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
            return Err(config_err(format!("mcmc.betas entry {b} is outside (0, 1]")));
        }
        if !(0.0..1.0).contains(&m.burn_in_fraction) {
            return Err(config_err("mcmc.burn_in_fraction must lie in [0, 1)"));
        }
        if let Some(j) = &m.subsample {
            if j.len() != top || j.contains(&0) {
                return Err(config_err(format!("mcmc.subsample needs {top} positive entries")));
            }
        }
        if m.pilot_length < 10 && m.subsample.is_none() && top > 0 {
            return Err(config_err("mcmc.pilot_length must be at least 10"));
        }
        if m.max_subsample == 0 {
            return Err(config_err("mcmc.max_subsample must be positive"));
        }
        if !(m.eps2.is_finite() && m.eps2 > 0.0) {
            return Err(config_err("mcmc.eps2 must be positive"));
        }
        if m.chains == 0 {
            return Err(config_err("mcmc.chains must be positive"));
        }
        if self.output.histogram_bins == 0 {
            return Err(config_err("output.histogram_bins must be positive"));
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.hierarchy.coarse_dims.len()
    }

    pub fn top_level(&self) -> usize {
        self.hierarchy.num_levels - 1
    }

    pub fn betas(&self) -> &[f64] {
        self.mcmc.betas.as_deref().unwrap_or(&[])
    }

    pub fn build_hierarchy(&self) -> Result<Hierarchy> {
        let h = &self.hierarchy;
        let padding = h.padding.clone().unwrap_or_else(|| vec![0; h.coarse_dims.len()]);
        Hierarchy::build(&h.coarse_dims, h.num_levels, h.extent.clone(), &padding)
            .map_err(|e| config_err(format!("hierarchy: {e}")))
    }

    pub fn grf_config(&self) -> Result<GrfConfig> {
        GrfConfig::from_correlation_length(
            self.grf.correlation_length,
            self.grf.marginal_variance,
            self.dimension(),
            self.grf.kappa_convention,
        )
        .map(|c| c.with_normalization(self.grf.normalization))
        .map_err(|e| config_err(format!("grf: {e}")))
    }

    pub fn build_model(&self) -> Result<ForwardModel> {
        let sampler = SpdeSampler::new(self.build_hierarchy()?, self.grf_config()?)?;
        ForwardModel::new(
            sampler,
            self.darcy
                .boundary_conditions
                .clone()
                .unwrap_or_else(|| BoundaryConditions::flow_cell(self.dimension())),
            self.darcy
                .probes
                .clone()
                .unwrap_or_else(|| ProbeSet::default_for(&self.hierarchy.extent)),
        )
    }

    /// Network shape for the coarsest level of this hierarchy.
    pub fn surrogate_spec(&self) -> Result<SurrogateSpec> {
        let hierarchy = self.build_hierarchy()?;
        let outputs = self.darcy.probes.as_ref().map_or(0, |p| p.len()) + 1;
        let spec = SurrogateSpec {
            input_dim: hierarchy.level(0)?.num_cells(),
            output_dim: outputs,
            hidden_layers: self.surrogate.hidden_layers.clone(),
        };
        spec.validate().map_err(|e| config_err(format!("surrogate: {e}")))?;
        Ok(spec)
    }

    pub fn summary_options(&self) -> SummaryOptions {
        SummaryOptions {
            burn_in_fraction: self.mcmc.burn_in_fraction,
            eps2: self.mcmc.eps2,
        }
    }

    /// SHA-256 of the resolved configuration, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
