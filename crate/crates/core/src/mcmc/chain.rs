//! The multilevel delayed-acceptance chain.
//!
//! Level `ℓ > 0` proposals are built from a coarse subchain of `J_{ℓ−1}`
//! steps: the coarse component of the proposal is the subchain's final
//! state `ζ⋆` and the complement is a pCN move of the current fine state,
//! `ζ^P = Πᵀ ζ⋆ + (I − Πᵀ Pᵀ) pCN(ζ^C, ξ)`. The coarse component of every
//! fine state therefore equals the state of the level below, and a fine
//! rejection rolls the whole lower tower back.

use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    filtered_mh_step, metropolis_accept, mh_step, mlda_log_ratio, pcn_propose, LevelState, LogLikelihood,
    PdeLikelihood, StepFlags, SurrogateLikelihood, Tallies,
};
use crate::darcy::{ForwardModel, Observations};
use crate::diagnostics::iact;
use crate::error::{Error, Result};
use crate::grf::{condition_white_noise, sample_white_noise, WhiteNoise};
use crate::surrogate::Surrogate;

/// Kernel on the coarsest level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoarseMode {
    /// Metropolis-Hastings with the PDE likelihood.
    #[default]
    Reference,
    /// Metropolis-Hastings with the surrogate likelihood only.
    Unfiltered,
    /// Surrogate first stage, PDE second stage.
    Filtered,
}

impl CoarseMode {
    pub const ALL: [CoarseMode; 3] = [CoarseMode::Reference, CoarseMode::Unfiltered, CoarseMode::Filtered];

    pub fn as_str(self) -> &'static str {
        match self {
            CoarseMode::Reference => "reference",
            CoarseMode::Unfiltered => "unfiltered",
            CoarseMode::Filtered => "filtered",
        }
    }

    pub fn needs_surrogate(self) -> bool {
        self != CoarseMode::Reference
    }
}

impl std::fmt::Display for CoarseMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CoarseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(CoarseMode::Reference),
            "unfiltered" => Ok(CoarseMode::Unfiltered),
            "filtered" => Ok(CoarseMode::Filtered),
            other => Err(Error::InvalidArgument(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSettings {
    /// pCN step per level.
    pub betas: Vec<f64>,
    /// `subsample[ℓ]`: level-`ℓ` steps per level-`ℓ+1` proposal.
    pub subsample: Vec<usize>,
    pub seed: u64,
    /// Record per-step wall time; zero otherwise, which makes outputs
    /// reproducible byte for byte.
    pub record_wall_time: bool,
}

/// One step of one level's chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_index: u64,
    pub level: usize,
    #[serde(rename = "Q")]
    pub qoi: f64,
    /// `Q_ℓ − Q_{ℓ−1}` at the coupled coarse state; `Q_0` on level 0.
    #[serde(rename = "Y")]
    pub y: f64,
    pub accepted: bool,
    pub stage1_accepted: bool,
    /// Wall time of this step excluding nested coarse steps.
    pub wall_ms: f64,
}

/// Tallies and timing after a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub tallies: Vec<Tallies>,
    pub initial_exact_evaluations: u64,
    pub wall_ms: Vec<f64>,
}

const STREAMS_PER_LEVEL: u64 = 3;
const INIT_STREAM: u64 = u64::MAX;

/// Per-level random streams, derived from one seed so every mode sees the
/// same proposal randomness.
#[derive(Debug, Clone)]
struct LevelStreams {
    proposal: ChaCha8Rng,
    accept: ChaCha8Rng,
    filter: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub struct MultilevelSampler<'a> {
    model: &'a ForwardModel,
    data: &'a Observations,
    surrogate: Option<&'a dyn Surrogate>,
    mode: CoarseMode,
    settings: ChainSettings,
    top: usize,
    states: Vec<LevelState>,
    streams: Vec<LevelStreams>,
    counters: Vec<u64>,
    wall: Vec<Duration>,
    initial_exact_evaluations: u64,
}

impl<'a> MultilevelSampler<'a> {
    /// Builds a chain over levels `0..=top_level`. The chain starts from
    /// `initial` (lifted or projected to `top_level`) or from a prior draw.
    pub fn new(
        model: &'a ForwardModel,
        data: &'a Observations,
        surrogate: Option<&'a dyn Surrogate>,
        mode: CoarseMode,
        top_level: usize,
        settings: ChainSettings,
        initial: Option<&WhiteNoise>,
    ) -> Result<Self> {
        let hierarchy = model.sampler().hierarchy();
        hierarchy.level(top_level)?;
        if settings.betas.len() <= top_level {
            return Err(Error::InvalidArgument(format!(
                "need a pCN step for each of {} levels, got {}",
                top_level + 1,
                settings.betas.len()
            )));
        }
        if let Some(b) = settings.betas[..=top_level].iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
            return Err(Error::InvalidArgument(format!("pCN step must lie in (0, 1], got {b}")));
        }
        if settings.subsample.len() < top_level || settings.subsample[..top_level].contains(&0) {
            return Err(Error::InvalidArgument(
                "need a positive subsample count for every level below the top".into(),
            ));
        }
        if mode.needs_surrogate() && surrogate.is_none() {
            return Err(Error::MissingDependency(format!("{mode} mode needs a surrogate")));
        }

        let streams = (0..=top_level as u64)
            .map(|l| LevelStreams {
                proposal: stream(settings.seed, STREAMS_PER_LEVEL * l),
                accept: stream(settings.seed, STREAMS_PER_LEVEL * l + 1),
                filter: stream(settings.seed, STREAMS_PER_LEVEL * l + 2),
            })
            .collect();
        let mut init_rng = stream(settings.seed, INIT_STREAM);
        let mut zeta = match initial {
            Some(z) => z.clone(),
            None => sample_white_noise(hierarchy, top_level, &mut init_rng)?,
        };
        while zeta.level_index > top_level {
            zeta = WhiteNoise {
                level_index: zeta.level_index - 1,
                coefficients: hierarchy.prolongate_transpose(&zeta.coefficients, zeta.level_index - 1)?,
            };
        }
        while zeta.level_index < top_level {
            let fresh = sample_white_noise(hierarchy, zeta.level_index + 1, &mut init_rng)?;
            zeta = condition_white_noise(hierarchy, &zeta, &fresh)?;
        }

        let mut tower = vec![zeta];
        for l in (0..top_level).rev() {
            let fine = tower.last().expect("tower is non-empty");
            tower.push(WhiteNoise {
                level_index: l,
                coefficients: hierarchy.prolongate_transpose(&fine.coefficients, l)?,
            });
        }
        tower.reverse();

        let mut sampler = Self {
            model,
            data,
            surrogate,
            mode,
            settings,
            top: top_level,
            states: Vec::with_capacity(top_level + 1),
            streams,
            counters: vec![0; top_level + 1],
            wall: vec![Duration::ZERO; top_level + 1],
            initial_exact_evaluations: 0,
        };
        for zeta in tower {
            let state = sampler.initial_state(zeta)?;
            sampler.states.push(state);
        }
        Ok(sampler)
    }

    fn pde(&self) -> PdeLikelihood<'a> {
        PdeLikelihood {
            model: self.model,
            data: self.data,
        }
    }

    fn surrogate_likelihood(&self) -> Result<SurrogateLikelihood<'a>> {
        let surrogate = self
            .surrogate
            .ok_or_else(|| Error::MissingDependency("surrogate".into()))?;
        Ok(SurrogateLikelihood {
            surrogate,
            data: self.data,
        })
    }

    fn initial_state(&mut self, zeta: WhiteNoise) -> Result<LevelState> {
        if zeta.level_index > 0 || self.mode == CoarseMode::Reference {
            self.initial_exact_evaluations += 1;
            let eval = self.pde().evaluate(&zeta)?;
            return LevelState::new(zeta, eval);
        }
        let surrogate = self.surrogate_likelihood()?.evaluate(&zeta)?;
        match self.mode {
            CoarseMode::Unfiltered => LevelState::new(zeta, surrogate),
            _ => {
                self.initial_exact_evaluations += 1;
                let eval = self.pde().evaluate(&zeta)?;
                LevelState::new(zeta, eval)?.with_surrogate(surrogate)
            }
        }
    }

    pub fn mode(&self) -> CoarseMode {
        self.mode
    }

    pub fn top_level(&self) -> usize {
        self.top
    }

    pub fn settings(&self) -> &ChainSettings {
        &self.settings
    }

    pub fn states(&self) -> &[LevelState] {
        &self.states
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            tallies: self.states.iter().map(|s| s.tallies).collect(),
            initial_exact_evaluations: self.initial_exact_evaluations,
            wall_ms: self.wall.iter().map(|d| d.as_secs_f64() * 1e3).collect(),
        }
    }

    /// Advances the top level `n` times, passing every step of every level
    /// to `sink` as it completes.
    pub fn run(&mut self, n: usize, sink: &mut dyn FnMut(&SampleRecord) -> Result<()>) -> Result<()> {
        for _ in 0..n {
            self.advance(self.top, sink)?;
        }
        Ok(())
    }

    /// Like [`run`](Self::run) but collects the records.
    pub fn run_collect(&mut self, n: usize) -> Result<Vec<SampleRecord>> {
        let mut records = Vec::new();
        self.run(n, &mut |r| {
            records.push(r.clone());
            Ok(())
        })?;
        Ok(records)
    }

    /// One step on `level`; returns the wall time including nested steps.
    fn advance(&mut self, level: usize, sink: &mut dyn FnMut(&SampleRecord) -> Result<()>) -> Result<Duration> {
        let start = Instant::now();
        let (flags, nested) = if level == 0 {
            (self.step_coarsest()?, Duration::ZERO)
        } else {
            self.step_fine(level, sink)?
        };
        let elapsed = start.elapsed();
        let own = elapsed.saturating_sub(nested);
        self.wall[level] += own;
        let qoi = self.states[level].qoi;
        let y = if level == 0 {
            qoi
        } else {
            qoi - self.states[level - 1].qoi
        };
        let record = SampleRecord {
            sample_index: self.counters[level],
            level,
            qoi,
            y,
            accepted: flags.accepted,
            stage1_accepted: flags.stage1_accepted,
            wall_ms: if self.settings.record_wall_time {
                own.as_secs_f64() * 1e3
            } else {
                0.0
            },
        };
        self.counters[level] += 1;
        sink(&record)?;
        Ok(elapsed)
    }

    fn step_coarsest(&mut self) -> Result<StepFlags> {
        let hierarchy = self.model.sampler().hierarchy();
        let fresh = sample_white_noise(hierarchy, 0, &mut self.streams[0].proposal)?;
        let proposal = pcn_propose(&self.states[0].zeta, &fresh, self.settings.betas[0])?;
        let streams = &mut self.streams[0];
        let state = &mut self.states[0];
        match self.mode {
            CoarseMode::Reference => {
                let pde = PdeLikelihood {
                    model: self.model,
                    data: self.data,
                };
                let accepted = mh_step(state, proposal, &pde, &mut streams.accept)?;
                state.tallies.exact_evaluations += 1;
                Ok(StepFlags {
                    stage1_accepted: accepted,
                    accepted,
                })
            }
            CoarseMode::Unfiltered => {
                let surrogate = SurrogateLikelihood {
                    surrogate: self
                        .surrogate
                        .ok_or_else(|| Error::MissingDependency("surrogate".into()))?,
                    data: self.data,
                };
                let accepted = mh_step(state, proposal, &surrogate, &mut streams.accept)?;
                state.tallies.surrogate_evaluations += 1;
                Ok(StepFlags {
                    stage1_accepted: accepted,
                    accepted,
                })
            }
            CoarseMode::Filtered => {
                let surrogate = SurrogateLikelihood {
                    surrogate: self
                        .surrogate
                        .ok_or_else(|| Error::MissingDependency("surrogate".into()))?,
                    data: self.data,
                };
                let pde = PdeLikelihood {
                    model: self.model,
                    data: self.data,
                };
                filtered_mh_step(
                    state,
                    proposal,
                    &surrogate,
                    &pde,
                    &mut streams.accept,
                    &mut streams.filter,
                )
            }
        }
    }

    fn step_fine(
        &mut self,
        level: usize,
        sink: &mut dyn FnMut(&SampleRecord) -> Result<()>,
    ) -> Result<(StepFlags, Duration)> {
        let snapshot: Vec<LevelState> = self.states[..level].to_vec();
        let coarse_current = self.states[level - 1].log_likelihood;
        let mut nested = Duration::ZERO;
        for _ in 0..self.settings.subsample[level - 1] {
            nested += self.advance(level - 1, sink)?;
        }
        let coarse_star = self.states[level - 1].log_likelihood;
        let hierarchy = self.model.sampler().hierarchy();
        let fresh = sample_white_noise(hierarchy, level, &mut self.streams[level].proposal)?;
        let moved = pcn_propose(&self.states[level].zeta, &fresh, self.settings.betas[level])?;
        let proposal = condition_white_noise(hierarchy, &self.states[level - 1].zeta, &moved)?;
        let eval = self.pde().evaluate(&proposal)?;
        let state = &mut self.states[level];
        state.tallies.exact_evaluations += 1;
        state.tallies.steps += 1;
        if eval.log_likelihood.is_nan() {
            return Err(Error::NonFinite("proposal log-likelihood is NaN".into()));
        }
        let log_ratio = mlda_log_ratio(eval.log_likelihood, state.log_likelihood, coarse_current, coarse_star);
        let accepted = metropolis_accept(log_ratio, &mut self.streams[level].accept)?;
        if accepted {
            state.tallies.stage1_accepted += 1;
            state.tallies.accepted += 1;
            state.zeta = proposal;
            state.log_likelihood = eval.log_likelihood;
            state.qoi = eval.qoi;
        } else {
            for (s, old) in self.states[..level].iter_mut().zip(&snapshot) {
                s.restore_from(old);
            }
        }
        Ok((
            StepFlags {
                stage1_accepted: accepted,
                accepted,
            },
            nested,
        ))
    }
}

/// Subsampling rates chosen by pilot runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleEstimate {
    pub subsample: Vec<usize>,
    /// Pilot IACT of `Y_ℓ` per level below the top (`None` for a stuck chain).
    pub iact: Vec<Option<f64>>,
    /// Final state of the last pilot, used to start the main chain.
    pub final_state: Option<WhiteNoise>,
}

impl SubsampleEstimate {
    /// Runs pilot chains bottom-up: the pilot for level `ℓ` uses the rates
    /// already chosen for the levels below it and runs `pilot_steps` steps
    /// on level `ℓ`. The rate is `⌈τ̂⌉` of the second half of the pilot's
    /// `Y_ℓ` series, clamped to `[1, max_subsample]`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_pilot(
        model: &ForwardModel,
        data: &Observations,
        surrogate: Option<&dyn Surrogate>,
        mode: CoarseMode,
        top_level: usize,
        betas: &[f64],
        seed: u64,
        pilot_steps: usize,
        max_subsample: usize,
    ) -> Result<Self> {
        if max_subsample == 0 {
            return Err(Error::InvalidArgument(
                "maximum subsample count must be positive".into(),
            ));
        }
        let mut subsample = Vec::with_capacity(top_level);
        let mut taus = Vec::with_capacity(top_level);
        let mut state: Option<WhiteNoise> = None;
        for level in 0..top_level {
            let settings = ChainSettings {
                betas: betas.to_vec(),
                subsample: subsample.clone(),
                seed: seed.wrapping_add(level as u64 + 1),
                record_wall_time: false,
            };
            let mut sampler = MultilevelSampler::new(model, data, surrogate, mode, level, settings, state.as_ref())?;
            let mut y = Vec::with_capacity(pilot_steps);
            sampler.run(pilot_steps, &mut |r| {
                if r.level == level {
                    y.push(r.y);
                }
                Ok(())
            })?;
            let estimate = iact(&y[y.len() / 2..]).ok();
            let tau = estimate.map(|e| e.tau);
            // a window that hit its cap only bounds τ from below
            let rate = match estimate {
                Some(e) if e.converged => (e.tau.ceil().max(1.0) as usize).min(max_subsample),
                _ => max_subsample,
            };
            subsample.push(rate);
            taus.push(tau);
            state = Some(sampler.states()[level].zeta.clone());
        }
        Ok(Self {
            subsample,
            iact: taus,
            final_state: state,
        })
    }
}
