//! Sampling kernels: pCN proposals, Metropolis-Hastings, the surrogate
//! filtered two-stage kernel and the multilevel delayed-acceptance ratio.
//!
//! All acceptance arithmetic is done on log-likelihoods; a ratio is only
//! exponentiated when it is compared against the uniform variate.

mod chain;
mod plan;

pub use chain::{ChainSettings, CoarseMode, MultilevelSampler, RunSummary, SampleRecord, SubsampleEstimate};
pub(crate) use plan::mean_variance;
pub use plan::{
    compute_sample_plan, effective_cost, estimate_expectation, LevelEstimate, MultilevelEstimate, SamplePlan,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::darcy::{log_likelihood, ForwardModel, Observations};
use crate::error::{check_len, Error, Result};
use crate::grf::WhiteNoise;
use crate::surrogate::Surrogate;

/// Log-likelihood and QoI of one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub log_likelihood: f64,
    pub qoi: f64,
}

pub trait LogLikelihood {
    fn evaluate(&self, zeta: &WhiteNoise) -> Result<Evaluation>;
}

impl<F> LogLikelihood for F
where
    F: Fn(&WhiteNoise) -> Result<Evaluation>,
{
    fn evaluate(&self, zeta: &WhiteNoise) -> Result<Evaluation> {
        self(zeta)
    }
}

/// PDE likelihood on whatever level the noise lives on.
pub struct PdeLikelihood<'a> {
    pub model: &'a ForwardModel,
    pub data: &'a Observations,
}

impl LogLikelihood for PdeLikelihood<'_> {
    fn evaluate(&self, zeta: &WhiteNoise) -> Result<Evaluation> {
        let eval = self.model.evaluate(zeta, self.data)?;
        Ok(Evaluation {
            log_likelihood: eval.log_likelihood,
            qoi: eval.qoi,
        })
    }
}

/// Likelihood of the surrogate's predicted observations; the QoI is `Q̂`.
pub struct SurrogateLikelihood<'a> {
    pub surrogate: &'a dyn Surrogate,
    pub data: &'a Observations,
}

impl LogLikelihood for SurrogateLikelihood<'_> {
    fn evaluate(&self, zeta: &WhiteNoise) -> Result<Evaluation> {
        let (y, qoi) = self.surrogate.predict(zeta)?;
        Ok(Evaluation {
            log_likelihood: log_likelihood(&y, &self.data.y_obs, self.data.sigma_eta)?,
            qoi,
        })
    }
}

/// Per-level counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tallies {
    pub steps: u64,
    pub stage1_accepted: u64,
    pub accepted: u64,
    pub exact_evaluations: u64,
    pub surrogate_evaluations: u64,
}

impl Tallies {
    pub fn acceptance_rate(&self) -> f64 {
        ratio(self.accepted, self.steps)
    }

    pub fn stage1_rate(&self) -> f64 {
        ratio(self.stage1_accepted, self.steps)
    }

    /// Second-stage acceptances among first-stage acceptances.
    pub fn stage2_rate(&self) -> f64 {
        ratio(self.accepted, self.stage1_accepted)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Current state of one level's chain with cached evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelState {
    pub zeta: WhiteNoise,
    /// Likelihood of the density this level's chain targets.
    pub log_likelihood: f64,
    pub qoi: f64,
    /// Cached surrogate evaluation (filtered coarsest level only).
    pub surrogate: Option<Evaluation>,
    pub tallies: Tallies,
}

impl LevelState {
    pub fn new(zeta: WhiteNoise, eval: Evaluation) -> Result<Self> {
        check_finite(eval.log_likelihood)?;
        Ok(Self {
            zeta,
            log_likelihood: eval.log_likelihood,
            qoi: eval.qoi,
            surrogate: None,
            tallies: Tallies::default(),
        })
    }

    pub fn with_surrogate(mut self, eval: Evaluation) -> Result<Self> {
        check_finite(eval.log_likelihood)?;
        self.surrogate = Some(eval);
        Ok(self)
    }

    /// Copies the state from `other` but keeps this state's tallies.
    pub fn restore_from(&mut self, other: &LevelState) {
        self.zeta.clone_from(&other.zeta);
        self.log_likelihood = other.log_likelihood;
        self.qoi = other.qoi;
        self.surrogate = other.surrogate;
    }
}

fn check_finite(log_likelihood: f64) -> Result<()> {
    if log_likelihood.is_nan() || log_likelihood == f64::INFINITY {
        return Err(Error::NonFinite(format!("log-likelihood {log_likelihood}")));
    }
    Ok(())
}

/// Outcome of one kernel application.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepFlags {
    pub stage1_accepted: bool,
    pub accepted: bool,
}

/// `ζ^P = sqrt(1 − β²) ζ^C + β ζ̃`.
pub fn pcn_propose(current: &WhiteNoise, fresh: &WhiteNoise, beta: f64) -> Result<WhiteNoise> {
    if current.level_index != fresh.level_index {
        return Err(Error::LevelMismatch {
            coarse: current.level_index,
            fine: fresh.level_index,
        });
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "pCN step must lie in (0, 1], got {beta}"
        )));
    }
    check_len(current.coefficients.len(), fresh.coefficients.len())?;
    let keep = (1.0 - beta * beta).sqrt();
    Ok(WhiteNoise {
        level_index: current.level_index,
        coefficients: current
            .coefficients
            .iter()
            .zip(&fresh.coefficients)
            .map(|(c, f)| keep * c + beta * f)
            .collect(),
    })
}

/// `min(1, exp(log_ratio))`.
pub fn accept_probability(log_ratio: f64) -> f64 {
    if log_ratio >= 0.0 {
        1.0
    } else {
        log_ratio.exp()
    }
}

/// Metropolis test. Always consumes exactly one uniform variate.
pub fn metropolis_accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> Result<bool> {
    let u: f64 = rng.random();
    if log_ratio.is_nan() {
        return Err(Error::NonFinite("acceptance log-ratio is NaN".into()));
    }
    Ok(log_ratio >= 0.0 || u < log_ratio.exp())
}

/// Log of the second-stage ratio `(L_P / L_C) (L̂_C / L̂_P)`.
pub fn filter_log_ratio(
    exact_proposal: f64,
    exact_current: f64,
    surrogate_proposal: f64,
    surrogate_current: f64,
) -> f64 {
    (exact_proposal - exact_current) - (surrogate_proposal - surrogate_current)
}

/// Log of the multilevel ratio
/// `L_L(P) L_ℓ(C) / (L_L(C) L_ℓ(⋆))`.
pub fn mlda_log_ratio(fine_proposal: f64, fine_current: f64, coarse_current: f64, coarse_proposal: f64) -> f64 {
    (fine_proposal - fine_current) + (coarse_current - coarse_proposal)
}

/// One Metropolis-Hastings step with a prior-reversible proposal. The
/// caller counts the evaluation, which may be exact or surrogate.
pub fn mh_step<R: Rng + ?Sized>(
    state: &mut LevelState,
    proposal: WhiteNoise,
    evaluator: &dyn LogLikelihood,
    rng: &mut R,
) -> Result<bool> {
    let eval = evaluator.evaluate(&proposal)?;
    if eval.log_likelihood.is_nan() {
        return Err(Error::NonFinite("proposal log-likelihood is NaN".into()));
    }
    let accepted = metropolis_accept(eval.log_likelihood - state.log_likelihood, rng)?;
    state.tallies.steps += 1;
    if accepted {
        state.tallies.stage1_accepted += 1;
        state.tallies.accepted += 1;
        state.zeta = proposal;
        state.log_likelihood = eval.log_likelihood;
        state.qoi = eval.qoi;
    }
    Ok(accepted)
}

/// Two-stage step: screen with the surrogate, then correct with the exact
/// likelihood. The exact model is only evaluated after a first-stage
/// acceptance. Stage two draws from its own stream.
pub fn filtered_mh_step<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    state: &mut LevelState,
    proposal: WhiteNoise,
    surrogate: &dyn LogLikelihood,
    exact: &dyn LogLikelihood,
    stage_one_rng: &mut R1,
    stage_two_rng: &mut R2,
) -> Result<StepFlags> {
    let surrogate_current = state
        .surrogate
        .ok_or_else(|| Error::InvalidArgument("state has no cached surrogate evaluation".into()))?;
    let surrogate_proposal = surrogate.evaluate(&proposal)?;
    state.tallies.surrogate_evaluations += 1;
    state.tallies.steps += 1;
    if surrogate_proposal.log_likelihood.is_nan() {
        return Err(Error::NonFinite("surrogate log-likelihood is NaN".into()));
    }
    let stage1 = metropolis_accept(
        surrogate_proposal.log_likelihood - surrogate_current.log_likelihood,
        stage_one_rng,
    )?;
    if !stage1 {
        return Ok(StepFlags::default());
    }
    state.tallies.stage1_accepted += 1;
    let exact_proposal = exact.evaluate(&proposal)?;
    state.tallies.exact_evaluations += 1;
    if exact_proposal.log_likelihood.is_nan() {
        return Err(Error::NonFinite("proposal log-likelihood is NaN".into()));
    }
    let log_ratio = filter_log_ratio(
        exact_proposal.log_likelihood,
        state.log_likelihood,
        surrogate_proposal.log_likelihood,
        surrogate_current.log_likelihood,
    );
    let accepted = metropolis_accept(log_ratio, stage_two_rng)?;
    if accepted {
        state.tallies.accepted += 1;
        state.zeta = proposal;
        state.log_likelihood = exact_proposal.log_likelihood;
        state.qoi = exact_proposal.qoi;
        state.surrogate = Some(surrogate_proposal);
    }
    Ok(StepFlags {
        stage1_accepted: true,
        accepted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise(values: &[f64]) -> WhiteNoise {
        WhiteNoise {
            level_index: 0,
            coefficients: values.to_vec(),
        }
    }

    fn gaussian(center: f64) -> impl Fn(&WhiteNoise) -> Result<Evaluation> {
        move |z: &WhiteNoise| {
            let x = z.coefficients[0];
            Ok(Evaluation {
                log_likelihood: -0.5 * (x - center) * (x - center),
                qoi: x,
            })
        }
    }

    #[test]
    fn pcn_limits() {
        let c = noise(&[1.0, -2.0]);
        let f = noise(&[0.5, 0.25]);
        assert_eq!(pcn_propose(&c, &f, 1.0).unwrap(), f);
        let tiny = pcn_propose(&c, &f, 1e-9).unwrap();
        for (a, b) in tiny.coefficients.iter().zip(&c.coefficients) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(pcn_propose(&c, &f, 0.0).is_err());
        assert!(pcn_propose(&c, &f, 1.5).is_err());
        let other = WhiteNoise {
            level_index: 1,
            coefficients: vec![0.0, 0.0],
        };
        assert!(pcn_propose(&c, &other, 0.5).is_err());
    }

    #[test]
    fn acceptance_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(accept_probability(0.0), 1.0);
        for _ in 0..100 {
            assert!(metropolis_accept(0.0, &mut rng).unwrap());
            assert!(!metropolis_accept(f64::NEG_INFINITY, &mut rng).unwrap());
        }
        assert!(metropolis_accept(f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn constant_bias_cancels_in_filter_ratio() {
        let base = filter_log_ratio(-1.0, -3.0, -2.0, -2.5);
        for c in [-7.0, 0.0, 3.5, 120.0] {
            let shifted = filter_log_ratio(-1.0, -3.0, -2.0 + c, -2.5 + c);
            assert!((shifted - base).abs() < 1e-12);
        }
        assert_eq!(filter_log_ratio(-1.0, -3.0, -1.0, -3.0), 0.0);
        assert_eq!(mlda_log_ratio(-2.0, -2.0, -5.0, -5.0), 0.0);
    }

    #[test]
    fn mh_step_updates_cache_and_tallies() {
        let eval = gaussian(0.0);
        let start = noise(&[3.0]);
        let mut state = LevelState::new(start.clone(), eval(&start).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // moving toward the mode always accepts
        assert!(mh_step(&mut state, noise(&[1.0]), &eval, &mut rng).unwrap());
        assert_eq!(state.qoi, 1.0);
        assert_eq!(state.log_likelihood, -0.5);
        let infeasible = |_: &WhiteNoise| {
            Ok(Evaluation {
                log_likelihood: f64::NEG_INFINITY,
                qoi: 0.0,
            })
        };
        assert!(!mh_step(&mut state, noise(&[0.0]), &infeasible, &mut rng).unwrap());
        assert_eq!(state.tallies.steps, 2);
        assert_eq!(state.tallies.accepted, 1);
        let broken = |_: &WhiteNoise| {
            Ok(Evaluation {
                log_likelihood: f64::NAN,
                qoi: 0.0,
            })
        };
        assert!(mh_step(&mut state, noise(&[0.0]), &broken, &mut rng).is_err());
    }

    #[test]
    fn filtered_step_only_evaluates_exact_after_stage_one() {
        let exact = gaussian(0.0);
        let surrogate = gaussian(0.3);
        let start = noise(&[0.0]);
        let mut state = LevelState::new(start.clone(), exact(&start).unwrap())
            .unwrap()
            .with_surrogate(surrogate(&start).unwrap())
            .unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(2);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let mut prop_rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let x = state.zeta.coefficients[0] + prop_rng.random_range(-1.0..1.0);
            filtered_mh_step(&mut state, noise(&[x]), &surrogate, &exact, &mut r1, &mut r2).unwrap();
            assert_eq!(state.surrogate.unwrap(), surrogate(&state.zeta).unwrap());
            assert_eq!(state.log_likelihood, exact(&state.zeta).unwrap().log_likelihood);
        }
        let t = state.tallies;
        assert_eq!(t.exact_evaluations, t.stage1_accepted);
        assert_eq!(t.surrogate_evaluations, 500);
        assert!(t.accepted <= t.stage1_accepted && t.stage1_accepted <= t.steps);
    }
}
