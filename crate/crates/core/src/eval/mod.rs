//! Success rate / cycle time evaluation and the experiment drivers built on it.

mod experiments;
mod report;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{make_env, rollout, ChunkPolicy, ExecMode, ResetMode};
use crate::error::{Error, Result};

pub use experiments::{
    diversity_experiment, diversity_row, render_diversity_table, value_propagation_probe, DiversityConfig, DiversityRow,
    DiversityTable, ProbeConfig, ProbeCurve, ProbeResult,
};
pub use report::{compare_report, ReportFiles, RunSummary};

/// Salts separating the seed families of checkpoint selection and final
/// testing, so a selected checkpoint is never scored on the trials that
/// selected it.
pub const VALIDATION_SALT: u64 = 0x5e1e_c7ed_0000_0001;
pub const TEST_SALT: u64 = 0x7e57_0000_0000_0002;

pub const DEFAULT_TRIALS: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub env_id: String,
    pub mode: ResetMode,
    pub n_trials: usize,
    pub successes: usize,
    /// `successes / n_trials`, one division.
    pub sr: f64,
    /// Mean steps over successful trials; absent when none succeeded.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ct: Option<f64>,
    pub seed: u64,
    pub trials: Vec<TrialRecord>,
}

/// Runs `n_trials` seeded episodes. Trial seeds are drawn from a generator
/// seeded with `seed`.
pub fn evaluate(
    policy: &dyn ChunkPolicy,
    env_id: &str,
    n_trials: usize,
    mode: ResetMode,
    seed: u64,
    exec: ExecMode,
) -> Result<EvalReport> {
    if n_trials == 0 {
        return Err(Error::InvalidArgument("n_trials must be >= 1".into()));
    }
    let mut env = make_env(env_id)?;
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let s: u64 = seeds.random();
        let r = rollout(policy, &mut env, s, mode, exec)?;
        trials.push(TrialRecord {
            seed: s,
            success: r.success,
            steps: r.steps,
            queries: r.queries,
        });
    }
    let successes = trials.iter().filter(|t| t.success).count();
    let ct = (successes > 0).then(|| {
        trials.iter().filter(|t| t.success).map(|t| t.steps).sum::<usize>() as f64 / successes as f64
    });
    Ok(EvalReport {
        env_id: env_id.to_string(),
        mode,
        n_trials,
        successes,
        sr: successes as f64 / n_trials as f64,
        ct,
        seed,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ExpertPolicy, UniformRandomPolicy, CHAIN_SPARSE, POINT_REACH_2D};

    #[test]
    fn expert_scores_high_on_point_reach() {
        let env = make_env(POINT_REACH_2D).unwrap();
        let r = evaluate(&ExpertPolicy(&env), POINT_REACH_2D, 40, ResetMode::IndRandom, 1, ExecMode::OpenLoopChunk)
            .unwrap();
        assert!(r.sr >= 0.95);
        assert!(r.ct.is_some());
        assert_eq!(r.successes as f64 / 40.0, r.sr);
    }

    #[test]
    fn random_policy_rarely_finishes_chain() {
        let spec = make_env(CHAIN_SPARSE).unwrap().spec().clone();
        let policy = UniformRandomPolicy::new(spec.action_bounds, 1, 3);
        let r = evaluate(&policy, CHAIN_SPARSE, 40, ResetMode::IndFixed, 3, ExecMode::OpenLoopChunk).unwrap();
        assert!(r.sr <= 0.1, "sr {}", r.sr);
    }

    #[test]
    fn all_failures_have_no_ct() {
        struct Idle;
        impl ChunkPolicy for Idle {
            fn act_chunk(&self, _: &[f64]) -> Vec<Vec<f64>> {
                vec![vec![0.0, 0.0]]
            }
        }
        let r = evaluate(&Idle, POINT_REACH_2D, 5, ResetMode::IndRandom, 0, ExecMode::OpenLoopChunk).unwrap();
        assert_eq!(r.sr, 0.0);
        assert_eq!(r.ct, None);
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("\"ct\""));
    }

    #[test]
    fn zero_trials_rejected() {
        let env = make_env(POINT_REACH_2D).unwrap();
        assert!(evaluate(&ExpertPolicy(&env), POINT_REACH_2D, 0, ResetMode::IndRandom, 0, ExecMode::OpenLoopChunk).is_err());
    }

    #[test]
    fn evaluation_is_reproducible() {
        let spec = make_env(POINT_REACH_2D).unwrap().spec().clone();
        let a = evaluate(
            &UniformRandomPolicy::new(spec.action_bounds.clone(), 4, 1),
            POINT_REACH_2D,
            6,
            ResetMode::Ood,
            11,
            ExecMode::OpenLoopChunk,
        )
        .unwrap();
        let b = evaluate(
            &UniformRandomPolicy::new(spec.action_bounds, 4, 1),
            POINT_REACH_2D,
            6,
            ResetMode::Ood,
            11,
            ExecMode::OpenLoopChunk,
        )
        .unwrap();
        assert_eq!(a, b);
    }
}
