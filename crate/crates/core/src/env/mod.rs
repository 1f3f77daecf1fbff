//! Deterministic sparse-reward toy environments.
//!
//! | env_id           | S | A | success predicate                                   |
//! |------------------|---|---|-----------------------------------------------------|
//! | `chain-sparse`   | 1 | 1 | a step taken while standing on the last of 20 cells |
//! | `point-reach-2d` | 4 | 2 | a step taken while `|pos - goal| < 0.05`            |
//! | `grasp-lift-toy` | 8 | 4 | object held and lifted above `z = 0.2` after a step |
//!
//! Every success transition pays reward 1 and ends the episode; all other
//! transitions pay 0. Reaching `max_steps` also ends the episode.

mod chain;
mod collect;
mod grasp_lift;
mod point_reach;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::InitMode;
use crate::error::{Error, Result};

pub use collect::{
    collect_demos, rollout, ChunkPolicy, CollectConfig, ExecMode, ExpertPolicy, Rollout, UniformRandomPolicy,
};

pub const CHAIN_SPARSE: &str = "chain-sparse";
pub const POINT_REACH_2D: &str = "point-reach-2d";
pub const GRASP_LIFT_TOY: &str = "grasp-lift-toy";
pub const ENV_IDS: [&str; 3] = [CHAIN_SPARSE, POINT_REACH_2D, GRASP_LIFT_TOY];

/// Reset distribution for goal/object parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResetMode {
    #[serde(rename = "IND_random")]
    IndRandom,
    #[serde(rename = "IND_fixed")]
    IndFixed,
    #[serde(rename = "OOD")]
    Ood,
}

impl ResetMode {
    pub fn from_init_mode(mode: InitMode) -> Self {
        match mode {
            InitMode::Random => ResetMode::IndRandom,
            InitMode::Fixed => ResetMode::IndFixed,
        }
    }

    pub fn is_ood(self) -> bool {
        self == ResetMode::Ood
    }
}

impl fmt::Display for ResetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResetMode::IndRandom => "IND_random",
            ResetMode::IndFixed => "IND_fixed",
            ResetMode::Ood => "OOD",
        })
    }
}

impl FromStr for ResetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "IND_random" | "ind_random" | "random" => Ok(ResetMode::IndRandom),
            "IND_fixed" | "ind_fixed" | "fixed" => Ok(ResetMode::IndFixed),
            "OOD" | "ood" => Ok(ResetMode::Ood),
            other => Err(Error::InvalidArgument(format!("unknown reset mode '{other}'"))),
        }
    }
}

/// Axis-aligned box in goal-parameter space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Region {
    pub fn new(lo: &[f64], hi: &[f64]) -> Self {
        assert_eq!(lo.len(), hi.len());
        Self {
            lo: lo.to_vec(),
            hi: hi.to_vec(),
        }
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.lo.len()
            && p.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&x, (&lo, &hi))| lo <= x && x <= hi)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&lo, &hi)| lo + (hi - lo) * rng.random::<f64>())
            .collect()
    }

    /// True when some axis separates the two boxes.
    pub fn is_disjoint(&self, other: &Region) -> bool {
        self.lo
            .iter()
            .zip(&self.hi)
            .zip(other.lo.iter().zip(&other.hi))
            .any(|((&alo, &ahi), (&blo, &bhi))| ahi < blo || bhi < alo)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub env_id: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_bounds: Vec<(f64, f64)>,
    pub max_steps: usize,
    pub ind_region: Option<Region>,
    pub ood_region: Option<Region>,
}

impl EnvSpec {
    pub fn clamp_action(&self, action: &[f64]) -> (Vec<f64>, bool) {
        let mut clamped = false;
        let out = action
            .iter()
            .zip(&self.action_bounds)
            .map(|(&a, &(lo, hi))| {
                let c = if a.is_nan() { 0.0 } else { a.clamp(lo, hi) };
                if c != a {
                    clamped = true;
                }
                c
            })
            .collect();
        (out, clamped)
    }

    pub fn action_scale(&self) -> Vec<f64> {
        self.action_bounds.iter().map(|(lo, hi)| 0.5 * (hi - lo)).collect()
    }

    pub fn action_shift(&self) -> Vec<f64> {
        self.action_bounds.iter().map(|(lo, hi)| 0.5 * (hi + lo)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    /// The submitted action was outside the bounds and got clamped.
    pub clamped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Chain,
    PointReach,
    GraspLift,
}

/// One environment instance: a spec, its dynamics, and the step counter of
/// the current episode.
#[derive(Clone, Debug)]
pub struct Env {
    kind: Kind,
    spec: EnvSpec,
    state: Vec<f64>,
    steps: usize,
}

pub fn env_spec(env_id: &str) -> Result<EnvSpec> {
    Ok(make_env(env_id)?.spec)
}

pub fn make_env(env_id: &str) -> Result<Env> {
    let (kind, spec) = match env_id {
        CHAIN_SPARSE => (Kind::Chain, chain::spec()),
        POINT_REACH_2D => (Kind::PointReach, point_reach::spec()),
        GRASP_LIFT_TOY => (Kind::GraspLift, grasp_lift::spec()),
        other => return Err(Error::UnknownEnv(other.to_string())),
    };
    let state = vec![0.0; spec.state_dim];
    Ok(Env {
        kind,
        spec,
        state,
        steps: 0,
    })
}

impl Env {
    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn env_id(&self) -> &str {
        &self.spec.env_id
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    /// Goal/object parameters are drawn from the mode's region; the agent's
    /// start pose is fixed. Same seed and mode give the same state.
    pub fn reset(&mut self, seed: u64, mode: ResetMode) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = match (mode, &self.spec.ind_region, &self.spec.ood_region) {
            (ResetMode::IndFixed, Some(ind), _) => Some(ind.center()),
            (ResetMode::IndRandom, Some(ind), _) => Some(ind.sample(&mut rng)),
            (ResetMode::Ood, _, Some(ood)) => Some(ood.sample(&mut rng)),
            (ResetMode::IndFixed | ResetMode::IndRandom, None, _) => None,
            (ResetMode::Ood, _, None) => {
                return Err(Error::UnsupportedInitMode {
                    env: self.spec.env_id.clone(),
                    mode: mode.to_string(),
                })
            }
        };
        self.state = match self.kind {
            Kind::Chain => chain::initial_state(),
            Kind::PointReach => point_reach::initial_state(&params.expect("goal region")),
            Kind::GraspLift => grasp_lift::initial_state(&params.expect("object region")),
        };
        self.steps = 0;
        Ok(self.state.clone())
    }

    pub fn step(&mut self, action: &[f64]) -> StepResult {
        let (action, clamped) = self.spec.clamp_action(action);
        let (next_state, success) = self.transition(&self.state, &action);
        self.steps += 1;
        self.state = next_state.clone();
        StepResult {
            next_state,
            reward: if success { 1.0 } else { 0.0 },
            done: success || self.steps >= self.spec.max_steps,
            success,
            clamped,
        }
    }

    /// Pure dynamics: `(state, in-bounds action) -> (next_state, success)`.
    pub fn transition(&self, state: &[f64], action: &[f64]) -> (Vec<f64>, bool) {
        match self.kind {
            Kind::Chain => chain::transition(state, action),
            Kind::PointReach => point_reach::transition(state, action),
            Kind::GraspLift => grasp_lift::transition(state, action),
        }
    }

    /// Deterministic near-optimal controller for the current task.
    pub fn scripted_expert(&self, state: &[f64]) -> Vec<f64> {
        match self.kind {
            Kind::Chain => chain::expert(state),
            Kind::PointReach => point_reach::expert(state),
            Kind::GraspLift => grasp_lift::expert(state),
        }
    }

    /// Goal/object parameters of a state (for region membership checks).
    pub fn goal_params(&self, state: &[f64]) -> Vec<f64> {
        match self.kind {
            Kind::Chain => Vec::new(),
            Kind::PointReach => state[2..4].to_vec(),
            Kind::GraspLift => state[4..6].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_rejects_unknown_env() {
        assert!(matches!(make_env("cartpole"), Err(Error::UnknownEnv(_))));
        for id in ENV_IDS {
            assert_eq!(make_env(id).unwrap().env_id(), id);
        }
    }

    #[test]
    fn ind_and_ood_regions_disjoint() {
        for id in [POINT_REACH_2D, GRASP_LIFT_TOY] {
            let spec = env_spec(id).unwrap();
            let (ind, ood) = (spec.ind_region.unwrap(), spec.ood_region.unwrap());
            assert!(ind.is_disjoint(&ood), "{id}");
        }
    }

    #[test]
    fn fixed_reset_uses_region_center() {
        let mut env = make_env(POINT_REACH_2D).unwrap();
        let center = env.spec().ind_region.clone().unwrap().center();
        for seed in [0, 1, 99] {
            let s = env.reset(seed, ResetMode::IndFixed).unwrap();
            assert_eq!(env.goal_params(&s), center);
        }
    }

    #[test]
    fn random_resets_differ_and_stay_in_region() {
        let mut env = make_env(POINT_REACH_2D).unwrap();
        let ind = env.spec().ind_region.clone().unwrap();
        let a = env.reset(1, ResetMode::IndRandom).unwrap();
        let b = env.reset(2, ResetMode::IndRandom).unwrap();
        assert_ne!(env.goal_params(&a), env.goal_params(&b));
        assert!(ind.contains(&env.goal_params(&a)));
        assert!(ind.contains(&env.goal_params(&b)));
        assert_eq!(env.reset(1, ResetMode::IndRandom).unwrap(), a);
    }

    #[test]
    fn ood_resets_never_land_in_ind() {
        for id in [POINT_REACH_2D, GRASP_LIFT_TOY] {
            let mut env = make_env(id).unwrap();
            let spec = env.spec().clone();
            for seed in 0..500 {
                let s = env.reset(seed, ResetMode::Ood).unwrap();
                let g = env.goal_params(&s);
                assert!(!spec.ind_region.as_ref().unwrap().contains(&g), "{id} seed {seed}");
                assert!(spec.ood_region.as_ref().unwrap().contains(&g));
            }
        }
    }

    #[test]
    fn chain_has_no_ood_mode() {
        let mut env = make_env(CHAIN_SPARSE).unwrap();
        assert!(matches!(
            env.reset(0, ResetMode::Ood),
            Err(Error::UnsupportedInitMode { .. })
        ));
    }

    #[test]
    fn out_of_bounds_action_is_clamped_and_flagged() {
        let mut env = make_env(POINT_REACH_2D).unwrap();
        env.reset(0, ResetMode::IndFixed).unwrap();
        let r = env.step(&[3.0, -0.5]);
        assert!(r.clamped);
        assert!((r.next_state[0] - 0.05).abs() < 1e-15);
        let r = env.step(&[0.0, 0.0]);
        assert!(!r.clamped);
    }

    #[test]
    fn max_steps_ends_episode_without_success() {
        let mut env = make_env(CHAIN_SPARSE).unwrap();
        env.reset(0, ResetMode::IndFixed).unwrap();
        let mut last = None;
        for _ in 0..env.spec().max_steps {
            last = Some(env.step(&[0.0]));
        }
        let last = last.unwrap();
        assert!(last.done && !last.success && last.reward == 0.0);
    }

    #[test]
    fn identical_actions_give_identical_trajectories() {
        for id in ENV_IDS {
            let mut a = make_env(id).unwrap();
            let mut b = make_env(id).unwrap();
            let mode = ResetMode::IndRandom;
            a.reset(7, mode).unwrap();
            b.reset(7, mode).unwrap();
            for k in 0..30 {
                let act: Vec<f64> = (0..a.spec().action_dim)
                    .map(|d| ((k * 7 + d * 3) as f64).sin())
                    .collect();
                let ra = a.step(&act);
                let rb = b.step(&act);
                assert_eq!(
                    ra.next_state.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    rb.next_state.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                );
                if ra.done {
                    break;
                }
            }
        }
    }
}
