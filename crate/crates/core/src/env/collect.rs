use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{make_env, Env, ResetMode};
use crate::data::{DatasetMeta, Episode, InitMode, OfflineDataset, Step};
use crate::error::{Error, Result};

/// Anything that maps a state to a chunk of one or more actions.
pub trait ChunkPolicy {
    fn act_chunk(&self, state: &[f64]) -> Vec<Vec<f64>>;
}

/// How a chunk is executed between policy queries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    /// Run every action of the chunk before re-querying.
    #[default]
    OpenLoopChunk,
    /// Run only the first action, then re-query.
    RecedingOne,
}

impl fmt::Display for ExecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecMode::OpenLoopChunk => "open_loop_chunk",
            ExecMode::RecedingOne => "receding_one",
        })
    }
}

impl FromStr for ExecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open_loop_chunk" => Ok(ExecMode::OpenLoopChunk),
            "receding_one" => Ok(ExecMode::RecedingOne),
            other => Err(Error::InvalidArgument(format!("unknown exec mode '{other}'"))),
        }
    }
}

/// The scripted expert of an env, as a one-action chunk policy.
pub struct ExpertPolicy<'a>(pub &'a Env);

impl ChunkPolicy for ExpertPolicy<'_> {
    fn act_chunk(&self, state: &[f64]) -> Vec<Vec<f64>> {
        vec![self.0.scripted_expert(state)]
    }
}

/// Uniform actions over the bounds box.
pub struct UniformRandomPolicy {
    bounds: Vec<(f64, f64)>,
    chunk_len: usize,
    rng: RefCell<ChaCha8Rng>,
}

impl UniformRandomPolicy {
    pub fn new(bounds: Vec<(f64, f64)>, chunk_len: usize, seed: u64) -> Self {
        Self {
            bounds,
            chunk_len,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

impl ChunkPolicy for UniformRandomPolicy {
    fn act_chunk(&self, _state: &[f64]) -> Vec<Vec<f64>> {
        let mut rng = self.rng.borrow_mut();
        (0..self.chunk_len)
            .map(|_| {
                self.bounds
                    .iter()
                    .map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub episode: Episode,
    pub success: bool,
    /// Environment steps taken.
    pub steps: usize,
    /// Number of policy queries.
    pub queries: usize,
}

/// Runs one episode from a seeded reset.
pub fn rollout(
    policy: &dyn ChunkPolicy,
    env: &mut Env,
    seed: u64,
    mode: ResetMode,
    exec: ExecMode,
) -> Result<Rollout> {
    let mut state = env.reset(seed, mode)?;
    let mut steps = Vec::new();
    let mut queries = 0;
    let success;
    'episode: loop {
        let chunk = policy.act_chunk(&state);
        queries += 1;
        if chunk.is_empty() {
            return Err(Error::InvalidArgument("policy returned an empty chunk".into()));
        }
        let n = match exec {
            ExecMode::OpenLoopChunk => chunk.len(),
            ExecMode::RecedingOne => 1,
        };
        for action in &chunk[..n] {
            let (action, _) = env.spec().clamp_action(action);
            let res = env.step(&action);
            steps.push(Step {
                state: std::mem::replace(&mut state, res.next_state),
                action,
                reward: res.reward,
                done: res.done,
            });
            if res.done {
                success = res.success;
                break 'episode;
            }
        }
    }
    let n_steps = steps.len();
    Ok(Rollout {
        episode: Episode {
            env_id: env.env_id().to_string(),
            init_mode: if mode == ResetMode::IndFixed {
                InitMode::Fixed
            } else {
                InitMode::Random
            },
            steps,
            success,
        },
        success,
        steps: n_steps,
        queries,
    })
}

/// Appends `k` hold-still steps paying reward 1 after the success step of a
/// successful episode; the last appended step carries `done`.
pub(crate) fn upsample_rewards(episode: &mut Episode, final_state: Vec<f64>, k: usize) {
    if !episode.success || k == 0 {
        return;
    }
    let action_dim = episode.steps[0].action.len();
    if let Some(last) = episode.steps.last_mut() {
        last.done = false;
    }
    for i in 0..k {
        episode.steps.push(Step {
            state: final_state.clone(),
            action: vec![0.0; action_dim],
            reward: 1.0,
            done: i + 1 == k,
        });
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollectConfig {
    pub n_episodes: usize,
    pub init_mode: InitMode,
    pub upsample_k: usize,
    pub seed: u64,
    /// Chunk length the dataset is sliced with.
    pub h: usize,
    /// Discount for the Monte-Carlo return annotation.
    pub gamma: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            n_episodes: 30,
            init_mode: InitMode::Random,
            upsample_k: 5,
            seed: 0,
            h: 4,
            gamma: 0.99,
        }
    }
}

/// Records scripted-expert demonstrations, with reward upsampling on
/// successful episodes. Failed episodes are kept with `success = false`.
pub fn collect_demos(env_id: &str, cfg: &CollectConfig) -> Result<OfflineDataset> {
    if cfg.n_episodes == 0 {
        return Err(Error::InvalidArgument("n_episodes must be >= 1".into()));
    }
    let mut env = make_env(env_id)?;
    let mode = ResetMode::from_init_mode(cfg.init_mode);
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut episodes = Vec::with_capacity(cfg.n_episodes);
    for _ in 0..cfg.n_episodes {
        let ep_seed: u64 = seeds.random();
        let expert_env = env.clone();
        let r = rollout(&ExpertPolicy(&expert_env), &mut env, ep_seed, mode, ExecMode::OpenLoopChunk)?;
        let mut ep = r.episode;
        ep.init_mode = cfg.init_mode;
        upsample_rewards(&mut ep, env.state().to_vec(), cfg.upsample_k);
        episodes.push(ep);
    }
    let successes = episodes.iter().filter(|e| e.success).count();
    let rate = successes as f64 / episodes.len() as f64;
    let mut warnings = Vec::new();
    if rate < 0.5 {
        warnings.push(format!(
            "expert success rate {successes}/{} is below 50%",
            episodes.len()
        ));
    }
    let spec = env.spec();
    OfflineDataset::new(
        env_id,
        spec.state_dim,
        spec.action_dim,
        cfg.h,
        cfg.gamma,
        episodes,
        DatasetMeta {
            upsample_k: cfg.upsample_k,
            expert_success_rate: Some(rate),
            warnings,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{CHAIN_SPARSE, ENV_IDS, GRASP_LIFT_TOY, POINT_REACH_2D};

    fn cfg(n: usize, k: usize) -> CollectConfig {
        CollectConfig {
            n_episodes: n,
            upsample_k: k,
            seed: 5,
            ..CollectConfig::default()
        }
    }

    #[test]
    fn expert_competence_on_ind_random() {
        for id in ENV_IDS {
            let mut env = make_env(id).unwrap();
            let expert_env = env.clone();
            let mut wins = 0;
            for seed in 0..200 {
                let r = rollout(
                    &ExpertPolicy(&expert_env),
                    &mut env,
                    seed,
                    ResetMode::IndRandom,
                    ExecMode::OpenLoopChunk,
                )
                .unwrap();
                wins += r.success as usize;
                // max_steps >= 2x the expert's episode length
                if r.success {
                    assert!(2 * r.steps <= env.spec().max_steps, "{id}: {} steps", r.steps);
                }
            }
            assert!(wins >= 190, "{id}: expert won {wins}/200");
        }
    }

    #[test]
    fn no_upsampling_gives_single_reward() {
        let ds = collect_demos(POINT_REACH_2D, &cfg(5, 0)).unwrap();
        for ep in ds.episodes() {
            assert!(ep.success);
            assert_eq!(ep.total_reward(), 1.0);
            assert_eq!(ep.steps.last().unwrap().reward, 1.0);
            assert!(ep.steps.last().unwrap().done);
        }
    }

    #[test]
    fn upsampling_appends_reward_steps() {
        let plain = collect_demos(GRASP_LIFT_TOY, &cfg(4, 0)).unwrap();
        let up = collect_demos(GRASP_LIFT_TOY, &cfg(4, 5)).unwrap();
        for (a, b) in plain.episodes().iter().zip(up.episodes()) {
            assert_eq!(b.len(), a.len() + 5);
            assert_eq!(b.steps.iter().filter(|s| s.reward == 1.0).count(), 6);
            assert_eq!(&b.steps[..a.len() - 1], &a.steps[..a.len() - 1]);
            let tail = &b.steps[a.len()..];
            assert!(tail.iter().all(|s| s.action.iter().all(|&x| x == 0.0)));
            assert!(tail.windows(2).all(|w| w[0].state == w[1].state));
            assert_eq!(b.steps.iter().filter(|s| s.done).count(), 1);
        }
        // returns are annotated after upsampling
        let c0 = &up.chunks()[0];
        assert!(c0.mc_return > plain.chunks()[0].mc_return);
    }

    #[test]
    fn reward_sum_is_zero_or_one_plus_k() {
        for id in ENV_IDS {
            let ds = collect_demos(id, &cfg(6, 3)).unwrap();
            for ep in ds.episodes() {
                let total = ep.total_reward();
                assert!(total == 0.0 || total == 4.0, "{id}: {total}");
            }
        }
    }

    #[test]
    fn thirty_demo_budget() {
        let ds = collect_demos(POINT_REACH_2D, &cfg(30, 5)).unwrap();
        assert_eq!(ds.episodes().len(), 30);
        assert!(ds.meta.warnings.is_empty());
        assert_eq!(ds.meta.expert_success_rate, Some(1.0));
        assert!(ds.verify_chunks());
    }

    #[test]
    fn collection_is_deterministic() {
        let a = collect_demos(CHAIN_SPARSE, &cfg(3, 2)).unwrap();
        let b = collect_demos(CHAIN_SPARSE, &cfg(3, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn open_loop_queries_once_per_chunk() {
        let mut env = make_env(CHAIN_SPARSE).unwrap();
        // all-zero actions never reach the goal, so the episode times out
        struct Idle(usize);
        impl ChunkPolicy for Idle {
            fn act_chunk(&self, _: &[f64]) -> Vec<Vec<f64>> {
                vec![vec![0.0]; self.0]
            }
        }
        let max = env.spec().max_steps;
        let r = rollout(&Idle(4), &mut env, 0, ResetMode::IndFixed, ExecMode::OpenLoopChunk).unwrap();
        assert_eq!(r.steps, max);
        assert_eq!(r.queries, max.div_ceil(4));
        let r = rollout(&Idle(4), &mut env, 0, ResetMode::IndFixed, ExecMode::RecedingOne).unwrap();
        assert_eq!(r.queries, max);
    }
}
