//! Episodes, chunk windows, Monte-Carlo return annotation and seeded batch
//! sampling.

mod io;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub use io::{load_dataset, parse_dataset, render_dataset, save_dataset, DATASET_FORMAT_VERSION};

/// How the goal/object parameters of an episode were initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Random,
    Fixed,
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitMode::Random => "random",
            InitMode::Fixed => "fixed",
        })
    }
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(InitMode::Random),
            "fixed" => Ok(InitMode::Fixed),
            other => Err(Error::InvalidArgument(format!("unknown init mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub env_id: String,
    pub init_mode: InitMode,
    pub steps: Vec<Step>,
    pub success: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// A training window starting at step `t` of an episode.
///
/// Positions at or past `valid_len` are padding: zero actions, zero rewards,
/// saturated `done_mask`, and states repeating the final recorded state.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkSample {
    /// `s_t ..= s_{t+h}`.
    pub states: Vec<Vec<f64>>,
    /// `a_t .. a_{t+h-1}`.
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    /// `done_mask[i]` is true iff the episode terminated at or before `t+i`.
    pub done_mask: Vec<bool>,
    /// Discounted return-to-go from `s_t`.
    pub mc_return: f64,
    pub valid_len: usize,
}

impl ChunkSample {
    pub fn h(&self) -> usize {
        self.actions.len()
    }

    pub fn has_reward(&self) -> bool {
        self.rewards.iter().any(|&r| r != 0.0)
    }
}

/// `out[t] = r[t] + gamma * out[t+1]`, `out[T-1] = r[T-1]`.
pub fn mc_return_to_go(episode: &Episode, gamma: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1]")));
    }
    let mut out = vec![0.0; episode.len()];
    let mut acc = 0.0;
    for (t, step) in episode.steps.iter().enumerate().rev() {
        acc = step.reward + gamma * acc;
        out[t] = acc;
    }
    Ok(out)
}

/// One window per step of `episode`, padded past the terminal step.
pub fn make_chunks(episode: &Episode, h: usize, gamma: f64) -> Result<Vec<ChunkSample>> {
    if episode.is_empty() {
        return Err(Error::DataFormat("cannot chunk an empty episode".into()));
    }
    if h == 0 {
        return Err(Error::InvalidArgument("chunk length h must be >= 1".into()));
    }
    let returns = mc_return_to_go(episode, gamma)?;
    let len = episode.len();
    let last_state = &episode.steps[len - 1].state;
    let action_dim = episode.steps[0].action.len();

    let chunks = (0..len)
        .map(|t| {
            let states = (0..=h)
                .map(|k| episode.steps.get(t + k).map_or(last_state, |s| &s.state).clone())
                .collect();
            let mut actions = Vec::with_capacity(h);
            let mut rewards = Vec::with_capacity(h);
            let mut done_mask = Vec::with_capacity(h);
            for i in 0..h {
                match episode.steps.get(t + i) {
                    Some(step) => {
                        actions.push(step.action.clone());
                        rewards.push(step.reward);
                    }
                    None => {
                        actions.push(vec![0.0; action_dim]);
                        rewards.push(0.0);
                    }
                }
                done_mask.push(t + i >= len - 1);
            }
            ChunkSample {
                states,
                actions,
                rewards,
                done_mask,
                mc_return: returns[t],
                valid_len: h.min(len - t),
            }
        })
        .collect();
    Ok(chunks)
}

/// Collection-time annotations carried in the dataset header.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub upsample_k: usize,
    pub expert_success_rate: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub env_id: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub h: usize,
    pub gamma: f64,
    pub meta: DatasetMeta,
    episodes: Vec<Episode>,
    chunks: Vec<ChunkSample>,
}

impl OfflineDataset {
    pub fn new(
        env_id: impl Into<String>,
        state_dim: usize,
        action_dim: usize,
        h: usize,
        gamma: f64,
        episodes: Vec<Episode>,
        meta: DatasetMeta,
    ) -> Result<Self> {
        for (e, ep) in episodes.iter().enumerate() {
            validate_episode(ep, state_dim, action_dim, e + 1)?;
        }
        let mut chunks = Vec::new();
        for ep in &episodes {
            chunks.extend(make_chunks(ep, h, gamma)?);
        }
        Ok(Self {
            env_id: env_id.into(),
            state_dim,
            action_dim,
            h,
            gamma,
            meta,
            episodes,
            chunks,
        })
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn chunks(&self) -> &[ChunkSample] {
        &self.chunks
    }

    /// Same episodes re-chunked with a different window length.
    pub fn with_h(&self, h: usize) -> Result<Self> {
        Self::new(
            self.env_id.clone(),
            self.state_dim,
            self.action_dim,
            h,
            self.gamma,
            self.episodes.clone(),
            self.meta.clone(),
        )
    }

    /// Rebuilds every chunk from the episodes and compares exactly.
    pub fn verify_chunks(&self) -> bool {
        let mut rebuilt = Vec::with_capacity(self.chunks.len());
        for ep in &self.episodes {
            match make_chunks(ep, self.h, self.gamma) {
                Ok(c) => rebuilt.extend(c),
                Err(_) => return false,
            }
        }
        rebuilt == self.chunks
    }

    pub fn success_fraction(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().filter(|e| e.success).count() as f64 / self.episodes.len() as f64
    }
}

/// `record` is the 1-based record index of the episode in the dataset file.
pub(crate) fn validate_episode(ep: &Episode, s_dim: usize, a_dim: usize, record: usize) -> Result<()> {
    if ep.steps.is_empty() {
        return Err(Error::CorruptRecord {
            record,
            reason: "episode has no steps".into(),
        });
    }
    let last = ep.steps.len() - 1;
    for (t, step) in ep.steps.iter().enumerate() {
        if step.state.len() != s_dim {
            return Err(Error::DimensionMismatch {
                record,
                field: "state",
                expected: s_dim,
                found: step.state.len(),
            });
        }
        if step.action.len() != a_dim {
            return Err(Error::DimensionMismatch {
                record,
                field: "action",
                expected: a_dim,
                found: step.action.len(),
            });
        }
        if step.done && t != last {
            return Err(Error::CorruptRecord {
                record,
                reason: format!("done flag set on non-final step {t}"),
            });
        }
        let finite = step.reward.is_finite()
            && step.state.iter().all(|v| v.is_finite())
            && step.action.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::CorruptRecord {
                record,
                reason: format!("non-finite value at step {t}"),
            });
        }
    }
    Ok(())
}

/// A sampled batch packed into matrices for the networks.
///
/// Row layout: `actions` and `next_states` hold `h` consecutive rows per
/// sample, so row `b * h + (i - 1)` of `next_states` is `s_{t+i}` of sample
/// `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkBatch {
    pub h: usize,
    /// `B x S`, the window start states `s_t`.
    pub states: Tensor,
    /// `(B*h) x A`.
    pub actions: Tensor,
    /// `(B*h) x S`, `s_{t+1} ..= s_{t+h}`.
    pub next_states: Tensor,
    /// `B x h`.
    pub rewards: Tensor,
    /// `B*h`, row-major like `rewards`.
    pub done_mask: Vec<bool>,
    pub mc_return: Vec<f64>,
    pub valid_len: Vec<usize>,
}

impl ChunkBatch {
    pub fn from_chunks(chunks: &[&ChunkSample]) -> Result<Self> {
        let first = chunks
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let h = first.h();
        let s_dim = first.states[0].len();
        let a_dim = first.actions[0].len();
        let b = chunks.len();
        let mut states = Vec::with_capacity(b * s_dim);
        let mut actions = Vec::with_capacity(b * h * a_dim);
        let mut next_states = Vec::with_capacity(b * h * s_dim);
        let mut rewards = Vec::with_capacity(b * h);
        let mut done_mask = Vec::with_capacity(b * h);
        for c in chunks {
            if c.h() != h || c.states.len() != h + 1 {
                return Err(Error::DataFormat("chunks of mixed length in one batch".into()));
            }
            states.extend_from_slice(&c.states[0]);
            for i in 0..h {
                actions.extend_from_slice(&c.actions[i]);
                next_states.extend_from_slice(&c.states[i + 1]);
            }
            rewards.extend_from_slice(&c.rewards);
            done_mask.extend_from_slice(&c.done_mask);
        }
        if states.len() != b * s_dim || actions.len() != b * h * a_dim || next_states.len() != b * h * s_dim {
            return Err(Error::DataFormat("chunks of mixed dimension in one batch".into()));
        }
        Ok(Self {
            h,
            states: Tensor::from_vec(b, s_dim, states),
            actions: Tensor::from_vec(b * h, a_dim, actions),
            next_states: Tensor::from_vec(b * h, s_dim, next_states),
            rewards: Tensor::from_vec(b, h, rewards),
            done_mask,
            mc_return: chunks.iter().map(|c| c.mc_return).collect(),
            valid_len: chunks.iter().map(|c| c.valid_len).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.states.rows()
    }

    pub fn state_dim(&self) -> usize {
        self.states.cols()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.cols()
    }
}

/// Uniform-with-replacement chunk indices.
pub fn sample_indices<R: Rng + ?Sized>(n_chunks: usize, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    if n_chunks == 0 {
        return Err(Error::InvalidArgument("dataset has no chunks".into()));
    }
    Ok((0..batch_size).map(|_| rng.random_range(0..n_chunks)).collect())
}

pub fn sample_batch<'a, R: Rng + ?Sized>(
    dataset: &'a OfflineDataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<&'a ChunkSample>> {
    let idx = sample_indices(dataset.chunks.len(), batch_size, rng)?;
    Ok(idx.into_iter().map(|i| &dataset.chunks[i]).collect())
}
