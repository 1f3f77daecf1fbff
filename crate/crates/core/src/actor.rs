//! Deterministic chunked policy: an MLP from the state to `h * A` outputs,
//! squashed with `tanh` into the per-dimension action bounds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critic::CriticNetwork;
use crate::data::ChunkBatch;
use crate::env::{rollout, ChunkPolicy, Env, ExecMode, ResetMode, Rollout};
use crate::error::{Error, Result};
use crate::nn::{Bound, Gradients, Graph, Mlp, NodeId, ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub h: usize,
    pub hidden: Vec<usize>,
    pub action_bounds: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActorNetwork {
    cfg: ActorConfig,
    trunk: Mlp,
    scale: Vec<f64>,
    shift: Vec<f64>,
    pub params: ParamSet,
}

impl ActorNetwork {
    pub fn new<R: Rng + ?Sized>(cfg: ActorConfig, rng: &mut R) -> Result<Self> {
        if cfg.h == 0 || cfg.state_dim == 0 || cfg.action_dim == 0 {
            return Err(Error::InvalidConfig("actor dimensions must be >= 1".into()));
        }
        if cfg.action_bounds.len() != cfg.action_dim || cfg.action_bounds.iter().any(|(lo, hi)| lo >= hi) {
            return Err(Error::InvalidConfig("actor needs one non-empty bound per action dim".into()));
        }
        let mut params = ParamSet::new();
        let mut sizes = vec![cfg.state_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(cfg.h * cfg.action_dim);
        let trunk = Mlp::init(&mut params, "actor.trunk", &sizes, rng);
        let per_step_scale: Vec<f64> = cfg.action_bounds.iter().map(|(lo, hi)| 0.5 * (hi - lo)).collect();
        let per_step_shift: Vec<f64> = cfg.action_bounds.iter().map(|(lo, hi)| 0.5 * (hi + lo)).collect();
        Ok(Self {
            scale: per_step_scale.repeat(cfg.h),
            shift: per_step_shift.repeat(cfg.h),
            cfg,
            trunk,
            params,
        })
    }

    /// Rebuilds the network around existing parameters (checkpoint load).
    pub fn with_params(cfg: ActorConfig, params: ParamSet) -> Result<Self> {
        let mut net = Self::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        net.params.ensure_congruent(&params)?;
        net.params = params;
        Ok(net)
    }

    pub fn config(&self) -> &ActorConfig {
        &self.cfg
    }

    pub fn h(&self) -> usize {
        self.cfg.h
    }

    pub fn action_dim(&self) -> usize {
        self.cfg.action_dim
    }

    /// `states [B x S] -> [B x (h*A)]`, bounded.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, states: NodeId) -> Result<NodeId> {
        let cols = g.value(states).cols();
        if cols != self.cfg.state_dim {
            return Err(Error::shape(
                "actor.input",
                format!("expected state dim {}, got {cols}", self.cfg.state_dim),
            ));
        }
        let z = self.trunk.forward(g, p, states)?;
        let t = g.tanh(z);
        Ok(g.affine_cols(t, &self.scale, &self.shift))
    }

    /// Batched inference, `[B x S] -> [(B*h) x A]`.
    pub fn act_batch(&self, states: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let s = g.input(states.clone());
        let out = self.forward_graph(&mut g, &p, s)?;
        let b = states.rows();
        Ok(g.value(out).clone().reshaped(b * self.cfg.h, self.cfg.action_dim))
    }
}

/// The chunk `a_t .. a_{t+h-1}` for one state.
pub fn actor_forward(actor: &ActorNetwork, state: &[f64]) -> Result<Vec<Vec<f64>>> {
    let out = actor.act_batch(&Tensor::row(state))?;
    Ok((0..out.rows()).map(|r| out.row_slice(r).to_vec()).collect())
}

impl ChunkPolicy for ActorNetwork {
    fn act_chunk(&self, state: &[f64]) -> Vec<Vec<f64>> {
        actor_forward(self, state).expect("state dimension matches the actor")
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Gradients,
}

/// Masked chunk regression: squared action error summed over action dims,
/// averaged over valid (unpadded) steps only.
pub fn bc_loss(batch: &ChunkBatch, actor: &ActorNetwork) -> Result<LossOutput> {
    let h = actor.h();
    let a_dim = actor.action_dim();
    if batch.h != h || batch.action_dim() != a_dim {
        return Err(Error::shape(
            "bc_loss",
            format!("batch chunks are {}x{}, actor emits {h}x{a_dim}", batch.h, batch.action_dim()),
        ));
    }
    let b = batch.size();
    let mut mask = Tensor::zeros(b * h, a_dim);
    let mut n_valid = 0usize;
    for (s, &vl) in batch.valid_len.iter().enumerate() {
        for i in 0..vl.min(h) {
            n_valid += 1;
            for d in 0..a_dim {
                mask.set(s * h + i, d, 1.0);
            }
        }
    }
    if n_valid == 0 {
        return Err(Error::InvalidArgument("batch has no valid steps".into()));
    }

    let mut g = Graph::new();
    let p = g.bind(&actor.params, true);
    let states = g.input(batch.states.clone());
    let pred = actor.forward_graph(&mut g, &p, states)?;
    let pred = g.reshape(pred, b * h, a_dim);
    let target = g.input(batch.actions.clone());
    let diff = g.sub(pred, target);
    let diff = g.mul_const(diff, mask);
    let sq = g.square(diff);
    let total = g.sum(sq);
    let loss = g.scale(total, 1.0 / n_valid as f64);
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("bc loss over {b} chunks")));
    }
    g.backward(loss)?;
    Ok(LossOutput {
        loss: value,
        grads: g.gradients(&p, &actor.params)?,
    })
}

/// `-(1/h) * mean_b sum_i Q(s_t, a_hat_{t:t+i})` with `a_hat = actor(s_t)`.
/// The critic is bound frozen; gradients are returned for the actor only.
pub fn actor_rl_loss(batch: &ChunkBatch, actor: &ActorNetwork, critic: &CriticNetwork) -> Result<LossOutput> {
    let b = batch.size();
    let mut g = Graph::new();
    let pa = g.bind(&actor.params, true);
    let pc = g.bind(&critic.params, false);
    let states = g.input(batch.states.clone());
    let chunk = actor.forward_graph(&mut g, &pa, states)?;
    let chunk = g.reshape(chunk, b * actor.h(), actor.action_dim());
    let q = critic.forward_graph(&mut g, &pc, states, chunk)?;
    let mean_q = g.mean(q);
    let loss = g.scale(mean_q, -1.0);
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("actor loss over {b} chunks")));
    }
    g.backward(loss)?;
    Ok(LossOutput {
        loss: value,
        grads: g.gradients(&pa, &actor.params)?,
    })
}

/// Deploys the actor for one seeded episode.
pub fn act(actor: &ActorNetwork, env: &mut Env, seed: u64, mode: ResetMode, exec: ExecMode) -> Result<Rollout> {
    rollout(actor, env, seed, mode, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_chunks, Episode, InitMode, Step};

    fn cfg(h: usize) -> ActorConfig {
        ActorConfig {
            state_dim: 3,
            action_dim: 2,
            h,
            hidden: vec![8, 8],
            action_bounds: vec![(-1.0, 1.0), (0.0, 4.0)],
        }
    }

    #[test]
    fn zero_weights_give_midpoint_chunk() {
        let mut actor = ActorNetwork::new(cfg(3), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for slot in 0..actor.params.len() {
            actor.params.tensor_mut(slot).data_mut().fill(0.0);
        }
        let chunk = actor_forward(&actor, &[0.3, -2.0, 5.0]).unwrap();
        assert_eq!(chunk, vec![vec![0.0, 2.0]; 3]);
    }

    #[test]
    fn outputs_respect_bounds() {
        let actor = ActorNetwork::new(cfg(4), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let states: Vec<Vec<f64>> = (0..10_000)
            .map(|_| (0..3).map(|_| rng.random_range(-50.0..50.0)).collect())
            .collect();
        let out = actor.act_batch(&Tensor::from_rows(&states)).unwrap();
        for r in 0..out.rows() {
            let a = out.row_slice(r);
            assert!((-1.0..=1.0).contains(&a[0]));
            assert!((0.0..=4.0).contains(&a[1]));
        }
    }

    #[test]
    fn wrong_state_dim_is_shape_error() {
        let actor = ActorNetwork::new(cfg(2), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(actor_forward(&actor, &[1.0]), Err(Error::Shape { .. })));
    }

    fn one_step_episode(action: f64) -> Episode {
        Episode {
            env_id: "toy".into(),
            init_mode: InitMode::Fixed,
            steps: vec![Step {
                state: vec![0.5],
                action: vec![action],
                reward: 1.0,
                done: true,
            }],
            success: true,
        }
    }

    fn zero_actor(h: usize) -> ActorNetwork {
        let mut a = ActorNetwork::new(
            ActorConfig {
                state_dim: 1,
                action_dim: 1,
                h,
                hidden: vec![4],
                action_bounds: vec![(-1.0, 1.0)],
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        for slot in 0..a.params.len() {
            a.params.tensor_mut(slot).data_mut().fill(0.0);
        }
        a
    }

    #[test]
    fn bc_loss_arithmetic() {
        let chunks = make_chunks(&one_step_episode(1.0), 1, 0.9).unwrap();
        let batch = ChunkBatch::from_chunks(&[&chunks[0]]).unwrap();
        let out = bc_loss(&batch, &zero_actor(1)).unwrap();
        assert_eq!(out.loss, 1.0);

        let chunks = make_chunks(&one_step_episode(0.0), 1, 0.9).unwrap();
        let batch = ChunkBatch::from_chunks(&[&chunks[0]]).unwrap();
        assert_eq!(bc_loss(&batch, &zero_actor(1)).unwrap().loss, 0.0);
    }

    #[test]
    fn bc_loss_counts_only_valid_steps() {
        // two-step episode, h = 4: the chunk at t = 0 has valid_len 2
        let ep = Episode {
            env_id: "toy".into(),
            init_mode: InitMode::Fixed,
            steps: vec![
                Step { state: vec![0.0], action: vec![0.5], reward: 0.0, done: false },
                Step { state: vec![0.1], action: vec![-0.5], reward: 1.0, done: true },
            ],
            success: true,
        };
        let chunks = make_chunks(&ep, 4, 0.9).unwrap();
        assert_eq!(chunks[0].valid_len, 2);
        let batch = ChunkBatch::from_chunks(&[&chunks[0]]).unwrap();
        let out = bc_loss(&batch, &zero_actor(4)).unwrap();
        // masked oracle: (0.25 + 0.25) / 2 valid steps
        assert!((out.loss - 0.25).abs() < 1e-15);
    }

    #[test]
    fn bc_fixed_point_on_repeated_chunk() {
        let ep = Episode {
            env_id: "toy".into(),
            init_mode: InitMode::Fixed,
            steps: vec![
                Step { state: vec![0.2], action: vec![0.3], reward: 0.0, done: false },
                Step { state: vec![0.4], action: vec![-0.6], reward: 0.0, done: false },
                Step { state: vec![0.6], action: vec![0.1], reward: 1.0, done: true },
            ],
            success: true,
        };
        let chunks = make_chunks(&ep, 3, 0.9).unwrap();
        let batch = ChunkBatch::from_chunks(&[&chunks[0]]).unwrap();
        let mut actor = ActorNetwork::new(
            ActorConfig {
                state_dim: 1,
                action_dim: 1,
                h: 3,
                hidden: vec![16],
                action_bounds: vec![(-1.0, 1.0)],
            },
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        let mut opt = crate::nn::Adam::new(&actor.params);
        let mut loss = f64::INFINITY;
        for _ in 0..5000 {
            let out = bc_loss(&batch, &actor).unwrap();
            loss = out.loss;
            if loss < 1e-7 {
                break;
            }
            opt.step(&mut actor.params, &out.grads, 1e-2).unwrap();
        }
        assert!(loss < 1e-6, "loss {loss}");
        let chunk = actor_forward(&actor, &[0.2]).unwrap();
        for (a, target) in chunk.iter().zip([0.3, -0.6, 0.1]) {
            assert!((a[0] - target).abs() < 1e-3);
        }
    }

    #[test]
    fn empty_valid_mask_rejected() {
        let chunks = make_chunks(&one_step_episode(1.0), 1, 0.9).unwrap();
        let mut batch = ChunkBatch::from_chunks(&[&chunks[0]]).unwrap();
        batch.valid_len = vec![0];
        assert!(bc_loss(&batch, &zero_actor(1)).is_err());
    }
}
