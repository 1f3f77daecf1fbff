//! Chunked Q-function: one state token followed by `h` action tokens through
//! causally masked self-attention, with a shared scalar head on every action
//! token. Output `q[i-1]` values the action prefix `a_t ..= a_{t+i-1}`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::actor::ActorNetwork;
use crate::data::ChunkBatch;
use crate::error::{Error, Result};
use crate::nn::{AttentionBlock, Bound, Gradients, Graph, Linear, Mlp, NodeId, ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub h: usize,
    pub width: usize,
    pub blocks: usize,
    pub ff_width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticNetwork {
    cfg: CriticConfig,
    state_embed: Mlp,
    action_embed: Mlp,
    /// Slot of the `h x width` learned position offsets.
    positions: usize,
    blocks: Vec<AttentionBlock>,
    head: Linear,
    pub params: ParamSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticOutput {
    pub q: Vec<f64>,
}

impl CriticNetwork {
    pub fn new<R: Rng + ?Sized>(cfg: CriticConfig, rng: &mut R) -> Result<Self> {
        if cfg.h == 0 || cfg.state_dim == 0 || cfg.action_dim == 0 || cfg.width == 0 || cfg.ff_width == 0 {
            return Err(Error::InvalidConfig("critic dimensions must be >= 1".into()));
        }
        let w = cfg.width;
        let mut params = ParamSet::new();
        let state_embed = Mlp::init(&mut params, "critic.state", &[cfg.state_dim, w, w], rng);
        let action_embed = Mlp::init(&mut params, "critic.action", &[cfg.action_dim, w, w], rng);
        let positions = params.push(
            "critic.positions",
            crate::nn::params::init_uniform(rng, cfg.h, w, w),
        );
        let blocks = (0..cfg.blocks)
            .map(|i| AttentionBlock::init(&mut params, &format!("critic.block{i}"), w, cfg.ff_width, rng))
            .collect();
        let head = Linear::init(&mut params, "critic.head", w, 1, true, rng);
        Ok(Self {
            cfg,
            state_embed,
            action_embed,
            positions,
            blocks,
            head,
            params,
        })
    }

    pub fn with_params(cfg: CriticConfig, params: ParamSet) -> Result<Self> {
        let mut net = Self::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        net.params.ensure_congruent(&params)?;
        net.params = params;
        Ok(net)
    }

    pub fn config(&self) -> &CriticConfig {
        &self.cfg
    }

    pub fn h(&self) -> usize {
        self.cfg.h
    }

    /// Parameter slots of the scalar head (weight, bias).
    pub fn head_slots(&self) -> (usize, usize) {
        (self.head.weight, self.head.bias.expect("head has a bias"))
    }

    /// `states [B x S]`, `actions [(B*h) x A]` -> `[B x h]`.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, states: NodeId, actions: NodeId) -> Result<NodeId> {
        let h = self.cfg.h;
        let (b, s_cols) = g.value(states).shape();
        let (a_rows, a_cols) = g.value(actions).shape();
        if s_cols != self.cfg.state_dim {
            return Err(Error::shape(
                "critic.state",
                format!("expected state dim {}, got {s_cols}", self.cfg.state_dim),
            ));
        }
        if a_cols != self.cfg.action_dim || a_rows != b * h {
            return Err(Error::shape(
                "critic.action",
                format!(
                    "expected {} action rows of dim {}, got {a_rows} of dim {a_cols}",
                    b * h,
                    self.cfg.action_dim
                ),
            ));
        }
        let se = self.state_embed.forward(g, p, states)?;
        let ae = self.action_embed.forward(g, p, actions)?;
        let ae = g.add_tiled(ae, p.id(self.positions));
        let mut x = g.stack_tokens(se, ae, h);
        for block in &self.blocks {
            x = block.forward(g, p, x, h + 1, true)?;
        }
        let x = g.drop_first_token(x, h + 1);
        let q = self.head.forward(g, p, x)?;
        Ok(g.reshape(q, b, h))
    }

    /// Batched inference.
    pub fn q_values(&self, states: &Tensor, actions: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let s = g.input(states.clone());
        let a = g.input(actions.clone());
        let q = self.forward_graph(&mut g, &p, s, a)?;
        Ok(g.value(q).clone())
    }
}

/// Prefix Q-values of one chunk at one state.
pub fn critic_forward(critic: &CriticNetwork, state: &[f64], chunk: &[Vec<f64>]) -> Result<CriticOutput> {
    if chunk.len() != critic.h() {
        return Err(Error::shape(
            "critic.action",
            format!("chunk has {} actions, critic expects {}", chunk.len(), critic.h()),
        ));
    }
    let q = critic.q_values(&Tensor::row(state), &Tensor::from_rows(chunk))?;
    Ok(CriticOutput { q: q.into_data() })
}

/// `live[b][j]` for `j = 0..=h`: whether step `t+j` is still inside the
/// episode.
fn live(batch: &ChunkBatch, b: usize, j: usize) -> bool {
    j == 0 || !batch.done_mask[b * batch.h + j - 1]
}

/// Full-length target Q at every live bootstrap state `s_{t+i}`, on the
/// actor's fresh chunk there. Entry `[b, i-1]`; dead entries are zero.
pub fn bootstrap_values(batch: &ChunkBatch, target: &CriticNetwork, actor: &ActorNetwork) -> Result<Tensor> {
    let h = batch.h;
    let b = batch.size();
    let s_dim = batch.state_dim();
    let mut rows = Vec::new();
    let mut states = Vec::new();
    for s in 0..b {
        for i in 1..=h {
            if live(batch, s, i) {
                rows.push(s * h + i - 1);
                states.extend_from_slice(batch.next_states.row_slice(s * h + i - 1));
            }
        }
    }
    let mut out = Tensor::zeros(b, h);
    if rows.is_empty() {
        return Ok(out);
    }
    let states = Tensor::from_vec(rows.len(), s_dim, states);
    let chunks = actor.act_batch(&states)?;
    let q = target.q_values(&states, &chunks)?;
    let last = q.cols() - 1;
    for (k, &r) in rows.iter().enumerate() {
        out.data_mut()[r] = q.get(k, last);
    }
    Ok(out)
}

/// `target_i = sum_{j<i} g^j r_{t+j} live_j + g^i live_i qbar_i`.
pub fn assemble_targets(batch: &ChunkBatch, bootstrap: &Tensor, gamma: f64) -> Tensor {
    let h = batch.h;
    let b = batch.size();
    let mut out = Tensor::zeros(b, h);
    for s in 0..b {
        let mut acc = 0.0;
        let mut disc = 1.0;
        for i in 1..=h {
            if live(batch, s, i - 1) {
                acc += disc * batch.rewards.get(s, i - 1);
            }
            disc *= gamma;
            let boot = if live(batch, s, i) {
                disc * bootstrap.get(s, i - 1)
            } else {
                0.0
            };
            out.set(s, i - 1, acc + boot);
        }
    }
    out
}

/// Per-prefix chunked TD targets, `[B x h]`, gradient-stopped.
pub fn chunked_td_targets(
    batch: &ChunkBatch,
    target: &CriticNetwork,
    actor: &ActorNetwork,
    gamma: f64,
) -> Result<Tensor> {
    let boot = bootstrap_values(batch, target, actor)?;
    Ok(assemble_targets(batch, &boot, gamma))
}

/// Out-of-distribution chunks for the conservative term: `n_policy` copies
/// of the batch with noisy actor chunks, then `n_uniform` copies drawn
/// uniformly over the action box. `actions` is `(n_ood*B*h) x A`.
#[derive(Clone, Debug, PartialEq)]
pub struct OodChunks {
    pub n_policy: usize,
    pub n_uniform: usize,
    pub actions: Tensor,
}

impl OodChunks {
    pub fn copies(&self) -> usize {
        self.n_policy + self.n_uniform
    }
}

/// With odd `n_ood` the extra copy is uniform.
pub fn sample_ood_chunks<R: Rng + ?Sized>(
    batch: &ChunkBatch,
    actor: &ActorNetwork,
    bounds: &[(f64, f64)],
    noise_scale: f64,
    n_ood: usize,
    rng: &mut R,
) -> Result<OodChunks> {
    if n_ood == 0 {
        return Err(Error::InvalidArgument("n_ood must be >= 1".into()));
    }
    if bounds.len() != batch.action_dim() {
        return Err(Error::InvalidArgument("one bound per action dimension required".into()));
    }
    let n_policy = n_ood / 2;
    let n_uniform = n_ood - n_policy;
    let a_dim = batch.action_dim();
    let rows = batch.size() * batch.h;
    let mut data = Vec::with_capacity(n_ood * rows * a_dim);
    if n_policy > 0 {
        let mean = actor.act_batch(&batch.states)?;
        let noise: Vec<Normal<f64>> = bounds
            .iter()
            .map(|(lo, hi)| Normal::new(0.0, noise_scale * (hi - lo)))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("noise_scale: {e}")))?;
        for _ in 0..n_policy {
            for (k, &m) in mean.data().iter().enumerate() {
                let d = k % a_dim;
                let (lo, hi) = bounds[d];
                data.push((m + noise[d].sample(rng)).clamp(lo, hi));
            }
        }
    }
    for _ in 0..n_uniform * rows {
        for &(lo, hi) in bounds {
            data.push(lo + (hi - lo) * rng.random::<f64>());
        }
    }
    Ok(OodChunks {
        n_policy,
        n_uniform,
        actions: Tensor::from_vec(n_ood * rows, a_dim, data),
    })
}

fn tile_rows(t: &Tensor, copies: usize) -> Tensor {
    let mut data = Vec::with_capacity(t.len() * copies);
    for _ in 0..copies {
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(t.rows() * copies, t.cols(), data)
}

/// `V^mu` broadcast to `[(copies*B) x h]`.
fn reference_values(batch: &ChunkBatch, copies: usize) -> Tensor {
    let h = batch.h;
    let mut data = Vec::with_capacity(copies * batch.size() * h);
    for _ in 0..copies {
        for &v in &batch.mc_return {
            data.extend(std::iter::repeat_n(v, h));
        }
    }
    Tensor::from_vec(copies * batch.size(), h, data)
}

/// `mean(max(q_ood, v)) - mean(q_data)` on graph nodes.
pub fn calql_term(g: &mut Graph, q_data: NodeId, q_ood: NodeId, v_ref: &Tensor) -> NodeId {
    let floored = g.max_const(q_ood, v_ref);
    let pushed = g.mean(floored);
    let lifted = g.mean(q_data);
    g.sub(pushed, lifted)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegularizerParts {
    pub value: f64,
    pub q_data_mean: f64,
    /// Raw mean Q over the uniform OOD copies (NaN when there are none).
    pub q_ood_uniform_mean: f64,
}

fn uniform_mean(q_ood: &Tensor, ood: &OodChunks, b: usize) -> f64 {
    if ood.n_uniform == 0 {
        return f64::NAN;
    }
    let h = q_ood.cols();
    let start = ood.n_policy * b * h;
    let vals = &q_ood.data()[start..];
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn ood_states(batch: &ChunkBatch, ood: &OodChunks) -> Result<Tensor> {
    let expected = ood.copies() * batch.size() * batch.h;
    if ood.actions.rows() != expected {
        return Err(Error::shape(
            "calql",
            format!("{} OOD action rows for {expected} expected", ood.actions.rows()),
        ));
    }
    Ok(tile_rows(&batch.states, ood.copies()))
}

/// Regularizer value for given OOD chunks. Pure.
pub fn calql_regularizer_value(batch: &ChunkBatch, critic: &CriticNetwork, ood: &OodChunks) -> Result<RegularizerParts> {
    let q_data = critic.q_values(&batch.states, &batch.actions)?;
    let q_ood = critic.q_values(&ood_states(batch, ood)?, &ood.actions)?;
    let v = reference_values(batch, ood.copies());
    let pushed: f64 = q_ood
        .data()
        .iter()
        .zip(v.data())
        .map(|(&q, &v)| q.max(v))
        .sum::<f64>()
        / q_ood.len() as f64;
    let q_data_mean = q_data.mean();
    Ok(RegularizerParts {
        value: pushed - q_data_mean,
        q_data_mean,
        q_ood_uniform_mean: uniform_mean(&q_ood, ood, batch.size()),
    })
}

/// Draws OOD chunks from `rng` and evaluates the regularizer.
pub fn calql_regularizer<R: Rng + ?Sized>(
    batch: &ChunkBatch,
    critic: &CriticNetwork,
    actor: &ActorNetwork,
    noise_scale: f64,
    n_ood: usize,
    rng: &mut R,
) -> Result<f64> {
    let bounds = actor.config().action_bounds.clone();
    let ood = sample_ood_chunks(batch, actor, &bounds, noise_scale, n_ood, rng)?;
    Ok(calql_regularizer_value(batch, critic, &ood)?.value)
}

#[derive(Clone, Debug)]
pub struct CriticLossOutput {
    pub loss: f64,
    pub td_mse: f64,
    pub regularizer: f64,
    pub q_data_mean: f64,
    pub q_ood_uniform_mean: f64,
    pub grads: Gradients,
}

/// Chunked CalQL critic loss against precomputed targets:
/// `(1/h) mean_b sum_i (Q_i - target_i)^2 + alpha * R`.
///
/// With `alpha == 0` the OOD chunks (if any) are only evaluated for the
/// logged statistics and do not enter the graph.
pub fn critic_loss_with_targets(
    batch: &ChunkBatch,
    critic: &CriticNetwork,
    targets: &Tensor,
    alpha: f64,
    ood: Option<&OodChunks>,
) -> Result<CriticLossOutput> {
    let b = batch.size();
    if targets.shape() != (b, batch.h) {
        return Err(Error::shape("critic_loss", "targets must be B x h"));
    }
    if alpha != 0.0 && ood.is_none() {
        return Err(Error::InvalidArgument("alpha > 0 needs OOD chunks".into()));
    }
    let mut g = Graph::new();
    let p = g.bind(&critic.params, true);
    let states = g.input(batch.states.clone());
    let actions = g.input(batch.actions.clone());
    let q = critic.forward_graph(&mut g, &p, states, actions)?;
    let t = g.input(targets.clone());
    let diff = g.sub(q, t);
    let sq = g.square(diff);
    let td = g.mean(sq);
    let td_mse = g.value(td).item();
    let q_data_mean = g.value(q).mean();

    let mut loss = td;
    let (mut regularizer, mut q_ood_uniform_mean) = (f64::NAN, f64::NAN);
    if let Some(ood) = ood {
        if alpha != 0.0 {
            let s_ood = g.input(ood_states(batch, ood)?);
            let a_ood = g.input(ood.actions.clone());
            let q_ood = critic.forward_graph(&mut g, &p, s_ood, a_ood)?;
            let v = reference_values(batch, ood.copies());
            let r = calql_term(&mut g, q, q_ood, &v);
            regularizer = g.value(r).item();
            q_ood_uniform_mean = uniform_mean(g.value(q_ood), ood, b);
            let weighted = g.scale(r, alpha);
            loss = g.add(td, weighted);
        } else {
            let parts = calql_regularizer_value(batch, critic, ood)?;
            regularizer = parts.value;
            q_ood_uniform_mean = parts.q_ood_uniform_mean;
        }
    }
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "critic loss over {b} chunks (td {td_mse}, regularizer {regularizer}, mean Q {q_data_mean})"
        )));
    }
    g.backward(loss)?;
    Ok(CriticLossOutput {
        loss: value,
        td_mse,
        regularizer,
        q_data_mean,
        q_ood_uniform_mean,
        grads: g.gradients(&p, &critic.params)?,
    })
}

/// Full critic objective: targets from the target critic and the actor, then
/// [`critic_loss_with_targets`].
pub fn critic_loss(
    batch: &ChunkBatch,
    critic: &CriticNetwork,
    target: &CriticNetwork,
    actor: &ActorNetwork,
    gamma: f64,
    alpha: f64,
    ood: Option<&OodChunks>,
) -> Result<CriticLossOutput> {
    let targets = chunked_td_targets(batch, target, actor, gamma)?;
    critic_loss_with_targets(batch, critic, &targets, alpha, ood)
}

/// Gradient of the regularizer alone (the `alpha` term with `alpha = 1`).
pub fn regularizer_grad(batch: &ChunkBatch, critic: &CriticNetwork, ood: &OodChunks) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let p = g.bind(&critic.params, true);
    let states = g.input(batch.states.clone());
    let actions = g.input(batch.actions.clone());
    let q = critic.forward_graph(&mut g, &p, states, actions)?;
    let s_ood = g.input(ood_states(batch, ood)?);
    let a_ood = g.input(ood.actions.clone());
    let q_ood = critic.forward_graph(&mut g, &p, s_ood, a_ood)?;
    let v = reference_values(batch, ood.copies());
    let r = calql_term(&mut g, q, q_ood, &v);
    let value = g.value(r).item();
    g.backward(r)?;
    Ok((value, g.gradients(&p, &critic.params)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actor::ActorConfig;
    use crate::data::{make_chunks, ChunkSample, Episode, InitMode, Step};
    use crate::nn::Adam;

    fn critic_cfg(s: usize, a: usize, h: usize) -> CriticConfig {
        CriticConfig {
            state_dim: s,
            action_dim: a,
            h,
            width: 8,
            blocks: 2,
            ff_width: 8,
        }
    }

    fn actor(s: usize, a: usize, h: usize, seed: u64) -> ActorNetwork {
        ActorNetwork::new(
            ActorConfig {
                state_dim: s,
                action_dim: a,
                h,
                hidden: vec![8],
                action_bounds: vec![(-1.0, 1.0); a],
            },
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    fn random_chunk(rng: &mut ChaCha8Rng, h: usize, a: usize) -> Vec<Vec<f64>> {
        (0..h).map(|_| (0..a).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn later_actions_leave_earlier_heads_bitwise_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let critic = CriticNetwork::new(critic_cfg(2, 2, 3), &mut rng).unwrap();
        let s = [0.3, -0.2];
        let mut chunk = random_chunk(&mut rng, 3, 2);
        let base = critic_forward(&critic, &s, &chunk).unwrap().q;
        chunk[2][0] += 0.7;
        let moved = critic_forward(&critic, &s, &chunk).unwrap().q;
        assert_eq!(base[0].to_bits(), moved[0].to_bits());
        assert_eq!(base[1].to_bits(), moved[1].to_bits());
        assert_ne!(base[2], moved[2]);
    }

    #[test]
    fn zero_head_weights_output_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut critic = CriticNetwork::new(critic_cfg(3, 1, 4), &mut rng).unwrap();
        let (w, b) = critic.head_slots();
        critic.params.tensor_mut(w).data_mut().fill(0.0);
        critic.params.tensor_mut(b).data_mut()[0] = 0.625;
        let q = critic_forward(&critic, &[1.0, 2.0, 3.0], &random_chunk(&mut rng, 4, 1)).unwrap().q;
        assert_eq!(q, vec![0.625; 4]);
    }

    #[test]
    fn chunk_length_checked() {
        let critic = CriticNetwork::new(critic_cfg(1, 1, 3), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(
            critic_forward(&critic, &[0.0], &[vec![0.0]]),
            Err(Error::Shape { .. })
        ));
    }

    fn episode(rewards: &[f64]) -> Episode {
        let n = rewards.len();
        Episode {
            env_id: "toy".into(),
            init_mode: InitMode::Fixed,
            steps: rewards
                .iter()
                .enumerate()
                .map(|(t, &r)| Step {
                    state: vec![t as f64 * 0.1],
                    action: vec![0.5],
                    reward: r,
                    done: t + 1 == n,
                })
                .collect(),
            success: true,
        }
    }

    fn batch_of(chunks: &[ChunkSample]) -> ChunkBatch {
        let refs: Vec<&ChunkSample> = chunks.iter().collect();
        ChunkBatch::from_chunks(&refs).unwrap()
    }

    #[test]
    fn zero_discount_targets_are_first_reward() {
        let chunks = make_chunks(&episode(&[0.0, 1.0, 0.0, 1.0]), 3, 0.0).unwrap();
        let batch = batch_of(&chunks);
        let boot = Tensor::from_vec(4, 3, vec![9.0; 12]);
        let t = assemble_targets(&batch, &boot, 0.0);
        for (s, c) in chunks.iter().enumerate() {
            for i in 0..3 {
                assert_eq!(t.get(s, i), c.rewards[0]);
            }
        }
    }

    #[test]
    fn terminal_chunk_has_no_bootstrap() {
        let chunks = make_chunks(&episode(&[1.0]), 3, 0.9).unwrap();
        let batch = batch_of(&chunks);
        let boot = Tensor::from_vec(1, 3, vec![100.0; 3]);
        let t = assemble_targets(&batch, &boot, 0.9);
        assert_eq!(t.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn three_step_hand_expansion() {
        let chunks = make_chunks(&episode(&[0.0, 0.0, 1.0]), 3, 0.9).unwrap();
        let batch = batch_of(&chunks[..1]);
        let (q1, q2) = (0.4, -0.3);
        let boot = Tensor::from_vec(1, 3, vec![q1, q2, 55.0]);
        let t = assemble_targets(&batch, &boot, 0.9);
        assert!((t.get(0, 0) - 0.9 * q1).abs() < 1e-15);
        assert!((t.get(0, 1) - 0.81 * q2).abs() < 1e-15);
        assert!((t.get(0, 2) - 0.81).abs() < 1e-15);
    }

    #[test]
    fn targets_flat_after_terminal_reward() {
        let chunks = make_chunks(&episode(&[0.0, 1.0]), 4, 0.9).unwrap();
        let batch = batch_of(&chunks[..1]);
        let t = assemble_targets(&batch, &Tensor::from_vec(1, 4, vec![3.0; 4]), 0.9);
        assert_eq!(t.get(0, 1), t.get(0, 2));
        assert_eq!(t.get(0, 2), t.get(0, 3));
        assert!((t.get(0, 3) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn regularizer_arithmetic() {
        let mut g = Graph::new();
        let qd = g.input(Tensor::scalar(3.0));
        let qo = g.input(Tensor::scalar(2.0));
        let r = calql_term(&mut g, qd, qo, &Tensor::scalar(5.0));
        assert_eq!(g.value(r).item(), 2.0);

        let mut g = Graph::new();
        let qd = g.input(Tensor::scalar(7.0));
        let qo = g.input(Tensor::scalar(7.0));
        let r = calql_term(&mut g, qd, qo, &Tensor::scalar(5.0));
        assert_eq!(g.value(r).item(), 0.0);
    }

    #[test]
    fn calibration_floor_blocks_gradient() {
        let mut g = Graph::new();
        let qd = g.param(Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        let qo = g.param(Tensor::from_vec(2, 2, vec![0.5, 4.0, -1.0, 3.5]));
        let v = Tensor::from_vec(2, 2, vec![3.0, 3.0, 3.0, 3.0]);
        let r = calql_term(&mut g, qd, qo, &v);
        assert_eq!(g.value(r).item(), (3.0 + 4.0 + 3.0 + 3.5) / 4.0 - 1.5);
        g.backward(r).unwrap();
        assert_eq!(g.grad(qo).unwrap().data(), &[0.0, 0.25, 0.0, 0.25]);
        assert_eq!(g.grad(qd).unwrap().data(), &[-0.5, -0.5]);
    }

    #[test]
    fn ood_chunks_respect_bounds_and_layout() {
        let chunks = make_chunks(&episode(&[0.0, 0.0, 1.0]), 2, 0.9).unwrap();
        let batch = batch_of(&chunks);
        let act = actor(1, 1, 2, 0);
        let bounds = [(-1.0, 1.0)];
        let ood = sample_ood_chunks(&batch, &act, &bounds, 5.0, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!((ood.n_policy, ood.n_uniform), (1, 2));
        assert_eq!(ood.actions.rows(), 3 * 3 * 2);
        assert!(ood.actions.data().iter().all(|a| (-1.0..=1.0).contains(a)));
        assert!(sample_ood_chunks(&batch, &act, &bounds, 0.1, 0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn perfect_critic_has_zero_loss() {
        let chunks = make_chunks(&episode(&[0.0, 0.0, 1.0]), 2, 0.9).unwrap();
        let batch = batch_of(&chunks);
        let critic = CriticNetwork::new(critic_cfg(1, 1, 2), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let q = critic.q_values(&batch.states, &batch.actions).unwrap();
        let out = critic_loss_with_targets(&batch, &critic, &q, 0.0, None).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn prefix_heads_ignore_later_actions_in_gradient() {
        let h = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let critic = CriticNetwork::new(critic_cfg(2, 2, h), &mut rng).unwrap();
        for head in 0..h {
            let mut g = Graph::new();
            let p = g.bind(&critic.params, false);
            let s = g.input(Tensor::from_rows(&[[0.1, 0.2], [-0.4, 0.3]]));
            let chunk: Vec<Vec<f64>> = (0..2 * h).map(|_| vec![rng.random(), rng.random()]).collect();
            let a = g.param(Tensor::from_rows(&chunk));
            let q = critic.forward_graph(&mut g, &p, s, a).unwrap();
            let mut sel = Tensor::zeros(2, h);
            sel.set(0, head, 1.0);
            sel.set(1, head, 1.0);
            let picked = g.mul_const(q, sel);
            let loss = g.sum(picked);
            g.backward(loss).unwrap();
            let grad = g.grad(a).unwrap();
            for b in 0..2 {
                for j in 0..h {
                    let row = grad.row_slice(b * h + j);
                    if j > head {
                        assert!(row.iter().all(|&x| x == 0.0), "head {head} action {j}");
                    } else {
                        assert!(row.iter().any(|&x| x != 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn regularizer_pushes_ood_below_data() {
        let chunks = make_chunks(&episode(&[0.0, 0.0, 0.0, 0.0, 1.0]), 2, 0.9).unwrap();
        let batch = batch_of(&chunks);
        let act = actor(1, 1, 2, 0);
        let bounds = [(-1.0, 1.0)];
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut critic = CriticNetwork::new(
                CriticConfig {
                    width: 8,
                    blocks: 1,
                    ..critic_cfg(1, 1, 2)
                },
                &mut rng,
            )
            .unwrap();
            let mut opt = Adam::new(&critic.params);
            for _ in 0..500 {
                let ood = sample_ood_chunks(&batch, &act, &bounds, 0.1, 2, &mut rng).unwrap();
                let (_, grads) = regularizer_grad(&batch, &critic, &ood).unwrap();
                opt.step(&mut critic.params, &grads, 1e-3).unwrap();
            }
            let ood = sample_ood_chunks(&batch, &act, &bounds, 0.1, 2, &mut rng).unwrap();
            let parts = calql_regularizer_value(&batch, &critic, &ood).unwrap();
            assert!(
                parts.q_ood_uniform_mean <= parts.q_data_mean,
                "seed {seed}: ood {} data {}",
                parts.q_ood_uniform_mean,
                parts.q_data_mean
            );
        }
    }
}
