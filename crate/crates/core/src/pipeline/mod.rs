//! Two-stage training: behavior cloning, then chunked CalQL offline RL
//! initialized from the cloned actor.

mod checkpoint;
mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actor::{actor_rl_loss, bc_loss, ActorConfig, ActorNetwork};
use crate::critic::{critic_loss, sample_ood_chunks, CriticConfig, CriticNetwork};
use crate::data::{sample_batch, ChunkBatch, OfflineDataset};
use crate::env::{env_spec, EnvSpec, ResetMode};
use crate::error::{Error, Result};
use crate::eval::{evaluate, VALIDATION_SALT};
use crate::nn::{ema_update, Adam};

pub use checkpoint::{Checkpoint, Stage};
pub use config::{TrainConfig, CONFIG_KEYS};

/// RNG streams carved out of one seed.
const STREAM_INIT: u64 = 0;
const STREAM_BATCH: u64 = 1;
const STREAM_OOD: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One line of the metrics log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub td_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub q_data_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub q_ood_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub regularizer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bc_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ct: Option<f64>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Renders records as JSON lines.
pub fn render_metrics(log: &[MetricsRecord]) -> String {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::CorruptRecord {
                record: i,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// A periodic evaluation during Stage 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub step: usize,
    pub sr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ct: Option<f64>,
}

/// Index of the entry with the highest SR; ties go to the lower CT, then
/// the earlier step.
pub fn select_best_checkpoint(log: &[EvalEntry]) -> Result<usize> {
    if log.is_empty() {
        return Err(Error::InvalidArgument("evaluation log is empty".into()));
    }
    let mut best = 0;
    for (i, e) in log.iter().enumerate().skip(1) {
        let b = &log[best];
        let better = if e.sr != b.sr {
            e.sr > b.sr
        } else {
            match (e.ct, b.ct) {
                (Some(x), Some(y)) if x != y => x < y,
                (Some(_), None) => true,
                _ => e.step < b.step,
            }
        };
        if better {
            best = i;
        }
    }
    Ok(best)
}

/// Rebuilds chunks if the dataset was sliced with another `h` and checks
/// the env.
fn prepare(dataset: &OfflineDataset, cfg: &TrainConfig) -> Result<(OfflineDataset, EnvSpec)> {
    cfg.validate()?;
    let spec = env_spec(&dataset.env_id)?;
    if spec.state_dim != dataset.state_dim || spec.action_dim != dataset.action_dim {
        return Err(Error::InvalidConfig(format!(
            "dataset dims {}x{} do not match env '{}'",
            dataset.state_dim, dataset.action_dim, dataset.env_id
        )));
    }
    if dataset.gamma != cfg.gamma {
        return Err(Error::InvalidConfig(format!(
            "dataset returns use gamma {}, config has {}",
            dataset.gamma, cfg.gamma
        )));
    }
    let ds = if dataset.h == cfg.h {
        dataset.clone()
    } else {
        dataset.with_h(cfg.h)?
    };
    Ok((ds, spec))
}

pub fn actor_config(spec: &EnvSpec, cfg: &TrainConfig) -> ActorConfig {
    ActorConfig {
        state_dim: spec.state_dim,
        action_dim: spec.action_dim,
        h: cfg.h,
        hidden: cfg.actor_hidden.clone(),
        action_bounds: spec.action_bounds.clone(),
    }
}

pub fn critic_config(spec: &EnvSpec, cfg: &TrainConfig) -> CriticConfig {
    CriticConfig {
        state_dim: spec.state_dim,
        action_dim: spec.action_dim,
        h: cfg.h,
        width: cfg.critic_width,
        blocks: cfg.critic_blocks,
        ff_width: cfg.critic_width,
    }
}

/// Reset mode matching how the dataset was collected.
pub fn dataset_reset_mode(dataset: &OfflineDataset) -> ResetMode {
    dataset
        .episodes()
        .first()
        .map_or(ResetMode::IndRandom, |e| ResetMode::from_init_mode(e.init_mode))
}

#[derive(Clone, Debug)]
pub struct BcOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<MetricsRecord>,
}

/// Stage 1: full-parameter behavior cloning of the chunked actor.
pub fn train_bc(dataset: &OfflineDataset, cfg: &TrainConfig) -> Result<BcOutcome> {
    let (ds, spec) = prepare(dataset, cfg)?;
    let mut actor = ActorNetwork::new(actor_config(&spec, cfg), &mut stream(cfg.seed, STREAM_INIT))?;
    let mut opt = Adam::new(&actor.params);
    let mut rng = stream(cfg.seed, STREAM_BATCH);
    let mut log = Vec::new();
    let snapshot = |actor: &ActorNetwork, step: usize| Checkpoint {
        stage: Stage::Bc,
        step,
        env_id: ds.env_id.clone(),
        config: cfg.clone(),
        actor: actor.clone(),
        critic: None,
        target: None,
    };
    for step in 0..cfg.bc_steps {
        let chunks = sample_batch(&ds, cfg.batch_size, &mut rng)?;
        let batch = ChunkBatch::from_chunks(&chunks)?;
        let out = match bc_loss(&batch, &actor) {
            Ok(out) => out,
            Err(e @ Error::NonFinite(_)) => {
                return Err(Error::TrainingAborted {
                    step,
                    batch_id: step as u64,
                    reason: e.to_string(),
                    last_good: Some(Box::new(snapshot(&actor, step))),
                })
            }
            Err(e) => return Err(e),
        };
        if step % cfg.log_every == 0 || step + 1 == cfg.bc_steps {
            log.push(MetricsRecord {
                step,
                bc_loss: Some(out.loss),
                ..MetricsRecord::default()
            });
        }
        opt.step(&mut actor.params, &out.grads, cfg.lr_bc)?;
    }
    Ok(BcOutcome {
        checkpoint: snapshot(&actor, cfg.bc_steps),
        log,
    })
}

#[derive(Clone, Debug)]
pub struct RlOutcome {
    /// State after the last step.
    pub last: Checkpoint,
    /// Best evaluated checkpoint, if any evaluation ran.
    pub best: Option<Checkpoint>,
    pub log: Vec<MetricsRecord>,
    pub evals: Vec<EvalEntry>,
}

impl RlOutcome {
    /// The best checkpoint, or the last one when nothing was evaluated.
    pub fn selected(&self) -> &Checkpoint {
        self.best.as_ref().unwrap_or(&self.last)
    }
}

/// Stage 2: chunked CalQL with a fresh critic, a target copy, delayed
/// actor updates and periodic evaluation on validation seeds.
pub fn train_offline_rl(dataset: &OfflineDataset, bc: &Checkpoint, cfg: &TrainConfig) -> Result<RlOutcome> {
    let (ds, spec) = prepare(dataset, cfg)?;
    if bc.env_id != ds.env_id {
        return Err(Error::InvalidConfig(format!(
            "checkpoint is for '{}', dataset for '{}'",
            bc.env_id, ds.env_id
        )));
    }
    if bc.actor.h() != cfg.h {
        return Err(Error::InvalidConfig(format!(
            "checkpoint actor emits chunks of {}, config has h = {}",
            bc.actor.h(),
            cfg.h
        )));
    }
    let mut actor = bc.actor.clone();
    let mut init_rng = stream(cfg.seed, STREAM_INIT);
    let critic_cfg = critic_config(&spec, cfg);
    // advance past the actor's initialization so the critic draws fresh numbers
    let _ = ActorNetwork::new(actor_config(&spec, cfg), &mut init_rng)?;
    let mut critic = CriticNetwork::new(critic_cfg, &mut init_rng)?;
    let mut target = critic.clone();
    let mut critic_opt = Adam::new(&critic.params);
    let mut actor_opt = Adam::new(&actor.params);
    let mut batch_rng = stream(cfg.seed, STREAM_BATCH);
    let mut ood_rng = stream(cfg.seed, STREAM_OOD);
    let eval_mode = dataset_reset_mode(&ds);

    let snapshot = |actor: &ActorNetwork, critic: &CriticNetwork, target: &CriticNetwork, step: usize| Checkpoint {
        stage: Stage::Rl,
        step,
        env_id: ds.env_id.clone(),
        config: cfg.clone(),
        actor: actor.clone(),
        critic: Some(critic.clone()),
        target: Some(target.clone()),
    };
    let abort = |step: usize, reason: String, last: Checkpoint| Error::TrainingAborted {
        step,
        batch_id: step as u64,
        reason,
        last_good: Some(Box::new(last)),
    };

    let mut log = Vec::new();
    let mut evals: Vec<EvalEntry> = Vec::new();
    let mut best: Option<Checkpoint> = None;
    for step in 1..=cfg.rl_steps {
        let chunks = sample_batch(&ds, cfg.batch_size, &mut batch_rng)?;
        let batch = ChunkBatch::from_chunks(&chunks)?;
        let ood = if cfg.n_ood > 0 {
            Some(sample_ood_chunks(
                &batch,
                &actor,
                &spec.action_bounds,
                cfg.noise_scale,
                cfg.n_ood,
                &mut ood_rng,
            )?)
        } else {
            None
        };
        let c = match critic_loss(&batch, &critic, &target, &actor, cfg.gamma, cfg.alpha, ood.as_ref()) {
            Ok(c) => c,
            Err(e @ Error::NonFinite(_)) => {
                return Err(abort(step, e.to_string(), snapshot(&actor, &critic, &target, step - 1)))
            }
            Err(e) => return Err(e),
        };
        critic_opt.step(&mut critic.params, &c.grads, cfg.lr_critic)?;

        if step % cfg.actor_delay == 0 {
            if step > cfg.actor_warmup {
                let a = match actor_rl_loss(&batch, &actor, &critic) {
                    Ok(a) => a,
                    Err(e @ Error::NonFinite(_)) => {
                        return Err(abort(step, e.to_string(), snapshot(&actor, &critic, &target, step - 1)))
                    }
                    Err(e) => return Err(e),
                };
                actor_opt.step(&mut actor.params, &a.grads, cfg.lr_actor)?;
            }
            ema_update(&mut target.params, &critic.params, cfg.tau)?;
        }

        // evaluations before the actor's first update would only re-score the BC actor
        let eval_now = cfg.eval_every > 0 && step % cfg.eval_every == 0 && step > cfg.actor_warmup;
        if eval_now || step % cfg.log_every == 0 || step == cfg.rl_steps {
            let mut rec = MetricsRecord {
                step,
                td_error: Some(c.td_mse),
                q_data_mean: Some(c.q_data_mean),
                q_ood_mean: finite(c.q_ood_uniform_mean),
                regularizer: finite(c.regularizer),
                bc_loss: Some(bc_loss(&batch, &actor)?.loss),
                sr: None,
                ct: None,
            };
            if eval_now {
                let report = evaluate(
                    &actor,
                    &ds.env_id,
                    cfg.eval_trials,
                    eval_mode,
                    cfg.seed ^ VALIDATION_SALT,
                    cfg.exec_mode,
                )?;
                rec.sr = Some(report.sr);
                rec.ct = report.ct;
                evals.push(EvalEntry {
                    step,
                    sr: report.sr,
                    ct: report.ct,
                });
                if select_best_checkpoint(&evals)? == evals.len() - 1 {
                    best = Some(snapshot(&actor, &critic, &target, step));
                }
            }
            log.push(rec);
        }
    }
    Ok(RlOutcome {
        last: snapshot(&actor, &critic, &target, cfg.rl_steps),
        best,
        log,
        evals,
    })
}
