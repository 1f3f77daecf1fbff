//! Chunked offline reinforcement learning at desk scale.
//!
//! A chunked critic values every prefix of an `h`-step action chunk with one
//! causal-attention network; a deterministic chunked actor is first cloned
//! from demonstrations and then improved with a conservative, calibrated
//! TD objective. Toy sparse-reward environments, scripted experts and an
//! evaluation harness live alongside.

pub mod actor;
pub mod critic;
pub mod data;
pub mod env;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;

pub use actor::{act, actor_forward, actor_rl_loss, bc_loss, ActorConfig, ActorNetwork};
pub use critic::{
    calql_regularizer, chunked_td_targets, critic_forward, critic_loss, CriticConfig, CriticNetwork, CriticOutput,
};
pub use data::{load_dataset, save_dataset, make_chunks, mc_return_to_go, sample_batch, ChunkBatch, ChunkSample, Episode, InitMode, OfflineDataset, Step};
pub use env::{collect_demos, make_env, Env, EnvSpec, ExecMode, ResetMode, StepResult};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalReport};
pub use pipeline::{select_best_checkpoint, train_bc, train_offline_rl, Checkpoint, TrainConfig};
