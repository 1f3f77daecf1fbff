use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, EvalReport, TEST_SALT, VALIDATION_SALT};
use crate::critic::{critic_forward, critic_loss, CriticNetwork};
use crate::data::{sample_batch, ChunkBatch, InitMode};
use crate::env::{collect_demos, env_spec, CollectConfig, ResetMode, CHAIN_SPARSE};
use crate::error::{Error, Result};
use crate::nn::{ema_update, Adam};
use crate::pipeline::{critic_config, train_bc, train_offline_rl, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DiversityConfig {
    pub env_id: String,
    pub n_episodes: usize,
    pub upsample_k: usize,
    pub n_trials: usize,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityRow {
    pub dataset: InitMode,
    pub seed: u64,
    pub ind: EvalReport,
    pub ood: EvalReport,
    /// `ood.sr - ind.sr`.
    pub drop: f64,
    /// IND scored again on a disjoint seed family; `ind_repeat.sr - ind.sr`
    /// should sit near zero.
    pub sanity_drop: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityTable {
    pub env_id: String,
    pub rows: Vec<DiversityRow>,
}

impl DiversityTable {
    fn of(&self, mode: InitMode) -> impl Iterator<Item = &DiversityRow> {
        self.rows.iter().filter(move |r| r.dataset == mode)
    }

    /// Mean (IND SR, OOD SR, drop) over the rows of one dataset kind.
    pub fn average(&self, mode: InitMode) -> Option<(f64, f64, f64)> {
        let rows: Vec<_> = self.of(mode).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let ind = rows.iter().map(|r| r.ind.sr).sum::<f64>() / n;
        let ood = rows.iter().map(|r| r.ood.sr).sum::<f64>() / n;
        Some((ind, ood, ood - ind))
    }
}

/// One scored CO-RFT run on a dataset of the given init mode: the selected
/// checkpoint against IND and OOD test seeds.
pub fn diversity_row(env_id: &str, dataset: InitMode, seed: u64, cfg: &DiversityConfig) -> Result<DiversityRow> {
    let ds = collect_demos(
        env_id,
        &CollectConfig {
            n_episodes: cfg.n_episodes,
            init_mode: dataset,
            upsample_k: cfg.upsample_k,
            seed,
            h: cfg.train.h,
            gamma: cfg.train.gamma,
        },
    )?;
    let train = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let bc = train_bc(&ds, &train)?;
    let rl = train_offline_rl(&ds, &bc.checkpoint, &train)?;
    let actor = &rl.selected().actor;
    let test_seed = seed ^ TEST_SALT;
    let ind_mode = ResetMode::from_init_mode(dataset);
    let ind = evaluate(actor, env_id, cfg.n_trials, ind_mode, test_seed, train.exec_mode)?;
    let ood = evaluate(actor, env_id, cfg.n_trials, ResetMode::Ood, test_seed, train.exec_mode)?;
    let repeat = evaluate(actor, env_id, cfg.n_trials, ind_mode, test_seed ^ VALIDATION_SALT.rotate_left(17), train.exec_mode)?;
    Ok(DiversityRow {
        dataset,
        seed,
        drop: ood.sr - ind.sr,
        sanity_drop: repeat.sr - ind.sr,
        ind,
        ood,
    })
}

/// Trains CO-RFT on fixed- and random-init datasets of equal size for every
/// seed and scores both IND and OOD.
pub fn diversity_experiment(cfg: &DiversityConfig) -> Result<DiversityTable> {
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidArgument("diversity experiment needs at least one seed".into()));
    }
    let spec = env_spec(&cfg.env_id)?;
    if spec.ood_region.is_none() {
        return Err(Error::UnsupportedInitMode {
            env: cfg.env_id.clone(),
            mode: ResetMode::Ood.to_string(),
        });
    }
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        for mode in [InitMode::Fixed, InitMode::Random] {
            rows.push(diversity_row(&cfg.env_id, mode, seed, cfg)?);
        }
    }
    Ok(DiversityTable {
        env_id: cfg.env_id.clone(),
        rows,
    })
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

/// Fixed-width text table: per dataset kind, IND SR, OOD SR and the drop,
/// followed by the averages.
pub fn render_diversity_table(t: &DiversityTable) -> String {
    let mut out = String::new();
    writeln!(out, "env: {}", t.env_id).unwrap();
    writeln!(out, "{:<10} {:>6} {:>8} {:>8} {:>10}", "dataset", "seed", "IND", "OOD", "drop").unwrap();
    for r in &t.rows {
        writeln!(
            out,
            "{:<10} {:>6} {:>8} {:>8} {:>10}",
            r.dataset.to_string(),
            r.seed,
            pct(r.ind.sr),
            pct(r.ood.sr),
            pct(r.drop)
        )
        .unwrap();
    }
    for mode in [InitMode::Fixed, InitMode::Random] {
        if let Some((ind, ood, drop)) = t.average(mode) {
            writeln!(
                out,
                "{:<10} {:>6} {:>8} {:>8} {:>10}",
                mode.to_string(),
                "avg",
                pct(ind),
                pct(ood),
                pct(drop)
            )
            .unwrap();
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub hs: Vec<usize>,
    /// Gradient-step budget per critic.
    pub budget: usize,
    /// Q at the start state is read every this many steps.
    pub check_every: usize,
    pub n_episodes: usize,
    pub seed: u64,
    /// Only `gamma`, `tau`, `lr_critic`, `batch_size`, `actor_delay`,
    /// `critic_width`, `critic_blocks`, `actor_hidden`, `bc_steps` and
    /// `lr_bc` are used.
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCurve {
    pub h: usize,
    /// First checked step where Q(start) exceeded the threshold; `None` if
    /// the budget ran out first (censored).
    pub steps_to_threshold: Option<usize>,
    pub curve: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub true_value: f64,
    pub threshold: f64,
    pub curves: Vec<ProbeCurve>,
}

/// Trains a chunked critic per `h` on the same expert chain demos (plain
/// chunked TD, no conservative term) against a frozen cloned actor, and
/// records how fast the start-state value rises.
pub fn value_propagation_probe(cfg: &ProbeConfig) -> Result<ProbeResult> {
    if cfg.check_every == 0 || cfg.hs.is_empty() {
        return Err(Error::InvalidArgument("probe needs check_every >= 1 and at least one h".into()));
    }
    let gamma = cfg.train.gamma;
    let spec = env_spec(CHAIN_SPARSE)?;
    // cell 0 to the last cell takes 19 moves; the step taken there pays
    let true_value = gamma.powi(19);
    let threshold = 0.5 * true_value;
    let base = collect_demos(
        CHAIN_SPARSE,
        &CollectConfig {
            n_episodes: cfg.n_episodes,
            init_mode: InitMode::Fixed,
            upsample_k: 0,
            seed: cfg.seed,
            h: 1,
            gamma,
        },
    )?;
    let mut curves = Vec::new();
    for &h in &cfg.hs {
        let ds = base.with_h(h)?;
        let train = TrainConfig {
            h,
            seed: cfg.seed,
            alpha: 0.0,
            n_ood: 0,
            ..cfg.train.clone()
        };
        let actor = train_bc(&ds, &train)?.checkpoint.actor;
        let start = &ds.chunks()[0];
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        init.set_stream(u64::from(h as u32) << 8);
        let mut critic = CriticNetwork::new(critic_config(&spec, &train), &mut init)?;
        let mut target = critic.clone();
        let mut opt = Adam::new(&critic.params);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let q_start = |c: &CriticNetwork| -> Result<f64> {
            Ok(*critic_forward(c, &start.states[0], &start.actions)?.q.last().expect("h >= 1"))
        };
        let mut curve = vec![(0, q_start(&critic)?)];
        let mut hit = None;
        for step in 1..=cfg.budget {
            let chunks = sample_batch(&ds, train.batch_size, &mut rng)?;
            let batch = ChunkBatch::from_chunks(&chunks)?;
            let out = critic_loss(&batch, &critic, &target, &actor, gamma, 0.0, None)?;
            opt.step(&mut critic.params, &out.grads, train.lr_critic)?;
            if step % train.actor_delay == 0 {
                ema_update(&mut target.params, &critic.params, train.tau)?;
            }
            if step % cfg.check_every == 0 {
                let q = q_start(&critic)?;
                curve.push((step, q));
                if q > threshold {
                    hit = Some(step);
                    break;
                }
            }
        }
        curves.push(ProbeCurve {
            h,
            steps_to_threshold: hit,
            curve,
        });
    }
    Ok(ProbeResult {
        true_value,
        threshold,
        curves,
    })
}
