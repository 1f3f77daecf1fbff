//! Plain-text `key = value` training configuration.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::ExecMode;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub h: usize,
    pub alpha: f64,
    pub tau: f64,
    /// Stage 2 actor step size.
    pub lr_actor: f64,
    pub lr_critic: f64,
    /// Stage 1 step size.
    pub lr_bc: f64,
    pub batch_size: usize,
    pub bc_steps: usize,
    pub rl_steps: usize,
    pub actor_delay: usize,
    /// Critic-only steps at the start of Stage 2 before the actor moves.
    pub actor_warmup: usize,
    /// Std of the policy-noise OOD chunks, as a fraction of each action range.
    pub noise_scale: f64,
    pub n_ood: usize,
    /// Evaluate (and consider for best checkpoint) every this many steps; 0 disables.
    pub eval_every: usize,
    pub seed: u64,
    pub eval_trials: usize,
    pub critic_width: usize,
    pub critic_blocks: usize,
    pub actor_hidden: Vec<usize>,
    pub exec_mode: ExecMode,
    /// Metrics record cadence; evaluation steps are always logged.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            h: 4,
            alpha: 1.0,
            tau: 0.005,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_bc: 3e-4,
            batch_size: 64,
            bc_steps: 5000,
            rl_steps: 10_000,
            actor_delay: 2,
            actor_warmup: 0,
            noise_scale: 0.1,
            n_ood: 4,
            eval_every: 1000,
            seed: 0,
            eval_trials: 40,
            critic_width: 64,
            critic_blocks: 2,
            actor_hidden: vec![128, 128],
            exec_mode: ExecMode::OpenLoopChunk,
            log_every: 10,
        }
    }
}

pub const CONFIG_KEYS: [&str; 22] = [
    "gamma",
    "h",
    "alpha",
    "tau",
    "lr_actor",
    "lr_critic",
    "lr_bc",
    "batch_size",
    "bc_steps",
    "rl_steps",
    "actor_delay",
    "actor_warmup",
    "noise_scale",
    "n_ood",
    "eval_every",
    "seed",
    "eval_trials",
    "critic_width",
    "critic_blocks",
    "actor_hidden",
    "exec_mode",
    "log_every",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse '{value}'")))
}

fn unknown_key(key: &str) -> Error {
    Error::InvalidConfig(format!(
        "unknown key '{key}'; valid keys: {}",
        CONFIG_KEYS.join(", ")
    ))
}

impl TrainConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "gamma" => self.gamma = parse_num(key, v)?,
            "h" => self.h = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "lr_actor" => self.lr_actor = parse_num(key, v)?,
            "lr_critic" => self.lr_critic = parse_num(key, v)?,
            "lr_bc" => self.lr_bc = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "bc_steps" => self.bc_steps = parse_num(key, v)?,
            "rl_steps" => self.rl_steps = parse_num(key, v)?,
            "actor_delay" => self.actor_delay = parse_num(key, v)?,
            "actor_warmup" => self.actor_warmup = parse_num(key, v)?,
            "noise_scale" => self.noise_scale = parse_num(key, v)?,
            "n_ood" => self.n_ood = parse_num(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "eval_trials" => self.eval_trials = parse_num(key, v)?,
            "critic_width" => self.critic_width = parse_num(key, v)?,
            "critic_blocks" => self.critic_blocks = parse_num(key, v)?,
            "actor_hidden" => {
                self.actor_hidden = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|p| parse_num(key, p.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "exec_mode" => self.exec_mode = v.parse()?,
            "log_every" => self.log_every = parse_num(key, v)?,
            other => return Err(unknown_key(other)),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment;
    /// a key may appear once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected 'key = value'", n + 1)))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(Error::InvalidConfig(format!("line {}: duplicate key '{key}'", n + 1)));
            }
            cfg.set(key, value)?;
            seen.push(key);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides, then validates.
    pub fn with_overrides<S: AsRef<str>>(mut self, overrides: &[S]) -> Result<Self> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("override '{o}' is not key=value")))?;
            self.set(k, v)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must be in (0, 1]");
        }
        if self.h == 0 || self.batch_size == 0 || self.actor_delay == 0 || self.eval_trials == 0 {
            return bad("h, batch_size, actor_delay and eval_trials must be >= 1");
        }
        if self.critic_width == 0 || self.log_every == 0 || self.actor_hidden.contains(&0) {
            return bad("critic_width, log_every and hidden sizes must be >= 1");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and >= 0");
        }
        if self.alpha > 0.0 && self.n_ood == 0 {
            return bad("n_ood must be >= 1 when alpha > 0");
        }
        for (name, lr) in [("lr_actor", self.lr_actor), ("lr_critic", self.lr_critic), ("lr_bc", self.lr_bc)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be finite and >= 0");
        }
        Ok(())
    }

    /// Canonical text form: every key, fixed order. Parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let hidden: Vec<String> = self.actor_hidden.iter().map(|x| x.to_string()).collect();
        let w = &mut out;
        // `{:?}` prints the shortest round-tripping form of an f64
        writeln!(w, "gamma = {:?}", self.gamma).unwrap();
        writeln!(w, "h = {}", self.h).unwrap();
        writeln!(w, "alpha = {:?}", self.alpha).unwrap();
        writeln!(w, "tau = {:?}", self.tau).unwrap();
        writeln!(w, "lr_actor = {:?}", self.lr_actor).unwrap();
        writeln!(w, "lr_critic = {:?}", self.lr_critic).unwrap();
        writeln!(w, "lr_bc = {:?}", self.lr_bc).unwrap();
        writeln!(w, "batch_size = {}", self.batch_size).unwrap();
        writeln!(w, "bc_steps = {}", self.bc_steps).unwrap();
        writeln!(w, "rl_steps = {}", self.rl_steps).unwrap();
        writeln!(w, "actor_delay = {}", self.actor_delay).unwrap();
        writeln!(w, "actor_warmup = {}", self.actor_warmup).unwrap();
        writeln!(w, "noise_scale = {:?}", self.noise_scale).unwrap();
        writeln!(w, "n_ood = {}", self.n_ood).unwrap();
        writeln!(w, "eval_every = {}", self.eval_every).unwrap();
        writeln!(w, "seed = {}", self.seed).unwrap();
        writeln!(w, "eval_trials = {}", self.eval_trials).unwrap();
        writeln!(w, "critic_width = {}", self.critic_width).unwrap();
        writeln!(w, "critic_blocks = {}", self.critic_blocks).unwrap();
        writeln!(w, "actor_hidden = {}", hidden.join(",")).unwrap();
        writeln!(w, "exec_mode = {}", self.exec_mode).unwrap();
        writeln!(w, "log_every = {}", self.log_every).unwrap();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn every_key_is_written() {
        let text = TrainConfig::default().to_text();
        for key in CONFIG_KEYS {
            assert!(text.lines().any(|l| l.starts_with(&format!("{key} = "))), "{key}");
        }
    }

    #[test]
    fn parse_with_comments_and_overrides() {
        let cfg = TrainConfig::parse("# run\nalpha = 0.5\nh=2  # short chunks\n\nactor_hidden = 16, 16\n").unwrap();
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.h, 2);
        assert_eq!(cfg.actor_hidden, vec![16, 16]);
        let cfg = cfg.with_overrides(&["alpha=0", "exec_mode=receding_one"]).unwrap();
        assert_eq!(cfg.alpha, 0.0);
        assert_eq!(cfg.exec_mode, ExecMode::RecedingOne);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = TrainConfig::parse("alpah = 1").unwrap_err().to_string();
        assert!(err.contains("alpah") && err.contains("noise_scale"), "{err}");
        assert!(TrainConfig::default().with_overrides(&["bogus=1"]).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        for bad in ["gamma = 1", "tau = 0", "h = 0", "batch_size = 0", "lr_actor = -1", "gamma = x"] {
            assert!(TrainConfig::parse(bad).is_err(), "{bad}");
        }
        assert!(TrainConfig::parse("alpha = 1\nalpha = 2").is_err());
        assert!(TrainConfig::parse("n_ood = 0").is_err());
        assert!(TrainConfig::parse("n_ood = 0\nalpha = 0").is_ok());
    }

    #[test]
    fn float_text_is_exact() {
        let mut cfg = TrainConfig::default();
        cfg.lr_critic = 0.1 + 0.2;
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap().lr_critic, 0.1 + 0.2);
    }
}
