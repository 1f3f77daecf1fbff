use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use chunkrl::env::{collect_demos, env_spec, CollectConfig, ExecMode, ResetMode, ENV_IDS};
use chunkrl::eval::{
    compare_report, diversity_experiment, evaluate, render_diversity_table, value_propagation_probe,
    DiversityConfig, ProbeConfig, RunSummary, TEST_SALT,
};
use chunkrl::pipeline::{parse_metrics, render_metrics, train_bc, train_offline_rl, Checkpoint, EvalEntry};
use chunkrl::{load_dataset, save_dataset, EvalReport, InitMode, TrainConfig};
use clap::{Args, Parser, Subcommand};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_ABORT: u8 = 3;

const DATASET_FILE: &str = "dataset.jsonl";
const CONFIG_FILE: &str = "config.txt";
const METRICS_FILE: &str = "metrics.jsonl";
const EVAL_FILE: &str = "eval.json";
const REPORT_DIR: &str = "report";

#[derive(Parser)]
#[command(name = "chunkrl", version, about = "Chunked offline RL: demos, BC, chunked CalQL, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutArgs {
    /// Output directory. Defaults to `$CHUNKRL_OUT/<subcommand>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root used when `--out` is absent.
    #[arg(long, env = "CHUNKRL_OUT", default_value = "runs", hide_env_values = true)]
    out_root: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Record scripted-expert demonstrations.
    Collect {
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 30)]
        episodes: usize,
        #[arg(long, default_value_t = 5)]
        upsample: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "random")]
        init_mode: InitMode,
        #[arg(long, default_value_t = 4)]
        h: usize,
        #[arg(long, default_value_t = 0.99)]
        gamma: f64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Stage 1: behavior cloning.
    TrainBc {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Stage 2: chunked CalQL from a BC checkpoint.
    TrainRl {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bc: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Score a checkpoint's actor.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// IND_random, IND_fixed or OOD. Repeatable.
        #[arg(long = "mode", default_value = "IND_random")]
        modes: Vec<ResetMode>,
        #[arg(long, default_value_t = 40)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        exec: Option<ExecMode>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// CSV and SVG comparison of run directories.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Value-propagation probe on chain-sparse.
    Probe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        hs: Vec<usize>,
        #[arg(long, default_value_t = 20_000)]
        budget: usize,
        #[arg(long, default_value_t = 50)]
        check_every: usize,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Fixed- vs random-init dataset experiment.
    Diversity {
        #[arg(long, default_value = "point-reach-2d")]
        env: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 30)]
        episodes: usize,
        #[arg(long, default_value_t = 5)]
        upsample: usize,
        #[arg(long, default_value_t = 40)]
        trials: usize,
        #[command(flatten)]
        out: OutArgs,
    },
}

/// Errors the user can fix by changing the invocation.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<chunkrl::Error>() {
            use chunkrl::Error as E;
            return match e {
                E::InvalidConfig(_) | E::InvalidArgument(_) | E::UnknownEnv(_) | E::UnsupportedInitMode { .. } => {
                    EXIT_USAGE
                }
                E::TrainingAborted { .. } | E::NonFinite(_) => EXIT_ABORT,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

impl OutArgs {
    /// Resolves and creates the output directory, refusing to reuse a
    /// non-empty one without `--force`.
    fn prepare(&self, default_name: &str) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| self.out_root.join(default_name));
        if dir.exists() {
            let non_empty = fs::read_dir(&dir)
                .with_context(|| format!("reading {}", dir.display()))?
                .next()
                .is_some();
            if non_empty && !self.force {
                return Err(usage(format!(
                    "output directory {} is not empty; pass --force to overwrite",
                    dir.display()
                )));
            }
        }
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let base = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("config {}", p.display()))?,
            None => TrainConfig::default(),
        };
        Ok(base.with_overrides(&self.overrides)?)
    }
}

fn write(path: &Path, content: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

fn json_lines<T: serde::Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| serde_json::to_string(x).expect("serializable") + "\n")
        .collect()
}

/// Resolves a dataset argument that may be a file or a `collect` directory.
fn dataset_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(DATASET_FILE)
    } else {
        p.to_path_buf()
    }
}

fn evaluate_modes(
    ckpt: &Checkpoint,
    modes: &[ResetMode],
    trials: usize,
    seed: u64,
    exec: ExecMode,
) -> Result<Vec<EvalReport>> {
    let spec = env_spec(&ckpt.env_id)?;
    let mut out = Vec::new();
    for &mode in modes {
        if mode.is_ood() && spec.ood_region.is_none() {
            continue;
        }
        out.push(evaluate(&ckpt.actor, &ckpt.env_id, trials, mode, seed, exec)?);
    }
    Ok(out)
}

fn summary_line(r: &EvalReport) -> String {
    format!(
        "{} {}: SR {}/{} ({:.3}), CT {}",
        r.env_id,
        r.mode,
        r.successes,
        r.n_trials,
        r.sr,
        r.ct.map_or("n/a".to_string(), |c| format!("{c:.2}"))
    )
}

fn load_run(dir: &Path) -> Result<RunSummary> {
    let run_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| usage(format!("cannot name run {}", dir.display())))?
        .to_string();
    let eval_path = dir.join(EVAL_FILE);
    let text = fs::read_to_string(&eval_path).with_context(|| format!("reading {}", eval_path.display()))?;
    let reports: Vec<EvalReport> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", eval_path.display()))?;
    let metrics = dir.join(METRICS_FILE);
    let log = if metrics.exists() {
        parse_metrics(&fs::read_to_string(&metrics).with_context(|| format!("reading {}", metrics.display()))?)?
    } else {
        Vec::new()
    };
    Ok(RunSummary { run_id, reports, log })
}

fn write_report(run: RunSummary, dir: &Path) -> Result<()> {
    compare_report(&[run])?.write(&dir.join(REPORT_DIR))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Collect {
            env,
            episodes,
            upsample,
            seed,
            init_mode,
            h,
            gamma,
            out,
        } => {
            if !ENV_IDS.contains(&env.as_str()) {
                return Err(usage(format!("unknown env '{env}'; valid: {}", ENV_IDS.join(", "))));
            }
            let dir = out.prepare("collect")?;
            let ds = collect_demos(
                &env,
                &CollectConfig {
                    n_episodes: episodes,
                    init_mode,
                    upsample_k: upsample,
                    seed,
                    h,
                    gamma,
                },
            )?;
            let path = dir.join(DATASET_FILE);
            save_dataset(&ds, &path)?;
            let rate = ds.meta.expert_success_rate.unwrap_or(f64::NAN);
            println!(
                "{}: {} episodes, {} chunks, expert success {:.3}",
                path.display(),
                ds.episodes().len(),
                ds.chunks().len(),
                rate
            );
            for w in &ds.meta.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::TrainBc { data, cfg, out } => {
            let cfg = cfg.resolve()?;
            let ds = load_dataset(&dataset_path(&data))?;
            let dir = out.prepare("train-bc")?;
            write(&dir.join(CONFIG_FILE), cfg.to_text())?;
            let res = train_bc(&ds, &cfg);
            if let Err(chunkrl::Error::TrainingAborted { last_good: Some(ck), .. }) = &res {
                ck.save(&dir.join("aborted.ckpt"))?;
            }
            let bc = res?;
            write(&dir.join(METRICS_FILE), render_metrics(&bc.log))?;
            bc.checkpoint.save(&dir.join("bc.ckpt"))?;
            let reports = evaluate_modes(
                &bc.checkpoint,
                &[ResetMode::IndRandom, ResetMode::Ood],
                cfg.eval_trials,
                cfg.seed ^ TEST_SALT,
                cfg.exec_mode,
            )?;
            write(&dir.join(EVAL_FILE), serde_json::to_string_pretty(&reports)? + "\n")?;
            for r in &reports {
                println!("{}", summary_line(r));
            }
            write_report(load_run(&dir)?, &dir)?;
            println!("checkpoint {}", bc.checkpoint.checksum());
        }
        Command::TrainRl { data, bc, cfg, out } => {
            let cfg = cfg.resolve()?;
            let ds = load_dataset(&dataset_path(&data))?;
            let bc_path = if bc.is_dir() { bc.join("bc.ckpt") } else { bc };
            let bc = Checkpoint::load(&bc_path)?;
            let dir = out.prepare("train-rl")?;
            write(&dir.join(CONFIG_FILE), cfg.to_text())?;
            let res = train_offline_rl(&ds, &bc, &cfg);
            if let Err(chunkrl::Error::TrainingAborted { last_good: Some(ck), .. }) = &res {
                ck.save(&dir.join("aborted.ckpt"))?;
            }
            let rl = res?;
            write(&dir.join(METRICS_FILE), render_metrics(&rl.log))?;
            write(&dir.join("evals.jsonl"), json_lines::<EvalEntry>(&rl.evals))?;
            rl.last.save(&dir.join("last.ckpt"))?;
            if let Some(best) = &rl.best {
                best.save(&dir.join("best.ckpt"))?;
            }
            let selected = rl.selected();
            let reports = evaluate_modes(
                selected,
                &[ResetMode::IndRandom, ResetMode::Ood],
                cfg.eval_trials,
                cfg.seed ^ TEST_SALT,
                cfg.exec_mode,
            )?;
            write(&dir.join(EVAL_FILE), serde_json::to_string_pretty(&reports)? + "\n")?;
            println!("selected checkpoint: step {}", selected.step);
            for r in &reports {
                println!("{}", summary_line(r));
            }
            write_report(load_run(&dir)?, &dir)?;
        }
        Command::Eval {
            checkpoint,
            modes,
            trials,
            seed,
            exec,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let dir = out.prepare("eval")?;
            let exec = exec.unwrap_or(ck.config.exec_mode);
            let reports = evaluate_modes(&ck, &modes, trials, seed, exec)?;
            if reports.is_empty() {
                return Err(usage(format!("env '{}' supports none of the requested modes", ck.env_id)));
            }
            write(&dir.join(EVAL_FILE), serde_json::to_string_pretty(&reports)? + "\n")?;
            for r in &reports {
                println!("{}", summary_line(r));
            }
        }
        Command::Report { runs, out } => {
            let summaries = runs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
            let dir = out.prepare("report")?;
            let files = compare_report(&summaries)?;
            files.write(&dir)?;
            for (name, _) in &files.files {
                println!("{}", dir.join(name).display());
            }
        }
        Command::Probe {
            cfg,
            hs,
            budget,
            check_every,
            episodes,
            seed,
            out,
        } => {
            let train = cfg.resolve()?;
            let dir = out.prepare("probe")?;
            write(&dir.join(CONFIG_FILE), train.to_text())?;
            let res = value_propagation_probe(&ProbeConfig {
                hs,
                budget,
                check_every,
                n_episodes: episodes,
                seed,
                train,
            })?;
            write(&dir.join("probe.json"), serde_json::to_string_pretty(&res)? + "\n")?;
            let mut csv = String::from("h,step,q_start\n");
            for c in &res.curves {
                for (s, q) in &c.curve {
                    writeln!(csv, "{},{},{:.9}", c.h, s, q)?;
                }
            }
            write(&dir.join("probe.csv"), csv)?;
            println!("true start value {:.6}, threshold {:.6}", res.true_value, res.threshold);
            for c in &res.curves {
                match c.steps_to_threshold {
                    Some(s) => println!("h={}: {s} steps", c.h),
                    None => println!("h={}: censored at {budget} steps", c.h),
                }
            }
        }
        Command::Diversity {
            env,
            cfg,
            seeds,
            episodes,
            upsample,
            trials,
            out,
        } => {
            let train = cfg.resolve()?;
            let dir = out.prepare("diversity")?;
            write(&dir.join(CONFIG_FILE), train.to_text())?;
            let table = diversity_experiment(&DiversityConfig {
                env_id: env,
                n_episodes: episodes,
                upsample_k: upsample,
                n_trials: trials,
                seeds,
                train,
            })?;
            write(&dir.join("diversity.json"), serde_json::to_string_pretty(&table)? + "\n")?;
            let text = render_diversity_table(&table);
            write(&dir.join("table.txt"), &text)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::{anyhow, bail};

    #[test]
    fn exit_codes_follow_error_kind() {
        let abort = anyhow!(chunkrl::Error::TrainingAborted {
            step: 3,
            batch_id: 3,
            reason: "nan".into(),
            last_good: None,
        });
        assert_eq!(exit_code(&abort), EXIT_ABORT);
        let data = anyhow!(chunkrl::Error::DataFormat("x".into())).context("loading");
        assert_eq!(exit_code(&data), EXIT_DATA);
        assert_eq!(exit_code(&usage("bad")), EXIT_USAGE);
        assert_eq!(exit_code(&anyhow!(chunkrl::Error::InvalidConfig("k".into()))), EXIT_USAGE);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn bail_is_data_error() {
        let e: anyhow::Error = (|| -> Result<()> { bail!("unreadable") })().unwrap_err();
        assert_eq!(exit_code(&e), EXIT_DATA);
    }
}
