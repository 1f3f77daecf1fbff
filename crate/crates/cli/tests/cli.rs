use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 9] = [
    "bc_steps=30",
    "rl_steps=12",
    "batch_size=8",
    "critic_width=8",
    "critic_blocks=1",
    "actor_hidden=16",
    "n_ood=2",
    "eval_every=6",
    "eval_trials=3",
];

fn chunkrl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chunkrl"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CHUNKRL_OUT")
        .output()
        .expect("binary runs")
}

fn with_tiny<'a>(mut args: Vec<&'a str>) -> Vec<&'a str> {
    for o in TINY {
        args.push("--override");
        args.push(o);
    }
    args
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn collect(dir: &Path) {
    let out = chunkrl(
        &["collect", "--env", "point-reach-2d", "--episodes", "4", "--upsample", "5", "--seed", "1", "--out", "d"],
        dir,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn collect_writes_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    collect(tmp.path());
    let ds = chunkrl::load_dataset(&tmp.path().join("d/dataset.jsonl")).unwrap();
    assert_eq!(ds.episodes().len(), 4);
    assert_eq!(ds.env_id, "point-reach-2d");
}

#[test]
fn refuses_non_empty_output_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    collect(tmp.path());
    let again = chunkrl(&["collect", "--env", "point-reach-2d", "--episodes", "4", "--out", "d"], tmp.path());
    assert_eq!(code(&again), 1);
    let forced = chunkrl(
        &["collect", "--env", "point-reach-2d", "--episodes", "4", "--out", "d", "--force"],
        tmp.path(),
    );
    assert_eq!(code(&forced), 0);
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_chunkrl"))
        .args(["collect", "--env", "chain-sparse", "--episodes", "2"])
        .current_dir(tmp.path())
        .env("CHUNKRL_OUT", "elsewhere")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(tmp.path().join("elsewhere/collect/dataset.jsonl").exists());
}

#[test]
fn usage_and_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = chunkrl(&["collect", "--env", "nope", "--out", "x"], tmp.path());
    assert_eq!(code(&out), 1);
    let out = chunkrl(&["train-bc", "--bogus"], tmp.path());
    assert_eq!(code(&out), 1);

    collect(tmp.path());
    let out = chunkrl(&["train-bc", "--data", "d/dataset.jsonl", "--override", "alpah=1", "--out", "b"], tmp.path());
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("alpah") && err.contains("noise_scale"), "{err}");

    fs::write(tmp.path().join("broken.jsonl"), "not json\n").unwrap();
    let out = chunkrl(&["train-bc", "--data", "broken.jsonl", "--out", "b2"], tmp.path());
    assert_eq!(code(&out), 2);
    let out = chunkrl(&["eval", "--checkpoint", "missing.ckpt", "--out", "e"], tmp.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn pipeline_and_reproducible_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    collect(dir);
    fs::write(dir.join("c.cfg"), "# base\nalpha = 0.5\nseed = 3\n").unwrap();

    let out = chunkrl(
        &with_tiny(vec!["train-bc", "--data", "d/dataset.jsonl", "--config", "c.cfg", "--out", "bc"]),
        dir,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = chunkrl(
        &with_tiny(vec![
            "train-rl", "--data", "d/dataset.jsonl", "--bc", "bc/bc.ckpt", "--config", "c.cfg", "--override", "alpha=0",
            "--out", "rl",
        ]),
        dir,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    // snapshot = file config with every override applied on top
    let snap = chunkrl::TrainConfig::load(&dir.join("rl/config.txt")).unwrap();
    let mut expected = chunkrl::TrainConfig::load(&dir.join("c.cfg")).unwrap();
    expected = expected.with_overrides(&TINY).unwrap().with_overrides(&["alpha=0"]).unwrap();
    assert_eq!(snap, expected);

    for f in ["metrics.jsonl", "evals.jsonl", "last.ckpt", "best.ckpt", "eval.json", "report/report.csv"] {
        assert!(dir.join("rl").join(f).exists(), "{f}");
    }

    let out = chunkrl(&["eval", "--checkpoint", "rl/best.ckpt", "--trials", "4", "--mode", "OOD", "--out", "ev"], dir);
    assert_eq!(code(&out), 0);
    let reports: Vec<chunkrl::EvalReport> =
        serde_json::from_str(&fs::read_to_string(dir.join("ev/eval.json")).unwrap()).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].n_trials, 4);

    let out = chunkrl(&["report", "--runs", "bc", "rl", "--out", "r"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.join("r/report.csv")).unwrap();
    assert!(csv.starts_with("run_id,env_id,mode,n_trials,sr,ct,seed\n"));
    assert!(csv.lines().any(|l| l.starts_with("bc,")) && csv.lines().any(|l| l.starts_with("rl,")));

    // a run directory alone reproduces its own report byte for byte
    let out = chunkrl(&["report", "--runs", "rl", "--out", "again"], dir);
    assert_eq!(code(&out), 0);
    for entry in fs::read_dir(dir.join("rl/report")).unwrap() {
        let name = entry.unwrap().file_name();
        let a = fs::read(dir.join("rl/report").join(&name)).unwrap();
        let b = fs::read(dir.join("again").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?}");
    }
}
