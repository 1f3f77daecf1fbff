//! Line-delimited dataset files.
//!
//! Record 0 is the header; records 1..=episode_count are episodes. Every
//! float is written as decimal text with 17 significant digits, so a
//! save/load cycle reproduces each value bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use super::{validate_episode, DatasetMeta, Episode, InitMode, OfflineDataset, Step};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    env_id: String,
    #[serde(rename = "S")]
    s: usize,
    #[serde(rename = "A")]
    a: usize,
    h: usize,
    gamma: f64,
    episode_count: usize,
    #[serde(default)]
    upsample_k: usize,
    #[serde(default)]
    expert_success_rate: Option<f64>,
    #[serde(default)]
    warnings: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeRecord {
    init_mode: InitMode,
    success: bool,
    steps: Vec<StepRecord>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    state: Vec<f64>,
    action: Vec<f64>,
    reward: f64,
    done: bool,
}

fn num(out: &mut String, v: f64) {
    // {:.16e} keeps 17 significant digits
    write!(out, "{v:.16e}").expect("write to String");
}

fn nums(out: &mut String, vs: &[f64]) {
    out.push('[');
    for (i, &v) in vs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        num(out, v);
    }
    out.push(']');
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization")
}

pub fn render_dataset(ds: &OfflineDataset) -> Result<String> {
    if !ds.gamma.is_finite() {
        return Err(Error::DataFormat("gamma is not finite".into()));
    }
    let mut out = String::new();
    write!(
        out,
        "{{\"format_version\":{},\"env_id\":{},\"S\":{},\"A\":{},\"h\":{},\"gamma\":",
        DATASET_FORMAT_VERSION,
        json_str(&ds.env_id),
        ds.state_dim,
        ds.action_dim,
        ds.h
    )
    .expect("write to String");
    num(&mut out, ds.gamma);
    write!(
        out,
        ",\"episode_count\":{},\"upsample_k\":{},\"expert_success_rate\":",
        ds.episodes().len(),
        ds.meta.upsample_k
    )
    .expect("write to String");
    match ds.meta.expert_success_rate {
        Some(v) if v.is_finite() => num(&mut out, v),
        _ => out.push_str("null"),
    }
    out.push_str(",\"warnings\":[");
    let warnings: Vec<String> = ds.meta.warnings.iter().map(|w| json_str(w)).collect();
    out.push_str(&warnings.join(","));
    out.push_str("]}\n");

    for (e, ep) in ds.episodes().iter().enumerate() {
        validate_episode(ep, ds.state_dim, ds.action_dim, e + 1)?;
        write!(
            out,
            "{{\"init_mode\":\"{}\",\"success\":{},\"steps\":[",
            ep.init_mode, ep.success
        )
        .expect("write to String");
        for (t, step) in ep.steps.iter().enumerate() {
            if t > 0 {
                out.push(',');
            }
            out.push_str("{\"state\":");
            nums(&mut out, &step.state);
            out.push_str(",\"action\":");
            nums(&mut out, &step.action);
            out.push_str(",\"reward\":");
            num(&mut out, step.reward);
            write!(out, ",\"done\":{}}}", step.done).expect("write to String");
        }
        out.push_str("]}\n");
    }
    Ok(out)
}

pub fn save_dataset(ds: &OfflineDataset, path: &Path) -> Result<()> {
    let text = render_dataset(ds)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<OfflineDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

fn corrupt(record: usize, reason: impl Into<String>) -> Error {
    Error::CorruptRecord {
        record,
        reason: reason.into(),
    }
}

pub fn parse_dataset(text: &str) -> Result<OfflineDataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines.next().ok_or_else(|| corrupt(0, "missing header"))?;

    // Check the version before the schema so unknown versions are reported
    // as such rather than as schema errors.
    let raw: serde_json::Value = serde_json::from_str(head).map_err(|e| corrupt(0, e.to_string()))?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| corrupt(0, "missing format_version"))?;
    if version != u64::from(DATASET_FORMAT_VERSION) {
        return Err(Error::VersionMismatch {
            record: 0,
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| corrupt(0, e.to_string()))?;
    debug_assert_eq!(header.format_version, DATASET_FORMAT_VERSION);
    if header.h == 0 || !(0.0..=1.0).contains(&header.gamma) {
        return Err(corrupt(0, "h must be >= 1 and gamma in [0, 1]"));
    }

    let mut episodes = Vec::with_capacity(header.episode_count);
    for (record, (_, line)) in (1..).zip(lines) {
        if record > header.episode_count {
            return Err(corrupt(record, "more episode records than episode_count"));
        }
        let rec: EpisodeRecord = serde_json::from_str(line).map_err(|e| corrupt(record, e.to_string()))?;
        let ep = Episode {
            env_id: header.env_id.clone(),
            init_mode: rec.init_mode,
            success: rec.success,
            steps: rec
                .steps
                .into_iter()
                .map(|s| Step {
                    state: s.state,
                    action: s.action,
                    reward: s.reward,
                    done: s.done,
                })
                .collect(),
        };
        validate_episode(&ep, header.s, header.a, record)?;
        episodes.push(ep);
    }
    if episodes.len() != header.episode_count {
        return Err(corrupt(
            episodes.len() + 1,
            format!(
                "header announces {} episodes, file holds {}",
                header.episode_count,
                episodes.len()
            ),
        ));
    }

    OfflineDataset::new(
        header.env_id,
        header.s,
        header.a,
        header.h,
        header.gamma,
        episodes,
        DatasetMeta {
            upsample_k: header.upsample_k,
            expert_success_rate: header.expert_success_rate,
            warnings: header.warnings,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> OfflineDataset {
        let ep = Episode {
            env_id: "toy".into(),
            init_mode: InitMode::Random,
            steps: vec![
                Step {
                    state: vec![0.1, 1.0 / 3.0],
                    action: vec![-0.5],
                    reward: 0.0,
                    done: false,
                },
                Step {
                    state: vec![0.2, 2.0 / 3.0],
                    action: vec![1e-310],
                    reward: 1.0,
                    done: true,
                },
            ],
            success: true,
        };
        OfflineDataset::new("toy", 2, 1, 2, 0.99, vec![ep.clone(), ep], DatasetMeta::default()).unwrap()
    }

    #[test]
    fn roundtrip_identity() {
        let ds = tiny();
        let text = render_dataset(&ds).unwrap();
        let back = parse_dataset(&text).unwrap();
        assert_eq!(back, ds);
        assert!(back.verify_chunks());
    }

    #[test]
    fn floats_use_seventeen_digits() {
        let text = render_dataset(&tiny()).unwrap();
        assert!(text.contains("3.3333333333333331e-1"), "{text}");
        assert!(text.contains("\"gamma\":9.8999999999999999e-1"));
    }

    #[test]
    fn short_state_is_dimension_error_at_record() {
        let text = render_dataset(&tiny()).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = lines[2].replacen("[2.0000000000000001e-1,6.6666666666666663e-1]", "[2.0000000000000001e-1]", 1);
        let err = parse_dataset(&lines.join("\n")).unwrap_err();
        assert!(
            matches!(err, Error::DimensionMismatch { record: 2, field: "state", expected: 2, found: 1 }),
            "{err:?}"
        );
    }

    #[test]
    fn unknown_version_rejected() {
        let text = render_dataset(&tiny()).unwrap().replacen("\"format_version\":1", "\"format_version\":7", 1);
        assert!(matches!(
            parse_dataset(&text),
            Err(Error::VersionMismatch { record: 0, found: 7, expected: 1 })
        ));
    }

    #[test]
    fn garbage_record_is_corrupt() {
        let text = render_dataset(&tiny()).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[1] = "{not json";
        assert!(matches!(
            parse_dataset(&lines.join("\n")),
            Err(Error::CorruptRecord { record: 1, .. })
        ));
    }

    #[test]
    fn missing_episode_is_corrupt() {
        let text = render_dataset(&tiny()).unwrap();
        let lines: Vec<&str> = text.lines().take(2).collect();
        assert!(matches!(
            parse_dataset(&lines.join("\n")),
            Err(Error::CorruptRecord { record: 2, .. })
        ));
    }
}
