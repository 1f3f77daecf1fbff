//! CSV table and SVG charts comparing evaluated runs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use super::EvalReport;
use crate::error::{Error, Result};
use crate::pipeline::MetricsRecord;

/// Everything `compare_report` needs from one run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub run_id: String,
    pub reports: Vec<EvalReport>,
    pub log: Vec<MetricsRecord>,
}

/// Rendered report files, by file name.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub files: Vec<(String, String)>,
}

impl ReportFiles {
    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_str())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, content) in &self.files {
            let p = dir.join(name);
            std::fs::write(&p, content).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}

fn num(x: f64) -> String {
    format!("{x:.6}")
}

pub const CSV_HEADER: &str = "run_id,env_id,mode,n_trials,sr,ct,seed";

fn csv(runs: &[RunSummary]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let mut any_ood = false;
    for r in runs {
        for e in &r.reports {
            any_ood |= e.mode.is_ood();
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.run_id,
                e.env_id,
                e.mode,
                e.n_trials,
                num(e.sr),
                e.ct.map(num).unwrap_or_default(),
                e.seed
            )
            .unwrap();
        }
    }
    if !any_ood {
        out.push_str("# no OOD evaluations in these runs\n");
    }
    out
}

const W: f64 = 480.0;
const H: f64 = 300.0;
const PAD: f64 = 50.0;
const COLORS: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    )
    .unwrap();
    writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>").unwrap();
    writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>", W / 2.0, esc(title)).unwrap();
    writeln!(
        s,
        "<line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        H - PAD,
        W - 10.0,
        H - PAD
    )
    .unwrap();
    writeln!(s, "<line x1=\"{PAD}\" y1=\"30\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>", H - PAD).unwrap();
    s
}

fn esc(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bars: `groups` along x, one bar per series inside each group.
fn bar_chart(title: &str, groups: &[String], series: &[(String, Vec<Option<f64>>)], y_max: f64) -> String {
    let mut s = svg_open(title);
    let plot_h = H - PAD - 30.0;
    let gw = (W - PAD - 10.0) / groups.len().max(1) as f64;
    let bw = gw * 0.8 / series.len().max(1) as f64;
    for (gi, g) in groups.iter().enumerate() {
        let gx = PAD + gi as f64 * gw;
        writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\">{}</text>",
            gx + gw / 2.0,
            H - PAD + 15.0,
            esc(g)
        )
        .unwrap();
        for (si, (_, vals)) in series.iter().enumerate() {
            let Some(v) = vals[gi] else { continue };
            let bh = if y_max > 0.0 { plot_h * v / y_max } else { 0.0 };
            writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
                gx + gw * 0.1 + si as f64 * bw,
                H - PAD - bh,
                bw,
                bh,
                COLORS[si % COLORS.len()]
            )
            .unwrap();
        }
    }
    for (si, (name, _)) in series.iter().enumerate() {
        let y = H - 25.0;
        let x = PAD + si as f64 * 110.0;
        writeln!(s, "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"10\" height=\"10\" fill=\"{}\"/>", COLORS[si % COLORS.len()])
            .unwrap();
        writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\">{}</text>", x + 14.0, y + 9.0, esc(name)).unwrap();
    }
    writeln!(s, "<text x=\"{}\" y=\"34\" text-anchor=\"end\" font-size=\"10\">{}</text>", PAD - 4.0, num(y_max)).unwrap();
    s.push_str("</svg>\n");
    s
}

fn line_chart(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut s = svg_open(title);
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - PAD - 10.0);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - PAD - 30.0);
    for (si, (name, p)) in series.iter().enumerate() {
        let path: Vec<String> = p.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{}\" points=\"{}\"/>",
            COLORS[si % COLORS.len()],
            path.join(" ")
        )
        .unwrap();
        writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" fill=\"{}\">{}</text>",
            PAD + si as f64 * 110.0,
            H - 16.0,
            COLORS[si % COLORS.len()],
            esc(name)
        )
        .unwrap();
    }
    writeln!(s, "<text x=\"{}\" y=\"34\" text-anchor=\"end\" font-size=\"10\">{}</text>", PAD - 4.0, num(y1)).unwrap();
    writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"10\">{}</text>", PAD - 4.0, H - PAD, num(y0))
        .unwrap();
    s.push_str("</svg>\n");
    s
}

/// Renders `report.csv` plus, per env, an SR chart (IND and, when present,
/// OOD), a CT chart (omitted when some run never succeeded on that env) and
/// a TD-error curve chart for runs with logs.
pub fn compare_report(runs: &[RunSummary]) -> Result<ReportFiles> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one run".into()));
    }
    for r in runs {
        let envs: BTreeSet<&str> = r.reports.iter().map(|e| e.env_id.as_str()).collect();
        if envs.len() > 1 {
            return Err(Error::InvalidArgument(format!(
                "run '{}' mixes env ids {envs:?} in one chart",
                r.run_id
            )));
        }
    }
    let mut files = vec![("report.csv".to_string(), csv(runs))];
    let envs: BTreeSet<&str> = runs.iter().flat_map(|r| r.reports.iter().map(|e| e.env_id.as_str())).collect();
    for env in envs {
        let in_env: Vec<&RunSummary> = runs
            .iter()
            .filter(|r| r.reports.iter().any(|e| e.env_id == env))
            .collect();
        fn pick<'a>(r: &'a RunSummary, env: &str, ood: bool) -> Option<&'a EvalReport> {
            r.reports.iter().find(|e| e.mode.is_ood() == ood && e.env_id == env)
        }
        let has_ood = in_env.iter().any(|r| pick(r, env, true).is_some());
        let groups: Vec<String> = in_env.iter().map(|r| r.run_id.clone()).collect();
        let mut series = vec![("IND".to_string(), in_env.iter().map(|r| pick(r, env, false).map(|e| e.sr)).collect())];
        if has_ood {
            series.push(("OOD".to_string(), in_env.iter().map(|r| pick(r, env, true).map(|e| e.sr)).collect()));
        }
        files.push((format!("sr_{env}.svg"), bar_chart(&format!("success rate: {env}"), &groups, &series, 1.0)));

        let cts: Vec<Option<f64>> = in_env.iter().map(|r| pick(r, env, false).and_then(|e| e.ct)).collect();
        if cts.iter().all(Option::is_some) {
            let y_max = cts.iter().flatten().copied().fold(0.0, f64::max);
            files.push((
                format!("ct_{env}.svg"),
                bar_chart(&format!("cycle time: {env}"), &groups, &[("IND".to_string(), cts)], y_max),
            ));
        }

        let curves: Vec<(String, Vec<(f64, f64)>)> = in_env
            .iter()
            .filter_map(|r| {
                let p: Vec<(f64, f64)> = r
                    .log
                    .iter()
                    .filter_map(|m| m.td_error.map(|td| (m.step as f64, td)))
                    .collect();
                (!p.is_empty()).then(|| (r.run_id.clone(), p))
            })
            .collect();
        if !curves.is_empty() {
            files.push((format!("curves_{env}.svg"), line_chart(&format!("TD error: {env}"), &curves)));
        }
    }
    Ok(ReportFiles { files })
}
