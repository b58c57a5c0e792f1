//! CSV tables and small SVG charts from finished run directories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::container::write_atomic;
use super::pipeline::{probe_summary_path, read_probe_summary, read_train_log, train_log_path, ProbeSummary};

const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn frame(title: &str, xlabel: &str, ylabel: &str, y: (f64, f64)) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <line x1=\"{MARGIN}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{MARGIN}\" y1=\"{MARGIN}\" x2=\"{MARGIN}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        esc(title),
        H - MARGIN,
        W - MARGIN,
        H - MARGIN,
        H - MARGIN,
        W / 2.0,
        H - 8.0,
        esc(xlabel),
        H / 2.0,
        H / 2.0,
        esc(ylabel),
    );
    for (v, py) in [(y.0, H - MARGIN), (y.1, MARGIN)] {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>", MARGIN - 4.0, py + 4.0, fmt_tick(v));
    }
    s
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, n) in names.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let c = COLORS[i % COLORS.len()];
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{c}\"/><text x=\"{}\" y=\"{}\">{}</text>",
            W - MARGIN - 120.0,
            y - 9.0,
            W - MARGIN - 106.0,
            y,
            esc(n)
        );
    }
}

/// Polylines over a shared linear axis (or log₁₀ x when `log_x`).
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series], log_x: bool) -> String {
    let tx = |x: f64| if log_x { x.max(1e-12).log10() } else { x };
    let x = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| tx(p.0))));
    let y = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let px = |v: f64| MARGIN + (tx(v) - x.0) / (x.1 - x.0) * (W - 2.0 * MARGIN);
    let py = |v: f64| H - MARGIN - (v - y.0) / (y.1 - y.0) * (H - 2.0 * MARGIN);
    let mut s = frame(title, xlabel, ylabel, y);
    for (i, sr) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let pts: Vec<String> = sr
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(a, b)| format!("{:.1},{:.1}", px(a), py(b)))
            .collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"1.5\" points=\"{}\"/>", pts.join(" "));
        if sr.points.len() <= 32 {
            for p in &pts {
                let (a, b) = p.split_once(',').expect("x,y");
                let _ = writeln!(s, "<circle cx=\"{a}\" cy=\"{b}\" r=\"2.5\" fill=\"{c}\"/>");
            }
        }
    }
    for (v, lab) in [(x.0, x.0), (x.1, x.1)] {
        let shown = if log_x { 10f64.powf(lab) } else { lab };
        let xpos = MARGIN + (v - x.0) / (x.1 - x.0) * (W - 2.0 * MARGIN);
        let _ = writeln!(s, "<text x=\"{xpos}\" y=\"{}\" text-anchor=\"middle\">{}</text>", H - MARGIN + 14.0, fmt_tick(shown));
    }
    legend(&mut s, &series.iter().map(|s| s.name.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Grouped bars: one group per category, one bar per series.
pub fn bar_chart(title: &str, xlabel: &str, ylabel: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let top = series.iter().flat_map(|s| s.1.iter().copied()).fold(0.0f64, f64::max).max(1e-12);
    let y = (0.0, top);
    let mut s = frame(title, xlabel, ylabel, y);
    let group = (W - 2.0 * MARGIN) / categories.len().max(1) as f64;
    let bar = group * 0.8 / series.len().max(1) as f64;
    for (g, cat) in categories.iter().enumerate() {
        let x0 = MARGIN + g as f64 * group + group * 0.1;
        for (i, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(g).copied().unwrap_or(0.0).max(0.0);
            let h = v / top * (H - 2.0 * MARGIN);
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
                x0 + i as f64 * bar,
                H - MARGIN - h,
                bar,
                h,
                COLORS[i % COLORS.len()]
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            x0 + group * 0.4,
            H - MARGIN + 14.0,
            esc(cat)
        );
    }
    legend(&mut s, &series.iter().map(|s| s.0.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

fn run_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Files written by [`run_report`].
#[derive(Clone, Debug, Default)]
pub struct ReportFiles {
    pub written: Vec<PathBuf>,
}

/// Gate weights, layerwise probe curve, K sweep and pretraining loss from
/// every run directory that has them.
pub fn run_report(run_dirs: &[PathBuf], out: &Path) -> Result<ReportFiles> {
    std::fs::create_dir_all(out)?;
    let mut probes: Vec<(String, ProbeSummary)> = Vec::new();
    let mut logs = Vec::new();
    for d in run_dirs {
        let name = run_name(d);
        let sp = probe_summary_path(d);
        if sp.exists() {
            probes.push((name.clone(), read_probe_summary(&sp)?));
        }
        let lp = train_log_path(d);
        if lp.exists() {
            logs.push((name, read_train_log(&lp)?));
        }
    }
    if probes.is_empty() && logs.is_empty() {
        return Err(Error::EmptyInput("no probe_summary.json or train_log.jsonl in the given runs".into()));
    }
    let mut files = ReportFiles::default();
    let mut put = |file: &str, body: String| -> Result<()> {
        let p = out.join(file);
        write_atomic(&p, body.as_bytes())?;
        files.written.push(p);
        Ok(())
    };

    if !probes.is_empty() {
        let mut csv = String::from("run,layer,alpha\n");
        for (n, p) in &probes {
            for (l, a) in p.gate.alpha.iter().enumerate() {
                let _ = writeln!(csv, "{},{l},{a}", csv_field(n));
            }
        }
        put("gate_weights.csv", csv)?;
        let layers = probes.iter().map(|p| p.1.layers).max().unwrap_or(0);
        let cats: Vec<String> = (0..layers).map(|l| l.to_string()).collect();
        let series: Vec<(String, Vec<f64>)> = probes.iter().map(|(n, p)| (n.clone(), p.gate.alpha.clone())).collect();
        put("gate_weights.svg", bar_chart("Gate weights", "layer", "alpha", &cats, &series))?;

        let mut csv = String::from("run,layer,test\n");
        for (n, p) in &probes {
            for (l, v) in p.layerwise.iter().enumerate() {
                let _ = writeln!(csv, "{},{l},{v}", csv_field(n));
            }
        }
        put("probe_curve.csv", csv)?;
        let series: Vec<Series> = probes
            .iter()
            .map(|(n, p)| Series {
                name: n.clone(),
                points: p.layerwise.iter().enumerate().map(|(l, &v)| (l as f64, v)).collect(),
            })
            .collect();
        let metric = probes[0].1.metric.clone();
        put("probe_curve.svg", line_chart("Layerwise linear probe", "layer", &metric, &series, false))?;

        let swept: Vec<&(String, ProbeSummary)> = probes.iter().filter(|p| !p.1.k_sweep.is_empty()).collect();
        if !swept.is_empty() {
            let mut csv = String::from("run,k,test\n");
            for (n, p) in &swept {
                for kp in &p.k_sweep {
                    let _ = writeln!(csv, "{},{},{}", csv_field(n), kp.k, kp.test);
                }
            }
            put("k_sweep.csv", csv)?;
            let series: Vec<Series> = swept
                .iter()
                .map(|(n, p)| Series {
                    name: n.clone(),
                    points: p.k_sweep.iter().map(|kp| (kp.k as f64, kp.test)).collect(),
                })
                .collect();
            put("k_sweep.svg", line_chart("Prototype count", "K", &metric, &series, true))?;
        }
    }

    if !logs.is_empty() {
        let mut csv = String::from("run,step,total,global,local,lr,lambda\n");
        for (n, log) in &logs {
            for r in log {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{}",
                    csv_field(n),
                    r.step,
                    r.loss.total,
                    r.loss.global,
                    r.loss.local,
                    r.lr,
                    r.lambda
                );
            }
        }
        put("loss.csv", csv)?;
        let series: Vec<Series> = logs
            .iter()
            .map(|(n, log)| Series {
                name: n.clone(),
                points: log.iter().map(|r| (r.step as f64, r.loss.total)).collect(),
            })
            .collect();
        put("loss.svg", line_chart("Pretraining loss", "step", "loss", &series, false))?;
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let s = line_chart(
            "t<1>",
            "x",
            "y",
            &[Series {
                name: "a&b".into(),
                points: vec![(1.0, 0.5), (10.0, 0.7), (100.0, f64::NAN)],
            }],
            true,
        );
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("t&lt;1&gt;") && s.contains("a&amp;b"));
        assert_eq!(s.matches("<circle").count(), 2);
        let b = bar_chart("g", "l", "a", &["0".into(), "1".into()], &[("r".into(), vec![0.25, 0.75])]);
        assert_eq!(b.matches("<rect").count(), 1 + 2 + 1);
    }

    #[test]
    fn empty_runs_are_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(run_report(&[dir.path().to_path_buf()], &dir.path().join("r")), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("q\""), "\"q\"\"\"");
    }
}
