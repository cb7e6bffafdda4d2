use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ltdyn_core::analysis::{extract_phase_trace, RunReport};
use ltdyn_core::engine::{RunResult, Termination};
use ltdyn_core::scenario::Scenario;

use crate::input::dump_scenario;

/// `phase_<a>_<b>.csv` with the dotted prefix shared by both channels removed.
pub fn phase_file_name(a: &str, b: &str) -> String {
    let sa: Vec<&str> = a.split('.').collect();
    let sb: Vec<&str> = b.split('.').collect();
    let mut k = 0;
    while k + 1 < sa.len() && k + 1 < sb.len() && sa[k] == sb[k] {
        k += 1;
    }
    let clean = |s: &[&str]| s.join(".").chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect::<String>();
    format!("phase_{}_{}.csv", clean(&sa[k..]), clean(&sb[k..]))
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn csv_writer(path: &Path) -> io::Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(io::Error::other)
}

fn write_timeseries(path: &Path, scenario: &Scenario, run: &RunResult) -> io::Result<()> {
    let ts = &run.output.series;
    let cols: Vec<usize> = if scenario.outputs.channels.is_empty() {
        (0..ts.names.len()).collect()
    } else {
        scenario.outputs.channels.iter().filter_map(|c| ts.index(c)).collect()
    };
    let mut w = csv_writer(path)?;
    let mut header = vec!["t_s".to_string()];
    header.extend(cols.iter().map(|&c| ts.names[c].clone()));
    w.write_record(&header)?;
    for k in 0..ts.t.len() {
        let mut row = vec![num(ts.t[k])];
        row.extend(cols.iter().map(|&c| num(ts.data[c][k])));
        w.write_record(&row)?;
    }
    w.flush()
}

fn write_events(path: &Path, run: &RunResult) -> io::Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["t_s", "kind", "target", "payload"])?;
    for e in &run.output.journal {
        w.write_record([num(e.t), e.kind.name().to_string(), e.target.clone(), e.payload.clone()])?;
    }
    w.flush()
}

fn write_eigenscan(path: &Path, run: &RunResult) -> io::Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["t_s", "rank", "re", "im", "residual"])?;
    for s in &run.output.scan.snapshots {
        for (k, e) in s.eigenvalues.iter().enumerate() {
            w.write_record([num(s.t), k.to_string(), num(e.re), num(e.im), num(s.residual)])?;
        }
    }
    w.flush()
}

/// Writes the configured phase traces and returns their file names.
fn write_phases(dir: &Path, scenario: &Scenario, run: &RunResult) -> io::Result<Vec<String>> {
    let ts = &run.output.series;
    let t_last = ts.t.last().copied().unwrap_or(0.0);
    let window = scenario.outputs.phase_window.map_or((t_last - 1.0, t_last), |w| (w[0], w[1]));
    let mut names = Vec::new();
    for [a, b] in &scenario.outputs.phase_pairs {
        let name = phase_file_name(a, b);
        let trace = match extract_phase_trace(ts, a, b, window, None) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("warning: skipping phase pair {a}/{b}: {e}");
                continue;
            }
        };
        let mut w = csv_writer(&dir.join(&name))?;
        w.write_record(["t_s", a.as_str(), b.as_str()])?;
        for (t, x, y, _) in &trace.samples {
            w.write_record([num(*t), num(*x), num(*y)])?;
        }
        w.flush()?;
        names.push(name);
    }
    Ok(names)
}

fn join_times(ts: &[f64]) -> String {
    if ts.is_empty() {
        return "none".into();
    }
    ts.iter().map(|t| format!("{t:.3}")).collect::<Vec<_>>().join(", ")
}

pub fn summary_text(scenario: &Scenario, run: &RunResult) -> String {
    let r: &RunReport = &run.report;
    let mut s = String::new();
    let _ = writeln!(s, "scenario: {}", scenario.name);
    let _ = writeln!(s, "verdict: {} (exit code {})", r.verdict.name(), r.verdict.exit_code());
    let t_last = run.output.series.t.last().copied().unwrap_or(0.0);
    let term = match &r.termination {
        Termination::Completed => format!("completed at {t_last:.3} s"),
        Termination::Collapse { t, reason } => format!("collapse at {t:.3} s: {reason}"),
        Termination::Divergence { t, reason } => format!("divergence at {t:.3} s: {reason}"),
    };
    let _ = writeln!(s, "termination: {term}");
    let _ = writeln!(s, "steps: {}", run.output.steps);
    if r.crossings.is_empty() {
        let _ = writeln!(s, "crossings: none");
    } else {
        let _ = writeln!(s, "crossings:");
        for c in &r.crossings {
            let dir = if c.destabilizing { "destabilizing" } else { "stabilizing" };
            let _ = writeln!(s, "  {:.3} s {} {} imag {:.3} rad/s", c.t, c.kind.name(), dir, c.imag);
        }
    }
    let _ = writeln!(s, "oscillation channel: {}", r.oscillation_channel.as_deref().unwrap_or("none"));
    let _ = writeln!(s, "oscillation onset: {}", r.onset.map_or("none".into(), |t| format!("{t:.3} s")));
    match &r.final_cycle {
        Some(c) => {
            let _ = writeln!(
                s,
                "limit cycle [{:.3}, {:.3}] s: {}, pk-pk {:.6}, period {:.4} s, envelope change {:.4}",
                c.window.0,
                c.window.1,
                if c.exists { "sustained" } else { "absent" },
                c.amplitude,
                c.period,
                c.envelope_change
            );
        }
        None => {
            let _ = writeln!(s, "limit cycle: not evaluated");
        }
    }
    let _ = writeln!(s, "oel events: {}", join_times(&r.oel_times));
    let _ = writeln!(s, "tap events: {}", join_times(&r.tap_times));
    s
}

/// Writes every output file of a run into `dir` (created if missing) and
/// returns the paths written.
pub fn emit_outputs(dir: &Path, scenario: &Scenario, run: &RunResult) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut file = |name: &str| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };
    fs::write(file("scenario.toml"), dump_scenario(scenario))?;
    write_timeseries(&file("timeseries.csv"), scenario, run)?;
    write_events(&file("events.csv"), run)?;
    write_eigenscan(&file("eigenscan.csv"), run)?;
    fs::write(file("summary.txt"), summary_text(scenario, run))?;
    for name in write_phases(dir, scenario, run)? {
        written.push(dir.join(name));
    }
    Ok(written)
}

/// Output of the `scan` verb: eigenvalue snapshots and the summary only.
pub fn emit_scan(dir: &Path, scenario: &Scenario, run: &RunResult) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    write_eigenscan(&dir.join("eigenscan.csv"), run)?;
    fs::write(dir.join("summary.txt"), summary_text(scenario, run))
}
