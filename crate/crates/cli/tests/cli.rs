use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ltdyn::{dump_scenario, parse_scenario, parse_scenario_str, phase_file_name, InputError};
use ltdyn_core::reduced_system::build_preset;

const MINIMAL: &str = r#"
name = "minimal"

[network]
s_base_mva = 100.0

[[network.buses]]
id = "a"
base_kv = 400.0
kind = "slack"

[[network.buses]]
id = "b"
base_kv = 400.0
kind = "pq"
p_load0 = 50.0

[[network.branches]]
id = "ab"
from = "a"
to = "b"
x = 0.1

[[devices.source]]
id = "grid"
bus = "a"
"#;

fn ltdyn(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ltdyn")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn presets_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets")
}

#[test]
fn omitted_fields_take_their_defaults() {
    let s = parse_scenario_str(MINIMAL).unwrap();
    assert_eq!(s.simulation.dt, 0.002);
    assert_eq!(s.simulation.t_end, 600.0);
    assert_eq!(s.simulation.output_every, 5);
    assert_eq!(s.devices.source[0].x, 0.02);
    assert!(s.outputs.eigen_scan);
    assert!(s.events.is_empty());
}

#[test]
fn unknown_field_is_named_with_its_location() {
    let text = MINIMAL.replace("x = 0.1", "x = 0.1\nreactance = 0.1");
    match parse_scenario_str(&text) {
        Err(e @ InputError::Schema { location: Some(_), .. }) => assert!(e.to_string().contains("reactance"), "{e}"),
        other => panic!("expected a schema error, got {other:?}"),
    }
}

#[test]
fn semantic_errors_are_reported_after_parsing() {
    let text = MINIMAL.replace("to = \"b\"", "to = \"c\"");
    assert!(matches!(parse_scenario_str(&text), Err(InputError::Invalid(_))));
}

#[test]
fn shipped_preset_files_match_the_builtin_cases() {
    for k in 1..=4u8 {
        let from_file = parse_scenario(&presets_dir().join(format!("case{k}.toml"))).unwrap();
        assert_eq!(from_file, build_preset(k).unwrap(), "case {k}");
    }
}

#[test]
fn dumped_scenarios_parse_back_unchanged() {
    for k in 1..=4u8 {
        let s = build_preset(k).unwrap();
        assert_eq!(parse_scenario_str(&dump_scenario(&s)).unwrap(), s);
    }
    let m = parse_scenario_str(MINIMAL).unwrap();
    assert_eq!(parse_scenario_str(&dump_scenario(&m)).unwrap(), m);
}

#[test]
fn phase_files_drop_the_shared_prefix() {
    assert_eq!(phase_file_name("ibr.x1", "ibr.x2"), "phase_x1_x2.csv");
    assert_eq!(phase_file_name("v.ibr", "ibr.P"), "phase_v_ibr_ibr_P.csv");
}

#[test]
fn exit_codes_follow_the_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("stable");
    let (code, stdout, _) = ltdyn(&["preset", "3", "--t-end", "20", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{stdout}");
    for f in ["scenario.toml", "timeseries.csv", "events.csv", "eigenscan.csv", "summary.txt", "phase_x1_x2.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }

    let mut s = build_preset(3).unwrap();
    s.simulation.t_end = 20.0;
    let text = dump_scenario(&s) + "\n[[events]]\nkind = \"custom\"\nt = 10.0\nvalue = 2.5\n";
    let file = dir.path().join("heavy.toml");
    fs::write(&file, text).unwrap();
    let (code, stdout, _) = ltdyn(&["run", file.to_str().unwrap(), "--out", dir.path().join("heavy").to_str().unwrap()]);
    assert_eq!(code, 12, "{stdout}");
    assert!(stdout.contains("verdict: collapse"), "{stdout}");
}

#[test]
fn input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, MINIMAL.replace("kind = \"pq\"", "kind = \"pqv\"")).unwrap();
    let (code, _, stderr) = ltdyn(&["check", bad.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(stderr.contains("schema error at"), "{stderr}");
    assert_eq!(ltdyn(&["check", dir.path().join("missing.toml").to_str().unwrap()]).0, 2);
    assert_eq!(ltdyn(&["preset", "7", "--dump"]).0, 2);
    assert_eq!(ltdyn(&["preset", "1", "--dt", "-1", "--dump"]).0, 2);
}

#[test]
fn check_prints_the_normalized_scenario() {
    let (code, stdout, _) = ltdyn(&["check", presets_dir().join("case2.toml").to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(parse_scenario_str(&stdout).unwrap(), build_preset(2).unwrap());
}

#[test]
fn batch_reports_the_worst_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let (code, stdout, _) = ltdyn(&[
        "batch",
        presets_dir().join("case3.toml").to_str().unwrap(),
        presets_dir().join("case4.toml").to_str().unwrap(),
        "--t-end",
        "15",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{stdout}");
    assert!(dir.path().join("case3/summary.txt").is_file());
    assert!(dir.path().join("case4/summary.txt").is_file());
}
