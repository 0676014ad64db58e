use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn mgtrade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgtrade")).args(args).env_remove("MGTRADE_OUT").output().expect("binary runs")
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = mgtrade(&["run", "--config", "/nonexistent/scenario.json"]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
    let out = mgtrade(&["run"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{\"name\": 3}").unwrap();
    let out = mgtrade(&["run", "--config", path(&cfg), "--out", path(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3), "{}", text(&out));
}

#[test]
fn fraction_outside_unit_interval_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("pair24.json");
    let out = mgtrade(&["sweep", "--config", path(&cfg), "--fractions", "0.5,1.5", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
}

#[test]
fn same_seed_gives_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("reference.json");
    let logs: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out_dir = dir.path().join(name);
            let out = mgtrade(&["run", "--config", path(&cfg), "--seed", "42", "--horizon", "30", "--out", path(&out_dir)]);
            assert!(out.status.success(), "{}", text(&out));
            fs::read(out_dir.join("slots.csv")).unwrap()
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
    let other = dir.path().join("c");
    mgtrade(&["run", "--config", path(&cfg), "--seed", "43", "--horizon", "30", "--out", path(&other)]);
    assert_ne!(logs[0], fs::read(other.join("slots.csv")).unwrap());
}

#[test]
fn both_modes_report_a_reduction() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("reference.json");
    let out = mgtrade(&["run", "--config", path(&cfg), "--mode", "both", "--horizon", "40", "--out", path(dir.path())]);
    assert!(out.status.success(), "{}", text(&out));
    assert!(text(&out).contains("cost reduction"));
    let comparison = fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    let cost_row = comparison.lines().find(|l| l.starts_with("mean_time_average_cost")).unwrap();
    let fields: Vec<f64> = cost_row.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    let expected = 100.0 * (fields[1] - fields[0]) / fields[1];
    assert!((fields[2] - expected).abs() < 1e-5, "{cost_row}");
    for mode in ["with_auction", "no_auction"] {
        assert!(dir.path().join(mode).join("slots.csv").is_file());
    }

    let audit = mgtrade(&["audit", path(dir.path())]);
    assert!(audit.status.success(), "{}", text(&audit));
    assert_eq!(text(&audit).matches("audit: PASS").count(), 2);
}

#[test]
fn out_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("pair24.json");
    let out = Command::new(env!("CARGO_BIN_EXE_mgtrade"))
        .args(["run", "--config", path(&cfg), "--horizon", "5"])
        .env("MGTRADE_OUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", text(&out));
    assert!(dir.path().join("deterministic-pair").join("slots.csv").is_file());
}

/// Rewrites one field of the slot log row for `(slot, mg)`.
fn corrupt(log: &Path, slot: &str, mg: &str, column: &str, value: &str) {
    let content = fs::read_to_string(log).unwrap();
    let mut lines: Vec<String> = content.lines().map(str::to_owned).collect();
    let header: Vec<&str> = lines[0].split(',').collect();
    let col = header.iter().position(|h| *h == column).unwrap();
    let (slot_col, mg_col) =
        (header.iter().position(|h| *h == "slot").unwrap(), header.iter().position(|h| *h == "mg_id").unwrap());
    let row = lines
        .iter()
        .position(|l| {
            let f: Vec<&str> = l.split(',').collect();
            f[slot_col] == slot && f[mg_col] == mg
        })
        .unwrap();
    let mut fields: Vec<String> = lines[row].split(',').map(str::to_owned).collect();
    fields[col] = value.to_owned();
    lines[row] = fields.join(",");
    fs::write(log, lines.join("\n") + "\n").unwrap();
}

#[test]
fn audit_passes_clean_run_and_locates_corrupted_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("reference.json");
    let run_dir = dir.path().join("run");
    let out = mgtrade(&["run", "--config", path(&cfg), "--horizon", "30", "--out", path(&run_dir)]);
    assert!(out.status.success(), "{}", text(&out));

    let clean = mgtrade(&["audit", path(&run_dir)]);
    assert!(clean.status.success(), "{}", text(&clean));
    assert!(text(&clean).contains("audit: PASS"));
    assert!(!text(&clean).contains("FAIL"));

    corrupt(&run_dir.join("slots.csv"), "17", "4", "battery_kwh", "3500.000000");
    let bad = mgtrade(&["audit", path(&run_dir)]);
    assert_eq!(bad.status.code(), Some(4), "{}", text(&bad));
    let report = text(&bad);
    let line = report.lines().find(|l| l.starts_with("FAIL") && l.contains("0 <= B <= B_max")).expect(&report);
    assert!(line.contains("MG4") && line.contains("slot 17"), "{line}");
}

#[test]
fn truncated_log_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("pair24.json");
    let out = mgtrade(&["run", "--config", path(&cfg), "--horizon", "5", "--out", path(dir.path())]);
    assert!(out.status.success());
    let log = dir.path().join("slots.csv");
    let header = fs::read_to_string(&log).unwrap().lines().next().unwrap().to_owned();
    fs::write(&log, header + "\n1,2,abc\n").unwrap();
    let bad = mgtrade(&["audit", path(dir.path())]);
    assert_eq!(bad.status.code(), Some(3), "{}", text(&bad));
    let empty = tempfile::tempdir().unwrap();
    assert_eq!(mgtrade(&["audit", path(empty.path())]).status.code(), Some(3));
}

#[test]
fn sweep_directory_audits_to_gap_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("pair24.json");
    let out = mgtrade(&["sweep", "--config", path(&cfg), "--out", path(dir.path())]);
    assert!(out.status.success(), "{}", text(&out));
    for f in ["0.20", "0.40", "0.60", "0.80", "1.00"] {
        assert!(dir.path().join(format!("v_{f}")).join("oracle.json").is_file());
    }
    let audit = mgtrade(&["audit", path(dir.path())]);
    assert!(audit.status.success(), "{}", text(&audit));
    let report = text(&audit);
    assert!(report.contains("sweep: PASS"), "{report}");

    // A/V column per microgrid, read back from the table, falls with V
    for mg in ["MG1", "MG2"] {
        let column: Vec<f64> = report
            .lines()
            .filter(|l| l.starts_with("v_") && l.split_whitespace().nth(1) == Some(mg))
            .map(|l| l.split_whitespace().nth(6).unwrap().parse().unwrap())
            .collect();
        assert_eq!(column.len(), 5, "{report}");
        assert!(column.windows(2).all(|w| w[1] < w[0]), "{column:?}");
    }
    assert!(fs::read_to_string(dir.path().join("sweep.csv")).unwrap().lines().count() == 11);
}

#[test]
fn oracle_limits_are_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("reference.json");
    let out = mgtrade(&["sweep", "--config", path(&cfg), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(3), "{}", text(&out));
}
