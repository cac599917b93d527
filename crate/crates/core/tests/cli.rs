use std::path::Path;
use std::process::{Command, Output};

use dtdoa::geometry::Position;
use dtdoa::presets::{garden_layout, single_pivot_scenario};

fn dtdoa(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtdoa"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn write_scenario(dir: &Path, positions: &[Position]) {
    let s = single_pivot_scenario(positions, 0, Position::new(7.0, 11.0));
    std::fs::write(dir.join("scenario.json"), serde_json::to_string_pretty(&s).unwrap()).unwrap();
}

#[test]
fn simulate_then_estimate() {
    let dir = tempfile::tempdir().unwrap();
    write_scenario(dir.path(), &garden_layout());
    let sim = dtdoa(
        &["simulate", "--scenario", "scenario.json", "--log", "log.csv", "--nodes", "nodes.json"],
        dir.path(),
    );
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    let est = dtdoa(&["estimate", "--nodes", "nodes.json", "--log", "log.csv", "--out", "result.json"], dir.path());
    assert!(est.status.success(), "{}", String::from_utf8_lossy(&est.stderr));
    let text = String::from_utf8(est.stdout).unwrap();
    let xy: Vec<f64> = text.split_whitespace().map(|v| v.parse().unwrap()).collect();
    let err = ((xy[0] - 7.0).powi(2) + (xy[1] - 11.0).powi(2)).sqrt();
    assert!(err < 1.5, "estimate {text}");
    assert!(dir.path().join("result.json").exists());
}

#[test]
fn sweep_writes_one_report_per_value() {
    let dir = tempfile::tempdir().unwrap();
    write_scenario(dir.path(), &garden_layout());
    let out = dtdoa(
        &[
            "sweep", "--scenario", "scenario.json", "--param", "beta-spread-ppm", "--values", "0,20", "--trials", "3",
            "--out-dir", "sweep",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for v in ["0", "20"] {
        assert!(dir.path().join(format!("sweep/value-{v}/summary.json")).exists());
    }
}

#[test]
fn usage_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dtdoa(&["estimate"], dir.path()).status.code(), Some(1));
    assert_eq!(dtdoa(&["frobnicate"], dir.path()).status.code(), Some(1));
    write_scenario(dir.path(), &garden_layout());
    let bad_box = dtdoa(
        &["eval", "--scenario", "scenario.json", "--blind-box", "0,0,1", "--out-dir", "o"],
        dir.path(),
    );
    assert_eq!(bad_box.status.code(), Some(1));
    std::fs::write(dir.path().join("broken.json"), "{ not json").unwrap();
    let broken = dtdoa(&["simulate", "--scenario", "broken.json", "--log", "l.csv"], dir.path());
    assert_eq!(broken.status.code(), Some(1));
}

#[test]
fn data_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    write_scenario(dir.path(), &garden_layout());
    dtdoa(
        &["simulate", "--scenario", "scenario.json", "--log", "log.csv", "--nodes", "nodes.json"],
        dir.path(),
    );
    let missing = dtdoa(&["estimate", "--nodes", "nodes.json", "--log", "absent.csv"], dir.path());
    assert_eq!(missing.status.code(), Some(2));
    std::fs::write(dir.path().join("garbage.csv"), "rx_id,tx_id\n1,x\n").unwrap();
    let garbage = dtdoa(&["estimate", "--nodes", "nodes.json", "--log", "garbage.csv"], dir.path());
    assert_eq!(garbage.status.code(), Some(2));
}

#[test]
fn estimation_failures_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let line: Vec<Position> = (0..5).map(|i| Position::new(4.0 * i as f64, 0.0)).collect();
    write_scenario(dir.path(), &line);
    dtdoa(
        &["simulate", "--scenario", "scenario.json", "--log", "log.csv", "--nodes", "nodes.json"],
        dir.path(),
    );
    let out = dtdoa(&["estimate", "--nodes", "nodes.json", "--log", "log.csv"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
