use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vlp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlp"))
        .args(args)
        .env_remove("VLP_CACHE_DIR")
        .output()
        .expect("spawn vlp")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(vlp(&["--help"]).status.code(), Some(0));
    assert_eq!(vlp(&["--version"]).status.code(), Some(0));
    assert_eq!(vlp(&["sweep", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(vlp(&[]).status.code(), Some(1));
    assert_eq!(vlp(&["locate", "--bogus"]).status.code(), Some(1));
    assert_eq!(vlp(&["locate", "--at", "1"]).status.code(), Some(1));
    assert_eq!(
        vlp(&["locate", "--at", "9,1", "--max-order", "0"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn bad_scenario_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wide.scenario");
    fs::write(&path, "[receiver]\nfov_deg = 190\n").unwrap();
    let o = vlp(&["-s", path.to_str().unwrap(), "powers", "--at", "1,1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("receiver.fov_deg"), "{}", stderr(&o));
}

#[test]
fn line_of_sight_locate_is_exact() {
    let o = vlp(&[
        "locate",
        "--at",
        "2.5,3.25",
        "--max-order",
        "0",
        "--method",
        "nonlinear",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["error_m"].as_f64().unwrap() < 1e-6);
    // the (7,7) luminaire is outside the 70 degree field of view from here
    assert_eq!(v["anchors_used"], 15);
}

#[test]
fn singular_geometry_is_a_runtime_failure() {
    // Three luminaires on one line cannot be laterated linearly.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("row.scenario");
    let mut text = String::new();
    for (id, x) in [(1, 1.0), (2, 4.0), (3, 7.0)] {
        text += &format!("[[luminaires]]\nid = {id}\nx = {x}\ny = 4.0\n\n");
    }
    fs::write(&path, text).unwrap();
    let args = [
        "-s",
        path.to_str().unwrap(),
        "locate",
        "--at",
        "4,3",
        "--max-order",
        "0",
    ];
    let o = vlp(&args);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let mut fallback = args.to_vec();
    fallback.push("--linear-fallback");
    assert_eq!(vlp(&fallback).status.code(), Some(0));
}

#[test]
fn flags_override_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("los.scenario");
    fs::write(
        &path,
        "[channel]\nmax_order = 0\n\n[[luminaires]]\nid = 1\nx = 2\ny = 2\n",
    )
    .unwrap();
    let s = path.to_str().unwrap();
    let header = |o: &Output| stdout(o).lines().next().unwrap_or_default().to_string();
    let file_only = vlp(&["-s", s, "powers", "--at", "1,1"]);
    assert_eq!(header(&file_only), "luminaire_id,x,y,order0,total");
    let flagged = vlp(&["-s", s, "powers", "--at", "1,1", "--max-order", "1"]);
    assert_eq!(flagged.status.code(), Some(0), "{}", stderr(&flagged));
    assert_eq!(header(&flagged), "luminaire_id,x,y,order0,order1,total");
}

#[test]
fn impulse_response_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ir.csv");
    let o = vlp(&[
        "ir",
        "--luminaire",
        "6",
        "--at",
        "4,4",
        "--max-order",
        "2",
        "--rays",
        "1",
        "--patch-area",
        "0.25",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "delay_ns,order0,order1,order2,total");
    assert_eq!(lines.count(), 1000);
}

fn sweep(dir: &Path, cache: &Path, tag: &str) -> (Output, String, String) {
    let map = dir.join(format!("{tag}.csv"));
    let stats = dir.join(format!("{tag}.json"));
    let o = vlp(&[
        "sweep",
        "--step",
        "2",
        "--max-order",
        "2",
        "--rays",
        "2",
        "--patch-area",
        "0.25",
        "--method",
        "nonlinear",
        "--cache-dir",
        cache.to_str().unwrap(),
        "--map",
        map.to_str().unwrap(),
        "--stats",
        stats.to_str().unwrap(),
    ]);
    (
        o,
        fs::read_to_string(map).unwrap_or_default(),
        fs::read_to_string(stats).unwrap_or_default(),
    )
}

#[test]
fn sweep_outputs_and_cache_reuse() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let (first, map1, stats1) = sweep(dir.path(), &cache, "a");
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    assert!(
        stderr(&first).contains("400 channel computations"),
        "{}",
        stderr(&first)
    );
    let (second, map2, stats2) = sweep(dir.path(), &cache, "b");
    assert!(
        stderr(&second).contains(" 0 channel computations"),
        "{}",
        stderr(&second)
    );
    assert_eq!(map1, map2);
    assert_eq!(stats1, stats2);
    assert!(map1.starts_with("x,y,x_hat,y_hat,error_m,method,anchors_used,fallback,failed"));
    assert_eq!(map1.lines().count(), 26);
    let v: serde_json::Value = serde_json::from_str(&stats1).unwrap();
    for key in [
        "inner_rms",
        "outer_rms",
        "entire_rms",
        "failures",
        "histogram",
    ] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn suite_table_marks_failures() {
    let o = vlp(&["suite", "--step", "2", "--max-order", "0", "-s", "grid25"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().next().unwrap().starts_with("layout"));
    assert_eq!(out.lines().count(), 1 + 1 + 8);
}
