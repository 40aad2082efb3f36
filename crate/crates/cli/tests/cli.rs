use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

use swing_core::contracts::IntegerConstraints;
use swing_core::oracle::{price_lattice_dp, ScenarioLattice};

fn swing(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swing"))
        .current_dir(dir)
        .env_remove("SWING_CONFIG")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(out: Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn deterministic_config(n: usize, strike: Value) -> Value {
    json!({
        "model": {
            "alpha1": 0.21, "alpha2": 5.4, "sigma1": 0.0, "sigma2": 0.0, "rho": -0.11,
            "r": 0.0, "T": 0.1, "n": n, "forward": 20.0, "strike": strike
        },
        "pricing": { "grid_size": 2, "n_samples": 1000, "policy_paths": 50 }
    })
}

fn stochastic_config() -> Value {
    json!({
        "model": {
            "alpha1": 0.21, "alpha2": 5.4, "sigma1": 0.36, "sigma2": 1.11, "rho": -0.11,
            "r": 0.02, "T": 0.05, "n": 5, "forward": 20.0, "strike": 20.0
        },
        "pricing": { "grid_size": 6, "n_samples": 3000, "policy_paths": 500 }
    })
}

fn setup(cfg: &Value) -> (TempDir, String) {
    let dir = TempDir::new().unwrap();
    let path = write_config(dir.path(), "run.json", cfg);
    (dir, path.to_string_lossy().into_owned())
}

#[test]
fn deterministic_prices() {
    let (dir, cfg) = setup(&deterministic_config(3, json!(19.0)));
    let d = dir.path();
    let doc = ok_json(swing(d, &["--config", &cfg, "price", "--q-min", "2", "--q-max", "2"]));
    assert_eq!(doc["price"], json!(2.0));
    assert_eq!(doc["mc_policy_value"], json!(2.0));
    assert_eq!(doc["q_min"], json!(2.0));
    for key in ["std_err", "grid_size", "n", "seeds", "cache", "timings"] {
        assert!(doc.get(key).is_some(), "missing {key}");
    }
    let doc = ok_json(swing(d, &["--config", &cfg, "price", "--q-min", "0", "--q-max", "3"]));
    assert_eq!(doc["price"], json!(3.0));

    // Q_max above n is clamped; Q_max from the config defaults to n.
    let doc = ok_json(swing(d, &["--config", &cfg, "price", "--q-min", "1", "--q-max", "10"]));
    assert_eq!((doc["q_max"].clone(), doc["price"].clone()), (json!(3.0), json!(3.0)));
    let doc = ok_json(swing(d, &["--config", &cfg, "price"]));
    assert_eq!(doc["price"], json!(3.0));

    // fractional constraints go through the interpolated surface
    let doc = ok_json(swing(d, &["--config", &cfg, "price", "--q-min", "0.5", "--q-max", "1.25"]));
    assert!((doc["price"].as_f64().unwrap() - 1.25).abs() < 1e-12);
    assert_eq!(doc["mc_policy_value"], Value::Null);
    assert!(!d.join("out/.swing.lock").exists());
}

#[test]
fn exit_codes() {
    let (dir, cfg) = setup(&deterministic_config(3, json!(19.0)));
    let d = dir.path();
    let code = |args: &[&str]| swing(d, args).status.code();

    assert_eq!(code(&["price"]), Some(2), "no configuration");
    assert_eq!(code(&["--config", "missing.json", "price"]), Some(2));
    fs::write(d.join("broken.json"), "{ not json").unwrap();
    assert_eq!(code(&["--config", "broken.json", "price"]), Some(2));
    let mut extra = deterministic_config(3, json!(19.0));
    extra["pricing"]["unknown"] = json!(1);
    write_config(d, "extra.json", &extra);
    assert_eq!(code(&["--config", "extra.json", "price"]), Some(2));
    let mut bad = deterministic_config(3, json!(19.0));
    bad["model"]["rho"] = json!(1.5);
    write_config(d, "bad.json", &bad);
    assert_eq!(code(&["--config", "bad.json", "price"]), Some(2));
    let mut missing_curve = deterministic_config(3, json!("nowhere.csv"));
    missing_curve["model"]["forward"] = json!(20.0);
    write_config(d, "curve.json", &missing_curve);
    assert_eq!(code(&["--config", "curve.json", "price"]), Some(2));
    assert_eq!(code(&["--config", &cfg, "--threads", "0", "price"]), Some(2));
    assert_eq!(code(&["--config", &cfg, "price", "--grid-size", "500"]), Some(2));

    assert_eq!(code(&["--config", &cfg, "price", "--q-min", "4", "--q-max", "5"]), Some(3));
    assert_eq!(code(&["--config", &cfg, "price", "--q-min", "2", "--q-max", "1"]), Some(3));
    assert_eq!(code(&["--config", &cfg, "price", "--q-min", "-1", "--q-max", "1"]), Some(3));

    // a forward near f64::MAX makes the strip overflow
    let mut huge = deterministic_config(3, json!(0.0));
    huge["model"]["forward"] = json!(1e308);
    write_config(d, "huge.json", &huge);
    assert_eq!(code(&["--config", "huge.json", "price", "--q-min", "0", "--q-max", "3"]), Some(4));

    assert_eq!(code(&["--config", &cfg, "price", "--q-min", "2", "--q-max", "2"]), Some(0));
}

#[test]
fn lock_file_blocks_concurrent_runs() {
    let (dir, cfg) = setup(&deterministic_config(3, json!(19.0)));
    let d = dir.path();
    fs::create_dir_all(d.join("out")).unwrap();
    fs::write(d.join("out/.swing.lock"), "").unwrap();
    let out = swing(d, &["--config", &cfg, "price"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(".swing.lock"));
    fs::remove_file(d.join("out/.swing.lock")).unwrap();
    ok_json(swing(d, &["--config", &cfg, "price"]));
}

#[test]
fn surface_matches_deterministic_oracle() {
    let strikes = [19.0, 21.0, 18.0, 20.0, 17.0];
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let curve: String = strikes.iter().map(|k| format!("{k}\n")).collect();
    fs::write(d.join("strikes.csv"), format!("strike\n{curve}")).unwrap();
    let cfg = write_config(d, "run.json", &deterministic_config(5, json!("strikes.csv")));
    let doc = ok_json(swing(d, &["--config", cfg.to_str().unwrap(), "surface"]));
    assert_eq!(doc["rows"], json!(21));

    let payoffs: Vec<f64> = strikes.iter().map(|k| 20.0 - k).collect();
    let lattice = ScenarioLattice::deterministic(&payoffs).unwrap();
    let text = fs::read_to_string(d.join("out/surface.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("q_min,q_max,price"));
    let rows: Vec<(usize, usize, f64)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 21);
    assert_eq!(rows[0], (0, 0, 0.0));
    for (lo, hi, price) in rows {
        let exact = price_lattice_dp(&lattice, IntegerConstraints { lo, hi }).unwrap();
        assert!((price - exact).abs() < 1e-12, "({lo}, {hi}): {price} vs {exact}");
    }
    let sidecar: Value = serde_json::from_str(&fs::read_to_string(d.join("out/surface.json")).unwrap()).unwrap();
    assert_eq!(sidecar, doc);
    assert!(sidecar.get("timings").is_none());
    assert_eq!(sidecar["shape"]["concavity_violations"], json!(0));
}

#[test]
fn surface_row_count_stochastic() {
    let (dir, cfg) = setup(&stochastic_config());
    let d = dir.path();
    let doc = ok_json(swing(d, &["--config", &cfg, "surface"]));
    assert_eq!(doc["rows"], json!((5 + 1) * (5 + 2) / 2));
    let text = fs::read_to_string(d.join("out/surface.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 21);
    assert!(text.lines().nth(1).unwrap().starts_with("0,0,0"));
}

#[test]
fn converge_rows_and_deterministic_error() {
    let mut cfg = deterministic_config(3, json!(19.0));
    cfg["pricing"]["n_samples"] = json!(600);
    let (dir, cfg) = setup(&cfg);
    let d = dir.path();
    let doc = ok_json(swing(d, &["--config", &cfg, "converge", "--sizes", "10,50"]));
    assert_eq!(doc["oracle"], json!(3.0));
    let text = fs::read_to_string(d.join("out/converge.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4, "{text}");
    assert_eq!(lines[0], "grid_size,price,oracle,abs_error,wall_time_s");
    assert!(lines[1].starts_with("10,3,3,0,") && lines[2].starts_with("50,3,3,0,"));
    assert!(lines[3].starts_with("# log-log slope: "));
}

#[test]
fn converge_on_stochastic_model() {
    let (dir, cfg) = setup(&stochastic_config());
    let d = dir.path();
    let doc = ok_json(swing(d, &["--config", &cfg, "converge", "--sizes", "2,6"]));
    let rows = doc["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(doc["loglog_slope"].is_f64());
    let text = fs::read_to_string(d.join("out/converge.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
}

fn files(dir: &Path, names: &[&str]) -> Vec<Vec<u8>> {
    names.iter().map(|n| fs::read(dir.join(n)).unwrap()).collect()
}

#[test]
fn reruns_are_byte_identical() {
    let (dir, cfg) = setup(&stochastic_config());
    let d = dir.path();
    let price = ["price", "--q-min", "1", "--q-max", "4"];
    let strip_timings = |mut v: Value| {
        v.as_object_mut().unwrap().remove("timings");
        serde_json::to_string(&v).unwrap()
    };
    let mut outputs = Vec::new();
    for (out, threads) in [("a", "1"), ("b", "2"), ("a", "2")] {
        let base = ["--config", &cfg, "--out", out, "--threads", threads];
        ok_json(swing(d, &[&base[..], &["surface"]].concat()));
        let doc = ok_json(swing(d, &[&base[..], &price].concat()));
        ok_json(swing(d, &[&base[..], &["simulate", "--paths", "7"]].concat()));
        let mut f = files(&d.join(out), &["surface.csv", "surface.json", "paths.csv"]);
        f.push(strip_timings(doc).into_bytes());
        outputs.push(f);
    }
    // fresh runs with one and two threads, then a rerun on the cache
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
    let grid_a = fs::read_dir(d.join("a/cache")).unwrap().count();
    let grid_b = fs::read_dir(d.join("b/cache")).unwrap().count();
    assert_eq!((grid_a, grid_b), (2, 2));
}

#[test]
fn seed_override_changes_the_build() {
    let (dir, cfg) = setup(&stochastic_config());
    let d = dir.path();
    let a = ok_json(swing(d, &["--config", &cfg, "price"]));
    let b = ok_json(swing(d, &["--config", &cfg, "--seed", "11", "price"]));
    assert_eq!(b["seeds"], json!({"grid": 11, "transition": 12, "policy": 13, "simulate": 14}));
    assert_ne!(a["cache"], b["cache"]);
    assert_ne!(a["price"], b["price"]);
}

#[test]
fn stage_commands_and_env_config() {
    let mut cfg = stochastic_config();
    cfg["output"] = json!({"directory": "results", "formats": ["csv", "json"]});
    let (dir, cfg) = setup(&cfg);
    let d = dir.path();
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_swing"))
            .current_dir(d)
            .env("SWING_CONFIG", &cfg)
            .args(args)
            .output()
            .unwrap();
        ok_json(out)
    };
    let grids = run(&["grids"]);
    assert_eq!(grids["points"].as_array().unwrap().len(), 5);
    assert_eq!(grids["points"][0], json!(1));
    assert!(grids["points"][1].as_u64().unwrap() <= 6);
    let tr = run(&["transitions"]);
    assert_eq!(tr["grid_sizes"], grids["points"]);
    let price = run(&["price", "--q-min", "2", "--q-max", "3"]);
    // the cached tree is reused, so only loading is timed
    assert!(price["timings"].get("load_s").is_some());
    assert!(price["timings"].get("grids_s").is_none());
    let sim = run(&["simulate", "--paths", "3"]);
    assert_eq!(sim["paths"], json!(3));
    let out = d.join("results");
    for f in ["grids.json", "transitions.json", "price.json", "paths.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let paths = fs::read_to_string(out.join("paths.csv")).unwrap();
    let lines: Vec<&str> = paths.lines().collect();
    assert_eq!(lines[0], "path,date,x1,x2,spot,payoff");
    assert_eq!(lines.len(), 1 + 3 * 5);
    assert!(lines[1].starts_with("0,0,0,0,"));
}
