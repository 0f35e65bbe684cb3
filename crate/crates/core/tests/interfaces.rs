//! Column layouts and JSON keys of the files the plotting side reads.

use std::path::Path;

use dtcsim::harness::{analyze_files, load_config, run_experiment, AnalysisConfig, Override, Preset, RunReport};
use serde_json::Value;

fn run(kind: &str, extra: &[Override], dir: &Path) -> RunReport {
    let mut o = vec![
        Override::new("kind", kind),
        Override::new("output_dir", dir.to_string_lossy().into_owned()),
        Override::new("drive.n_max", 16),
    ];
    o.extend_from_slice(extra);
    let cfg = load_config(Preset::Custom, None, &o).unwrap();
    let rep = run_experiment(&cfg, Preset::Custom).unwrap();
    assert!(rep.ok(), "{:?}", rep.failures);
    rep
}

fn table(path: &Path) -> (Vec<String>, Vec<csv::StringRecord>) {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap()).collect();
    (header, rows)
}

fn first_line(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn sweep(dir: &Path) -> RunReport {
    run(
        "dtc",
        &[
            Override::new("drive.tau_us", vec![10.0, 40.0]),
            Override::new("drive.theta_pi", vec![0.9, 0.95, 1.0, 1.05, 1.1]),
        ],
        dir,
    )
}

#[test]
fn sweep_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    sweep(d);

    assert_eq!(first_line(&d.join("records/point_000.csv")), "# dtcsim-record format_version=1");
    let (h, rows) = table(&d.join("records/point_003.csv"));
    assert_eq!(h, ["N", "t_seconds", "Mz", "Mz_stderr"]);
    assert_eq!(rows.len(), 17);
    assert_eq!(&rows[0][2], "1.0");

    assert_eq!(first_line(&d.join("spectra/point_000.csv")), "# dtcsim-spectrum format_version=1");
    let (h, rows) = table(&d.join("spectra/point_000.csv"));
    assert_eq!(h, ["nu_tilde", "re", "im", "power"]);
    assert_eq!(rows.len(), 9);
    assert_eq!(&rows[8][0], "0.5");

    let (h, rows) = table(&d.join("fractions.csv"));
    assert_eq!(h, ["index", "tau", "theta", "theta_pi", "w_tau", "f", "peak_nu_tilde", "status"]);
    assert_eq!(rows.len(), 10);
    for r in &rows {
        let f: f64 = r[5].parse().unwrap();
        assert!((0.0..=1.0 + 1e-12).contains(&f));
        assert_eq!(&r[7], "ok");
    }

    let (h, rows) = table(&d.join("fits.csv"));
    assert_eq!(h, ["tau", "w_tau", "A", "theta0", "sigma", "residual", "r_squared", "width", "points", "status"]);
    assert_eq!(rows.len(), 2);
    let (h, rows) = table(&d.join("boundary.csv"));
    assert_eq!(h, ["tau", "w_tau", "width", "status"]);
    assert_eq!(rows.len(), 2);
}

#[test]
fn sweep_json() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let rep = sweep(d);
    let s = json(&d.join("summary.json"));
    assert_eq!(s, rep.summary);
    assert_eq!(s["format_version"], 1);
    assert_eq!(s["kind"], "dtc");
    for key in ["index", "tau_s", "theta_pi", "w_tau", "f", "peak_nu_tilde", "status"] {
        assert!(s["points"][0].get(key).is_some(), "points[].{key}");
    }
    for key in ["amplitude", "center", "sigma", "rss", "r_squared"] {
        assert!(s["fits"][0]["fit"].get(key).is_some(), "fits[].fit.{key}");
    }

    let m = json(&d.join("manifest.json"));
    for key in ["format_version", "name", "kind", "preset", "master_seed", "config", "system", "files", "failures"] {
        assert!(m.get(key).is_some(), "manifest.{key}");
    }
    for key in ["sites", "dimension", "w_pp_hz", "coupling_scale", "sectors", "factorized"] {
        assert!(m["system"].get(key).is_some(), "manifest.system.{key}");
    }
    let files = m["files"].as_array().unwrap();
    for f in files {
        assert!(d.join(f["path"].as_str().unwrap()).exists());
    }
    let record = files.iter().find(|f| f["path"] == "records/point_000.csv").unwrap();
    assert_eq!(record["kind"], "record");
    assert_eq!(record["point"], 0);
    assert!(record["seed"].is_u64());
}

#[test]
fn echo_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(
        "echo",
        &[
            Override::new("drive.tau_us", vec![40.0]),
            Override::new("drive.theta_pi", vec![1.05]),
            Override::new("echo.n_forward", vec![2, 4]),
            Override::new("echo.n_echo", 8),
        ],
        d,
    );
    let e = json(&d.join("echo.json"));
    assert_eq!(e["n_echo"], 8);
    let entries = e["echoes"].as_array().unwrap();
    assert_eq!(entries.len(), 2);
    for x in entries {
        for key in ["index", "n", "tau_s", "theta_pi", "peak", "continuation"] {
            assert!(x.get(key).is_some(), "echoes[].{key}");
        }
        let i = x["index"].as_u64().unwrap();
        let (h, rows) = table(&d.join(format!("records/echo_{i:03}.csv")));
        assert_eq!(h, ["N", "t_seconds", "Mz", "Mz_stderr"]);
        assert_eq!(rows.len(), 9);
        assert!(d.join(format!("records/echo_{i:03}_continued.csv")).exists());
    }
}

#[test]
fn phasepair_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(
        "phasepair",
        &[Override::new("drive.mode", "finite"), Override::new("drive.tau_us", vec![20.0])],
        d,
    );
    let doc = json(&d.join("decay_times.json"));
    let entries = doc["decay_times"].as_array().unwrap();
    let pairs: Vec<&str> = entries.iter().map(|e| e["pair"].as_str().unwrap()).collect();
    assert_eq!(pairs, ["XX", "YY", "XY"]);
    for e in entries {
        assert!(["finite", "never"].contains(&e["decay"]["kind"].as_str().unwrap()));
        let i = e["index"].as_u64().unwrap();
        let pair = e["pair"].as_str().unwrap();
        assert!(d.join(format!("records/pair_{i:03}_{pair}.csv")).exists());
    }
}

#[test]
fn analyze_reproduces_spectra() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    sweep(d);
    let out = d.join("reanalysis");
    let inputs = vec![d.join("records/point_001.csv"), d.join("records/point_002.csv")];
    let doc = analyze_files(&inputs, &AnalysisConfig::default(), &out).unwrap();
    assert_eq!(doc, json(&out.join("analysis.json")));
    assert_eq!(
        std::fs::read(out.join("point_001.spectrum.csv")).unwrap(),
        std::fs::read(d.join("spectra/point_001.csv")).unwrap()
    );
}

#[test]
fn failures_are_reported_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load_config(
        Preset::Custom,
        None,
        &[
            Override::new("output_dir", dir.path().to_string_lossy().into_owned()),
            Override::new("drive.tau_us", vec![10.0]),
            Override::new("drive.n_max", 2),
        ],
    )
    .unwrap();
    let rep = run_experiment(&cfg, Preset::Custom).unwrap();
    assert!(!rep.ok());
    let (_, rows) = table(&dir.path().join("fractions.csv"));
    assert_ne!(&rows[0][7], "ok");
    assert!(dir.path().join("manifest.json").exists());
}
