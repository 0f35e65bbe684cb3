//! Runs the checked-in fuzz corpus, plus truncations and byte flips of each
//! seed, through the same parsers the fuzz targets drive.

use std::path::{Path, PathBuf};

use dtcsim::analysis::{spectrum, SpectrumOptions};
use dtcsim::engine::EvolutionRecord;
use dtcsim::harness::{load_config, Preset};
use dtcsim::linalg::{dump_dense, parse_dense, max_abs_diff};
use dtcsim::sequence::PulseProgram;
use dtcsim::spinsys::GeometryConfig;

fn corpus(target: &str) -> Vec<(PathBuf, String)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(PathBuf, String)> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let text = std::fs::read_to_string(&p).unwrap();
            (p, text)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "empty corpus {}", dir.display());
    out
}

fn variants(text: &str) -> Vec<String> {
    let mut v = Vec::new();
    let bytes = text.as_bytes();
    for cut in (0..bytes.len()).step_by((bytes.len() / 40).max(1)) {
        if let Ok(s) = std::str::from_utf8(&bytes[..cut]) {
            v.push(s.to_string());
        }
    }
    for (i, &b) in bytes.iter().enumerate().step_by((bytes.len() / 60).max(1)) {
        for r in [b'0', b'-', b'=', b'\n', b'e', b'x', b' '] {
            if r != b {
                let mut m = bytes.to_vec();
                m[i] = r;
                if let Ok(s) = String::from_utf8(m) {
                    v.push(s);
                }
            }
        }
    }
    v
}

#[test]
fn geometry_seeds() {
    for (p, text) in corpus("geometry") {
        GeometryConfig::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        for v in variants(&text) {
            let _ = GeometryConfig::parse(&v);
        }
    }
}

#[test]
fn config_seeds() {
    for (p, text) in corpus("config") {
        let cfg = load_config(Preset::Custom, Some(&text), &[]).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert!(!cfg.points().is_empty());
        for v in variants(&text) {
            if let Ok(c) = load_config(Preset::Custom, Some(&v), &[]) {
                let _ = c.points();
            }
        }
    }
}

#[test]
fn program_seeds_round_trip() {
    for (p, text) in corpus("program") {
        let prog = PulseProgram::parse_text(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(PulseProgram::parse_text(&prog.to_text()).unwrap().to_text(), prog.to_text());
        for v in variants(&text) {
            if let Ok(q) = PulseProgram::parse_text(&v) {
                assert_eq!(PulseProgram::parse_text(&q.to_text()).unwrap().to_text(), q.to_text());
            }
        }
    }
}

#[test]
fn record_seeds() {
    for (p, text) in corpus("record") {
        let r = EvolutionRecord::parse_csv(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(EvolutionRecord::parse_csv(&r.to_csv()).unwrap().values(), r.values());
        spectrum(&r, &SpectrumOptions::default()).unwrap();
        for v in variants(&text) {
            if let Ok(r) = EvolutionRecord::parse_csv(&v) {
                let _ = spectrum(&r, &SpectrumOptions::default());
            }
        }
    }
}

#[test]
fn matrix_seeds_round_trip() {
    for (p, text) in corpus("matrix") {
        let m = parse_dense(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(max_abs_diff(&parse_dense(&dump_dense(&m)).unwrap(), &m), 0.0);
        for v in variants(&text) {
            if let Ok(m) = parse_dense(&v) {
                parse_dense(&dump_dense(&m)).unwrap();
            }
        }
    }
    assert!(parse_dense("100000 100000\n").is_err());
}
