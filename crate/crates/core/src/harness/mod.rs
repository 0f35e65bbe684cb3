//! Experiment orchestration: cluster construction from a configuration,
//! parallel execution of sweep points, and file output.
//!
//! Every run writes into `output_dir`:
//!
//! * `records/*.csv`: evolution records
//! * `spectra/*.csv`: spectra of the forward records (dtc runs)
//! * `fractions.csv`, `fits.csv`, `boundary.csv` (dtc runs)
//! * `echo.json` (echo runs), `decay_times.json` (phase-pair runs)
//! * `summary.json` and `manifest.json`
//!
//! All files except the manifest are pure functions of the configuration;
//! the manifest additionally carries a creation timestamp.

pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::analysis::{
    self, boundary_csv, crystalline_fraction, decay_time, dtc_boundary, echo_peak, fit_rows, fits_csv, CrystalFitRow,
    DecayTime, EchoPeak,
};
use crate::constants::{hz_to_rad, rad_to_hz};
use crate::engine::{
    check_budget, cw_decoupling, EngineConfig, EvolutionRecord, Method, RunOutput, Simulator, TypicalityOptions,
    PROTON_LABEL,
};
use crate::error::{Error, Result};
use crate::hamiltonian::TermFlags;
use crate::sequence::{dtc_program, echo_program, phase_pair_program, PulseParams, PulseProgram};
use crate::spinsys::{build_cluster, ClusterSpec, GeometryConfig, SpinSystem};

pub use config::*;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const SUMMARY_FORMAT_VERSION: u32 = 1;
pub const NITROGEN_LABEL: &str = "N";

/// The simulated cluster and its interaction scale.
#[derive(Clone, Debug)]
pub struct BuiltSystem {
    pub system: SpinSystem,
    /// W^{P,P} after rescaling, rad/s.
    pub w_pp: f64,
    /// W^{P,P} of the geometry as built, rad/s.
    pub w_pp_raw: f64,
    pub coupling_scale: f64,
}

pub fn build_system(cfg: &ExperimentConfig) -> Result<BuiltSystem> {
    let geometry = GeometryConfig::parse(&geometry_text(&cfg.cluster.geometry)?)?;
    let c = &cfg.cluster;
    let mut spec = ClusterSpec::new(cfg.radius());
    spec.max_sites = c.max_sites;
    spec.offset = hz_to_rad(c.offset_hz);
    spec.species_limits.insert(geometry.driven.clone(), c.driven_count);
    let has = |label: &str| geometry.species.iter().any(|s| s.label == label);
    for s in &geometry.species {
        let label = s.label.as_str();
        if label == geometry.driven {
            continue;
        }
        let enabled = match label {
            PROTON_LABEL => c.h1 != ProtonHandling::Off,
            NITROGEN_LABEL => c.n14,
            _ => false,
        };
        if enabled {
            let count = if label == PROTON_LABEL { c.h1_count } else { c.n14_count };
            spec.species_limits.insert(label.to_string(), count);
        } else {
            spec.disabled_species.push(label.to_string());
        }
    }
    if c.h1 != ProtonHandling::Off && !has(PROTON_LABEL) {
        return Err(Error::Config("¹H handling requested but the geometry has no `H` species".into()));
    }
    if c.n14 && !has(NITROGEN_LABEL) {
        return Err(Error::Config("¹⁴N requested but the geometry has no `N` species".into()));
    }
    let mut system = build_cluster(&geometry, &spec)?;
    let driven = geometry.driven.clone();
    let w_pp_raw = if system.driven_sites().len() > 1 {
        system.interaction_scale(&driven, &driven)?
    } else {
        0.0
    };
    let coupling_scale = match c.target_w_pp_hz {
        Some(target) if w_pp_raw > 0.0 => hz_to_rad(target) / w_pp_raw,
        Some(_) => return Err(Error::Config("target_w_pp_hz needs at least two driven spins".into())),
        None => 1.0,
    };
    if coupling_scale != 1.0 {
        system.scale_couplings(coupling_scale);
    }
    Ok(BuiltSystem {
        system,
        w_pp: w_pp_raw * coupling_scale,
        w_pp_raw,
        coupling_scale,
    })
}

pub fn engine_config(cfg: &ExperimentConfig, system: &SpinSystem) -> Result<EngineConfig> {
    let flags = if cfg.cluster.interactions {
        TermFlags::all(system)
    } else {
        TermFlags {
            zeeman: true,
            homonuclear: false,
            heteronuclear: Default::default(),
        }
    };
    let cw = match cfg.cluster.h1 {
        ProtonHandling::Cw => Some(cw_decoupling(system, hz_to_rad(cfg.cluster.cw_amplitude_hz))?),
        _ => None,
    };
    Ok(EngineConfig::new(flags).with_cw(cw))
}

/// Seed of sweep point `index`: the first output of the ChaCha20 stream
/// `index` under the master seed.
pub fn point_seed(master: u64, index: usize) -> u64 {
    let mut rng = ChaCha20Rng::seed_from_u64(master);
    rng.set_stream(index as u64);
    rng.next_u64()
}

pub fn method_for(cfg: &ExperimentConfig, seed: u64) -> Method {
    match cfg.method.kind {
        MethodKind::Dense => Method::Dense,
        MethodKind::Typicality => {
            let mut o = TypicalityOptions::new(cfg.method.replicas, seed);
            o.backend = cfg.method.backend.into();
            Method::Typicality(o)
        }
    }
}

// ---------------------------------------------------------------------------
// Output files

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FileEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub point: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub params: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PointFailure {
    pub point: usize,
    pub params: BTreeMap<String, serde_json::Value>,
    pub error: String,
}

/// Write-temp-then-rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Outputs {
    dir: PathBuf,
    files: Mutex<Vec<FileEntry>>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Outputs {
            dir: dir.to_path_buf(),
            files: Mutex::new(Vec::new()),
        }
    }

    fn write(&self, rel: &str, kind: &str, contents: &str, point: Option<usize>, seed: Option<u64>, params: &Params) -> Result<()> {
        write_atomic(&self.dir.join(rel), contents.as_bytes())?;
        self.files.lock().expect("poisoned").push(FileEntry {
            path: rel.to_string(),
            kind: kind.to_string(),
            point,
            seed,
            params: params.clone(),
        });
        Ok(())
    }

    fn json(&self, rel: &str, kind: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
        text.push('\n');
        self.write(rel, kind, &text, None, None, &Params::new())
    }

    fn entries(&self) -> Vec<FileEntry> {
        let mut v = self.files.lock().expect("poisoned").clone();
        v.sort_by(|a, b| a.path.cmp(&b.path));
        v
    }
}

type Params = BTreeMap<String, serde_json::Value>;

fn point_params(p: &DrivePoint) -> Params {
    Params::from([
        ("tau_s".to_string(), json!(p.tau)),
        ("theta_pi".to_string(), json!(p.theta / std::f64::consts::PI)),
    ])
}

/// What one experiment produced.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub files: Vec<FileEntry>,
    pub failures: Vec<PointFailure>,
    pub summary: serde_json::Value,
}

impl RunReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

struct Context {
    cfg: ExperimentConfig,
    built: BuiltSystem,
    sim: Simulator,
    params: PulseParams,
    out: Outputs,
}

impl Context {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let built = build_system(cfg)?;
        let sim = Simulator::new(built.system.clone(), engine_config(cfg, &built.system)?)?;
        let driven = built.system.driven_species().label.clone();
        Ok(Context {
            cfg: cfg.clone(),
            sim,
            params: PulseParams::new(cfg.omega1(), driven),
            out: Outputs::new(&cfg.output_dir),
            built,
        })
    }

    fn execute(&self, program: &PulseProgram, seed: u64, index: usize) -> Result<RunOutput> {
        let method = method_for(&self.cfg, seed);
        if !self.cfg.allow_over_budget {
            check_budget(self.sim.estimate_runtime(program, &method), self.cfg.budget_s)?;
        }
        let mut out = self.sim.run(program, &method)?;
        for r in std::iter::once(&mut out.forward).chain(out.echo.as_mut()) {
            r.meta.insert("point".into(), index.to_string());
            r.meta.insert("point_seed".into(), seed.to_string());
        }
        Ok(out)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.workers)
            .build()
            .map_err(|e| Error::Internal(format!("thread pool: {e}")))
    }

    fn system_json(&self) -> serde_json::Value {
        let sys = &self.built.system;
        let counts: BTreeMap<String, usize> = sys
            .species
            .iter()
            .enumerate()
            .map(|(k, s)| (s.label.clone(), sys.sites_of(k).len()))
            .filter(|(_, n)| *n > 0)
            .collect();
        json!({
            "sites": counts,
            "dimension": sys.dim(),
            "w_pp_hz": rad_to_hz(self.built.w_pp),
            "w_pp_raw_hz": rad_to_hz(self.built.w_pp_raw),
            "coupling_scale": self.built.coupling_scale,
            "sectors": self.sim.sectors().len(),
            "factorized": self.sim.is_factorized(),
        })
    }

    fn finish(self, preset: Preset, summary: serde_json::Value, failures: Vec<PointFailure>) -> Result<RunReport> {
        self.out.json("summary.json", "summary", &summary)?;
        let created = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut files = self.out.entries();
        let manifest = json!({
            "format_version": MANIFEST_FORMAT_VERSION,
            "name": self.cfg.name,
            "kind": self.cfg.kind.as_str(),
            "preset": preset.as_str(),
            "master_seed": self.cfg.seed,
            "created_unix_s": created,
            "config": self.cfg,
            "system": self.system_json(),
            "files": files,
            "failures": failures,
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Internal(e.to_string()))? + "\n";
        write_atomic(&self.cfg.output_dir.join("manifest.json"), text.as_bytes())?;
        files.push(FileEntry {
            path: "manifest.json".into(),
            kind: "manifest".into(),
            point: None,
            seed: None,
            params: Params::new(),
        });
        Ok(RunReport {
            output_dir: self.cfg.output_dir.clone(),
            files,
            failures,
            summary,
        })
    }
}

/// Runs the configured experiment. Per-point failures are collected in the
/// report and the manifest; configuration and cluster errors abort.
pub fn run_experiment(cfg: &ExperimentConfig, preset: Preset) -> Result<RunReport> {
    let ctx = Context::new(cfg)?;
    match cfg.kind {
        ExperimentKind::Dtc => run_dtc(ctx, preset),
        ExperimentKind::Echo => run_echo(ctx, preset),
        ExperimentKind::Phasepair => run_phasepair(ctx, preset),
    }
}

struct DtcPoint {
    f: f64,
    peak_nu_tilde: f64,
}

fn run_dtc(ctx: Context, preset: Preset) -> Result<RunReport> {
    let cfg = &ctx.cfg;
    let points = cfg.points();
    let opts = cfg.analysis.spectrum_options();
    let results: Vec<Result<DtcPoint>> = ctx.pool()?.install(|| {
        points
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let seed = point_seed(cfg.seed, i);
                let program = dtc_program(p.tau, p.theta, cfg.drive.n_max, cfg.drive.mode, &ctx.params)?;
                let out = ctx.execute(&program, seed, i)?;
                let spec = analysis::spectrum(&out.forward, &opts)?;
                let f = crystalline_fraction(&spec)?;
                let params = point_params(p);
                ctx.out.write(&format!("records/point_{i:03}.csv"), "record", &out.forward.to_csv(), Some(i), Some(seed), &params)?;
                ctx.out.write(&format!("spectra/point_{i:03}.csv"), "spectrum", &spec.to_csv(), Some(i), Some(seed), &params)?;
                Ok(DtcPoint {
                    f,
                    peak_nu_tilde: spec.bins[spec.peak_bin()].nu_tilde,
                })
            })
            .collect()
    });

    let w = ctx.built.w_pp;
    let mut failures = Vec::new();
    let mut table = String::from("# dtcsim-fractions format_version=1\nindex,tau,theta,theta_pi,w_tau,f,peak_nu_tilde,status\n");
    let mut point_json = Vec::new();
    for (i, (p, r)) in points.iter().zip(&results).enumerate() {
        let (f, peak, status) = match r {
            Ok(d) => (d.f.to_string(), d.peak_nu_tilde.to_string(), "ok".to_string()),
            Err(e) => {
                failures.push(PointFailure {
                    point: i,
                    params: point_params(p),
                    error: e.to_string(),
                });
                (String::new(), String::new(), format!("failed: {e}").replace(',', ";"))
            }
        };
        let _ = writeln!(
            table,
            "{i},{},{},{},{},{f},{peak},{status}",
            p.tau,
            p.theta,
            p.theta / std::f64::consts::PI,
            w * p.tau
        );
        point_json.push(json!({
            "index": i,
            "tau_s": p.tau,
            "theta_pi": p.theta / std::f64::consts::PI,
            "w_tau": w * p.tau,
            "f": r.as_ref().ok().map(|d| d.f),
            "peak_nu_tilde": r.as_ref().ok().map(|d| d.peak_nu_tilde),
            "status": status,
        }));
    }
    ctx.out.write("fractions.csv", "fractions", &table, None, None, &Params::new())?;

    let mut rows: Vec<CrystalFitRow> = cfg
        .taus()
        .into_iter()
        .map(|tau| {
            let mut theta = Vec::new();
            let mut f = Vec::new();
            for (p, r) in points.iter().zip(&results) {
                if p.tau == tau {
                    if let Ok(d) = r {
                        theta.push(p.theta);
                        f.push(d.f);
                    }
                }
            }
            CrystalFitRow {
                tau,
                w_tau: w * tau,
                theta,
                f,
                fit: None,
                status: String::new(),
            }
        })
        .collect();
    fit_rows(&mut rows);
    let cutoff = cfg.analysis.cutoff;
    let bounds = dtc_boundary(&rows, cutoff);
    ctx.out.write("fits.csv", "fits", &fits_csv(&rows, cutoff), None, None, &Params::new())?;
    ctx.out.write("boundary.csv", "boundary", &boundary_csv(&bounds, cutoff), None, None, &Params::new())?;

    let summary = json!({
        "format_version": SUMMARY_FORMAT_VERSION,
        "kind": "dtc",
        "name": cfg.name,
        "w_pp_hz": rad_to_hz(w),
        "cutoff": cutoff,
        "points": point_json,
        "fits": rows.iter().map(|r| json!({
            "tau_s": r.tau,
            "w_tau": r.w_tau,
            "fit": r.fit,
            "status": r.status,
        })).collect::<Vec<_>>(),
        "boundary": bounds,
    });
    ctx.finish(preset, summary, failures)
}

#[derive(Clone, Debug, Serialize)]
pub struct EchoResult {
    pub index: usize,
    pub n: usize,
    pub tau_s: f64,
    pub theta_pi: f64,
    pub peak: EchoPeak,
    /// `|M_z|` of the uninterrupted sequence at `N + round(N′_peak)`.
    pub continuation: Option<f64>,
}

fn run_echo(ctx: Context, preset: Preset) -> Result<RunReport> {
    let cfg = &ctx.cfg;
    let jobs: Vec<(DrivePoint, usize)> = cfg
        .points()
        .into_iter()
        .flat_map(|p| cfg.echo.n_forward.iter().map(move |&n| (p, n)))
        .collect();
    let n_echo = cfg.echo.n_echo;
    let results: Vec<Result<EchoResult>> = ctx.pool()?.install(|| {
        jobs.par_iter()
            .enumerate()
            .map(|(i, (p, n))| {
                let seed = point_seed(cfg.seed, i);
                let mut params = point_params(p);
                params.insert("n".into(), json!(n));
                params.insert("n_echo".into(), json!(n_echo));
                let program = echo_program(p.tau, p.theta, *n, n_echo, cfg.drive.mode, &ctx.params)?;
                let out = ctx.execute(&program, seed, i)?;
                let echo = out.echo.ok_or_else(|| Error::Internal("echo program produced no echo record".into()))?;
                let cont_program = dtc_program(p.tau, p.theta, n + n_echo, cfg.drive.mode, &ctx.params)?;
                let cont = ctx.execute(&cont_program, seed, i)?.forward;
                ctx.out.write(&format!("records/echo_{i:03}.csv"), "echo-record", &echo.to_csv(), Some(i), Some(seed), &params)?;
                ctx.out.write(
                    &format!("records/echo_{i:03}_continued.csv"),
                    "record",
                    &cont.to_csv(),
                    Some(i),
                    Some(seed),
                    &params,
                )?;
                let pts: Vec<(f64, f64)> = echo.samples.iter().map(|s| (s.n as f64, s.mz)).collect();
                let peak = echo_peak(&pts, *n as f64);
                let continuation = match peak {
                    EchoPeak::Found { location, .. } => {
                        let k = n + location.round().max(0.0) as usize;
                        cont.sample(k).map(|s| s.mz.abs())
                    }
                    EchoPeak::NoEcho => None,
                };
                Ok(EchoResult {
                    index: i,
                    n: *n,
                    tau_s: p.tau,
                    theta_pi: p.theta / std::f64::consts::PI,
                    peak,
                    continuation,
                })
            })
            .collect()
    });
    let mut failures = Vec::new();
    let mut entries = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(e) => entries.push(e),
            Err(e) => {
                let (p, n) = &jobs[i];
                let mut params = point_params(p);
                params.insert("n".into(), json!(n));
                failures.push(PointFailure {
                    point: i,
                    params,
                    error: e.to_string(),
                });
            }
        }
    }
    let doc = json!({ "format_version": SUMMARY_FORMAT_VERSION, "n_echo": n_echo, "echoes": entries });
    ctx.out.json("echo.json", "echo", &doc)?;
    let summary = json!({
        "format_version": SUMMARY_FORMAT_VERSION,
        "kind": "echo",
        "name": cfg.name,
        "w_pp_hz": rad_to_hz(ctx.built.w_pp),
        "echoes": entries,
    });
    ctx.finish(preset, summary, failures)
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayEntry {
    pub index: usize,
    pub pair: String,
    pub tau_s: f64,
    /// N_{1/e} in blocks of two pulses.
    pub decay: DecayTime,
}

fn run_phasepair(ctx: Context, preset: Preset) -> Result<RunReport> {
    let cfg = &ctx.cfg;
    let jobs: Vec<(f64, String)> = cfg
        .taus()
        .into_iter()
        .flat_map(|t| cfg.phasepair.pairs.iter().map(move |p| (t, p.clone())))
        .collect();
    let results: Vec<Result<DecayEntry>> = ctx.pool()?.install(|| {
        jobs.par_iter()
            .enumerate()
            .map(|(i, (tau, pair))| {
                let seed = point_seed(cfg.seed, i);
                let (a, b) = parse_pair(pair)?;
                let program = phase_pair_program(*tau, a, b, cfg.drive.n_max, cfg.drive.mode, &ctx.params)?;
                let out = ctx.execute(&program, seed, i)?;
                let params = Params::from([("tau_s".to_string(), json!(tau)), ("pair".to_string(), json!(pair))]);
                ctx.out.write(&format!("records/pair_{i:03}_{pair}.csv"), "record", &out.forward.to_csv(), Some(i), Some(seed), &params)?;
                Ok(DecayEntry {
                    index: i,
                    pair: pair.clone(),
                    tau_s: *tau,
                    decay: decay_time(&out.forward),
                })
            })
            .collect()
    });
    let mut failures = Vec::new();
    let mut entries = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(e) => entries.push(e),
            Err(e) => failures.push(PointFailure {
                point: i,
                params: Params::from([("tau_s".to_string(), json!(jobs[i].0)), ("pair".to_string(), json!(jobs[i].1))]),
                error: e.to_string(),
            }),
        }
    }
    let doc = json!({ "format_version": SUMMARY_FORMAT_VERSION, "decay_times": entries });
    ctx.out.json("decay_times.json", "decay-times", &doc)?;
    let summary = json!({
        "format_version": SUMMARY_FORMAT_VERSION,
        "kind": "phasepair",
        "name": cfg.name,
        "w_pp_hz": rad_to_hz(ctx.built.w_pp),
        "decay_times": entries,
    });
    ctx.finish(preset, summary, failures)
}

/// Spectrum, crystalline fraction and decay time of stored records. Writes
/// `<stem>.spectrum.csv` per input and `analysis.json` into `out`.
pub fn analyze_files(inputs: &[PathBuf], analysis_cfg: &AnalysisConfig, out: &Path) -> Result<serde_json::Value> {
    if inputs.is_empty() {
        return Err(Error::InvalidInput("no record files given".into()));
    }
    let opts = analysis_cfg.spectrum_options();
    let mut entries = Vec::new();
    for path in inputs {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let record = EvolutionRecord::parse_csv(&text)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "record".into());
        let spectrum = analysis::spectrum(&record, &opts);
        let f = spectrum.as_ref().ok().and_then(|s| crystalline_fraction(s).ok());
        if let Ok(s) = &spectrum {
            write_atomic(&out.join(format!("{stem}.spectrum.csv")), s.to_csv().as_bytes())?;
        }
        entries.push(json!({
            "input": path.to_string_lossy(),
            "f": f,
            "spectrum_error": spectrum.err().map(|e| e.to_string()),
            "decay": decay_time(&record),
        }));
    }
    let doc = json!({ "format_version": SUMMARY_FORMAT_VERSION, "records": entries });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Internal(e.to_string()))? + "\n";
    write_atomic(&out.join("analysis.json"), text.as_bytes())?;
    Ok(doc)
}
