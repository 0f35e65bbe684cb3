//! Experiment configuration files.
//!
//! A configuration is a TOML document. Presets are partial documents; the
//! user file is merged over the preset (user keys win, tables merge
//! recursively) and command-line overrides are merged last. Dimensionful
//! values carry their unit in the key name (`tau_us`, `omega1_hz`, ...) and
//! angles are written in units of π.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{SpectrumOptions, Taper, DEFAULT_CUTOFF};
use crate::constants::{hz_to_rad, ANGSTROM};
use crate::engine::TypicalityBackend;
use crate::error::{Error, Result};
use crate::hamiltonian::TransversePhase;
use crate::sequence::PulseMode;
use crate::spinsys::deserialize_tracked;

pub const CONFIG_FORMAT_VERSION: u32 = 1;
pub const BUILTIN_GEOMETRY: &str = "builtin:adp_like";
pub const ADP_LIKE_GEOMETRY: &str = include_str!("../../presets/adp_like.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    #[default]
    Dtc,
    Echo,
    Phasepair,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Dtc => "dtc",
            ExperimentKind::Echo => "echo",
            ExperimentKind::Phasepair => "phasepair",
        }
    }
}

/// Treatment of the ¹H spins.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProtonHandling {
    /// Protons removed from the cluster.
    #[default]
    Off,
    /// Protons present, heteronuclear coupling active.
    On,
    /// Protons present under continuous decoupling.
    Cw,
}

impl ProtonHandling {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(ProtonHandling::Off),
            "on" => Ok(ProtonHandling::On),
            "cw" => Ok(ProtonHandling::Cw),
            _ => Err(Error::Config(format!("unknown ¹H handling `{s}` (off, on, cw)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    #[default]
    Dense,
    Typicality,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Auto,
    Dense,
    Krylov,
}

impl From<BackendKind> for TypicalityBackend {
    fn from(b: BackendKind) -> Self {
        match b {
            BackendKind::Auto => TypicalityBackend::Auto,
            BackendKind::Dense => TypicalityBackend::Dense,
            BackendKind::Krylov => TypicalityBackend::Krylov,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    /// `builtin:adp_like` or a geometry file path.
    pub geometry: String,
    pub radius_angstrom: f64,
    pub max_sites: usize,
    /// Number of driven spins kept (nearest first).
    pub driven_count: usize,
    pub h1: ProtonHandling,
    pub h1_count: usize,
    /// γ_H H₁/2π of the cw decoupling field.
    pub cw_amplitude_hz: f64,
    pub n14: bool,
    pub n14_count: usize,
    /// Turn off every internal interaction (single-spin reference).
    pub interactions: bool,
    /// Rescale all couplings so that W^{P,P}/2π takes this value.
    pub target_w_pp_hz: Option<f64>,
    /// Resonance offset Ω/2π.
    pub offset_hz: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            geometry: BUILTIN_GEOMETRY.into(),
            radius_angstrom: 12.0,
            max_sites: 16,
            driven_count: 8,
            h1: ProtonHandling::Off,
            h1_count: 4,
            cw_amplitude_hz: 18e3,
            n14: false,
            n14_count: 1,
            interactions: true,
            target_w_pp_hz: None,
            offset_hz: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointConfig {
    pub tau_us: f64,
    pub theta_pi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriveConfig {
    pub mode: PulseMode,
    /// ω₁/2π.
    pub omega1_hz: f64,
    pub tau_us: Vec<f64>,
    pub theta_pi: Vec<f64>,
    /// Explicit (τ, θ) points; replaces the τ × θ grid when nonempty.
    pub points: Vec<PointConfig>,
    pub n_max: usize,
}

impl Default for DriveConfig {
    fn default() -> Self {
        DriveConfig {
            mode: PulseMode::Delta,
            omega1_hz: 68e3,
            tau_us: Vec::new(),
            theta_pi: vec![1.0],
            points: Vec::new(),
            n_max: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    pub kind: MethodKind,
    pub replicas: usize,
    pub backend: BackendKind,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            kind: MethodKind::Dense,
            replicas: 16,
            backend: BackendKind::Auto,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub window_start: usize,
    pub window_length: Option<usize>,
    pub subtract_mean: bool,
    pub taper: Taper,
    pub padded_length: Option<usize>,
    pub cutoff: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            window_start: 1,
            window_length: None,
            subtract_mean: false,
            taper: Taper::None,
            padded_length: None,
            cutoff: DEFAULT_CUTOFF,
        }
    }
}

impl AnalysisConfig {
    pub fn spectrum_options(&self) -> SpectrumOptions {
        SpectrumOptions {
            start: self.window_start,
            length: self.window_length,
            subtract_mean: self.subtract_mean,
            taper: self.taper,
            padded_length: self.padded_length,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EchoConfig {
    /// Forward cycle counts N.
    pub n_forward: Vec<usize>,
    /// Echo blocks N′ after each forward segment.
    pub n_echo: usize,
}

impl Default for EchoConfig {
    fn default() -> Self {
        EchoConfig {
            n_forward: vec![2, 6, 10],
            n_echo: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhasePairConfig {
    /// Two-letter phase pairs such as `XY`.
    pub pairs: Vec<String>,
}

impl Default for PhasePairConfig {
    fn default() -> Self {
        PhasePairConfig {
            pairs: vec!["XX".into(), "YY".into(), "XY".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Per-point runtime budget in seconds.
    #[serde(default = "default_budget")]
    pub budget_s: f64,
    #[serde(default)]
    pub allow_over_budget: bool,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub drive: DriveConfig,
    #[serde(default)]
    pub method: MethodConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub echo: EchoConfig,
    #[serde(default)]
    pub phasepair: PhasePairConfig,
}

fn default_workers() -> usize {
    1
}

fn default_budget() -> f64 {
    600.0
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn schema(path: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_string(),
        message: message.into(),
    }
}

fn positive(path: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(schema(path, format!("must be positive, got {v}")))
    }
}

/// One simulated (τ, θ) point in SI units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DrivePoint {
    pub tau: f64,
    pub theta: f64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(schema(
                "format_version",
                format!("unsupported version {} (expected {CONFIG_FORMAT_VERSION})", self.format_version),
            ));
        }
        if self.workers == 0 {
            return Err(schema("workers", "must be at least 1"));
        }
        positive("budget_s", self.budget_s)?;
        let c = &self.cluster;
        positive("cluster.radius_angstrom", c.radius_angstrom)?;
        if c.driven_count == 0 {
            return Err(schema("cluster.driven_count", "must be at least 1"));
        }
        if c.h1 == ProtonHandling::Cw {
            positive("cluster.cw_amplitude_hz", c.cw_amplitude_hz)?;
        }
        if c.h1 != ProtonHandling::Off && c.h1_count == 0 {
            return Err(schema("cluster.h1_count", "must be at least 1 when ¹H is included"));
        }
        if c.n14 && c.n14_count == 0 {
            return Err(schema("cluster.n14_count", "must be at least 1 when ¹⁴N is included"));
        }
        if let Some(w) = c.target_w_pp_hz {
            positive("cluster.target_w_pp_hz", w)?;
        }
        if !c.offset_hz.is_finite() {
            return Err(schema("cluster.offset_hz", "must be finite"));
        }
        let d = &self.drive;
        positive("drive.omega1_hz", d.omega1_hz)?;
        if d.n_max == 0 {
            return Err(schema("drive.n_max", "must be at least 1"));
        }
        if d.points.is_empty() {
            if d.tau_us.is_empty() {
                return Err(schema("drive.tau_us", "tau list is empty"));
            }
            if self.kind == ExperimentKind::Dtc && d.theta_pi.is_empty() {
                return Err(schema("drive.theta_pi", "theta list is empty"));
            }
        }
        for (k, &t) in d.tau_us.iter().enumerate() {
            positive(&format!("drive.tau_us[{k}]"), t)?;
        }
        for (k, &t) in d.theta_pi.iter().enumerate() {
            positive(&format!("drive.theta_pi[{k}]"), t)?;
        }
        for (k, p) in d.points.iter().enumerate() {
            positive(&format!("drive.points[{k}].tau_us"), p.tau_us)?;
            positive(&format!("drive.points[{k}].theta_pi"), p.theta_pi)?;
        }
        if self.method.kind == MethodKind::Typicality && self.method.replicas < 2 {
            return Err(schema("method.replicas", "typicality needs at least 2 replicas"));
        }
        positive("analysis.cutoff", self.analysis.cutoff)?;
        if self.analysis.cutoff >= 1.0 {
            return Err(schema("analysis.cutoff", "must be below 1"));
        }
        if self.kind == ExperimentKind::Echo {
            if self.echo.n_forward.is_empty() || self.echo.n_forward.contains(&0) {
                return Err(schema("echo.n_forward", "needs positive cycle counts"));
            }
            if self.echo.n_echo < 2 {
                return Err(schema("echo.n_echo", "needs at least 2 echo blocks"));
            }
        }
        if self.kind == ExperimentKind::Phasepair {
            if self.phasepair.pairs.is_empty() {
                return Err(schema("phasepair.pairs", "no phase pairs"));
            }
            for (k, p) in self.phasepair.pairs.iter().enumerate() {
                parse_pair(p).map_err(|e| schema(&format!("phasepair.pairs[{k}]"), e.to_string()))?;
            }
        }
        Ok(())
    }

    /// τ-major grid, or the explicit point list.
    pub fn points(&self) -> Vec<DrivePoint> {
        let d = &self.drive;
        if !d.points.is_empty() {
            return d
                .points
                .iter()
                .map(|p| DrivePoint {
                    tau: p.tau_us / 1e6,
                    theta: p.theta_pi * std::f64::consts::PI,
                })
                .collect();
        }
        d.tau_us
            .iter()
            .flat_map(|&t| {
                d.theta_pi.iter().map(move |&th| DrivePoint {
                    tau: t / 1e6,
                    theta: th * std::f64::consts::PI,
                })
            })
            .collect()
    }

    pub fn omega1(&self) -> f64 {
        hz_to_rad(self.drive.omega1_hz)
    }

    pub fn radius(&self) -> f64 {
        self.cluster.radius_angstrom * ANGSTROM
    }

    pub fn taus(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for p in self.points() {
            if !out.contains(&p.tau) {
                out.push(p.tau);
            }
        }
        out
    }
}

pub fn parse_pair(s: &str) -> Result<(TransversePhase, TransversePhase)> {
    let chars: Vec<char> = s.chars().collect();
    if chars.len() != 2 {
        return Err(Error::Config(format!("phase pair `{s}` must be two letters")));
    }
    let p = |c: char| TransversePhase::parse(&c.to_string());
    Ok((p(chars[0])?, p(chars[1])?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Fig1,
    Fig2,
    Fig3,
    Fig4,
    Custom,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fig1" => Ok(Preset::Fig1),
            "fig2" => Ok(Preset::Fig2),
            "fig3" => Ok(Preset::Fig3),
            "fig4" => Ok(Preset::Fig4),
            "custom" => Ok(Preset::Custom),
            _ => Err(Error::Config(format!("unknown preset `{s}` (fig1, fig2, fig3, fig4, custom)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Fig1 => "fig1",
            Preset::Fig2 => "fig2",
            Preset::Fig3 => "fig3",
            Preset::Fig4 => "fig4",
            Preset::Custom => "custom",
        }
    }

    pub fn text(self) -> &'static str {
        match self {
            Preset::Fig1 => include_str!("../../presets/fig1.toml"),
            Preset::Fig2 => include_str!("../../presets/fig2.toml"),
            Preset::Fig3 => include_str!("../../presets/fig3.toml"),
            Preset::Fig4 => include_str!("../../presets/fig4.toml"),
            Preset::Custom => "format_version = 1\nname = \"custom\"\n",
        }
    }
}

fn parse_table(text: &str, what: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| schema(&format!("<{what}>"), e.to_string()))
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// A `section.key = value` override as written on the command line.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub path: String,
    pub value: toml::Value,
}

impl Override {
    pub fn new(path: impl Into<String>, value: impl Into<toml::Value>) -> Self {
        Override {
            path: path.into(),
            value: value.into(),
        }
    }
}

fn apply_override(table: &mut toml::Table, o: &Override) -> Result<()> {
    let mut parts: Vec<&str> = o.path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| schema(&o.path, "empty override key"))?;
    let mut t = table;
    for p in parts {
        let entry = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry.as_table_mut().ok_or_else(|| schema(&o.path, format!("`{p}` is not a table")))?;
    }
    t.insert(last.to_string(), o.value.clone());
    Ok(())
}

/// Merges preset, user text and overrides, then validates.
pub fn load_config(preset: Preset, user: Option<&str>, overrides: &[Override]) -> Result<ExperimentConfig> {
    let mut table = parse_table(preset.text(), "preset")?;
    if let Some(text) = user {
        merge(&mut table, parse_table(text, "config")?);
    }
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: ExperimentConfig = deserialize_tracked(toml::Value::Table(table))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Like [`load_config`] for a file; relative geometry and output paths are
/// taken relative to the file's directory.
pub fn load_config_file(preset: Preset, path: &Path, overrides: &[Override]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = load_config(preset, Some(&text), overrides)?;
    let base = path.parent().unwrap_or(Path::new("."));
    if !cfg.cluster.geometry.starts_with("builtin:") && Path::new(&cfg.cluster.geometry).is_relative() {
        cfg.cluster.geometry = base.join(&cfg.cluster.geometry).to_string_lossy().into_owned();
    }
    if cfg.output_dir.is_relative() && !overrides.iter().any(|o| o.path == "output_dir") {
        cfg.output_dir = base.join(&cfg.output_dir);
    }
    Ok(cfg)
}

pub fn geometry_text(source: &str) -> Result<String> {
    match source {
        BUILTIN_GEOMETRY => Ok(ADP_LIKE_GEOMETRY.to_string()),
        s if s.starts_with("builtin:") => Err(Error::Config(format!("unknown builtin geometry `{s}`"))),
        path => std::fs::read_to_string(path).map_err(|e| Error::io(path, e)),
    }
}
