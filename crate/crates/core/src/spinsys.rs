//! Spin species, cluster geometry and secular dipolar couplings.
//!
//! All couplings are stored as angular frequencies (rad/s) with ħ = 1, so
//! `b_ij` multiplies dimensionless spin operators directly in the
//! Hamiltonian.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::Deserialize;

use crate::constants::{ANGSTROM, HBAR, MU_0_OVER_4PI};
use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Default hard cap on the Hilbert-space dimension of a system.
pub const DEFAULT_DIM_CAP: usize = 1 << 16;

/// Default minimum pairwise distance, 0.5 Å.
pub const DEFAULT_MIN_DISTANCE: f64 = 0.5 * ANGSTROM;

/// Supported spin quantum numbers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Spin {
    Half,
    One,
}

impl Spin {
    pub fn from_value(s: f64) -> Result<Self> {
        if s == 0.5 {
            Ok(Spin::Half)
        } else if s == 1.0 {
            Ok(Spin::One)
        } else {
            Err(Error::UnsupportedSpin(s))
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Spin::Half => 0.5,
            Spin::One => 1.0,
        }
    }

    /// Multiplicity `2s + 1`.
    pub fn multiplicity(self) -> usize {
        match self {
            Spin::Half => 2,
            Spin::One => 3,
        }
    }

    /// Magnetic quantum numbers ordered from `+s` down to `−s`.
    pub fn m_values(self) -> Vec<f64> {
        match self {
            Spin::Half => vec![0.5, -0.5],
            Spin::One => vec![1.0, 0.0, -1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpinSpecies {
    pub label: String,
    pub spin: Spin,
    /// rad·s⁻¹·T⁻¹
    pub gyromagnetic_ratio: f64,
    /// rad/s, `γ · H₀`
    pub larmor_frequency: f64,
}

impl SpinSpecies {
    pub fn new(label: impl Into<String>, spin: Spin, gyromagnetic_ratio: f64, static_field: f64) -> Self {
        SpinSpecies {
            label: label.into(),
            spin,
            gyromagnetic_ratio,
            larmor_frequency: gyromagnetic_ratio * static_field,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpinSite {
    /// Index into [`SpinSystem::species`].
    pub species: usize,
    /// Position in meters.
    pub position: Vec3,
}

/// Symmetric table of pairwise couplings with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingTable {
    n: usize,
    values: Vec<f64>,
}

impl CouplingTable {
    pub fn zeros(n: usize) -> Self {
        CouplingTable {
            n,
            values: vec![0.0; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    fn set(&mut self, i: usize, j: usize, b: f64) {
        self.values[i * self.n + j] = b;
        self.values[j * self.n + i] = b;
    }

    /// Unordered pairs `(i, j, b_ij)` with `i < j`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| ((i + 1)..self.n).map(move |j| (i, j, self.get(i, j))))
    }
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn normalized_axis(axis: Vec3) -> Result<Vec3> {
    let n = norm(axis);
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::InvalidAxis(format!("{axis:?} has no direction")));
    }
    Ok([axis[0] / n, axis[1] / n, axis[2] / n])
}

/// Secular dipolar coupling constant in rad/s:
/// `b = (μ₀/4π) γᵢγⱼħ / r³ · ½(1 − 3cos²θ)`, θ measured from `field_axis`.
pub fn dipolar_coupling(pos_i: Vec3, pos_j: Vec3, gamma_i: f64, gamma_j: f64, field_axis: Vec3) -> Result<f64> {
    let axis = normalized_axis(field_axis)?;
    let r = sub(pos_j, pos_i);
    let dist = norm(r);
    if !(dist > 0.0) {
        return Err(Error::DegenerateGeometry(format!(
            "coincident positions {pos_i:?} and {pos_j:?}"
        )));
    }
    let cos_theta = dot(r, axis) / dist;
    let b = MU_0_OVER_4PI * gamma_i * gamma_j * HBAR / dist.powi(3) * 0.5 * (1.0 - 3.0 * cos_theta * cos_theta);
    if !b.is_finite() {
        return Err(Error::DegenerateGeometry(format!("non-finite coupling at r = {dist:e} m")));
    }
    Ok(b)
}

#[derive(Clone, Debug)]
pub struct SystemOptions {
    pub dim_cap: usize,
    pub min_distance: f64,
}

impl Default for SystemOptions {
    fn default() -> Self {
        SystemOptions {
            dim_cap: DEFAULT_DIM_CAP,
            min_distance: DEFAULT_MIN_DISTANCE,
        }
    }
}

/// A finite cluster of spins with precomputed couplings.
#[derive(Clone, Debug, PartialEq)]
pub struct SpinSystem {
    pub species: Vec<SpinSpecies>,
    pub sites: Vec<SpinSite>,
    pub field_axis: Vec3,
    pub couplings: CouplingTable,
    /// Resonance offset Ω of the driven species, rad/s.
    pub offset: f64,
    /// Index of the driven (pulsed, detected) species.
    pub driven: usize,
    dim: usize,
}

impl SpinSystem {
    pub fn new(
        species: Vec<SpinSpecies>,
        sites: Vec<SpinSite>,
        field_axis: Vec3,
        driven: &str,
        offset: f64,
        options: &SystemOptions,
    ) -> Result<Self> {
        let axis = normalized_axis(field_axis)?;
        let driven = species
            .iter()
            .position(|s| s.label == driven)
            .ok_or_else(|| Error::Config(format!("driven species `{driven}` is not defined")))?;
        if sites.is_empty() {
            return Err(Error::Config("cluster has no sites".into()));
        }
        if let Some(s) = sites.iter().find(|s| s.species >= species.len()) {
            return Err(Error::Config(format!("site references unknown species index {}", s.species)));
        }
        let mut dim: usize = 1;
        for site in &sites {
            dim = dim.saturating_mul(species[site.species].spin.multiplicity());
        }
        if dim > options.dim_cap {
            return Err(Error::Capacity {
                what: "Hilbert-space dimension",
                count: dim,
                cap: options.dim_cap,
            });
        }
        let n = sites.len();
        let mut couplings = CouplingTable::zeros(n);
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (&sites[i], &sites[j]);
                let dist = norm(sub(a.position, b.position));
                if dist < options.min_distance {
                    return Err(Error::DegenerateGeometry(format!(
                        "sites {i} and {j} are {:.3} Å apart (minimum {:.3} Å)",
                        dist / ANGSTROM,
                        options.min_distance / ANGSTROM
                    )));
                }
                let bij = dipolar_coupling(
                    a.position,
                    b.position,
                    species[a.species].gyromagnetic_ratio,
                    species[b.species].gyromagnetic_ratio,
                    axis,
                )?;
                couplings.set(i, j, bij);
            }
        }
        Ok(SpinSystem {
            species,
            sites,
            field_axis: axis,
            couplings,
            offset,
            driven,
            dim,
        })
    }

    /// Hilbert-space dimension `Π (2s + 1)`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn species_index(&self, label: &str) -> Option<usize> {
        self.species.iter().position(|s| s.label == label)
    }

    pub fn driven_species(&self) -> &SpinSpecies {
        &self.species[self.driven]
    }

    pub fn spin_of(&self, site: usize) -> Spin {
        self.species[self.sites[site].species].spin
    }

    pub fn spins(&self) -> Vec<Spin> {
        (0..self.len()).map(|i| self.spin_of(i)).collect()
    }

    /// Site indices belonging to a species, in system order.
    pub fn sites_of(&self, species: usize) -> Vec<usize> {
        self.sites
            .iter()
            .enumerate()
            .filter(|(_, s)| s.species == species)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sites_of_label(&self, label: &str) -> Vec<usize> {
        self.species_index(label).map(|s| self.sites_of(s)).unwrap_or_default()
    }

    pub fn driven_sites(&self) -> Vec<usize> {
        self.sites_of(self.driven)
    }

    pub fn coupling(&self, i: usize, j: usize) -> f64 {
        self.couplings.get(i, j)
    }

    /// Multiplies every coupling by `factor`, holding geometry fixed.
    pub fn scale_couplings(&mut self, factor: f64) {
        for v in &mut self.couplings.values {
            *v *= factor;
        }
    }

    /// Root-sum-square of the couplings from site `i` to every other site of
    /// species `partner`.
    pub fn local_interaction(&self, i: usize, partner: usize) -> f64 {
        self.sites
            .iter()
            .enumerate()
            .filter(|(j, s)| *j != i && s.species == partner)
            .map(|(j, _)| self.coupling(i, j).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Typical interaction scale `W` for a species pair: the median over
    /// sites of the first species of the root-sum-square coupling to all
    /// sites of the second species.
    pub fn interaction_scale(&self, species_a: &str, species_b: &str) -> Result<f64> {
        let a = self
            .species_index(species_a)
            .ok_or_else(|| Error::EmptySelection(format!("no species `{species_a}`")))?;
        let b = self
            .species_index(species_b)
            .ok_or_else(|| Error::EmptySelection(format!("no species `{species_b}`")))?;
        let partners = self.sites_of(b);
        let mut locals: Vec<f64> = self
            .sites_of(a)
            .into_iter()
            .filter(|&i| partners.iter().any(|&j| j != i))
            .map(|i| self.local_interaction(i, b))
            .collect();
        if locals.is_empty() {
            return Err(Error::EmptySelection(format!(
                "no {species_a}–{species_b} pair in the cluster"
            )));
        }
        locals.sort_by(|x, y| x.total_cmp(y));
        let n = locals.len();
        Ok(if n % 2 == 1 {
            locals[n / 2]
        } else {
            0.5 * (locals[n / 2 - 1] + locals[n / 2])
        })
    }
}

// ---------------------------------------------------------------------------
// Geometry configuration

pub const GEOMETRY_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SpeciesConfig {
    pub label: String,
    pub spin: f64,
    /// γ/2π in MHz/T.
    pub gamma_mhz_per_tesla: f64,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SiteConfig {
    pub species: String,
    /// Fractional coordinates in the unit cell.
    pub frac: Vec3,
}

/// Crystal description read from a geometry file.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub format_version: u32,
    #[serde(default)]
    pub description: String,
    pub static_field_tesla: f64,
    pub field_axis: Vec3,
    pub driven: String,
    /// Lattice vectors as rows, Å.
    pub unit_cell: [Vec3; 3],
    pub species: Vec<SpeciesConfig>,
    pub sites: Vec<SiteConfig>,
}

impl GeometryConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::de::Deserializer::parse(text).map_err(|e| Error::Schema {
            path: "<geometry>".into(),
            message: e.to_string(),
        })?;
        let cfg: GeometryConfig = deserialize_tracked(de)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != GEOMETRY_FORMAT_VERSION {
            return Err(schema(
                "format_version",
                format!("unsupported version {} (expected {GEOMETRY_FORMAT_VERSION})", self.format_version),
            ));
        }
        if !(self.static_field_tesla.is_finite() && self.static_field_tesla > 0.0) {
            return Err(schema("static_field_tesla", "must be positive"));
        }
        normalized_axis(self.field_axis)?;
        if self.species.is_empty() {
            return Err(schema("species", "at least one species required"));
        }
        for (k, sp) in self.species.iter().enumerate() {
            Spin::from_value(sp.spin).map_err(|e| schema(&format!("species[{k}].spin"), e.to_string()))?;
            if !sp.gamma_mhz_per_tesla.is_finite() || sp.gamma_mhz_per_tesla == 0.0 {
                return Err(schema(&format!("species[{k}].gamma_mhz_per_tesla"), "must be finite and nonzero"));
            }
            if self.species[..k].iter().any(|o| o.label == sp.label) {
                return Err(schema(&format!("species[{k}].label"), format!("duplicate label `{}`", sp.label)));
            }
        }
        if !self.species.iter().any(|s| s.label == self.driven) {
            return Err(schema("driven", format!("`{}` is not a declared species", self.driven)));
        }
        for (k, site) in self.sites.iter().enumerate() {
            if !self.species.iter().any(|s| s.label == site.species) {
                return Err(schema(&format!("sites[{k}].species"), format!("unknown species `{}`", site.species)));
            }
            if site.frac.iter().any(|f| !f.is_finite()) {
                return Err(schema(&format!("sites[{k}].frac"), "non-finite coordinate"));
            }
        }
        if !self.sites.iter().any(|s| s.species == self.driven) {
            return Err(schema("sites", "no site of the driven species"));
        }
        let cell = self.unit_cell_m();
        let volume = dot(cell[0], cross(cell[1], cell[2])).abs();
        if !(volume.is_finite() && volume > 0.0) {
            return Err(schema("unit_cell", "lattice vectors are degenerate"));
        }
        Ok(())
    }

    fn unit_cell_m(&self) -> [Vec3; 3] {
        self.unit_cell.map(|v| v.map(|x| x * ANGSTROM))
    }

    pub fn species_list(&self) -> Result<Vec<SpinSpecies>> {
        self.species
            .iter()
            .map(|s| {
                Ok(SpinSpecies::new(
                    s.label.clone(),
                    Spin::from_value(s.spin)?,
                    2.0 * PI * s.gamma_mhz_per_tesla * 1e6,
                    self.static_field_tesla,
                ))
            })
            .collect()
    }
}

fn schema(path: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_string(),
        message: message.into(),
    }
}

/// Deserializes while reporting the offending key path on failure.
pub(crate) fn deserialize_tracked<'de, T, D>(de: D) -> Result<T>
where
    T: Deserialize<'de>,
    D: serde::Deserializer<'de>,
    D::Error: std::fmt::Display,
{
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Schema {
            path,
            message: e.into_inner().to_string(),
        }
    })
}

/// Cluster selection around the central driven spin.
#[derive(Clone, Debug)]
pub struct ClusterSpec {
    /// Selection radius in meters.
    pub radius: f64,
    /// Maximum number of selected sites after per-species limits.
    pub max_sites: usize,
    /// Keep at most this many sites of a species (nearest first).
    pub species_limits: BTreeMap<String, usize>,
    /// Species excluded from the cluster (e.g. `H` for idealized ¹H off).
    pub disabled_species: Vec<String>,
    /// Resonance offset Ω, rad/s.
    pub offset: f64,
    pub options: SystemOptions,
}

impl ClusterSpec {
    pub fn new(radius: f64) -> Self {
        ClusterSpec {
            radius,
            max_sites: 16,
            species_limits: BTreeMap::new(),
            disabled_species: Vec::new(),
            offset: 0.0,
            options: SystemOptions::default(),
        }
    }
}

/// Selects every site within `spec.radius` of the first driven site of the
/// reference cell, ordered by distance then by `(x, y, z)`.
pub fn build_cluster(geometry: &GeometryConfig, spec: &ClusterSpec) -> Result<SpinSystem> {
    geometry.validate()?;
    if !(spec.radius.is_finite() && spec.radius >= 0.0) {
        return Err(Error::Config("cluster radius must be non-negative".into()));
    }
    for label in spec.species_limits.keys().chain(spec.disabled_species.iter()) {
        if !geometry.species.iter().any(|s| &s.label == label) {
            return Err(Error::Config(format!("unknown species `{label}` in cluster spec")));
        }
    }
    if spec.disabled_species.contains(&geometry.driven) {
        return Err(Error::Config("the driven species cannot be disabled".into()));
    }
    let species = geometry.species_list()?;
    let cell = geometry.unit_cell_m();
    let to_cart = |f: Vec3| -> Vec3 {
        let mut out = [0.0; 3];
        for (k, v) in cell.iter().enumerate() {
            for a in 0..3 {
                out[a] += f[k] * v[a];
            }
        }
        out
    };
    let center_site = geometry
        .sites
        .iter()
        .find(|s| s.species == geometry.driven)
        .expect("validated");
    let center = to_cart(center_site.frac);

    let volume = dot(cell[0], cross(cell[1], cell[2])).abs();
    let heights = [
        volume / norm(cross(cell[1], cell[2])),
        volume / norm(cross(cell[2], cell[0])),
        volume / norm(cross(cell[0], cell[1])),
    ];
    let reach: Vec<i64> = heights
        .iter()
        .map(|h| (spec.radius / h).ceil() as i64 + 1)
        .collect();
    if reach.iter().any(|&r| r > 64) {
        return Err(Error::Config("cluster radius spans too many unit cells".into()));
    }

    let mut candidates: Vec<(usize, Vec3, f64)> = Vec::new();
    for i in -reach[0]..=reach[0] {
        for j in -reach[1]..=reach[1] {
            for k in -reach[2]..=reach[2] {
                for site in &geometry.sites {
                    if spec.disabled_species.contains(&site.species) {
                        continue;
                    }
                    let frac = [site.frac[0] + i as f64, site.frac[1] + j as f64, site.frac[2] + k as f64];
                    let rel = sub(to_cart(frac), center);
                    let dist = norm(rel);
                    if dist <= spec.radius * (1.0 + 1e-12) {
                        let sp = species.iter().position(|s| s.label == site.species).expect("validated");
                        candidates.push((sp, rel, dist));
                    }
                }
            }
        }
    }
    // Quantized keys keep the order stable against last-bit noise.
    let q = |x: f64| (x / (1e-6 * ANGSTROM)).round() as i64;
    candidates.sort_by(|a, b| {
        q(a.2)
            .cmp(&q(b.2))
            .then_with(|| q(a.1[0]).cmp(&q(b.1[0])))
            .then_with(|| q(a.1[1]).cmp(&q(b.1[1])))
            .then_with(|| q(a.1[2]).cmp(&q(b.1[2])))
            .then_with(|| a.0.cmp(&b.0))
            .then(Ordering::Equal)
    });

    let mut kept: BTreeMap<usize, usize> = BTreeMap::new();
    let mut sites = Vec::new();
    for (sp, rel, _) in candidates {
        let label = &species[sp].label;
        let count = kept.entry(sp).or_insert(0);
        if let Some(&limit) = spec.species_limits.get(label) {
            if *count >= limit {
                continue;
            }
        }
        *count += 1;
        sites.push(SpinSite { species: sp, position: rel });
    }
    if sites.is_empty() {
        return Err(Error::Config("cluster selection is empty".into()));
    }
    if sites.len() > spec.max_sites {
        return Err(Error::Capacity {
            what: "cluster site count",
            count: sites.len(),
            cap: spec.max_sites,
        });
    }
    SpinSystem::new(
        species,
        sites,
        geometry.field_axis,
        &geometry.driven,
        spec.offset,
        &spec.options,
    )
}
