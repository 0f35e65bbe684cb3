//! Internal and rf Hamiltonians of a driven spin cluster, and the
//! zeroth-order toggling-frame average used to reason about finite pulses.
//!
//! Terms, in rad/s with ħ = 1:
//!
//! * Zeeman offset `Ω I_zT` on the driven species,
//! * homonuclear `Σ_{i<j} b_ij (3 I_zi I_zj − I_i·I_j)` between driven spins,
//! * heteronuclear `Σ_{i,j} b_ij · 2 I_zi S_zj` from a driven spin to each
//!   spectator species (Ising form only),
//! * rf `−ω₁ (cos φ I_xT + sin φ I_yT)` on a chosen species.

pub mod operator;

use std::collections::BTreeSet;
use std::f64::consts::PI;

pub use operator::{
    apply_local, kron_sites, local_axis, local_rotation, Axis, Csr, Ladder, SpinBasis, SpinOperator, DENSE_CAP,
};

use crate::error::{Error, Result};
use crate::linalg::CMat;
use crate::spinsys::{Spin, SpinSystem};

/// Dense per-site spin operators embedded in the full product space.
#[derive(Clone, Debug)]
pub struct SiteOperators {
    pub spin: Spin,
    pub x: CMat,
    pub y: CMat,
    pub z: CMat,
}

/// One [`SiteOperators`] per site, in basis order.
#[derive(Clone, Debug)]
pub struct SpinOperatorSet {
    pub basis: SpinBasis,
    pub sites: Vec<SiteOperators>,
}

/// Builds embedded `I_x, I_y, I_z` for each spin (given as quantum numbers).
pub fn spin_operators(spins: &[f64]) -> Result<SpinOperatorSet> {
    let spins: Vec<Spin> = spins.iter().map(|&s| Spin::from_value(s)).collect::<Result<_>>()?;
    let basis = SpinBasis::new(&spins);
    basis.check_dense()?;
    let sites = spins
        .iter()
        .enumerate()
        .map(|(k, &spin)| {
            let m = |a| SpinOperator::single(k, a, 1.0).to_dense(&basis);
            Ok(SiteOperators {
                spin,
                x: m(Axis::X)?,
                y: m(Axis::Y)?,
                z: m(Axis::Z)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SpinOperatorSet { basis, sites })
}

/// Which parts of the internal Hamiltonian to include.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TermFlags {
    pub zeeman: bool,
    pub homonuclear: bool,
    /// Spectator species labels whose heteronuclear coupling is included.
    pub heteronuclear: BTreeSet<String>,
}

impl TermFlags {
    /// Every term the system supports.
    pub fn all(system: &SpinSystem) -> Self {
        let heteronuclear = system
            .species
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != system.driven && !system.sites_of(*k).is_empty())
            .map(|(_, s)| s.label.clone())
            .collect();
        TermFlags {
            zeeman: true,
            homonuclear: true,
            heteronuclear,
        }
    }

    pub fn homonuclear_only() -> Self {
        TermFlags {
            zeeman: false,
            homonuclear: true,
            heteronuclear: BTreeSet::new(),
        }
    }

    pub fn labels(&self, system: &SpinSystem) -> Vec<String> {
        let p = &system.driven_species().label;
        let mut out = Vec::new();
        if self.zeeman {
            out.push(format!("zeeman_{p}"));
        }
        if self.homonuclear {
            out.push(format!("{p}{p}"));
        }
        for h in &self.heteronuclear {
            out.push(format!("{p}{h}"));
        }
        out
    }

    fn validate(&self, system: &SpinSystem) -> Result<()> {
        for label in &self.heteronuclear {
            match system.species_index(label) {
                Some(k) if k == system.driven => {
                    return Err(Error::Config(format!(
                        "`{label}` is the driven species, not a heteronuclear partner"
                    )))
                }
                Some(k) if !system.sites_of(k).is_empty() => {}
                _ => return Err(Error::Config(format!("species `{label}` is absent from the cluster"))),
            }
        }
        if self.homonuclear && system.driven_sites().is_empty() {
            return Err(Error::Config("no driven sites for the homonuclear term".into()));
        }
        Ok(())
    }
}

/// The separately stored parts of the internal Hamiltonian.
#[derive(Clone, Debug)]
pub struct HamiltonianTerms {
    pub basis: SpinBasis,
    pub zeeman: Option<SpinOperator>,
    pub homonuclear: Option<SpinOperator>,
    /// `(spectator label, operator)` per included heteronuclear term.
    pub heteronuclear: Vec<(String, SpinOperator)>,
    pub labels: Vec<String>,
}

impl HamiltonianTerms {
    pub fn total(&self) -> SpinOperator {
        let mut total = SpinOperator::zero();
        for part in self
            .zeeman
            .iter()
            .chain(self.homonuclear.iter())
            .chain(self.heteronuclear.iter().map(|(_, op)| op))
        {
            total.add_assign(part.clone());
        }
        total
    }

    pub fn total_matrix(&self) -> Result<CMat> {
        self.total().to_dense(&self.basis)
    }

    pub fn matrix(&self, op: &SpinOperator) -> Result<CMat> {
        op.to_dense(&self.basis)
    }
}

/// `Σ_{i<j} b_ij (3 I_φi I_φj − I_i·I_j)` over the given sites.
fn dipolar_axis(system: &SpinSystem, sites: &[usize], axis: Axis) -> SpinOperator {
    let mut op = SpinOperator::zero();
    for (a, &i) in sites.iter().enumerate() {
        for &j in &sites[a + 1..] {
            let b = system.coupling(i, j);
            if b == 0.0 {
                continue;
            }
            op.add_assign(SpinOperator::pair(i, axis, j, axis, 3.0 * b));
            op.add_assign(SpinOperator::heisenberg(i, j, -b));
        }
    }
    op
}

fn zeeman(system: &SpinSystem) -> SpinOperator {
    let mut op = SpinOperator::zero();
    if system.offset != 0.0 {
        for i in system.driven_sites() {
            op.add_assign(SpinOperator::single(i, Axis::Z, system.offset));
        }
    }
    op
}

fn heteronuclear(system: &SpinSystem, partner: usize) -> SpinOperator {
    let mut op = SpinOperator::zero();
    for i in system.driven_sites() {
        for j in system.sites_of(partner) {
            let b = system.coupling(i, j);
            if b != 0.0 {
                op.add_assign(SpinOperator::pair(i, Axis::Z, j, Axis::Z, 2.0 * b));
            }
        }
    }
    op
}

/// Builds the selected internal Hamiltonian terms on the full product basis.
pub fn build_internal(system: &SpinSystem, include: &TermFlags) -> Result<HamiltonianTerms> {
    include.validate(system)?;
    let basis = SpinBasis::new(&system.spins());
    let heteronuclear = include
        .heteronuclear
        .iter()
        .map(|label| {
            let k = system.species_index(label).expect("validated");
            (label.clone(), heteronuclear(system, k))
        })
        .collect();
    Ok(HamiltonianTerms {
        basis,
        zeeman: include.zeeman.then(|| zeeman(system)),
        homonuclear: include
            .homonuclear
            .then(|| dipolar_axis(system, &system.driven_sites(), Axis::Z)),
        heteronuclear,
        labels: include.labels(system),
    })
}

/// Internal Hamiltonian seen by the driven spins when every spectator site
/// sits in a fixed `S_z` eigenstate. Acts on the driven-only basis (sites
/// renumbered in system order). `spectator_m[k]` is the magnetic quantum
/// number of the k-th non-driven site.
///
/// Exact whenever nothing in the dynamics rotates the spectators: the
/// heteronuclear terms then reduce to per-site z fields
/// `h_i = Σ_j 2 b_ij m_j`.
pub fn spectator_reduced(system: &SpinSystem, include: &TermFlags, spectator_m: &[f64]) -> Result<SpinOperator> {
    include.validate(system)?;
    let driven = system.driven_sites();
    let spectators: Vec<usize> = (0..system.len()).filter(|i| !driven.contains(i)).collect();
    if spectators.len() != spectator_m.len() {
        return Err(Error::InvalidInput(format!(
            "expected {} spectator quantum numbers, got {}",
            spectators.len(),
            spectator_m.len()
        )));
    }
    let local = |site: usize| driven.iter().position(|&d| d == site).expect("driven site");
    let mut op = SpinOperator::zero();
    if include.zeeman {
        op.add_assign(zeeman(system));
    }
    if include.homonuclear {
        op.add_assign(dipolar_axis(system, &driven, Axis::Z));
    }
    for &i in &driven {
        let mut field = 0.0;
        for (&j, &m) in spectators.iter().zip(spectator_m) {
            let label = &system.species[system.sites[j].species].label;
            if include.heteronuclear.contains(label) {
                field += 2.0 * system.coupling(i, j) * m;
            }
        }
        if field != 0.0 {
            op.add_assign(SpinOperator::single(i, Axis::Z, field));
        }
    }
    Ok(op.remap_sites(local))
}

/// rf term `−ω₁ I_φT` on one species.
#[derive(Clone, Debug)]
pub struct RfTerm {
    pub phase: f64,
    pub amplitude: f64,
    pub species: String,
    pub operator: SpinOperator,
}

pub fn build_rf(system: &SpinSystem, phase: f64, amplitude: f64, species: &str) -> Result<RfTerm> {
    let k = system
        .species_index(species)
        .filter(|&k| !system.sites_of(k).is_empty())
        .ok_or_else(|| Error::Config(format!("rf target species `{species}` is absent")))?;
    let mut op = SpinOperator::zero();
    if amplitude != 0.0 {
        for i in system.sites_of(k) {
            op.add_assign(SpinOperator::single(i, Axis::X, -amplitude * phase.cos()));
            op.add_assign(SpinOperator::single(i, Axis::Y, -amplitude * phase.sin()));
        }
    }
    Ok(RfTerm {
        phase,
        amplitude,
        species: species.to_string(),
        operator: op,
    })
}

/// `H_φφ = Σ_{i<j} b_ij (3 I_φi I_φj − I_i·I_j)` over the driven spins.
pub fn dipolar_variant(system: &SpinSystem, axis: Axis) -> Result<SpinOperator> {
    if system.driven_sites().len() < 2 {
        return Err(Error::Config("dipolar variants need at least two driven sites".into()));
    }
    Ok(dipolar_axis(system, &system.driven_sites(), axis))
}

/// Transverse pulse phase used by the toggling-frame average.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransversePhase {
    X,
    Y,
    MinusX,
    MinusY,
}

impl TransversePhase {
    pub fn radians(self) -> f64 {
        match self {
            TransversePhase::X => 0.0,
            TransversePhase::Y => 0.5 * PI,
            TransversePhase::MinusX => PI,
            TransversePhase::MinusY => 1.5 * PI,
        }
    }

    pub fn axis(self) -> Axis {
        match self {
            TransversePhase::X | TransversePhase::MinusX => Axis::X,
            TransversePhase::Y | TransversePhase::MinusY => Axis::Y,
        }
    }

    pub fn parse(label: &str) -> Result<Self> {
        match label.trim() {
            "X" | "x" => Ok(TransversePhase::X),
            "Y" | "y" => Ok(TransversePhase::Y),
            "-X" | "-x" | "Xbar" => Ok(TransversePhase::MinusX),
            "-Y" | "-y" | "Ybar" => Ok(TransversePhase::MinusY),
            other => Err(Error::InvalidInput(format!("unknown pulse phase `{other}`"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TransversePhase::X => "X",
            TransversePhase::Y => "Y",
            TransversePhase::MinusX => "-X",
            TransversePhase::MinusY => "-Y",
        }
    }
}

/// Zeroth-order average of the homonuclear term over the pulse intervals of
/// a train of π pulses: the plain mean over pulses of `−½ H_φφ`, where φ is
/// each pulse's axis. Delay intervals are not included.
pub fn toggling_average(system: &SpinSystem, pulse_phases: &[TransversePhase]) -> Result<SpinOperator> {
    if pulse_phases.is_empty() {
        return Err(Error::InvalidInput("toggling average needs at least one pulse".into()));
    }
    let weight = -0.5 / pulse_phases.len() as f64;
    let mut out = SpinOperator::zero();
    for p in pulse_phases {
        out.add_assign(dipolar_variant(system, p.axis())?.scaled(weight));
    }
    Ok(out)
}
