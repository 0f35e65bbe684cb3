//! Stroboscopic evolution of the driven-species magnetization under a pulse
//! program.
//!
//! The initial state is the deviation density matrix `ρ₀ = I_zT` of the
//! driven species, and each sample reports `M_z = Tr(ρ I_zT)/Tr(I_zT²)`.
//!
//! When nothing rotates the spectator species, their `S_z` is conserved and
//! the trace splits exactly into independent driven-only sectors, one per
//! spectator configuration. Sectors that see the same local fields are
//! merged.

pub mod krylov;
pub mod propagator;
pub mod record;

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use faer::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

pub use krylov::{KrylovOptions, KrylovStepper};
pub use propagator::{check_hermitian, propagator, PropagatorCache, UNITARITY_TOL};
pub use record::{EvolutionRecord, RecordSample, RECORD_FORMAT_VERSION};

use crate::error::{Error, Result};
use crate::hamiltonian::{
    apply_local, build_internal, kron_sites, local_rotation, spectator_reduced, Axis, Csr, SpinBasis, SpinOperator,
    TermFlags,
};
use crate::linalg::{
    conjugate, conjugate_adjoint, eigh, from_real_diagonal, pin_sequential, scale_rows_cols, trace_product,
    trace_with_diagonal, CMat, Eigh, C64,
};
use crate::sequence::{PulseEvent, PulseProgram, SampleSegment};
use crate::spinsys::SpinSystem;

pub const PROTON_LABEL: &str = "H";
/// Largest number of distinct spectator configurations enumerated.
pub const SECTOR_CAP: usize = 1 << 16;
/// Dimension above which the typicality path defaults to Krylov stepping.
pub const AUTO_KRYLOV_DIM: usize = 1024;
/// Baby-step/giant-step sampling is used up to this sector dimension.
const BSGS_MAX_DIM: usize = 1024;
/// Assumed sustained complex throughput for runtime estimates, flop/s.
const FLOP_RATE: f64 = 1.5e10;

/// Continuous rf `−ω I_y` on a spectator species during every segment.
#[derive(Clone, Debug, PartialEq)]
pub struct CwDecoupling {
    pub species: String,
    /// rad/s.
    pub amplitude: f64,
}

/// cw decoupling of the ¹H spins.
pub fn cw_decoupling(system: &SpinSystem, amplitude: f64) -> Result<CwDecoupling> {
    cw_decoupling_on(system, PROTON_LABEL, amplitude)
}

pub fn cw_decoupling_on(system: &SpinSystem, species: &str, amplitude: f64) -> Result<CwDecoupling> {
    let k = system
        .species_index(species)
        .filter(|&k| !system.sites_of(k).is_empty())
        .ok_or_else(|| Error::Config(format!("cw decoupling needs `{species}` spins in the cluster")))?;
    if k == system.driven {
        return Err(Error::Config(format!("cw decoupling cannot target the driven species `{species}`")));
    }
    if !(amplitude.is_finite() && amplitude >= 0.0) {
        return Err(Error::InvalidInput(format!("cw amplitude must be non-negative, got {amplitude}")));
    }
    Ok(CwDecoupling {
        species: species.to_string(),
        amplitude,
    })
}

#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub flags: TermFlags,
    pub cw: Option<CwDecoupling>,
    /// Split off spectator configurations when that is exact.
    pub factorize: bool,
}

impl EngineConfig {
    pub fn new(flags: TermFlags) -> Self {
        EngineConfig {
            flags,
            cw: None,
            factorize: true,
        }
    }

    pub fn with_cw(mut self, cw: Option<CwDecoupling>) -> Self {
        self.cw = cw;
        self
    }
}

/// `ρ₀ = I_zT` on the driven species, identity on the rest.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialState {
    pub driven_species: usize,
    /// `Tr(I_zT²)` over the full Hilbert space.
    pub norm: f64,
}

impl InitialState {
    pub fn polarized(system: &SpinSystem) -> Self {
        // Tr(I_zi²) = s(s+1)/3 · d for every driven site
        let d: f64 = (0..system.len()).map(|i| system.spin_of(i).multiplicity() as f64).product();
        let norm = system
            .driven_sites()
            .iter()
            .map(|&i| {
                let s = system.spin_of(i).value();
                s * (s + 1.0) / 3.0 * d
            })
            .sum();
        InitialState {
            driven_species: system.driven,
            norm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TypicalityBackend {
    Auto,
    Dense,
    Krylov,
}

#[derive(Clone, Debug)]
pub struct TypicalityOptions {
    pub replicas: usize,
    pub seed: u64,
    pub backend: TypicalityBackend,
    pub krylov: KrylovOptions,
}

impl TypicalityOptions {
    pub fn new(replicas: usize, seed: u64) -> Self {
        TypicalityOptions {
            replicas,
            seed,
            backend: TypicalityBackend::Auto,
            krylov: KrylovOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Method {
    Dense,
    Typicality(TypicalityOptions),
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Dense => "dense",
            Method::Typicality(_) => "typicality",
        }
    }
}

/// Forward record, plus the echo-segment record when the program has one.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub forward: EvolutionRecord,
    pub echo: Option<EvolutionRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum SegKey {
    Delay(u64),
    Delta { species: usize, phase: u64, angle: u64 },
    Finite { species: usize, phase: u64, amplitude: u64, duration: u64 },
}

#[derive(Clone, Debug)]
struct Step {
    segs: Vec<SegKey>,
    segment: SampleSegment,
    index: usize,
    t: f64,
    readout: Option<Vec<SegKey>>,
}

struct Sector {
    weight: f64,
    basis: SpinBasis,
    site_species: Vec<usize>,
    h_static: SpinOperator,
    iz: Vec<f64>,
    norm: f64,
    dense_static: OnceLock<Arc<CMat>>,
    static_eigh: OnceLock<Arc<Eigh>>,
    pulse_eigh: Mutex<HashMap<(usize, u64, Option<u64>), Arc<Eigh>>>,
    commutes: Mutex<HashMap<usize, bool>>,
    static_csr: OnceLock<Arc<Csr>>,
    pulse_csr: Mutex<HashMap<(usize, u64, u64), Arc<Csr>>>,
}

fn once<T>(cell: &OnceLock<Arc<T>>, build: impl FnOnce() -> Result<T>) -> Result<Arc<T>> {
    if let Some(v) = cell.get() {
        return Ok(v.clone());
    }
    let v = Arc::new(build()?);
    Ok(cell.get_or_init(|| v).clone())
}

impl Sector {
    fn new(weight: f64, basis: SpinBasis, site_species: Vec<usize>, h_static: SpinOperator, driven: usize) -> Self {
        let sites: Vec<usize> = (0..site_species.len()).filter(|&k| site_species[k] == driven).collect();
        let iz = basis.total_z(&sites);
        let norm = iz.iter().map(|x| x * x).sum();
        Sector {
            weight,
            basis,
            site_species,
            h_static,
            iz,
            norm,
            dense_static: OnceLock::new(),
            static_eigh: OnceLock::new(),
            pulse_eigh: Mutex::new(HashMap::new()),
            commutes: Mutex::new(HashMap::new()),
            static_csr: OnceLock::new(),
            pulse_csr: Mutex::new(HashMap::new()),
        }
    }

    fn dim(&self) -> usize {
        self.basis.dim()
    }

    fn sites_of(&self, species: usize) -> Vec<usize> {
        (0..self.site_species.len()).filter(|&k| self.site_species[k] == species).collect()
    }

    fn rf(&self, species: usize, phase: f64, amplitude: f64) -> SpinOperator {
        let mut op = SpinOperator::zero();
        let (cx, cy) = (-amplitude * phase.cos(), -amplitude * phase.sin());
        for k in self.sites_of(species) {
            if cx != 0.0 {
                op.add_assign(SpinOperator::single(k, Axis::X, cx));
            }
            if cy != 0.0 {
                op.add_assign(SpinOperator::single(k, Axis::Y, cy));
            }
        }
        op
    }

    fn dense_static(&self) -> Result<Arc<CMat>> {
        once(&self.dense_static, || self.h_static.to_dense(&self.basis))
    }

    fn static_eigh(&self) -> Result<Arc<Eigh>> {
        once(&self.static_eigh, || eigh(&*self.dense_static()?))
    }

    /// Whether the static Hamiltonian conserves `I_z` of `species`.
    fn commutes_with_z(&self, species: usize) -> Result<bool> {
        if let Some(&c) = self.commutes.lock().expect("lock").get(&species) {
            return Ok(c);
        }
        let h = self.dense_static()?;
        let z = self.basis.total_z(&self.sites_of(species));
        let scale = crate::linalg::max_abs(&h).max(1.0);
        let mut defect = 0.0f64;
        for j in 0..h.ncols() {
            for i in 0..h.nrows() {
                defect = defect.max((h[(i, j)] * (z[j] - z[i])).norm());
            }
        }
        let c = defect <= 1e-12 * scale;
        self.commutes.lock().expect("lock").insert(species, c);
        Ok(c)
    }

    fn pulse_eigh(&self, species: usize, amplitude: f64, phase: Option<f64>) -> Result<Arc<Eigh>> {
        let key = (species, amplitude.to_bits(), phase.map(f64::to_bits));
        if let Some(e) = self.pulse_eigh.lock().expect("lock").get(&key) {
            return Ok(e.clone());
        }
        let h = self
            .h_static
            .clone()
            .plus(&self.rf(species, phase.unwrap_or(0.0), amplitude))
            .to_dense(&self.basis)?;
        let e = Arc::new(eigh(&h)?);
        Ok(self.pulse_eigh.lock().expect("lock").entry(key).or_insert(e).clone())
    }

    fn unitary(&self, key: &SegKey) -> Result<CMat> {
        match *key {
            SegKey::Delay(t) => Ok(self.static_eigh()?.exp_minus_i(f64::from_bits(t))),
            SegKey::Delta { species, phase, angle } => {
                let (phase, angle) = (f64::from_bits(phase), f64::from_bits(angle));
                let locals: Vec<Option<CMat>> = (0..self.basis.n_sites())
                    .map(|k| (self.site_species[k] == species).then(|| local_rotation(self.basis.spin(k), phase, angle)))
                    .collect();
                kron_sites(&self.basis, &locals)
            }
            SegKey::Finite {
                species,
                phase,
                amplitude,
                duration,
            } => {
                let (phase, amplitude, duration) =
                    (f64::from_bits(phase), f64::from_bits(amplitude), f64::from_bits(duration));
                if self.commutes_with_z(species)? {
                    // U(φ) = Z(φ) U(0) Z(φ)†, Z(φ) = exp(−iφ I_z)
                    let mut u = self.pulse_eigh(species, amplitude, None)?.exp_minus_i(duration);
                    let z: Vec<C64> = self
                        .basis
                        .total_z(&self.sites_of(species))
                        .iter()
                        .map(|&m| C64::from_polar(1.0, -phase * m))
                        .collect();
                    scale_rows_cols(&mut u, &z, &z);
                    Ok(u)
                } else {
                    Ok(self.pulse_eigh(species, amplitude, Some(phase))?.exp_minus_i(duration))
                }
            }
        }
    }

    fn static_csr(&self) -> Result<Arc<Csr>> {
        once(&self.static_csr, || self.h_static.to_csr(&self.basis))
    }

    fn pulse_csr(&self, species: usize, phase: f64, amplitude: f64) -> Result<Arc<Csr>> {
        let key = (species, phase.to_bits(), amplitude.to_bits());
        if let Some(c) = self.pulse_csr.lock().expect("lock").get(&key) {
            return Ok(c.clone());
        }
        let c = Arc::new(
            self.h_static
                .clone()
                .plus(&self.rf(species, phase, amplitude))
                .to_csr(&self.basis)?,
        );
        Ok(self.pulse_csr.lock().expect("lock").entry(key).or_insert(c).clone())
    }
}

/// Precomputed sectors and Hamiltonians for one cluster. Caches are filled
/// lazily and may be shared by concurrent runs.
pub struct Simulator {
    system: SpinSystem,
    config: EngineConfig,
    sectors: Vec<Sector>,
    factorized: bool,
}

impl std::fmt::Debug for Simulator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulator")
            .field("sites", &self.system.len())
            .field("sectors", &self.sectors.len())
            .field("factorized", &self.factorized)
            .finish()
    }
}

fn cw_operator(system: &SpinSystem, cw: &CwDecoupling) -> SpinOperator {
    let k = system.species_index(&cw.species).expect("validated");
    let mut op = SpinOperator::zero();
    for i in system.sites_of(k) {
        op.add_assign(SpinOperator::single(i, Axis::Y, -cw.amplitude));
    }
    op
}

impl Simulator {
    pub fn new(system: SpinSystem, config: EngineConfig) -> Result<Self> {
        pin_sequential();
        if system.driven_sites().is_empty() {
            return Err(Error::Config("the cluster has no driven spins".into()));
        }
        if let Some(cw) = &config.cw {
            cw_decoupling_on(&system, &cw.species, cw.amplitude)?;
        }
        let cw = config.cw.as_ref().filter(|c| c.amplitude != 0.0);
        let factorized = config.factorize && cw.is_none();
        let sectors = if factorized {
            Self::spectator_sectors(&system, &config.flags)?
        } else {
            let terms = build_internal(&system, &config.flags)?;
            let mut h = terms.total();
            if let Some(cw) = cw {
                h.add_assign(cw_operator(&system, cw));
            }
            let site_species = system.sites.iter().map(|s| s.species).collect();
            vec![Sector::new(1.0, terms.basis, site_species, h, system.driven)]
        };
        Ok(Simulator {
            system,
            config,
            sectors,
            factorized,
        })
    }

    fn spectator_sectors(system: &SpinSystem, flags: &TermFlags) -> Result<Vec<Sector>> {
        let driven = system.driven_sites();
        let spectators: Vec<usize> = (0..system.len()).filter(|i| !driven.contains(i)).collect();
        let coupled: Vec<usize> = (0..spectators.len())
            .filter(|&k| {
                let label = &system.species[system.sites[spectators[k]].species].label;
                flags.heteronuclear.contains(label)
            })
            .collect();
        let mults: Vec<usize> = coupled
            .iter()
            .map(|&k| system.spin_of(spectators[k]).multiplicity())
            .collect();
        let count = mults.iter().try_fold(1usize, |acc, &m| acc.checked_mul(m));
        let count = match count {
            Some(c) if c <= SECTOR_CAP => c,
            _ => {
                return Err(Error::Capacity {
                    what: "spectator configurations",
                    count: count.unwrap_or(usize::MAX),
                    cap: SECTOR_CAP,
                })
            }
        };
        let mut order: Vec<(Vec<u64>, Vec<f64>, f64)> = Vec::new();
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        for c in 0..count {
            let mut m_all = vec![0.0; spectators.len()];
            let mut rest = c;
            for (pos, &k) in coupled.iter().enumerate().rev() {
                let spin = system.spin_of(spectators[k]);
                m_all[k] = spin.value() - (rest % mults[pos]) as f64;
                rest /= mults[pos];
            }
            let fields: Vec<u64> = driven
                .iter()
                .map(|&i| {
                    let f: f64 = coupled
                        .iter()
                        .map(|&k| 2.0 * system.coupling(i, spectators[k]) * m_all[k])
                        .sum();
                    // +0.0 and −0.0 are the same field
                    (f + 0.0).to_bits()
                })
                .collect();
            match index.get(&fields) {
                Some(&p) => order[p].2 += 1.0,
                None => {
                    index.insert(fields.clone(), order.len());
                    order.push((fields, m_all, 1.0));
                }
            }
        }
        let spins: Vec<_> = driven.iter().map(|&i| system.spin_of(i)).collect();
        order
            .into_iter()
            .map(|(_, m, w)| {
                let h = spectator_reduced(system, flags, &m)?;
                Ok(Sector::new(
                    w,
                    SpinBasis::new(&spins),
                    vec![system.driven; driven.len()],
                    h,
                    system.driven,
                ))
            })
            .collect()
    }

    pub fn system(&self) -> &SpinSystem {
        &self.system
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn is_factorized(&self) -> bool {
        self.factorized
    }

    /// `(dimension, multiplicity)` of each sector.
    pub fn sectors(&self) -> Vec<(usize, f64)> {
        self.sectors.iter().map(|s| (s.dim(), s.weight)).collect()
    }

    fn species_of(&self, label: &str) -> Result<usize> {
        let k = self
            .system
            .species_index(label)
            .filter(|&k| !self.system.sites_of(k).is_empty())
            .ok_or_else(|| Error::Config(format!("pulse targets species `{label}`, absent from the cluster")))?;
        if self.factorized && k != self.system.driven {
            return Err(Error::Config(format!(
                "pulse on spectator species `{label}` needs a simulator built without factorization"
            )));
        }
        Ok(k)
    }

    fn pulse_key(&self, p: &crate::sequence::Pulse) -> Result<SegKey> {
        let species = self.species_of(&p.species)?;
        if p.is_delta() {
            Ok(SegKey::Delta {
                species,
                phase: p.phase.to_bits(),
                angle: p.angle.to_bits(),
            })
        } else {
            if !(p.amplitude.is_finite() && p.amplitude > 0.0) {
                return Err(Error::InvalidInput(format!("finite pulse needs a positive amplitude, got {}", p.amplitude)));
            }
            Ok(SegKey::Finite {
                species,
                phase: p.phase.to_bits(),
                amplitude: p.amplitude.to_bits(),
                duration: p.duration.to_bits(),
            })
        }
    }

    fn compile(&self, program: &PulseProgram) -> Result<Vec<Step>> {
        let mut steps = Vec::new();
        let mut segs = Vec::new();
        let mut t = 0.0;
        for e in &program.events {
            match e {
                PulseEvent::Delay { duration } => {
                    if !(duration.is_finite() && *duration >= 0.0) {
                        return Err(Error::InvalidInput(format!("negative delay {duration}")));
                    }
                    if *duration > 0.0 {
                        segs.push(SegKey::Delay(duration.to_bits()));
                        t += duration;
                    }
                }
                PulseEvent::Pulse(p) => {
                    segs.push(self.pulse_key(p)?);
                    t += p.duration;
                }
                PulseEvent::Sample(s) => {
                    let readout = s.readout.as_ref().map(|r| self.pulse_key(r).map(|k| vec![k])).transpose()?;
                    steps.push(Step {
                        segs: std::mem::take(&mut segs),
                        segment: s.segment,
                        index: s.index,
                        t,
                        readout,
                    });
                }
            }
        }
        Ok(steps)
    }

    fn assemble(
        &self,
        program: &PulseProgram,
        steps: &[Step],
        values: &[f64],
        stderrs: Option<&[f64]>,
        method_meta: &[(&str, String)],
    ) -> RunOutput {
        let mut meta = program.meta.clone();
        meta.insert("mode".into(), program.mode.as_str().into());
        for (k, v) in method_meta {
            meta.insert((*k).into(), v.clone());
        }
        let mut forward = vec![RecordSample {
            n: 0,
            t_seconds: 0.0,
            mz: 1.0,
            stderr: stderrs.map(|_| 0.0),
        }];
        let mut echo = Vec::new();
        for (k, step) in steps.iter().enumerate() {
            let s = RecordSample {
                n: step.index,
                t_seconds: step.t,
                mz: values[k],
                stderr: stderrs.map(|e| e[k]),
            };
            match step.segment {
                SampleSegment::Forward => forward.push(s),
                SampleSegment::Echo => echo.push(s),
            }
        }
        let make = |segment: &str, samples| {
            let mut m = meta.clone();
            m.insert("segment".into(), segment.into());
            EvolutionRecord {
                floquet_period: program.floquet_period,
                meta: m,
                samples,
            }
        };
        let echo = (!echo.is_empty()).then(|| make("echo", echo));
        RunOutput {
            forward: make("forward", forward),
            echo,
        }
    }

    pub fn run(&self, program: &PulseProgram, method: &Method) -> Result<RunOutput> {
        match method {
            Method::Dense => self.run_dense(program),
            Method::Typicality(opts) => self.run_typicality(program, opts),
        }
    }

    /// Exact density-matrix evolution.
    pub fn run_dense(&self, program: &PulseProgram) -> Result<RunOutput> {
        for s in &self.sectors {
            s.basis.check_dense()?;
        }
        let steps = self.compile(program)?;
        let total: f64 = self.sectors.iter().map(|s| s.weight).sum();
        let mut values = vec![0.0; steps.len()];
        for sector in &self.sectors {
            let v = dense_sector(sector, &steps)?;
            for (acc, x) in values.iter_mut().zip(v) {
                *acc += sector.weight * x;
            }
        }
        for v in &mut values {
            *v /= total;
        }
        Ok(self.assemble(program, &steps, &values, None, &[("method", "dense".into())]))
    }

    /// Random-state estimate with a replica standard error.
    pub fn run_typicality(&self, program: &PulseProgram, opts: &TypicalityOptions) -> Result<RunOutput> {
        if opts.replicas < 2 {
            return Err(Error::InvalidInput(format!(
                "typicality needs at least 2 replicas to estimate an error, got {}",
                opts.replicas
            )));
        }
        let steps = self.compile(program)?;
        let total: f64 = self.sectors.iter().map(|s| s.weight).sum();
        let replicas: Vec<Vec<f64>> = (0..opts.replicas)
            .into_par_iter()
            .map(|r| {
                let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
                rng.set_stream(r as u64);
                let mut acc = vec![0.0; steps.len()];
                for sector in &self.sectors {
                    let v = typicality_sector(sector, &steps, opts, &mut rng)?;
                    for (a, x) in acc.iter_mut().zip(v) {
                        *a += sector.weight * x;
                    }
                }
                Ok(acc.into_iter().map(|a| a / total).collect())
            })
            .collect::<Result<_>>()?;
        let r = opts.replicas as f64;
        let mut mean = vec![0.0; steps.len()];
        let mut err = vec![0.0; steps.len()];
        for k in 0..steps.len() {
            let m = replicas.iter().map(|v| v[k]).sum::<f64>() / r;
            let var = replicas.iter().map(|v| (v[k] - m).powi(2)).sum::<f64>() / (r - 1.0);
            mean[k] = m;
            err[k] = (var / r).sqrt();
        }
        let backend = match opts.backend {
            TypicalityBackend::Dense => "dense",
            TypicalityBackend::Krylov => "krylov",
            TypicalityBackend::Auto => {
                if self.sectors.iter().all(|s| s.dim() <= AUTO_KRYLOV_DIM) {
                    "dense"
                } else {
                    "krylov"
                }
            }
        };
        let meta = [
            ("method", "typicality".to_string()),
            ("replicas", opts.replicas.to_string()),
            ("seed", opts.seed.to_string()),
            ("rng", "chacha20".to_string()),
            ("backend", backend.to_string()),
        ];
        Ok(self.assemble(program, &steps, &mean, Some(&err), &meta))
    }

    /// Rough wall-clock estimate in seconds on one core.
    pub fn estimate_runtime(&self, program: &PulseProgram, method: &Method) -> f64 {
        let n_steps = program.samples().count().max(1) as f64;
        let n_pulses = program.pulses().count() as f64;
        let mut flops = 0.0;
        for s in &self.sectors {
            let d = s.dim() as f64;
            let matmul = 8.0 * d * d * d;
            match method {
                Method::Dense => {
                    let conj = if s.dim() <= BSGS_MAX_DIM && n_steps >= 4.0 {
                        4.0 * n_steps.sqrt()
                    } else {
                        2.0 * n_steps
                    };
                    flops += matmul * (conj + 12.0 + 2.0 * n_pulses.min(8.0));
                }
                Method::Typicality(o) => {
                    let krylov = match o.backend {
                        TypicalityBackend::Auto => s.dim() > AUTO_KRYLOV_DIM,
                        TypicalityBackend::Krylov => true,
                        TypicalityBackend::Dense => false,
                    };
                    let per_vec = if krylov {
                        let nnz = (d * (s.basis.n_sites() as f64).powi(2) * 0.5).max(d);
                        8.0 * nnz * o.krylov.max_dim as f64 * 4.0
                    } else {
                        8.0 * d * d
                    };
                    let setup = if krylov { 0.0 } else { matmul * 14.0 };
                    flops += setup + per_vec * 2.0 * (n_steps + n_pulses) * o.replicas as f64;
                }
            }
        }
        flops / FLOP_RATE
    }
}

fn dense_chunk(
    sector: &Sector,
    segs: &[SegKey],
    cache: &mut PropagatorCache<SegKey>,
    chunks: &mut HashMap<Vec<SegKey>, Arc<CMat>>,
) -> Result<Arc<CMat>> {
    if let Some(w) = chunks.get(segs) {
        return Ok(w.clone());
    }
    let mut w: Option<CMat> = None;
    for key in segs {
        let u = cache.get_or_try_insert(key, || sector.unitary(key))?;
        w = Some(match w {
            None => (*u).clone(),
            Some(acc) => &*u * &acc,
        });
    }
    let w = Arc::new(w.unwrap_or_else(|| crate::linalg::identity(sector.dim())));
    chunks.insert(segs.to_vec(), w.clone());
    Ok(w)
}

fn dense_sector(sector: &Sector, steps: &[Step]) -> Result<Vec<f64>> {
    let mut cache = PropagatorCache::new();
    let mut chunks = HashMap::new();
    let rho0 = from_real_diagonal(&sector.iz);
    let periodic = steps.len() >= 4
        && sector.dim() <= BSGS_MAX_DIM
        && steps.iter().all(|s| s.readout.is_none() && s.segs == steps[0].segs);
    if periodic {
        let w = dense_chunk(sector, &steps[0].segs, &mut cache, &mut chunks)?;
        return Ok(baby_giant(&w, &rho0, &sector.iz, steps.len(), sector.norm));
    }
    dense_sector_stepped(sector, steps)
}

fn dense_sector_stepped(sector: &Sector, steps: &[Step]) -> Result<Vec<f64>> {
    let mut cache = PropagatorCache::new();
    let mut chunks = HashMap::new();
    let mut observables: HashMap<Vec<SegKey>, CMat> = HashMap::new();
    let mut rho = from_real_diagonal(&sector.iz);
    let mut out = Vec::with_capacity(steps.len());
    for step in steps {
        let w = dense_chunk(sector, &step.segs, &mut cache, &mut chunks)?;
        rho = conjugate(&w, &rho);
        let value = match &step.readout {
            None => trace_with_diagonal(&rho, &sector.iz).re,
            Some(r) => {
                if !observables.contains_key(r) {
                    let u = dense_chunk(sector, r, &mut cache, &mut chunks)?;
                    observables.insert(r.clone(), conjugate_adjoint(&u, &from_real_diagonal(&sector.iz)));
                }
                trace_product(&rho, &observables[r]).re
            }
        };
        out.push(value / sector.norm);
    }
    Ok(out)
}

/// `M(n) = Tr(W^j ρ W^−j · W^−ms O W^ms)` with `n = ms + j`, for n = 1..=k.
fn baby_giant(w: &CMat, rho0: &CMat, iz: &[f64], k: usize, norm: f64) -> Vec<f64> {
    let s = (k as f64).sqrt().ceil() as usize;
    let mut baby = Vec::with_capacity(s);
    baby.push(rho0.clone());
    for j in 1..s {
        let next = conjugate(w, &baby[j - 1]);
        baby.push(next);
    }
    let mut ws = w.clone();
    for _ in 1..s {
        ws = w * &ws;
    }
    let mut out = vec![0.0; k];
    let mut obs: Option<CMat> = None;
    for m in 0..=(k / s) {
        obs = Some(match obs {
            None => from_real_diagonal(iz),
            Some(o) => conjugate_adjoint(&ws, &o),
        });
        let o = obs.as_ref().expect("set");
        for (j, r) in baby.iter().enumerate() {
            let n = m * s + j;
            if n == 0 || n > k {
                continue;
            }
            out[n - 1] = if m == 0 {
                trace_with_diagonal(r, iz).re
            } else {
                trace_product(r, o).re
            } / norm;
        }
    }
    out
}

enum VecStepper {
    Dense { cache: PropagatorCache<SegKey> },
    Krylov { stepper: KrylovStepper },
}

fn gaussian_state(d: usize, rng: &mut ChaCha20Rng) -> Vec<C64> {
    let mut v: Vec<C64> = (0..d)
        .map(|_| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            C64::new(re, im)
        })
        .collect();
    let n = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= n;
    }
    v
}

fn apply_segment(sector: &Sector, key: &SegKey, stepper: &mut VecStepper, cols: &mut [Vec<C64>]) -> Result<()> {
    if let SegKey::Delta { species, phase, angle } = *key {
        let (phase, angle) = (f64::from_bits(phase), f64::from_bits(angle));
        for k in sector.sites_of(species) {
            let r = local_rotation(sector.basis.spin(k), phase, angle);
            for v in cols.iter_mut() {
                apply_local(&sector.basis, k, &r, v);
            }
        }
        return Ok(());
    }
    match stepper {
        VecStepper::Dense { cache } => {
            let u = cache.get_or_try_insert(key, || sector.unitary(key))?;
            let d = sector.dim();
            let x = Mat::from_fn(d, cols.len(), |i, j| cols[j][i]);
            let y = &*u * &x;
            for (j, v) in cols.iter_mut().enumerate() {
                v.copy_from_slice(y.col_as_slice(j));
            }
        }
        VecStepper::Krylov { stepper } => {
            let (h, t) = match *key {
                SegKey::Delay(t) => (sector.static_csr()?, f64::from_bits(t)),
                SegKey::Finite {
                    species,
                    phase,
                    amplitude,
                    duration,
                } => (
                    sector.pulse_csr(species, f64::from_bits(phase), f64::from_bits(amplitude))?,
                    f64::from_bits(duration),
                ),
                SegKey::Delta { .. } => unreachable!("handled above"),
            };
            for v in cols.iter_mut() {
                stepper.apply(&h, t, v)?;
            }
        }
    }
    Ok(())
}

fn typicality_sector(sector: &Sector, steps: &[Step], opts: &TypicalityOptions, rng: &mut ChaCha20Rng) -> Result<Vec<f64>> {
    let d = sector.dim();
    let krylov = match opts.backend {
        TypicalityBackend::Auto => d > AUTO_KRYLOV_DIM,
        TypicalityBackend::Krylov => true,
        TypicalityBackend::Dense => {
            sector.basis.check_dense()?;
            false
        }
    };
    let mut stepper = if krylov {
        VecStepper::Krylov {
            stepper: KrylovStepper::new(opts.krylov.clone()),
        }
    } else {
        VecStepper::Dense {
            cache: PropagatorCache::new(),
        }
    };
    let psi = gaussian_state(d, rng);
    let phi: Vec<C64> = psi.iter().zip(&sector.iz).map(|(x, z)| x * z).collect();
    let n0: f64 = phi.iter().map(|x| x.norm_sqr()).sum();
    let mut cols = vec![psi, phi];
    let mut out = Vec::with_capacity(steps.len());
    let measure = |cols: &[Vec<C64>]| -> f64 {
        cols[0]
            .iter()
            .zip(&cols[1])
            .zip(&sector.iz)
            .map(|((a, b), z)| (a.conj() * b).re * z)
            .sum::<f64>()
            / n0
    };
    for step in steps {
        for key in &step.segs {
            apply_segment(sector, key, &mut stepper, &mut cols)?;
        }
        let value = match &step.readout {
            None => measure(&cols),
            Some(r) => {
                let mut tmp = cols.clone();
                for key in r {
                    apply_segment(sector, key, &mut stepper, &mut tmp)?;
                }
                measure(&tmp)
            }
        };
        out.push(value);
    }
    Ok(out)
}

/// Dense run with all internal terms and no cw field.
pub fn run_program_dense(system: &SpinSystem, program: &PulseProgram, initial: &InitialState) -> Result<RunOutput> {
    if initial.driven_species != system.driven {
        return Err(Error::InvalidInput("initial state polarizes a non-driven species".into()));
    }
    Simulator::new(system.clone(), EngineConfig::new(TermFlags::all(system)))?.run_dense(program)
}

/// Typicality run with all internal terms and no cw field.
pub fn run_program_typicality(system: &SpinSystem, program: &PulseProgram, replicas: usize, seed: u64) -> Result<RunOutput> {
    Simulator::new(system.clone(), EngineConfig::new(TermFlags::all(system)))?
        .run_typicality(program, &TypicalityOptions::new(replicas, seed))
}

/// Fails with [`Error::Budget`] when `estimate_s` exceeds `budget_s`.
pub fn check_budget(estimate_s: f64, budget_s: f64) -> Result<()> {
    if estimate_s > budget_s {
        return Err(Error::Budget { estimate_s, budget_s });
    }
    Ok(())
}


#[cfg(test)]
mod tests;
