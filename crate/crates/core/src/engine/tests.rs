use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::linalg::{adjoint, hermiticity_defect, max_abs_diff};
use crate::sequence::{dtc_program, echo_program, phase_pair_program, PulseMode, PulseParams};
use crate::spinsys::{Spin, SpinSite, SpinSpecies, SystemOptions};
use crate::hamiltonian::TransversePhase;

const FIELD: f64 = 4.0;

fn species() -> Vec<SpinSpecies> {
    vec![
        SpinSpecies::new("P", Spin::Half, 2.0 * PI * 17.235e6, FIELD),
        SpinSpecies::new("H", Spin::Half, 2.0 * PI * 42.577e6, FIELD),
        SpinSpecies::new("N", Spin::One, 2.0 * PI * 3.077e6, FIELD),
    ]
}

/// Random positions in a box, rejecting pairs closer than 2.5 Å.
fn random_cluster(n_p: usize, n_h: usize, n_n: usize, seed: u64, offset: f64) -> SpinSystem {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut sites: Vec<SpinSite> = Vec::new();
    let kinds = std::iter::repeat_n(0, n_p)
        .chain(std::iter::repeat_n(1, n_h))
        .chain(std::iter::repeat_n(2, n_n));
    for species in kinds {
        loop {
            let p = [0, 1, 2].map(|_| rng.random_range(0.0..8e-10));
            let ok = sites.iter().all(|s| {
                let d: f64 = (0..3).map(|k| (s.position[k] - p[k]).powi(2)).sum::<f64>().sqrt();
                d > 2.5e-10
            });
            if ok {
                sites.push(SpinSite { species, position: p });
                break;
            }
        }
    }
    SpinSystem::new(species(), sites, [0.0, 0.0, 1.0], "P", offset, &SystemOptions::default()).unwrap()
}

fn params() -> PulseParams {
    PulseParams::new(2.0 * PI * 68e3, "P")
}

fn dense(system: &SpinSystem, program: &PulseProgram) -> EvolutionRecord {
    Simulator::new(system.clone(), EngineConfig::new(TermFlags::all(system)))
        .unwrap()
        .run_dense(program)
        .unwrap()
        .forward
}

#[test]
fn free_spin_rotation_is_cosine() {
    let mut system = random_cluster(1, 0, 0, 1, 0.0);
    system.scale_couplings(0.0);
    let p = dtc_program(10e-6, 2.0 * PI / 3.0, 3, PulseMode::Delta, &params()).unwrap();
    let r = dense(&system, &p);
    let v = r.values();
    assert_eq!(v[0], 1.0);
    assert!((v[1] + 0.5).abs() < 1e-12 && (v[2] + 0.5).abs() < 1e-12 && (v[3] - 1.0).abs() < 1e-12);
}

#[test]
fn initial_state_normalization() {
    let s = random_cluster(2, 1, 1, 3, 0.0);
    // Tr(I_zT²) = 2 · ¼ · (2·2·2·3)
    assert_eq!(InitialState::polarized(&s).norm, 12.0);
}

#[test]
fn pi_pulses_alternate_exactly() {
    for (seed, offset) in [(1, 0.0), (2, 2e3), (3, -5e2)] {
        let system = random_cluster(4, 2, 1, seed, offset);
        let p = dtc_program(37e-6, PI, 128, PulseMode::Delta, &params()).unwrap();
        let r = dense(&system, &p);
        for s in &r.samples {
            let expect = if s.n % 2 == 0 { 1.0 } else { -1.0 };
            assert!((s.mz - expect).abs() < 1e-9, "N={} {}", s.n, s.mz);
        }
    }
}

#[test]
fn full_rotation_periodicity() {
    let system = random_cluster(4, 1, 0, 5, 1e3);
    let a = dense(&system, &dtc_program(40e-6, 1.05 * PI, 40, PulseMode::Delta, &params()).unwrap());
    let b = dense(&system, &dtc_program(40e-6, 3.05 * PI, 40, PulseMode::Delta, &params()).unwrap());
    for (x, y) in a.values().iter().zip(b.values()) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn factorized_matches_full_space() {
    let system = random_cluster(3, 2, 1, 7, 3e2);
    let flags = TermFlags::all(&system);
    let p = echo_program(60e-6, 1.07 * PI, 4, 5, PulseMode::Finite, &params()).unwrap();
    let fac = Simulator::new(system.clone(), EngineConfig::new(flags.clone())).unwrap();
    assert!(fac.is_factorized());
    let mut cfg = EngineConfig::new(flags);
    cfg.factorize = false;
    let full = Simulator::new(system, cfg).unwrap();
    assert_eq!(full.sectors().len(), 1);
    let (a, b) = (fac.run_dense(&p).unwrap(), full.run_dense(&p).unwrap());
    for (x, y) in a.forward.values().iter().zip(b.forward.values()) {
        assert!((x - y).abs() < 1e-10);
    }
    for (x, y) in a.echo.unwrap().values().iter().zip(b.echo.unwrap().values()) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn equivalent_sectors_are_merged() {
    let system = random_cluster(3, 2, 0, 9, 0.0);
    let only_p = TermFlags::homonuclear_only();
    let sim = Simulator::new(system.clone(), EngineConfig::new(only_p)).unwrap();
    assert_eq!(sim.sectors(), vec![(8, 1.0)]);
    let sim = Simulator::new(system, EngineConfig::new(TermFlags::all(&random_cluster(3, 2, 0, 9, 0.0)))).unwrap();
    assert_eq!(sim.sectors().iter().map(|s| s.1).sum::<f64>(), 4.0);
}

#[test]
fn periodic_shortcut_matches_stepping() {
    let system = random_cluster(5, 0, 0, 11, 0.0);
    let sim = Simulator::new(system.clone(), EngineConfig::new(TermFlags::all(&system))).unwrap();
    let p = dtc_program(80e-6, 1.03 * PI, 50, PulseMode::Finite, &params()).unwrap();
    let steps = sim.compile(&p).unwrap();
    let fast = dense_sector(&sim.sectors[0], &steps).unwrap();
    let slow = dense_sector_stepped(&sim.sectors[0], &steps).unwrap();
    assert!(fast.iter().zip(&slow).all(|(a, b)| (a - b).abs() < 1e-11));
}

#[test]
fn phase_rotated_pulses_match_direct_exponential() {
    let system = random_cluster(3, 1, 0, 13, 4e2);
    let sim = Simulator::new(system, EngineConfig::new(TermFlags::homonuclear_only())).unwrap();
    let sector = &sim.sectors[0];
    let amp = 2.0 * PI * 68e3;
    for phase in [0.5 * PI, PI, 1.234] {
        let key = SegKey::Finite {
            species: 0,
            phase: f64::to_bits(phase),
            amplitude: amp.to_bits(),
            duration: 5e-6f64.to_bits(),
        };
        let u = sector.unitary(&key).unwrap();
        let h = sector.h_static.clone().plus(&sector.rf(0, phase, amp)).to_dense(&sector.basis).unwrap();
        let reference = propagator(&h, 5e-6).unwrap();
        assert!(max_abs_diff(&u, &reference) < 1e-10);
    }
}

#[test]
fn density_matrix_stays_hermitian_and_traceless() {
    let system = random_cluster(5, 0, 0, 17, 1e3);
    let sim = Simulator::new(system.clone(), EngineConfig::new(TermFlags::all(&system))).unwrap();
    let p = dtc_program(50e-6, 1.1 * PI, 128, PulseMode::Finite, &params()).unwrap();
    let steps = sim.compile(&p).unwrap();
    let sector = &sim.sectors[0];
    let mut cache = PropagatorCache::new();
    let mut chunks = HashMap::new();
    let w = dense_chunk(sector, &steps[0].segs, &mut cache, &mut chunks).unwrap();
    let mut rho = from_real_diagonal(&sector.iz);
    for _ in 0..128 {
        rho = conjugate(&w, &rho);
    }
    let tr: C64 = (0..rho.nrows()).map(|i| rho[(i, i)]).sum();
    assert!(tr.norm() < 1e-10);
    assert!(hermiticity_defect(&rho) < 1e-10);
    let purity = trace_product(&rho, &rho).re;
    assert!((purity - sector.norm).abs() < 1e-9 * sector.norm);
}

#[test]
fn time_reversal_returns_to_start() {
    let system = random_cluster(4, 1, 0, 19, 2e2);
    let sim = Simulator::new(system.clone(), EngineConfig::new(TermFlags::all(&system))).unwrap();
    let p = echo_program(70e-6, 1.09 * PI, 6, 3, PulseMode::Finite, &params()).unwrap();
    let steps = sim.compile(&p).unwrap();
    for sector in &sim.sectors {
        let mut cache = PropagatorCache::new();
        let mut chunks = HashMap::new();
        let ws: Vec<Arc<CMat>> = steps
            .iter()
            .map(|s| dense_chunk(sector, &s.segs, &mut cache, &mut chunks).unwrap())
            .collect();
        let rho0 = from_real_diagonal(&sector.iz);
        let mut rho = rho0.clone();
        for w in &ws {
            rho = conjugate(w, &rho);
        }
        for w in ws.iter().rev() {
            rho = conjugate(&adjoint(w), &rho);
        }
        let m = trace_with_diagonal(&rho, &sector.iz).re / sector.norm;
        assert!((m - 1.0).abs() < 1e-9);
    }
}

#[test]
fn finite_pi_pulses_decay() {
    let system = random_cluster(6, 0, 0, 23, 0.0);
    let p = dtc_program(20e-6, PI, 128, PulseMode::Finite, &params()).unwrap();
    let r = dense(&system, &p);
    assert!(r.values()[128].abs() < 1.0 - 1e-3);
}

#[test]
fn typicality_tracks_dense() {
    let system = random_cluster(5, 1, 0, 29, 0.0);
    let p = dtc_program(100e-6, 1.04 * PI, 32, PulseMode::Delta, &params()).unwrap();
    let exact = dense(&system, &p);
    let sim = Simulator::new(system.clone(), EngineConfig::new(TermFlags::all(&system))).unwrap();
    let est = sim.run_typicality(&p, &TypicalityOptions::new(24, 5)).unwrap().forward;
    assert_eq!(est.samples[0].mz, 1.0);
    for (e, x) in est.samples.iter().zip(exact.values()) {
        let se = e.stderr.unwrap();
        assert!((e.mz - x).abs() <= 4.0 * se + 1e-12, "N={}: {} vs {x} ± {se}", e.n, e.mz);
    }
}

#[test]
fn krylov_and_dense_backends_agree() {
    let system = random_cluster(4, 1, 0, 31, 5e2);
    let sim = Simulator::new(system.clone(), EngineConfig::new(TermFlags::all(&system))).unwrap();
    let p = echo_program(40e-6, 1.06 * PI, 3, 3, PulseMode::Finite, &params()).unwrap();
    let mut o = TypicalityOptions::new(3, 77);
    o.backend = TypicalityBackend::Dense;
    let a = sim.run_typicality(&p, &o).unwrap();
    o.backend = TypicalityBackend::Krylov;
    let b = sim.run_typicality(&p, &o).unwrap();
    for (x, y) in a.forward.samples.iter().zip(&b.forward.samples) {
        assert!((x.mz - y.mz).abs() < 1e-8);
    }
    for (x, y) in a.echo.unwrap().samples.iter().zip(&b.echo.unwrap().samples) {
        assert!((x.mz - y.mz).abs() < 1e-8);
    }
}

#[test]
fn typicality_free_spins_alternate() {
    let mut system = random_cluster(4, 0, 0, 37, 0.0);
    system.scale_couplings(0.0);
    let p = dtc_program(10e-6, PI, 16, PulseMode::Delta, &params()).unwrap();
    let sim = Simulator::new(system.clone(), EngineConfig::new(TermFlags::all(&system))).unwrap();
    let r = sim.run_typicality(&p, &TypicalityOptions::new(4, 1)).unwrap().forward;
    for s in &r.samples {
        let expect = if s.n % 2 == 0 { 1.0 } else { -1.0 };
        assert!((s.mz - expect).abs() < 1e-12);
        assert!(s.stderr.unwrap() < 1e-12);
    }
}

#[test]
fn typicality_is_seeded() {
    let system = random_cluster(4, 0, 0, 41, 0.0);
    let sim = Simulator::new(system.clone(), EngineConfig::new(TermFlags::all(&system))).unwrap();
    let p = dtc_program(100e-6, 1.1 * PI, 8, PulseMode::Delta, &params()).unwrap();
    let a = sim.run_typicality(&p, &TypicalityOptions::new(4, 9)).unwrap();
    let b = sim.run_typicality(&p, &TypicalityOptions::new(4, 9)).unwrap();
    let c = sim.run_typicality(&p, &TypicalityOptions::new(4, 10)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.forward.values(), c.forward.values());
    assert_eq!(a.forward.meta["seed"], "9");
    assert!(sim.run_typicality(&p, &TypicalityOptions::new(1, 9)).is_err());
}

#[test]
fn cw_decoupling_limits() {
    let system = random_cluster(3, 2, 0, 43, 0.0);
    assert!(cw_decoupling(&random_cluster(3, 0, 0, 43, 0.0), 1e3).is_err());
    let flags = TermFlags::all(&system);
    let p = dtc_program(50e-6, 1.05 * PI, 64, PulseMode::Delta, &params()).unwrap();
    let on = Simulator::new(system.clone(), EngineConfig::new(flags.clone())).unwrap().run_dense(&p).unwrap();
    let zero = Simulator::new(
        system.clone(),
        EngineConfig::new(flags.clone()).with_cw(Some(cw_decoupling(&system, 0.0).unwrap())),
    )
    .unwrap()
    .run_dense(&p)
    .unwrap();
    assert_eq!(on.forward.values(), zero.forward.values());

    let ph = system.interaction_scale("P", "H").unwrap();
    let strong = Simulator::new(
        system.clone(),
        EngineConfig::new(flags).with_cw(Some(cw_decoupling(&system, 100.0 * ph).unwrap())),
    )
    .unwrap();
    assert!(!strong.is_factorized());
    let strong = strong.run_dense(&p).unwrap().forward.values();
    let off = Simulator::new(system.clone(), EngineConfig::new(TermFlags::homonuclear_only()))
        .unwrap()
        .run_dense(&p)
        .unwrap()
        .forward
        .values();
    let rms = (strong.iter().zip(&off).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / off.len() as f64).sqrt();
    assert!(rms < 0.05, "rms {rms}");
}

#[test]
fn phase_pair_programs_run() {
    let system = random_cluster(4, 0, 0, 47, 0.0);
    let p = phase_pair_program(20e-6, TransversePhase::X, TransversePhase::Y, 10, PulseMode::Delta, &params()).unwrap();
    // delta π pulses about any transverse axes leave I_z at ±1 per block
    let r = dense(&system, &p);
    assert!(r.values().iter().all(|v| (v.abs() - 1.0).abs() < 1e-9));
}

#[test]
fn rejects_bad_programs() {
    let system = random_cluster(3, 1, 0, 53, 0.0);
    let sim = Simulator::new(system.clone(), EngineConfig::new(TermFlags::all(&system))).unwrap();
    let p = dtc_program(10e-6, PI, 2, PulseMode::Delta, &PulseParams::new(1e5, "H")).unwrap();
    assert!(matches!(sim.run_dense(&p), Err(Error::Config(_))));
    let p = dtc_program(10e-6, PI, 2, PulseMode::Delta, &PulseParams::new(1e5, "X")).unwrap();
    assert!(sim.run_dense(&p).is_err());
    let mut cfg = EngineConfig::new(TermFlags::all(&system));
    cfg.factorize = false;
    let full = Simulator::new(system, cfg).unwrap();
    let p = dtc_program(10e-6, PI, 2, PulseMode::Delta, &PulseParams::new(1e5, "H")).unwrap();
    // inverting the protons leaves the phosphorus untouched
    let r = full.run_dense(&p).unwrap().forward;
    assert!(r.values().iter().all(|v| v.abs() <= 1.0 + 1e-9));
}

#[test]
fn dense_capacity_is_enforced() {
    let mut system = random_cluster(13, 0, 0, 59, 0.0);
    system.scale_couplings(0.0);
    let sim = Simulator::new(system, EngineConfig::new(TermFlags::homonuclear_only())).unwrap();
    let p = dtc_program(10e-6, PI, 2, PulseMode::Delta, &params()).unwrap();
    assert!(matches!(sim.run_dense(&p), Err(Error::Capacity { .. })));
    let r = sim.run_typicality(&p, &TypicalityOptions::new(2, 3)).unwrap();
    assert!((r.forward.values()[2] - 1.0).abs() < 1e-9);
}

#[test]
fn budget_guard() {
    assert!(check_budget(1.0, 2.0).is_ok());
    assert!(matches!(check_budget(3.0, 2.0), Err(Error::Budget { .. })));
    let system = random_cluster(8, 0, 0, 61, 0.0);
    let sim = Simulator::new(system, EngineConfig::new(TermFlags::homonuclear_only())).unwrap();
    let p = dtc_program(10e-6, PI, 128, PulseMode::Finite, &params()).unwrap();
    let t = sim.estimate_runtime(&p, &Method::Dense);
    assert!(t > 0.0 && t < 60.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn delta_pi_alternation_any_cluster(seed in 0u64..1000, n_p in 1usize..5, n_h in 0usize..3, n_n in 0usize..2,
                                        offset in -3e3f64..3e3, tau in 1e-6f64..5e-4) {
        let system = random_cluster(n_p, n_h, n_n, seed, offset);
        let p = dtc_program(tau, PI, 24, PulseMode::Delta, &params()).unwrap();
        let r = dense(&system, &p);
        for s in &r.samples {
            let expect = if s.n % 2 == 0 { 1.0 } else { -1.0 };
            prop_assert!((s.mz - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn magnetization_is_bounded(seed in 0u64..1000, theta in 0.0f64..6.3, tau in 1e-6f64..3e-4) {
        let system = random_cluster(4, 1, 0, seed, 0.0);
        let p = dtc_program(tau, theta, 16, PulseMode::Finite, &params()).unwrap();
        for v in dense(&system, &p).values() {
            prop_assert!(v.abs() <= 1.0 + 1e-9);
        }
    }
}
