use num_complex::Complex64;
use proptest::prelude::*;
use ttcf::dynamics::{CorrelationState, Mode};
use ttcf::experiment::{self, Anchor, ExperimentConfig, ModeSelect, Prepared};
use ttcf::ode::OdeOptions;
use ttcf::oracle::{monte_carlo, MonteCarloOptions};

fn short(beta: f64, epsilon0: f64, omega_n: f64, nu: f64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.bath.beta = beta;
    c.system.epsilon0 = epsilon0;
    c.noise.omega_n = omega_n;
    c.noise.nu = nu;
    c.grid.horizon = 6.0;
    c.grid.t2 = Anchor::At(2.0);
    c.grid.tau = 8.0;
    c
}

#[test]
fn averaged_population_tracks_monte_carlo() {
    let cfg = short(0.02, 1.0, 0.75, 1.0);
    let p = Prepared::new(&cfg).unwrap();
    let opts = MonteCarloOptions {
        n_paths: 10_000,
        block_size: 64,
        workers: None,
        mode: Mode::Qrt,
        ode: OdeOptions::default(),
    };
    let mc = monte_carlo(&p.table, &cfg.system, p.n2, 1, &opts).unwrap();
    let worst = mc
        .sz_single
        .mean
        .iter()
        .zip(&p.single.g1)
        .map(|(m, g)| (m.re - g).abs())
        .fold(0.0, f64::max);
    assert!(worst < 2e-4, "max |g1 - <sz>_MC| = {worst}");
}

#[test]
fn corrected_run_departs_from_qrt() {
    let cfg = short(0.02, 1.0, 0.75, 1.0);
    let (_, s) = experiment::run_dynamics(&cfg).unwrap();
    let q = s.mode(Mode::Qrt).unwrap();
    let p = s.mode(Mode::QrtPlus).unwrap();
    let gap = q.iter().zip(p).map(|(a, b)| (a.zz() - b.zz()).norm()).fold(0.0, f64::max);
    assert!(gap > 1e-6);
}

#[test]
fn silent_coupling_gives_empty_spectrum() {
    let mut cfg = short(0.02, 1.0, 0.75, 1.0);
    cfg.system.v = 0.0;
    cfg.modes = ModeSelect::Qrt;
    let (_, _, spectra) = experiment::run_spectrum(&cfg).unwrap();
    assert!(spectra[0].absorption_peaks.is_empty());
    assert!(spectra[0].absorption.power.iter().all(|x| *x == 0.0));
}

#[test]
fn emission_and_absorption_split_the_population() {
    // ⟨σ₊σ₋⟩ + ⟨σ₋σ₊⟩ = 1 at equal times
    let cfg = short(50.0, 0.5, 0.75, 0.1);
    let (_, s) = experiment::run_dynamics(&cfg).unwrap();
    for mode in [Mode::Qrt, Mode::QrtPlus] {
        let first = &s.mode(mode).unwrap()[0];
        assert!((first.pm() + first.mp() - Complex64::new(1.0, 0.0)).norm() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn correlators_stay_physical(
        low_temperature in any::<bool>(),
        epsilon0 in 0.0f64..1.5,
        omega_n in 0.0f64..2.0,
        nu in 0.05f64..2.0,
    ) {
        let beta = if low_temperature { 50.0 } else { 0.02 };
        let cfg = short(beta, epsilon0, omega_n, nu);
        let (_, s) = experiment::run_dynamics(&cfg).unwrap();
        for mode in [Mode::Qrt, Mode::QrtPlus] {
            for st in s.mode(mode).unwrap() {
                prop_assert!(st.zz().norm() <= 1.0 + 1e-6);
                prop_assert!(st.pm().norm() <= 1.0 + 1e-6);
                prop_assert!(st.mp().norm() <= 1.0 + 1e-6);
            }
        }
        prop_assert!(s.single_time.g1.iter().all(|g| g.abs() <= 1.0 + 1e-9));
    }

    #[test]
    fn averaged_runs_ignore_seed_and_mode_selection(seed in any::<u64>()) {
        let mut cfg = short(0.02, 1.0, 0.75, 1.0);
        cfg.grid.tau = 2.0;
        let (_, both) = experiment::run_dynamics(&cfg).unwrap();
        cfg.noise.seed = seed;
        cfg.modes = ModeSelect::QrtPlus;
        let (_, plus) = experiment::run_dynamics(&cfg).unwrap();
        prop_assert_eq!(both.mode(Mode::QrtPlus), plus.mode(Mode::QrtPlus));
        let states: &[CorrelationState] = plus.mode(Mode::QrtPlus).unwrap();
        prop_assert_eq!(states[0].zz(), Complex64::new(1.0, 0.0));
    }
}
