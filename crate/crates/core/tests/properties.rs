//! Structural invariants checked over randomized inputs.

use std::sync::Arc;

use proptest::prelude::*;

use mfbsde::comparison::{run_comparison, ComparisonScenario, ProbeBox};
use mfbsde::linear::{simulate_gamma, solve_linear, LinearOptions};
use mfbsde::model::{
    AffineDriver, Driver, DriverArgs, LinearCoefficients, LinearDriver, MeanFunctional, MixedDriver, PreparedTerminal,
    TerminalCondition,
};
use mfbsde::paths::{build_grid, simulate_ensemble, Atom, LevyMeasure, PathEnsemble};
use mfbsde::picard::{picard_full_freeze, picard_mean_freeze, regress, PicardSettings, RegressionBasis};
use mfbsde::profile::{AtomProfile, Profile, ScalarFn};
use mfbsde::scenario::parse_config;
use mfbsde::utility::{adjoint_lambda, simulate_wealth, ControlProcess, UtilityCoefficients, WealthParams};

fn two_atoms() -> LevyMeasure {
    LevyMeasure::new(vec![Atom { mark: 0.5, weight: 1.0 }, Atom { mark: -0.3, weight: 0.8 }]).unwrap()
}

fn ensemble(paths: usize, steps: usize, seed: u64) -> PathEnsemble {
    simulate_ensemble(&build_grid(1.0, steps).unwrap(), &two_atoms(), paths, seed).unwrap()
}

fn c(v: f64) -> Profile {
    Profile::Constant(v)
}

fn terminal_catalog() -> Vec<TerminalCondition> {
    vec![
        TerminalCondition::Constant(1.3),
        TerminalCondition::BrownianLinear { a: 0.7, b: -0.2 },
        TerminalCondition::JumpLinear { psi: AtomProfile::PerAtom(vec![c(0.4), c(-0.6)]) },
        TerminalCondition::SmoothOfBrownian { phi: ScalarFn::Sin { offset: 1.0, amplitude: 0.5, frequency: 2.0 } },
        TerminalCondition::SmoothOfJump {
            phi: ScalarFn::Exp { scale: 1.0, rate: 0.3 },
            psi: AtomProfile::PerAtom(vec![c(0.2), c(0.5)]),
        },
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_nodes_are_uniform_and_hit_both_ends(horizon in 0.01f64..50.0, steps in 1usize..2000) {
        let g = build_grid(horizon, steps).unwrap();
        prop_assert_eq!(g.node(0), 0.0);
        prop_assert_eq!(g.node(steps), horizon);
        prop_assert!((g.dt() * steps as f64 - horizon).abs() <= 1e-12 * horizon);
        let nodes = g.nodes();
        prop_assert_eq!(nodes.len(), steps + 1);
        prop_assert!(nodes.windows(2).all(|w| w[1] > w[0]));
        for i in [0, steps / 3, steps / 2, steps] {
            prop_assert_eq!(g.nearest(g.node(i)), i);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gamma_is_one_on_the_diagonal_and_multiplies_along_the_grid(
        a in -1.0f64..1.0,
        b in -1.0f64..1.0,
        e0 in -0.9f64..1.5,
        e1 in -0.9f64..1.5,
        seed in 0u64..1000,
        (i, j, k) in (0usize..=20, 0usize..=20, 0usize..=20),
    ) {
        let ens = ensemble(200, 20, seed);
        let mut co = LinearCoefficients::zero(TerminalCondition::Constant(0.0));
        co.alpha1 = Profile::Affine { intercept: a, slope: 0.3 };
        co.beta1 = c(b);
        co.eta1 = AtomProfile::PerAtom(vec![c(e0), c(e1)]);
        let g = simulate_gamma(&co, &ens).unwrap();
        let mut ord = [i, j, k];
        ord.sort_unstable();
        let [i, j, k] = ord;
        for n in 0..ens.n_paths() {
            prop_assert_eq!(g.value(i, i, n), 1.0);
            let lhs = g.value(i, k, n);
            let rhs = g.value(i, j, n) * g.value(j, k, n);
            prop_assert!(lhs > 0.0);
            // two exponentials of rounded log differences
            prop_assert!((lhs - rhs).abs() <= 4e-15 * (1.0 + g.log_at(k)[n].abs() + g.log_at(i)[n].abs()) * lhs);
        }
    }

    #[test]
    fn wealth_stays_positive(
        x0 in 0.01f64..10.0,
        b0 in -2.0f64..2.0,
        sigma0 in 0.0f64..3.0,
        gamma0 in -0.99f64..2.0,
        pi in 0.0f64..5.0,
        seed in 0u64..1000,
    ) {
        let ens = ensemble(300, 25, seed);
        let wp = WealthParams::constant(x0, b0, sigma0, gamma0);
        let w = simulate_wealth(&wp, &ControlProcess::constant(pi, 25), &ens).unwrap();
        for i in 0..=25 {
            prop_assert!(w.at(i).iter().all(|&x| x > 0.0 && x.is_finite()));
        }
    }

    #[test]
    fn neumann_series_equals_the_direct_solve(
        a1 in -0.5f64..0.5,
        a2 in -1.0f64..1.0,
        b1 in -0.5f64..0.5,
        b2 in -1.0f64..1.0,
        e1 in -0.5f64..0.5,
        e2 in -1.0f64..1.0,
        g in -1.0f64..1.0,
        seed in 0u64..1000,
    ) {
        let ens = ensemble(1000, 30, seed);
        let co = LinearCoefficients {
            alpha1: c(a1),
            alpha2: c(a2),
            beta1: c(b1),
            beta2: c(b2),
            eta1: AtomProfile::Uniform(c(e1)),
            eta2: AtomProfile::Uniform(c(e2)),
            gamma: c(g),
            terminal: TerminalCondition::SmoothOfBrownian { phi: ScalarFn::Sin { offset: 1.0, amplitude: 1.0, frequency: 1.0 } },
        };
        let sol = solve_linear(&co, &ens, None, &LinearOptions { direct: true, ..Default::default() }).unwrap();
        let gap = sol.oracle_gap.unwrap();
        prop_assert!(gap <= 1e-10, "gap {gap:e}");
    }

    #[test]
    fn swapping_the_pair_negates_the_margins(
        shift in -1.0f64..1.0,
        slope in 0.0f64..1.0,
        seed in 0u64..1000,
    ) {
        let levy = two_atoms();
        let ens = ensemble(400, 10, seed);
        let sc = ComparisonScenario {
            g1: Arc::new(AffineDriver::new(shift, 0.2, 0.1, vec![0.2, 0.1], vec![0.3], &levy)),
            g2: Arc::new(AffineDriver::new(0.0, 0.2, 0.1, vec![0.2, 0.1], vec![0.3], &levy)),
            xi1: TerminalCondition::BrownianLinear { a: slope, b: shift },
            xi2: TerminalCondition::BrownianLinear { a: slope, b: 0.0 },
            eta_bound: AtomProfile::Uniform(c(0.3)),
        };
        let settings = PicardSettings { tol: 1e-12, ..Default::default() };
        let probes = ProbeBox { probes: 50, ..Default::default() };
        let fwd = run_comparison(&sc, &ens, &settings, &probes, true).unwrap();
        let bwd = run_comparison(&sc.swapped(), &ens, &settings, &probes, true).unwrap();
        let (m, s) = (fwd.margins.unwrap(), bwd.margins.unwrap());
        for i in 0..m.min.len() {
            prop_assert_eq!(m.min[i], -s.max[i]);
            prop_assert_eq!(m.max[i], -s.min[i]);
            prop_assert_eq!(m.mean[i], -s.mean[i]);
        }
    }

    #[test]
    fn every_config_problem_is_reported(
        bad_paths in prop::bool::ANY,
        bad_steps in prop::bool::ANY,
        typo in prop::bool::ANY,
        bad_weight in prop::bool::ANY,
        bad_tol in prop::bool::ANY,
    ) {
        let text = format!(
            "mode = \"picard\"\nn_paths = {}\n{}\n[grid]\nhorizon = 1.0\nsteps = {}\n\n[levy]\nmarks = [0.5]\nweights = [{}]\n\n[driver]\nkind = \"zero\"\n\n[terminal]\nkind = \"constant\"\nc = 1.0\n\n[solver]\ntol = {}\n",
            if bad_paths { 0 } else { 100 },
            if typo { "pathz = 3" } else { "" },
            if bad_steps { 0 } else { 10 },
            if bad_weight { "-1.0" } else { "1.0" },
            if bad_tol { "-1e-8" } else { "1e-8" },
        );
        let expected: Vec<&str> = [
            (bad_paths, "n_paths"),
            (bad_steps, "grid.steps"),
            (typo, "pathz"),
            (bad_weight, "levy.weights[0]"),
            (bad_tol, "solver.tol"),
        ]
        .into_iter()
        .filter_map(|(on, p)| on.then_some(p))
        .collect();
        match parse_config(&text) {
            Ok(_) => prop_assert!(expected.is_empty()),
            Err(e) => {
                prop_assert!(!expected.is_empty(), "unexpected errors\n{e}");
                for p in &expected {
                    prop_assert!(e.mentions(p), "{p} missing from\n{e}");
                }
                prop_assert_eq!(e.0.len(), expected.len(), "{}", e);
            }
        }
    }
}

#[test]
fn terminal_node_equals_the_terminal_condition_for_every_catalog_entry() {
    let levy = two_atoms();
    let ens = ensemble(2000, 20, 5);
    let driver = MixedDriver {
        constant: 0.1,
        y_lin: 0.2,
        y_sin: 0.2,
        z_tanh: 0.3,
        k_lin: 0.1,
        mean_lin: 0.3,
        weights: levy.weights(),
        ..Default::default()
    };
    let settings = PicardSettings { max_iter: 8, ..Default::default() };
    for tc in terminal_catalog() {
        let xi = PreparedTerminal::new(&tc, &ens).unwrap().values;
        let (full, _) = picard_full_freeze(&driver, MeanFunctional::Y, &tc, &ens, &settings).unwrap();
        let (mean, _) = picard_mean_freeze(&driver, &tc, &ens, &settings).unwrap();
        assert_eq!(full.y_at(20), &xi[..], "{tc:?}");
        assert_eq!(mean.y_at(20), &xi[..], "{tc:?}");
    }
}

#[test]
fn mean_freeze_and_full_freeze_agree() {
    let levy = two_atoms();
    let ens = ensemble(20_000, 50, 6);
    let tc = TerminalCondition::SmoothOfBrownian { phi: ScalarFn::Sin { offset: 1.0, amplitude: 1.0, frequency: 1.0 } };
    let drivers: Vec<Box<dyn Driver>> = vec![
        Box::new(AffineDriver::new(0.2, 0.3, 0.4, vec![0.3, -0.2], vec![0.5], &levy)),
        Box::new(MixedDriver {
            constant: 0.2,
            y_lin: 0.2,
            y_sin: 0.3,
            z_tanh: 0.4,
            k_tanh: 0.3,
            mean_lin: 0.4,
            mean_tanh: 0.3,
            weights: levy.weights(),
            ..Default::default()
        }),
    ];
    let settings = PicardSettings { tol: 1e-16, ..Default::default() };
    for d in &drivers {
        let (_, full) = picard_full_freeze(d.as_ref(), MeanFunctional::Y, &tc, &ens, &settings).unwrap();
        let (_, mean) = picard_mean_freeze(d.as_ref(), &tc, &ens, &settings).unwrap();
        let z = (full.y0 - mean.y0).abs() / full.y0_se.hypot(mean.y0_se);
        assert!(full.converged && mean.converged);
        assert!(z <= 3.0, "{d:?}: full {} mean {} z {z}", full.y0, mean.y0);
    }
}

/// `Y(t_i) + Σ_{l<i} ½Δt(g_l + g_{l+1})` is a discrete martingale, so its
/// increments regress to zero on the node features.
#[test]
fn compensated_solution_has_unpredictable_increments() {
    let levy = two_atoms();
    let ens = ensemble(20_000, 40, 7);
    let driver = MixedDriver {
        constant: 0.3,
        y_lin: 0.2,
        y_sin: 0.3,
        z_tanh: 0.3,
        k_lin: 0.2,
        mean_lin: 0.4,
        weights: levy.weights(),
        ..Default::default()
    };
    let tc = TerminalCondition::SmoothOfJump {
        phi: ScalarFn::Sin { offset: 1.0, amplitude: 1.0, frequency: 1.0 },
        psi: AtomProfile::PerAtom(vec![c(0.4), c(-0.3)]),
    };
    let (sol, rep) = picard_mean_freeze(&driver, &tc, &ens, &PicardSettings { tol: 1e-20, ..Default::default() }).unwrap();
    assert!(rep.converged);
    let np = ens.n_paths();
    let half = 0.5 * ens.grid().dt();
    let g_at = |i: usize| -> Vec<f64> {
        let mean = [sol.ybar[i]];
        let (y, z) = (sol.y_at(i), sol.z_at(i));
        (0..np)
            .map(|n| {
                let k = [sol.k_at(i, 0)[n], sol.k_at(i, 1)[n]];
                driver.eval(&DriverArgs { t: ens.grid().node(i), node: i, path: n, y: y[n], z: z[n], k: &k, mean: &mean })
            })
            .collect()
    };
    let basis = RegressionBasis::default();
    for i in [0, 10, 25, 39] {
        let (gi, gn) = (g_at(i), g_at(i + 1));
        let inc: Vec<f64> = (0..np).map(|n| sol.y_at(i + 1)[n] - sol.y_at(i)[n] + half * (gi[n] + gn[n])).collect();
        let fit = regress(&inc, &ens, &basis, i).unwrap();
        assert!(fit.intercept.abs() <= 3.0 * fit.intercept_se, "node {i}: intercept {} se {}", fit.intercept, fit.intercept_se);
        for co in &fit.coefficients {
            assert!(co.value.abs() <= 3.0 * co.se, "node {i}: {} = {} se {}", co.name, co.value, co.se);
        }
    }
}

#[test]
fn lambda_euler_residual_shrinks_with_the_step() {
    let uc = UtilityCoefficients {
        alpha0: c(0.1),
        alpha1: c(0.2),
        beta0: c(0.3),
        beta1: c(0.2),
        eta0: AtomProfile::PerAtom(vec![c(0.3), c(-0.2)]),
        eta1: AtomProfile::Uniform(c(0.1)),
        ..UtilityCoefficients::zero(TerminalCondition::Constant(1.0))
    };
    let residual = |steps: usize| adjoint_lambda(&uc, &ensemble(20_000, steps, 8)).unwrap().euler_residual;
    let (coarse, fine) = (residual(25), residual(100));
    // mean-square error O(Δt): a 4x finer grid cuts it by about 4
    assert!(fine < coarse / 2.0, "coarse {coarse:e} fine {fine:e}");
    assert!(fine <= 0.05, "fine {fine:e}");
}

#[test]
fn linear_driver_reproduces_the_closed_form_through_both_schemes() {
    let levy = two_atoms();
    let ens = ensemble(20_000, 50, 9);
    let co = LinearCoefficients {
        alpha1: c(0.2),
        alpha2: c(0.3),
        beta1: c(0.3),
        beta2: c(0.2),
        eta1: AtomProfile::Uniform(c(0.2)),
        eta2: AtomProfile::Uniform(c(0.1)),
        gamma: c(0.4),
        terminal: TerminalCondition::BrownianLinear { a: 0.5, b: 1.0 },
    };
    let closed = solve_linear(&co, &ens, None, &LinearOptions::default()).unwrap().closed;
    let driver = LinearDriver::new(co.clone(), ens.grid(), &levy);
    let (_, rep) = picard_full_freeze(&driver, MeanFunctional::Full, &co.terminal, &ens, &PicardSettings::default()).unwrap();
    let z = (closed.y0 - rep.y0).abs() / closed.y0_se.hypot(rep.y0_se);
    assert!(z <= 3.0, "closed {} picard {} z {z}", closed.y0, rep.y0);
}
