mod common;

use std::time::Instant;

use common::{case, proptest_config, small_network, trig_injections};
use deepsolve::netmodel::{build_admittance, AdmittanceMatrix, NetworkCase};
use deepsolve::powerflow::{check_feasibility, solve_pf, IndependentVars, PfInit, PfOptions, PowerFlowSolution};
use proptest::prelude::*;

fn split_y(y: &AdmittanceMatrix) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = y.dim();
    let g = (0..n).map(|i| (0..n).map(|k| y.entries[(i, k)].re).collect()).collect();
    let b = (0..n).map(|i| (0..n).map(|k| y.entries[(i, k)].im).collect()).collect();
    (g, b)
}

/// Largest mismatch of the balance equations at every bus, with generator
/// outputs taken from the solution and loads from `loads`.
fn substitution_residual(c: &NetworkCase, y: &AdmittanceMatrix, sol: &PowerFlowSolution, loads: &[f64]) -> f64 {
    let n = c.n_bus();
    let (g, b) = split_y(y);
    let (p, q) = trig_injections(&g, &b, &sol.v_mag, &sol.v_ang);
    let mut pg = vec![0.0; n];
    let mut qg = vec![0.0; n];
    for (k, gen) in c.generators.iter().enumerate() {
        pg[gen.bus] += sol.p_gen[k];
        qg[gen.bus] += sol.q_gen[k];
    }
    (0..n).map(|i| (p[i] - (pg[i] - loads[i])).abs().max((q[i] - (qg[i] - loads[n + i])).abs())).fold(0.0, f64::max)
}

fn flat_solve(c: &NetworkCase, loads: &[f64]) -> PowerFlowSolution {
    let y = build_admittance(c);
    solve_pf(c, &y, &IndependentVars::from_setpoints(c), loads, &PfInit::flat(c.n_bus()), &PfOptions::default())
        .unwrap()
}

#[test]
fn shipped_cases_converge_from_flat_start() {
    for name in ["case30", "case118"] {
        let c = case(name);
        let loads = c.default_loads();
        let y = build_admittance(&c);
        let t0 = Instant::now();
        let sol = flat_solve(&c, &loads);
        let dt = t0.elapsed();
        assert!(sol.converged, "{name}");
        assert!(sol.max_residual < 1e-8);
        let r = substitution_residual(&c, &y, &sol, &loads);
        assert!(r < 1e-8, "{name}: substituted residual {r:e}");
        eprintln!("{name}: {} iterations, {:?}", sol.iterations, dt);
    }
}

#[test]
fn newton_converges_quadratically_on_case30() {
    let c = case("case30");
    let sol = flat_solve(&c, &c.default_loads());
    let r = &sol.residuals;
    // Once the mismatch is small, each step roughly squares it.
    for w in r.windows(2).filter(|w| w[0] < 1e-2 && w[1] > 1e-13) {
        assert!(w[1] < 10.0 * w[0] * w[0], "residuals {r:?}");
    }
}

#[test]
fn slack_and_pv_setpoints_are_respected() {
    let c = case("case30");
    let iv = IndependentVars::from_setpoints(&c);
    let sol = flat_solve(&c, &c.default_loads());
    let l = c.layout();
    assert_eq!(sol.v_mag[l.slack_bus], iv.v_slack);
    assert_eq!(sol.v_ang[l.slack_bus], 0.0);
    for (j, &g) in l.pv_gens.iter().enumerate() {
        assert_eq!(sol.v_mag[c.generators[g].bus], iv.pv_v_mag[j]);
        assert_eq!(sol.p_gen[g], iv.pv_p_gen[j]);
    }
}

#[test]
fn feasibility_checker_is_monotone_in_tolerance() {
    let c = case("case30");
    let sol = flat_solve(&c, &c.default_loads());
    let strict = check_feasibility(&c, &sol, 0.0).unwrap();
    let loose = check_feasibility(&c, &sol, 10.0).unwrap();
    assert!(loose.feasible);
    assert!(loose.violations.len() <= strict.violations.len());
}

proptest! {
    #![proptest_config(proptest_config(48))]

    #[test]
    fn converged_solutions_satisfy_the_balance_equations(raw in small_network(true), scale in 0.5..1.5f64) {
        let c = NetworkCase::from_raw(&raw).unwrap();
        let loads: Vec<f64> = c.default_loads().iter().map(|l| l * scale).collect();
        let y = build_admittance(&c);
        if let Ok(sol) = solve_pf(&c, &y, &IndependentVars::from_setpoints(&c), &loads, &PfInit::flat(c.n_bus()), &PfOptions::default()) {
            if sol.converged {
                prop_assert!(substitution_residual(&c, &y, &sol, &loads) < 1e-8);
            }
        }
    }

    #[test]
    fn case30_load_scaling_converges(factors in proptest::collection::vec(0.9..1.1f64, 60)) {
        let c = case("case30");
        let loads: Vec<f64> = c.default_loads().iter().zip(&factors).map(|(l, f)| l * f).collect();
        let y = build_admittance(&c);
        let sol = flat_solve(&c, &loads);
        prop_assert!(sol.converged);
        prop_assert!(substitution_residual(&c, &y, &sol, &loads) < 1e-8);
    }
}
