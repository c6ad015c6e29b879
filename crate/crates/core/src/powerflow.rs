//! Newton-Raphson AC power flow in polar coordinates, branch flows, and the
//! AC-OPF feasibility check applied to reconstructed operating points.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::{AdmittanceMatrix, NetworkCase};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PfError {
    #[error("singular Jacobian at Newton iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("feasibility check requires a converged power flow (max residual {residual:e})")]
    NotConverged { residual: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfOptions {
    /// Infinity-norm tolerance on the mismatch vector, p.u.
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for PfOptions {
    fn default() -> Self {
        PfOptions { tolerance: 1e-8, max_iter: 30 }
    }
}

/// The quantities a learned model predicts: slack voltage magnitude and, for
/// every PV generator (in [`crate::netmodel::Layout::pv_gens`] order), its
/// active output and terminal voltage magnitude. The slack angle is the
/// reference and always zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndependentVars {
    pub v_slack: f64,
    pub theta_slack: f64,
    pub pv_p_gen: Vec<f64>,
    pub pv_v_mag: Vec<f64>,
}

impl IndependentVars {
    /// Operating point taken from the generator setpoints stored in the case.
    pub fn from_setpoints(case: &NetworkCase) -> IndependentVars {
        let layout = case.layout();
        IndependentVars {
            v_slack: case.generators[layout.slack_gen].v_setpoint,
            theta_slack: 0.0,
            pv_p_gen: layout.pv_gens.iter().map(|&g| case.generators[g].p_setpoint).collect(),
            pv_v_mag: layout.pv_gens.iter().map(|&g| case.generators[g].v_setpoint).collect(),
        }
    }
}

/// Starting point for the dependent voltages. Only PQ magnitudes and
/// non-slack angles are read; the remaining entries are overwritten by the
/// independent variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfInit {
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
}

impl PfInit {
    pub fn flat(n_bus: usize) -> PfInit {
        PfInit { v_mag: vec![1.0; n_bus], v_ang: vec![0.0; n_bus] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
    pub p_inj: Vec<f64>,
    pub q_inj: Vec<f64>,
    pub slack_p_gen: f64,
    pub slack_q_gen: f64,
    /// Reactive output of each PV generator, in `pv_gens` order.
    pub pv_q_gen: Vec<f64>,
    /// Active output of every generator (PV values are the inputs).
    pub p_gen: Vec<f64>,
    /// Reactive output of every generator.
    pub q_gen: Vec<f64>,
    /// Apparent power per branch, the larger of the two ends.
    pub branch_s: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub max_residual: f64,
    /// Mismatch infinity norm before the first and after every Newton step.
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViolationKind {
    SlackP,
    SlackQ,
    PvQ,
    PqVmag,
    BranchFlow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Bus id for bus and generator constraints, 1-based branch number for
    /// branch flows.
    pub element: u32,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    pub violations: Vec<Violation>,
}

fn check_loads(case: &NetworkCase, loads: &[f64]) -> Result<(), PfError> {
    let n = case.n_bus();
    if loads.len() != 2 * n {
        return Err(PfError::Dimension { what: "loads", expected: 2 * n, got: loads.len() });
    }
    Ok(())
}

fn polar(v_mag: &[f64], v_ang: &[f64]) -> Vec<Complex64> {
    v_mag.iter().zip(v_ang).map(|(&m, &a)| Complex64::from_polar(m, a)).collect()
}

/// Solves the power-flow equations for the dependent variables.
///
/// Non-convergence is not an error: the last iterate is returned with
/// `converged = false`. A singular Jacobian is reported as an error.
pub fn solve_pf(
    case: &NetworkCase,
    y: &AdmittanceMatrix,
    indep: &IndependentVars,
    loads: &[f64],
    init: &PfInit,
    opts: &PfOptions,
) -> Result<PowerFlowSolution, PfError> {
    let n = case.n_bus();
    let layout = case.layout();
    check_loads(case, loads)?;
    let npv = layout.pv_gens.len();
    for (what, len) in [("pv_p_gen", indep.pv_p_gen.len()), ("pv_v_mag", indep.pv_v_mag.len())] {
        if len != npv {
            return Err(PfError::Dimension { what, expected: npv, got: len });
        }
    }
    for (what, len) in [("init.v_mag", init.v_mag.len()), ("init.v_ang", init.v_ang.len())] {
        if len != n {
            return Err(PfError::Dimension { what, expected: n, got: len });
        }
    }

    let mut vm = init.v_mag.clone();
    let mut va = init.v_ang.clone();
    vm[layout.slack_bus] = indep.v_slack;
    va[layout.slack_bus] = indep.theta_slack;
    // Scheduled net injections at buses where they are specified.
    let mut p_spec: Vec<f64> = (0..n).map(|i| -loads[i]).collect();
    let q_spec: Vec<f64> = (0..n).map(|i| -loads[n + i]).collect();
    for (k, &g) in layout.pv_gens.iter().enumerate() {
        let bus = case.generators[g].bus;
        vm[bus] = indep.pv_v_mag[k];
        p_spec[bus] += indep.pv_p_gen[k];
    }

    let pvpq = &layout.pvpq_buses;
    let pq = &layout.pq_buses;
    let n1 = pvpq.len();
    let dim = n1 + pq.len();

    let mut v = polar(&vm, &va);
    let mismatch = |v: &[Complex64]| -> (Vec<Complex64>, DVector<f64>) {
        let current = y.currents(v);
        let mut f = DVector::zeros(dim);
        for (j, &i) in pvpq.iter().enumerate() {
            f[j] = (v[i] * current[i].conj()).re - p_spec[i];
        }
        for (j, &i) in pq.iter().enumerate() {
            f[n1 + j] = (v[i] * current[i].conj()).im - q_spec[i];
        }
        (current, f)
    };

    let (mut current, mut f) = mismatch(&v);
    let mut norm = inf_norm(&f);
    let mut residuals = vec![norm];
    let mut iterations = 0;
    let mut converged = norm <= opts.tolerance;
    let mut jac = DMatrix::zeros(dim, dim);

    while !converged && iterations < opts.max_iter && norm.is_finite() {
        iterations += 1;
        fill_jacobian(&mut jac, y, &v, &current, pvpq, pq);
        let lu = jac.clone().lu();
        let dx = match lu.solve(&(-&f)) {
            Some(dx) if dx.iter().all(|x| x.is_finite()) => dx,
            _ => return Err(PfError::SingularJacobian { iteration: iterations }),
        };
        for (j, &i) in pvpq.iter().enumerate() {
            va[i] += dx[j];
        }
        for (j, &i) in pq.iter().enumerate() {
            vm[i] += dx[n1 + j];
        }
        v = polar(&vm, &va);
        (current, f) = mismatch(&v);
        norm = inf_norm(&f);
        residuals.push(norm);
        converged = norm <= opts.tolerance;
    }

    let mut sol = assemble(case, y, loads, &indep.pv_p_gen, vm, va, &v, &current);
    sol.iterations = iterations;
    sol.converged = converged;
    sol.max_residual = norm;
    sol.residuals = residuals;
    Ok(sol)
}

fn inf_norm(f: &DVector<f64>) -> f64 {
    f.iter().fold(0.0_f64, |m, x| if x.is_nan() { f64::NAN } else { m.max(x.abs()) })
}

/// Polar Jacobian of the mismatch vector `[P at pvpq; Q at pq]` with respect
/// to `[θ at pvpq; |V| at pq]`.
fn fill_jacobian(
    jac: &mut DMatrix<f64>,
    y: &AdmittanceMatrix,
    v: &[Complex64],
    current: &[Complex64],
    pvpq: &[usize],
    pq: &[usize],
) {
    let n1 = pvpq.len();
    let vn: Vec<Complex64> = v.iter().map(|x| x / x.norm()).collect();
    let j = Complex64::new(0.0, 1.0);
    let d_theta = |i: usize, k: usize| {
        let mut t = -y.entries[(i, k)] * v[k];
        if i == k {
            t += current[i];
        }
        j * v[i] * t.conj()
    };
    let d_vmag = |i: usize, k: usize| {
        let mut t = v[i] * (y.entries[(i, k)] * vn[k]).conj();
        if i == k {
            t += current[i].conj() * vn[i];
        }
        t
    };
    for (r, &i) in pvpq.iter().enumerate() {
        for (c, &k) in pvpq.iter().enumerate() {
            jac[(r, c)] = d_theta(i, k).re;
        }
        for (c, &k) in pq.iter().enumerate() {
            jac[(r, n1 + c)] = d_vmag(i, k).re;
        }
    }
    for (r, &i) in pq.iter().enumerate() {
        for (c, &k) in pvpq.iter().enumerate() {
            jac[(n1 + r, c)] = d_theta(i, k).im;
        }
        for (c, &k) in pq.iter().enumerate() {
            jac[(n1 + r, n1 + c)] = d_vmag(i, k).im;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    case: &NetworkCase,
    y: &AdmittanceMatrix,
    loads: &[f64],
    pv_p_gen: &[f64],
    v_mag: Vec<f64>,
    v_ang: Vec<f64>,
    v: &[Complex64],
    current: &[Complex64],
) -> PowerFlowSolution {
    let n = case.n_bus();
    let layout = case.layout();
    let s: Vec<Complex64> = v.iter().zip(current).map(|(v, i)| v * i.conj()).collect();
    let p_inj: Vec<f64> = s.iter().map(|s| s.re).collect();
    let q_inj: Vec<f64> = s.iter().map(|s| s.im).collect();
    let slack = layout.slack_bus;
    let slack_p_gen = p_inj[slack] + loads[slack];
    let slack_q_gen = q_inj[slack] + loads[n + slack];
    let mut p_gen = vec![0.0; case.n_gen()];
    let mut q_gen = vec![0.0; case.n_gen()];
    p_gen[layout.slack_gen] = slack_p_gen;
    q_gen[layout.slack_gen] = slack_q_gen;
    let pv_q_gen: Vec<f64> = layout
        .pv_gens
        .iter()
        .zip(pv_p_gen)
        .map(|(&g, &p)| {
            let bus = case.generators[g].bus;
            let q = q_inj[bus] + loads[n + bus];
            p_gen[g] = p;
            q_gen[g] = q;
            q
        })
        .collect();
    let branch_s = flows_from_voltages(y, case, v);
    PowerFlowSolution {
        v_mag,
        v_ang,
        p_inj,
        q_inj,
        slack_p_gen,
        slack_q_gen,
        pv_q_gen,
        p_gen,
        q_gen,
        branch_s,
        iterations: 0,
        converged: false,
        max_residual: f64::NAN,
        residuals: Vec::new(),
    }
}

fn flows_from_voltages(y: &AdmittanceMatrix, case: &NetworkCase, v: &[Complex64]) -> Vec<f64> {
    case.branches
        .iter()
        .zip(&y.branches)
        .map(|(br, t)| {
            let (vf, vt) = (v[br.from], v[br.to]);
            let sf = vf * (t.ff * vf + t.ft * vt).conj();
            let st = vt * (t.tf * vf + t.tt * vt).conj();
            sf.norm().max(st.norm())
        })
        .collect()
}

/// Apparent power through each branch, the larger of its two ends.
pub fn branch_flows(case: &NetworkCase, y: &AdmittanceMatrix, v_mag: &[f64], v_ang: &[f64]) -> Vec<f64> {
    flows_from_voltages(y, case, &polar(v_mag, v_ang))
}

/// Builds a power-flow solution record for a fully specified voltage profile
/// (for example an OPF optimum) without iterating. PV generators keep the
/// given active outputs; the mismatch at every bus is measured against them
/// and `converged` is set when it is within `tolerance`.
pub fn state_at(
    case: &NetworkCase,
    y: &AdmittanceMatrix,
    loads: &[f64],
    p_gen: &[f64],
    v_mag: &[f64],
    v_ang: &[f64],
    tolerance: f64,
) -> Result<PowerFlowSolution, PfError> {
    check_loads(case, loads)?;
    let n = case.n_bus();
    if p_gen.len() != case.n_gen() {
        return Err(PfError::Dimension { what: "p_gen", expected: case.n_gen(), got: p_gen.len() });
    }
    if v_mag.len() != n || v_ang.len() != n {
        return Err(PfError::Dimension { what: "voltages", expected: n, got: v_mag.len().min(v_ang.len()) });
    }
    let layout = case.layout();
    let v = polar(v_mag, v_ang);
    let current = y.currents(&v);
    let pv_p: Vec<f64> = layout.pv_gens.iter().map(|&g| p_gen[g]).collect();
    let mut sol = assemble(case, y, loads, &pv_p, v_mag.to_vec(), v_ang.to_vec(), &v, &current);
    let mut residual = 0.0_f64;
    for &i in &layout.pvpq_buses {
        let scheduled = layout.gen_at_bus[i].map_or(0.0, |g| p_gen[g]) - loads[i];
        residual = residual.max((sol.p_inj[i] - scheduled).abs());
    }
    for &i in &layout.pq_buses {
        residual = residual.max((sol.q_inj[i] + loads[n + i]).abs());
    }
    sol.max_residual = residual;
    sol.residuals = vec![residual];
    sol.converged = residual <= tolerance;
    Ok(sol)
}

fn excess(x: f64, lo: f64, hi: f64) -> f64 {
    (x - hi).max(0.0) + (lo - x).max(0.0)
}

/// Checks slack P/Q limits, PV reactive limits, PQ voltage limits and branch
/// ratings. A constraint is violated when it is exceeded by more than
/// `tolerance` (additive, p.u.).
pub fn check_feasibility(
    case: &NetworkCase,
    sol: &PowerFlowSolution,
    tolerance: f64,
) -> Result<FeasibilityReport, PfError> {
    if !sol.converged {
        return Err(PfError::NotConverged { residual: sol.max_residual });
    }
    let layout = case.layout();
    let mut violations = Vec::new();
    let mut push = |kind, element, magnitude: f64| {
        if magnitude > tolerance || magnitude.is_nan() {
            violations.push(Violation { kind, element, magnitude });
        }
    };
    let slack_gen = &case.generators[layout.slack_gen];
    let slack_id = case.buses[layout.slack_bus].id;
    push(ViolationKind::SlackP, slack_id, excess(sol.slack_p_gen, slack_gen.p_min, slack_gen.p_max));
    push(ViolationKind::SlackQ, slack_id, excess(sol.slack_q_gen, slack_gen.q_min, slack_gen.q_max));
    for (k, &g) in layout.pv_gens.iter().enumerate() {
        let gen = &case.generators[g];
        push(ViolationKind::PvQ, case.buses[gen.bus].id, excess(sol.pv_q_gen[k], gen.q_min, gen.q_max));
    }
    for &i in &layout.pq_buses {
        let bus = &case.buses[i];
        push(ViolationKind::PqVmag, bus.id, excess(sol.v_mag[i], bus.v_min, bus.v_max));
    }
    for (l, br) in case.branches.iter().enumerate() {
        if br.is_limited() {
            push(ViolationKind::BranchFlow, (l + 1) as u32, (sol.branch_s[l] - br.s_max).max(0.0));
        }
    }
    Ok(FeasibilityReport { feasible: violations.is_empty(), violations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::fixtures::two_bus;
    use crate::netmodel::{build_admittance, BusKind, NetworkCase, RawBranch, RawBus, RawCase, RawCost, RawGenerator};

    fn ring(loads_mw: f64) -> NetworkCase {
        let bus = |id, kind, pd: f64| RawBus {
            id,
            kind,
            pd_mw: pd,
            qd_mvar: pd * 0.3,
            gs_mw: 0.0,
            bs_mvar: 0.0,
            vm_min: 0.9,
            vm_max: 1.1,
            base_kv: 100.0,
        };
        let line =
            |from, to| RawBranch { from, to, r: 0.01, x: 0.08, b: 0.0, rate_a_mva: 0.0, tap: 1.0, shift_deg: 0.0 };
        let gen = |bus| RawGenerator {
            bus,
            pg_mw: 0.0,
            pmin_mw: 0.0,
            pmax_mw: 300.0,
            qmin_mvar: -200.0,
            qmax_mvar: 200.0,
            vg: 1.0,
            cost: Some(RawCost { c2: 0.01, c1: 10.0, c0: 0.0 }),
        };
        NetworkCase::from_raw(&RawCase {
            name: "ring".into(),
            base_mva: 100.0,
            bus: vec![
                bus(1, BusKind::Slack, 0.0),
                bus(2, BusKind::Pv, loads_mw),
                bus(3, BusKind::Pq, loads_mw),
                bus(4, BusKind::Pq, loads_mw),
            ],
            branch: vec![line(1, 2), line(2, 3), line(3, 4), line(4, 1)],
            generator: vec![gen(1), gen(2)],
        })
        .unwrap()
    }

    #[test]
    fn flat_no_load_network() {
        let case = ring(0.0);
        let y = build_admittance(&case);
        let indep = IndependentVars { v_slack: 1.0, theta_slack: 0.0, pv_p_gen: vec![0.0], pv_v_mag: vec![1.0] };
        let sol = solve_pf(&case, &y, &indep, &case.default_loads(), &PfInit::flat(4), &PfOptions::default()).unwrap();
        assert!(sol.converged);
        assert!(sol.iterations <= 2);
        for i in 0..4 {
            assert!((sol.v_mag[i] - 1.0).abs() < 1e-12);
            assert!(sol.v_ang[i].abs() < 1e-12);
            assert!(sol.p_inj[i].abs() < 1e-12 && sol.q_inj[i].abs() < 1e-12);
        }
    }

    #[test]
    fn loaded_ring_converges_and_balances() {
        let case = ring(40.0);
        let y = build_admittance(&case);
        let indep = IndependentVars { v_slack: 1.02, theta_slack: 0.0, pv_p_gen: vec![0.5], pv_v_mag: vec![1.01] };
        let loads = case.default_loads();
        let sol = solve_pf(&case, &y, &indep, &loads, &PfInit::flat(4), &PfOptions::default()).unwrap();
        assert!(sol.converged, "{:?}", sol.residuals);
        // Losses are positive so the slack covers more than the net load.
        assert!(sol.slack_p_gen > 1.2 - 0.5);
        let total_inj: f64 = sol.p_inj.iter().sum();
        assert!(total_inj > 0.0);
        // The state evaluator agrees with the Newton result.
        let again = state_at(&case, &y, &loads, &sol.p_gen, &sol.v_mag, &sol.v_ang, 1e-8).unwrap();
        assert!(again.converged);
        assert!((again.slack_q_gen - sol.slack_q_gen).abs() < 1e-12);
    }

    #[test]
    fn deterministic_iterates() {
        let case = ring(60.0);
        let y = build_admittance(&case);
        let indep = IndependentVars { v_slack: 1.0, theta_slack: 0.0, pv_p_gen: vec![0.3], pv_v_mag: vec![1.0] };
        let a = solve_pf(&case, &y, &indep, &case.default_loads(), &PfInit::flat(4), &PfOptions::default()).unwrap();
        let b = solve_pf(&case, &y, &indep, &case.default_loads(), &PfInit::flat(4), &PfOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overload_reports_failure() {
        let case = ring(4000.0);
        let y = build_admittance(&case);
        let indep = IndependentVars { v_slack: 1.0, theta_slack: 0.0, pv_p_gen: vec![0.0], pv_v_mag: vec![1.0] };
        match solve_pf(&case, &y, &indep, &case.default_loads(), &PfInit::flat(4), &PfOptions::default()) {
            Ok(sol) => assert!(!sol.converged),
            Err(e) => assert!(matches!(e, PfError::SingularJacobian { .. })),
        }
    }

    #[test]
    fn dimension_errors() {
        let case = ring(10.0);
        let y = build_admittance(&case);
        let indep = IndependentVars { v_slack: 1.0, theta_slack: 0.0, pv_p_gen: vec![], pv_v_mag: vec![1.0] };
        let err = solve_pf(&case, &y, &indep, &case.default_loads(), &PfInit::flat(4), &PfOptions::default());
        assert!(matches!(err, Err(PfError::Dimension { what: "pv_p_gen", .. })));
        let err = solve_pf(&case, &y, &indep, &[0.0; 3], &PfInit::flat(4), &PfOptions::default());
        assert!(matches!(err, Err(PfError::Dimension { what: "loads", .. })));
    }

    #[test]
    fn zero_voltage_difference_gives_zero_flow() {
        let case = two_bus(0.01, 0.1, 0.0, 0.0);
        let y = build_admittance(&case);
        let s = branch_flows(&case, &y, &[1.03, 1.03], &[0.2, 0.2]);
        assert!(s[0].abs() < 1e-14);
    }

    #[test]
    fn two_bus_flow_matches_formula() {
        let case = two_bus(0.02, 0.15, 0.0, 0.0);
        let y = build_admittance(&case);
        let v1 = Complex64::from_polar(1.0, 0.0);
        let v2 = Complex64::from_polar(0.98, -0.05);
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(0.02, 0.15);
        // S_ij = V_i (V_i* - V_j*) y*
        let s12 = (v1 * (v1.conj() - v2.conj()) * ys.conj()).norm();
        let s21 = (v2 * (v2.conj() - v1.conj()) * ys.conj()).norm();
        let s = branch_flows(&case, &y, &[1.0, 0.98], &[0.0, -0.05]);
        assert!((s[0] - s12.max(s21)).abs() < 1e-12);
    }

    #[test]
    fn feasibility_requires_convergence() {
        let case = ring(10.0);
        let y = build_admittance(&case);
        let indep = IndependentVars::from_setpoints(&case);
        let mut sol =
            solve_pf(&case, &y, &indep, &case.default_loads(), &PfInit::flat(4), &PfOptions::default()).unwrap();
        sol.converged = false;
        assert!(matches!(check_feasibility(&case, &sol, 1e-6), Err(PfError::NotConverged { .. })));
    }

    #[test]
    fn forced_branch_violation() {
        let mut case = ring(30.0);
        let y = build_admittance(&case);
        let indep = IndependentVars { v_slack: 1.0, theta_slack: 0.0, pv_p_gen: vec![0.4], pv_v_mag: vec![1.0] };
        let sol = solve_pf(&case, &y, &indep, &case.default_loads(), &PfInit::flat(4), &PfOptions::default()).unwrap();
        assert!(check_feasibility(&case, &sol, 1e-6).unwrap().feasible);
        case.branches[2].s_max = sol.branch_s[2] / 2.0;
        let report = check_feasibility(&case, &sol, 1e-6).unwrap();
        assert!(!report.feasible);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].kind, ViolationKind::BranchFlow);
        assert_eq!(report.violations[0].element, 3);
        assert!((report.violations[0].magnitude - sol.branch_s[2] / 2.0).abs() < 1e-12);
    }
}
