//! Reference AC-OPF solver: minimum generation cost subject to the AC
//! balance equations, generator and voltage limits and branch ratings,
//! solved with a primal-dual interior-point method.

mod ipm;
mod problem;
mod quadform;

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ipm::IpmOptions;
pub use problem::OpfProblem;

use crate::netmodel::{build_admittance, AdmittanceMatrix, NetworkCase};
use crate::powerflow::{IndependentVars, PowerFlowSolution};
use ipm::{Outcome, Start};
use problem::LoadedProblem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpfSolution {
    pub p_gen: Vec<f64>,
    pub q_gen: Vec<f64>,
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
    /// Generation cost, $/hr.
    pub objective: f64,
    /// Largest scaled KKT condition (feasibility, stationarity,
    /// complementarity) at the returned point.
    pub kkt_residual: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Time spent in the numerical solve.
    pub wall_time: Duration,
}

/// A full primal point used to start the solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStart {
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
    pub p_gen: Vec<f64>,
    pub q_gen: Vec<f64>,
}

impl WarmStart {
    /// Assembles a start from a reconstructed operating point. PV active
    /// outputs come from `indep`; the slack output and all reactive outputs
    /// from the power-flow solution.
    pub fn from_reconstruction(case: &NetworkCase, indep: &IndependentVars, pf: &PowerFlowSolution) -> WarmStart {
        let mut p_gen = pf.p_gen.clone();
        for (k, &g) in case.layout().pv_gens.iter().enumerate() {
            p_gen[g] = indep.pv_p_gen[k];
        }
        WarmStart { v_mag: pf.v_mag.clone(), v_ang: pf.v_ang.clone(), p_gen, q_gen: pf.q_gen.clone() }
    }

    pub fn from_solution(sol: &OpfSolution) -> WarmStart {
        WarmStart {
            v_mag: sol.v_mag.clone(),
            v_ang: sol.v_ang.clone(),
            p_gen: sol.p_gen.clone(),
            q_gen: sol.q_gen.clone(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpfError {
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("interior point did not converge in {} iterations (kkt residual {:e})", .last.iterations, .last.kkt_residual)]
    NotConverged { last: Box<OpfSolution> },
    #[error("interior point diverged after {} iterations; problem likely infeasible", .last.iterations)]
    Diverged { last: Box<OpfSolution> },
}

impl OpfError {
    /// The last iterate, when the solver got as far as iterating.
    pub fn last_iterate(&self) -> Option<&OpfSolution> {
        match self {
            OpfError::Dimension { .. } => None,
            OpfError::NotConverged { last } | OpfError::Diverged { last } => Some(last),
        }
    }
}

/// Barrier parameter and slack floor used when starting from a supplied
/// point. A small barrier keeps the iterate near the start instead of
/// pushing it toward the analytic center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmStartOptions {
    pub barrier: f64,
    pub slack_floor: f64,
}

impl Default for WarmStartOptions {
    fn default() -> Self {
        WarmStartOptions { barrier: 1e-4, slack_floor: 1e-2 }
    }
}

/// Solver bound to one case; reuses admittances and constraint structure
/// across load scenarios.
#[derive(Debug, Clone)]
pub struct OpfSolver {
    case: NetworkCase,
    problem: OpfProblem,
    pub options: IpmOptions,
    pub warm: WarmStartOptions,
}

impl OpfSolver {
    pub fn new(case: &NetworkCase) -> OpfSolver {
        let y = build_admittance(case);
        OpfSolver::with_admittance(case, &y)
    }

    pub fn with_admittance(case: &NetworkCase, y: &AdmittanceMatrix) -> OpfSolver {
        OpfSolver {
            case: case.clone(),
            problem: OpfProblem::new(case, y),
            options: IpmOptions::default(),
            warm: WarmStartOptions::default(),
        }
    }

    pub fn case(&self) -> &NetworkCase {
        &self.case
    }

    /// Flat voltages clipped into bounds, midpoint dispatch.
    fn cold_point(&self) -> Vec<f64> {
        let case = &self.case;
        let v_mag: Vec<f64> = case.buses.iter().map(|b| 1.0_f64.clamp(b.v_min, b.v_max)).collect();
        let v_ang = vec![0.0; case.n_bus()];
        let mid = |lo: f64, hi: f64| if lo.is_finite() && hi.is_finite() { 0.5 * (lo + hi) } else { 0.0 };
        let p_gen: Vec<f64> = case.generators.iter().map(|g| mid(g.p_min, g.p_max)).collect();
        let q_gen: Vec<f64> = case.generators.iter().map(|g| mid(g.q_min, g.q_max)).collect();
        self.problem.pack(&v_mag, &v_ang, &p_gen, &q_gen)
    }

    /// Supplied point with magnitudes and dispatch clipped into bounds and
    /// angles shifted so the slack angle is zero.
    fn warm_point(&self, ws: &WarmStart) -> Result<Vec<f64>, OpfError> {
        let case = &self.case;
        let n = case.n_bus();
        let ng = case.n_gen();
        for (what, len, expected) in [
            ("warm start v_mag", ws.v_mag.len(), n),
            ("warm start v_ang", ws.v_ang.len(), n),
            ("warm start p_gen", ws.p_gen.len(), ng),
            ("warm start q_gen", ws.q_gen.len(), ng),
        ] {
            if len != expected {
                return Err(OpfError::Dimension { what, expected, got: len });
            }
        }
        let finite_or = |v: f64, d: f64| if v.is_finite() { v } else { d };
        let ref_ang = finite_or(ws.v_ang[case.layout().slack_bus], 0.0);
        let v_mag: Vec<f64> =
            case.buses.iter().zip(&ws.v_mag).map(|(b, &v)| finite_or(v, 1.0).clamp(b.v_min, b.v_max)).collect();
        let v_ang: Vec<f64> = ws.v_ang.iter().map(|&a| finite_or(a - ref_ang, 0.0)).collect();
        let clip = |v: f64, lo: f64, hi: f64| {
            let v = finite_or(v, if lo.is_finite() && hi.is_finite() { 0.5 * (lo + hi) } else { 0.0 });
            v.clamp(lo, hi)
        };
        let p_gen: Vec<f64> = case.generators.iter().zip(&ws.p_gen).map(|(g, &p)| clip(p, g.p_min, g.p_max)).collect();
        let q_gen: Vec<f64> = case.generators.iter().zip(&ws.q_gen).map(|(g, &q)| clip(q, g.q_min, g.q_max)).collect();
        Ok(self.problem.pack(&v_mag, &v_ang, &p_gen, &q_gen))
    }

    /// Solves the OPF for one load vector (`P_D` then `Q_D`, p.u.), from
    /// the fixed cold start or from `start` when given.
    pub fn solve(&self, loads: &[f64], start: Option<&WarmStart>) -> Result<OpfSolution, OpfError> {
        let n = self.case.n_bus();
        if loads.len() != 2 * n {
            return Err(OpfError::Dimension { what: "loads", expected: 2 * n, got: loads.len() });
        }
        let (x0, mode) = match start {
            None => (self.cold_point(), Start::Cold),
            Some(ws) => {
                (self.warm_point(ws)?, Start::Warm { barrier: self.warm.barrier, slack_floor: self.warm.slack_floor })
            }
        };
        let lp = LoadedProblem { problem: &self.problem, loads };
        let t0 = Instant::now();
        let res = ipm::solve(&lp, x0, mode, &self.options);
        let wall_time = t0.elapsed();

        let (v_mag, v_ang, p_gen, q_gen) = self.problem.unpack(&res.x);
        let sol = OpfSolution {
            objective: self.case.total_cost(&p_gen),
            p_gen,
            q_gen,
            v_mag,
            v_ang,
            kkt_residual: res.kkt_residual,
            converged: res.outcome == Outcome::Converged,
            iterations: res.iterations,
            wall_time,
        };
        log::debug!(
            "opf {}: {:?} after {} iterations, objective {:.4}, max eq {:e}, max ineq {:e}",
            self.case.name,
            res.outcome,
            res.iterations,
            sol.objective,
            res.max_eq,
            res.max_ineq
        );
        match res.outcome {
            Outcome::Converged => Ok(sol),
            Outcome::IterationLimit => Err(OpfError::NotConverged { last: Box::new(sol) }),
            Outcome::Diverged => Err(OpfError::Diverged { last: Box::new(sol) }),
        }
    }
}

/// One-shot OPF solve; see [`OpfSolver::solve`].
pub fn solve_opf(case: &NetworkCase, loads: &[f64], start: Option<&WarmStart>) -> Result<OpfSolution, OpfError> {
    OpfSolver::new(case).solve(loads, start)
}

/// Re-solves from a (possibly infeasible) predicted operating point.
pub fn recover(case: &NetworkCase, loads: &[f64], predicted: &WarmStart) -> Result<OpfSolution, OpfError> {
    OpfSolver::new(case).solve(loads, Some(predicted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::fixtures::two_bus;
    use crate::powerflow::{check_feasibility, state_at};

    #[test]
    fn two_bus_dispatch_covers_load_and_losses() {
        let case = two_bus(0.02, 0.2, 60.0, 20.0);
        let loads = case.default_loads();
        let sol = solve_opf(&case, &loads, None).unwrap();
        let y = build_admittance(&case);
        let st = state_at(&case, &y, &loads, &sol.p_gen, &sol.v_mag, &sol.v_ang, 1e-6).unwrap();
        assert!(st.converged);
        assert!(check_feasibility(&case, &st, 1e-6).unwrap().feasible);
        // Generation exceeds the 0.6 p.u. load by the I²R loss.
        let i_sq = (0.6_f64.powi(2) + 0.2_f64.powi(2)) / sol.v_mag[1].powi(2);
        assert!((sol.p_gen[0] - 0.6 - 0.02 * i_sq).abs() < 1e-6);
    }

    #[test]
    fn rejects_wrong_dimensions() {
        let case = two_bus(0.02, 0.2, 60.0, 20.0);
        assert!(matches!(solve_opf(&case, &[0.0; 3], None), Err(OpfError::Dimension { .. })));
        let ws = WarmStart { v_mag: vec![1.0], v_ang: vec![0.0], p_gen: vec![0.0], q_gen: vec![0.0] };
        assert!(matches!(solve_opf(&case, &case.default_loads(), Some(&ws)), Err(OpfError::Dimension { .. })));
    }

    #[test]
    fn zero_voltage_warm_start_is_clipped() {
        let case = two_bus(0.02, 0.2, 60.0, 20.0);
        let ws = WarmStart { v_mag: vec![0.0; 2], v_ang: vec![0.0; 2], p_gen: vec![0.0], q_gen: vec![0.0] };
        let sol = solve_opf(&case, &case.default_loads(), Some(&ws)).unwrap();
        assert!(sol.converged);
    }
}
