//! Test-set evaluation: feasibility of reconstructed predictions, cost gap
//! to the reference solver, model-path versus solver timing, and
//! warm-start recovery of infeasible predictions.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Dataset;
use crate::mlp::{forward, Checkpoint, MlpError};
use crate::netmodel::NetworkCase;
use crate::opfref::{OpfSolver, WarmStart};
use crate::powerflow::{check_feasibility, Violation};
use crate::trainer::Reconstructor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("model does not match case or dataset: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Additive feasibility tolerance, p.u.
    pub feas_tol: f64,
    /// Measure sequential model-path and solver timings.
    pub timing: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { feas_tol: 1e-6, timing: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub converged: bool,
    pub iterations: usize,
    pub time_s: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub index: usize,
    pub pf_converged: bool,
    pub feasible: bool,
    pub violations: Vec<Violation>,
    /// Cost of the reconstructed dispatch, $/hr.
    pub cost_model: f64,
    pub cost_ref: f64,
    pub time_model_s: f64,
    pub time_ref_s: f64,
    /// Cold-start iterations of the reference solve.
    pub ref_iterations: usize,
    pub s_pred: Vec<f64>,
    /// Reconstructed point, kept for warm starts.
    pub prediction: Option<WarmStart>,
    pub recovery: Option<Recovery>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean_s: f64,
    pub std_s: f64,
}

impl TimingStats {
    fn of(xs: &[f64]) -> TimingStats {
        if xs.is_empty() {
            return TimingStats { mean_s: 0.0, std_s: 0.0 };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        TimingStats { mean_s: mean, std_s: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryStats {
    /// Feasibility rate of the raw predictions, before any re-solve.
    pub feasibility_before: f64,
    pub attempted: usize,
    pub recovered: usize,
    pub avg_time_s: f64,
    pub avg_warm_iterations: f64,
    pub avg_cold_iterations: f64,
    /// Share of attempts whose warm start needed no more iterations than
    /// the cold start.
    pub warm_le_cold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub case_name: String,
    pub n_instances: usize,
    /// Percent of instances whose reconstruction satisfies every limit;
    /// counts recovered instances once recovery has run.
    pub feasibility_rate: f64,
    pub avg_cost_model: f64,
    pub avg_cost_ref: f64,
    /// `(model − ref)/ref·100` over instances feasible on both paths.
    pub cost_diff: f64,
    pub time_model: TimingStats,
    pub time_ref: TimingStats,
    /// `time_ref.mean / time_model.mean`.
    pub speedup: f64,
    pub recovery: Option<RecoveryStats>,
    pub instances: Vec<InstanceResult>,
}

/// Evaluates a checkpoint on a test split. Feasibility runs in parallel;
/// timings are then taken sequentially with one discarded warm-up per
/// phase.
pub fn evaluate(
    ckpt: &Checkpoint,
    data: &Dataset,
    solver: &OpfSolver,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let case = solver.case();
    data.check_case(case).map_err(|e| EvalError::Mismatch(e.to_string()))?;
    if ckpt.meta.spec != data.spec || ckpt.meta.case_name != case.name {
        return Err(EvalError::Mismatch(format!(
            "checkpoint for {} with {} outputs, dataset for {} with {}",
            ckpt.meta.case_name,
            ckpt.meta.spec.dim(),
            data.case_name,
            data.spec.dim()
        )));
    }
    if ckpt.model.input_dim() != 2 * case.n_bus() {
        return Err(EvalError::Mismatch(format!(
            "model input width {} for a {}-bus case",
            ckpt.model.input_dim(),
            case.n_bus()
        )));
    }
    let rec = Reconstructor::new(case, &ckpt.meta.spec, &ckpt.meta.dependent_mean);

    let n = data.samples.len();
    let mut x = DMatrix::zeros(ckpt.model.input_dim(), n);
    for (j, s) in data.samples.iter().enumerate() {
        x.column_mut(j).copy_from_slice(&ckpt.meta.normalizer.apply(&s.loads));
    }
    let s_pred = if n > 0 { forward(&ckpt.model, &x)?.0 } else { DMatrix::zeros(0, 0) };

    let mut instances: Vec<InstanceResult> = (0..n)
        .into_par_iter()
        .map(|j| {
            let sample = &data.samples[j];
            let s = s_pred.column(j).as_slice().to_vec();
            let mut inst = InstanceResult {
                index: j,
                pf_converged: false,
                feasible: false,
                violations: Vec::new(),
                cost_model: f64::NAN,
                cost_ref: sample.objective,
                time_model_s: 0.0,
                time_ref_s: 0.0,
                ref_iterations: 0,
                s_pred: s.clone(),
                prediction: None,
                recovery: None,
            };
            if let Some((iv, pf)) = rec.reconstruct(&s, &sample.loads) {
                inst.pf_converged = pf.converged;
                inst.cost_model = case.total_cost(&pf.p_gen);
                if let Ok(report) = check_feasibility(case, &pf, cfg.feas_tol) {
                    inst.feasible = report.feasible;
                    inst.violations = report.violations;
                }
                inst.prediction = Some(WarmStart::from_reconstruction(case, &iv, &pf));
            }
            inst
        })
        .collect();

    if cfg.timing && n > 0 {
        let model_path = |j: usize| {
            let t0 = Instant::now();
            let s =
                ckpt.model.predict(&ckpt.meta.normalizer.apply(&data.samples[j].loads)).expect("dimensions checked");
            let out = rec.reconstruct(&s, &data.samples[j].loads);
            std::hint::black_box(out);
            t0.elapsed()
        };
        model_path(0);
        for (j, inst) in instances.iter_mut().enumerate() {
            inst.time_model_s = model_path(j).as_secs_f64();
        }
        let _ = solver.solve(&data.samples[0].loads, None);
        for (j, inst) in instances.iter_mut().enumerate() {
            let t0 = Instant::now();
            let sol = solver.solve(&data.samples[j].loads, None);
            inst.time_ref_s = t0.elapsed().as_secs_f64();
            match sol {
                Ok(sol) => {
                    inst.ref_iterations = sol.iterations;
                    inst.cost_ref = sol.objective;
                }
                Err(e) => log::warn!("instance {j}: reference solve failed during timing: {e}"),
            }
        }
    }

    let mut report = EvalReport {
        case_name: case.name.clone(),
        n_instances: n,
        feasibility_rate: 0.0,
        avg_cost_model: 0.0,
        avg_cost_ref: 0.0,
        cost_diff: 0.0,
        time_model: TimingStats { mean_s: 0.0, std_s: 0.0 },
        time_ref: TimingStats { mean_s: 0.0, std_s: 0.0 },
        speedup: 0.0,
        recovery: None,
        instances,
    };
    summarize(&mut report);
    Ok(report)
}

/// Recomputes the aggregate columns from the per-instance results.
fn summarize(report: &mut EvalReport) {
    let inst = &report.instances;
    let n = inst.len();
    let feasible: Vec<&InstanceResult> = inst.iter().filter(|i| i.feasible).collect();
    report.feasibility_rate = if n == 0 { 0.0 } else { 100.0 * feasible.len() as f64 / n as f64 };
    let model_cost =
        |i: &InstanceResult| i.recovery.as_ref().filter(|r| r.converged).map_or(i.cost_model, |r| r.objective);
    if feasible.is_empty() {
        report.avg_cost_model = f64::NAN;
        report.avg_cost_ref = f64::NAN;
        report.cost_diff = f64::NAN;
    } else {
        let m = feasible.len() as f64;
        report.avg_cost_model = feasible.iter().map(|i| model_cost(i)).sum::<f64>() / m;
        report.avg_cost_ref = feasible.iter().map(|i| i.cost_ref).sum::<f64>() / m;
        report.cost_diff = (report.avg_cost_model - report.avg_cost_ref) / report.avg_cost_ref * 100.0;
    }
    let tm: Vec<f64> = inst.iter().map(|i| i.time_model_s).collect();
    let tr: Vec<f64> = inst.iter().map(|i| i.time_ref_s).collect();
    report.time_model = TimingStats::of(&tm);
    report.time_ref = TimingStats::of(&tr);
    report.speedup =
        if report.time_model.mean_s > 0.0 { report.time_ref.mean_s / report.time_model.mean_s } else { 0.0 };
}

/// Re-solves every infeasible instance from its prediction and folds the
/// recovery time into that instance's model-path time.
pub fn recover_infeasible(report: &mut EvalReport, data: &Dataset, solver: &OpfSolver) {
    let feasibility_before = report.recovery.as_ref().map_or(report.feasibility_rate, |r| r.feasibility_before);
    let mut attempted = 0;
    let mut times = Vec::new();
    let (mut warm_it, mut cold_it, mut le) = (0usize, 0usize, 0usize);
    for inst in report.instances.iter_mut().filter(|i| !i.feasible) {
        let Some(ws) = inst.prediction.clone() else {
            continue;
        };
        attempted += 1;
        let loads = &data.samples[inst.index].loads;
        let t0 = Instant::now();
        let res = solver.solve(loads, Some(&ws));
        let dt = t0.elapsed().as_secs_f64();
        let cold = if inst.ref_iterations > 0 {
            inst.ref_iterations
        } else {
            solver.solve(loads, None).map(|s| s.iterations).unwrap_or(usize::MAX)
        };
        inst.time_model_s += dt;
        match res {
            Ok(sol) => {
                times.push(dt);
                warm_it += sol.iterations;
                cold_it += cold;
                le += usize::from(sol.iterations <= cold);
                inst.feasible = true;
                inst.recovery = Some(Recovery {
                    converged: true,
                    iterations: sol.iterations,
                    time_s: dt,
                    objective: sol.objective,
                });
            }
            Err(e) => {
                log::warn!("instance {}: recovery failed: {e}", inst.index);
                let iterations = e.last_iterate().map_or(0, |s| s.iterations);
                inst.recovery = Some(Recovery { converged: false, iterations, time_s: dt, objective: f64::NAN });
            }
        }
    }
    let recovered = times.len();
    let per = |x: usize| if recovered == 0 { 0.0 } else { x as f64 / recovered as f64 };
    report.recovery = Some(RecoveryStats {
        feasibility_before,
        attempted,
        recovered,
        avg_time_s: if recovered == 0 { 0.0 } else { times.iter().sum::<f64>() / recovered as f64 },
        avg_warm_iterations: per(warm_it),
        avg_cold_iterations: per(cold_it),
        warm_le_cold: if attempted == 0 { 1.0 } else { le as f64 / attempted as f64 },
    });
    summarize(report);
}

fn ms(seconds: f64) -> f64 {
    seconds * 1e3
}

impl EvalReport {
    /// Machine-readable summary: a header row and one value row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "case,n_instances,feasibility_rate,avg_cost_model,avg_cost_ref,cost_diff,time_model_ms,time_model_std_ms,\
             time_ref_ms,time_ref_std_ms,speedup,feasibility_before_recovery,recovery_attempted,recovered,recovery_time_ms,warm_iterations,cold_iterations,warm_le_cold\n",
        );
        let r = self.recovery.clone().unwrap_or(RecoveryStats {
            feasibility_before: self.feasibility_rate,
            attempted: 0,
            recovered: 0,
            avg_time_s: 0.0,
            avg_warm_iterations: 0.0,
            avg_cold_iterations: 0.0,
            warm_le_cold: 0.0,
        });
        s.push_str(&format!(
            "{},{},{:.4},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4},{:.4},{},{},{:.6},{:.4},{:.4},{:.4}\n",
            self.case_name,
            self.n_instances,
            self.feasibility_rate,
            self.avg_cost_model,
            self.avg_cost_ref,
            self.cost_diff,
            ms(self.time_model.mean_s),
            ms(self.time_model.std_s),
            ms(self.time_ref.mean_s),
            ms(self.time_ref.std_s),
            self.speedup,
            r.feasibility_before,
            r.attempted,
            r.recovered,
            ms(r.avg_time_s),
            r.avg_warm_iterations,
            r.avg_cold_iterations,
            r.warm_le_cold
        ));
        s
    }

    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("Evaluation on {} ({} test instances)\n", self.case_name, self.n_instances));
        s.push_str(&format!("  feasibility rate      {:>10.2} %\n", self.feasibility_rate));
        s.push_str(&format!("  avg cost (model)      {:>10.2} $/hr\n", self.avg_cost_model));
        s.push_str(&format!("  avg cost (reference)  {:>10.2} $/hr\n", self.avg_cost_ref));
        s.push_str(&format!("  cost diff             {:>10.4} %\n", self.cost_diff));
        s.push_str(&format!(
            "  time (model)          {:>10.3} ms  (std {:.3})\n",
            ms(self.time_model.mean_s),
            ms(self.time_model.std_s)
        ));
        s.push_str(&format!(
            "  time (reference)      {:>10.3} ms  (std {:.3})\n",
            ms(self.time_ref.mean_s),
            ms(self.time_ref.std_s)
        ));
        s.push_str(&format!("  speedup               {:>10.2} x\n", self.speedup));
        if let Some(r) = &self.recovery {
            s.push_str(&format!("  before recovery       {:>10.2} %\n", r.feasibility_before));
            s.push_str(&format!("  recovered             {:>6} / {}\n", r.recovered, r.attempted));
            s.push_str(&format!("  recovery time         {:>10.3} ms\n", ms(r.avg_time_s)));
            s.push_str(&format!(
                "  iterations warm/cold  {:>6.2} / {:.2}  (warm <= cold in {:.0}%)\n",
                r.avg_warm_iterations,
                r.avg_cold_iterations,
                100.0 * r.warm_le_cold
            ));
        }
        s
    }

    /// Per-instance predicted versus reference values: active output of
    /// every PV generator and voltage magnitude of every bus.
    pub fn write_comparison(&self, path: &Path, data: &Dataset, case: &NetworkCase) -> Result<(), EvalError> {
        let io = |e: std::io::Error| EvalError::Io { path: path.display().to_string(), msg: e.to_string() };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(out, "instance,quantity,bus,predicted,reference").map_err(io)?;
        let layout = case.layout();
        for inst in &self.instances {
            let sample = &data.samples[inst.index];
            let pred_x = data.spec.decode(&inst.s_pred).ok();
            let ref_x = data.spec.decode(&sample.s_true).ok();
            if let (Some(px), Some(rx)) = (pred_x, ref_x) {
                for (k, &g) in layout.pv_gens.iter().enumerate() {
                    let bus = case.buses[case.generators[g].bus].id;
                    writeln!(out, "{},p_gen,{},{:.10e},{:.10e}", inst.index, bus, px[1 + 2 * k], rx[1 + 2 * k])
                        .map_err(io)?;
                }
            }
            if let Some(ws) = &inst.prediction {
                for (i, bus) in case.buses.iter().enumerate() {
                    writeln!(out, "{},v_mag,{},{:.10e},{:.10e}", inst.index, bus.id, ws.v_mag[i], sample.v_mag[i])
                        .map_err(io)?;
                }
            }
        }
        out.flush().map_err(io)
    }
}
