//! AC-OPF as a smooth NLP in rectangular voltages.
//!
//! Variables are `x = [e (N), f (N), P_G (n_gen), Q_G (n_gen)]` with
//! `V_i = e_i + j·f_i`. Every bus balance, branch end flow and squared
//! voltage magnitude is a homogeneous quadratic in `(e, f)`, so first and
//! second derivatives come straight from [`QuadForm`].

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::ipm::{Evaluation, Nlp, SparseRow};
use super::quadform::QuadForm;
use crate::netmodel::{AdmittanceMatrix, NetworkCase};

/// Objective scaling applied inside the solver; reported objectives are
/// always unscaled.
const COST_MULT: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
enum BoundKind {
    Lower,
    Upper,
}

#[derive(Debug, Clone)]
struct BranchLimit {
    p: QuadForm,
    q: QuadForm,
    s_max_sq: f64,
}

#[derive(Debug, Clone)]
struct VoltageBound {
    vsq: usize,
    kind: BoundKind,
    limit_sq: f64,
}

#[derive(Debug, Clone)]
struct VarBound {
    var: usize,
    kind: BoundKind,
    limit: f64,
}

/// Load-independent structure of one case's OPF, reusable across scenarios.
#[derive(Debug, Clone)]
pub struct OpfProblem {
    n_bus: usize,
    n_gen: usize,
    /// `c2, c1` per generator, already multiplied by [`COST_MULT`].
    cost: Vec<(f64, f64)>,
    p_bal: Vec<QuadForm>,
    q_bal: Vec<QuadForm>,
    gen_at_bus: Vec<Option<usize>>,
    slack_bus: usize,
    /// `|V_i|²` per bus.
    vsq: Vec<QuadForm>,
    /// Buses whose magnitude is pinned (`v_min == v_max`).
    v_fixed: Vec<(usize, f64)>,
    /// Generator variables pinned by equal bounds.
    var_fixed: Vec<(usize, f64)>,
    branches: Vec<BranchLimit>,
    v_bounds: Vec<VoltageBound>,
    var_bounds: Vec<VarBound>,
}

/// An [`OpfProblem`] bound to one load vector.
pub(crate) struct LoadedProblem<'a> {
    pub problem: &'a OpfProblem,
    pub loads: &'a [f64],
}

impl OpfProblem {
    pub fn new(case: &NetworkCase, y: &AdmittanceMatrix) -> OpfProblem {
        let n = case.n_bus();
        let ng = case.n_gen();
        let layout = case.layout();

        let mut p_bal = vec![QuadForm::default(); n];
        let mut q_bal = vec![QuadForm::default(); n];
        for i in 0..n {
            for k in 0..n {
                let yik = y.entries[(i, k)];
                if yik.norm() == 0.0 {
                    continue;
                }
                // S_i = Σ_k conj(Y_ik)·V_i·conj(V_k)
                QuadForm::add_complex_product(&mut p_bal[i], &mut q_bal[i], yik.conj(), i, k, n);
            }
        }
        let p_bal: Vec<QuadForm> = p_bal.into_iter().map(QuadForm::finish).collect();
        let q_bal: Vec<QuadForm> = q_bal.into_iter().map(QuadForm::finish).collect();

        let vsq: Vec<QuadForm> = (0..n)
            .map(|i| {
                let mut q = QuadForm::default();
                q.add(i, i, 1.0);
                q.add(n + i, n + i, 1.0);
                q.finish()
            })
            .collect();

        let mut branches = Vec::new();
        for (br, t) in case.branches.iter().zip(&y.branches) {
            if !br.is_limited() {
                continue;
            }
            for (a, b, self_y, mutual_y) in [(br.from, br.to, t.ff, t.ft), (br.to, br.from, t.tt, t.tf)] {
                // S = conj(y_self)|V_a|² + conj(y_mutual)·V_a·conj(V_b)
                let (mut p, mut q) = (QuadForm::default(), QuadForm::default());
                QuadForm::add_complex_product(&mut p, &mut q, self_y.conj(), a, a, n);
                QuadForm::add_complex_product(&mut p, &mut q, mutual_y.conj(), a, b, n);
                branches.push(BranchLimit { p: p.finish(), q: q.finish(), s_max_sq: br.s_max * br.s_max });
            }
        }

        let mut v_fixed = Vec::new();
        let mut v_bounds = Vec::new();
        for (i, bus) in case.buses.iter().enumerate() {
            if bus.v_min == bus.v_max {
                v_fixed.push((i, bus.v_min * bus.v_min));
            } else {
                v_bounds.push(VoltageBound { vsq: i, kind: BoundKind::Lower, limit_sq: bus.v_min * bus.v_min });
                v_bounds.push(VoltageBound { vsq: i, kind: BoundKind::Upper, limit_sq: bus.v_max * bus.v_max });
            }
        }

        let mut var_fixed = Vec::new();
        let mut var_bounds = Vec::new();
        for (g, gen) in case.generators.iter().enumerate() {
            for (var, lo, hi) in [(2 * n + g, gen.p_min, gen.p_max), (2 * n + ng + g, gen.q_min, gen.q_max)] {
                if lo == hi {
                    var_fixed.push((var, lo));
                    continue;
                }
                if lo.is_finite() {
                    var_bounds.push(VarBound { var, kind: BoundKind::Lower, limit: lo });
                }
                if hi.is_finite() {
                    var_bounds.push(VarBound { var, kind: BoundKind::Upper, limit: hi });
                }
            }
        }

        OpfProblem {
            n_bus: n,
            n_gen: ng,
            cost: case.cost_curves.iter().map(|c| (c.c2 * COST_MULT, c.c1 * COST_MULT)).collect(),
            p_bal,
            q_bal,
            gen_at_bus: layout.gen_at_bus.clone(),
            slack_bus: layout.slack_bus,
            vsq,
            v_fixed,
            var_fixed,
            branches,
            v_bounds,
            var_bounds,
        }
    }

    pub fn n_vars(&self) -> usize {
        2 * self.n_bus + 2 * self.n_gen
    }

    pub(crate) fn pg_index(&self, g: usize) -> usize {
        2 * self.n_bus + g
    }

    pub(crate) fn qg_index(&self, g: usize) -> usize {
        2 * self.n_bus + self.n_gen + g
    }

    /// Packs polar voltages and dispatch into a solver vector.
    pub(crate) fn pack(&self, v_mag: &[f64], v_ang: &[f64], p_gen: &[f64], q_gen: &[f64]) -> Vec<f64> {
        let n = self.n_bus;
        let mut x = vec![0.0; self.n_vars()];
        for i in 0..n {
            let v = Complex64::from_polar(v_mag[i], v_ang[i]);
            x[i] = v.re;
            x[n + i] = v.im;
        }
        for g in 0..self.n_gen {
            x[self.pg_index(g)] = p_gen[g];
            x[self.qg_index(g)] = q_gen[g];
        }
        x
    }

    /// Splits a solver vector into `(v_mag, v_ang, p_gen, q_gen)`.
    pub(crate) fn unpack(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.n_bus;
        let ng = self.n_gen;
        let v: Vec<Complex64> = (0..n).map(|i| Complex64::new(x[i], x[n + i])).collect();
        (
            v.iter().map(|c| c.norm()).collect(),
            v.iter().map(|c| c.arg()).collect(),
            x[2 * n..2 * n + ng].to_vec(),
            x[2 * n + ng..].to_vec(),
        )
    }
}

fn sparse(vars: &[usize], grad: Vec<f64>) -> SparseRow {
    vars.iter().copied().zip(grad).collect()
}

impl Nlp for LoadedProblem<'_> {
    fn n_vars(&self) -> usize {
        self.problem.n_vars()
    }

    fn evaluate(&self, x: &[f64]) -> Evaluation {
        let pr = self.problem;
        let n = pr.n_bus;
        let nx = pr.n_vars();

        let mut f = 0.0;
        let mut df = vec![0.0; nx];
        for (g, &(c2, c1)) in pr.cost.iter().enumerate() {
            let p = x[pr.pg_index(g)];
            f += (c2 * p + c1) * p;
            df[pr.pg_index(g)] = 2.0 * c2 * p + c1;
        }

        let mut g = Vec::with_capacity(2 * n + 1 + pr.v_fixed.len() + pr.var_fixed.len());
        let mut jg = Vec::with_capacity(g.capacity());
        for i in 0..n {
            let mut row = sparse(pr.p_bal[i].vars(), pr.p_bal[i].gradient(x));
            let mut val = pr.p_bal[i].value(x) + self.loads[i];
            if let Some(gi) = pr.gen_at_bus[i] {
                val -= x[pr.pg_index(gi)];
                row.push((pr.pg_index(gi), -1.0));
            }
            g.push(val);
            jg.push(row);
        }
        for i in 0..n {
            let mut row = sparse(pr.q_bal[i].vars(), pr.q_bal[i].gradient(x));
            let mut val = pr.q_bal[i].value(x) + self.loads[n + i];
            if let Some(gi) = pr.gen_at_bus[i] {
                val -= x[pr.qg_index(gi)];
                row.push((pr.qg_index(gi), -1.0));
            }
            g.push(val);
            jg.push(row);
        }
        g.push(x[n + pr.slack_bus]);
        jg.push(vec![(n + pr.slack_bus, 1.0)]);
        for &(i, vsq) in &pr.v_fixed {
            g.push(pr.vsq[i].value(x) - vsq);
            jg.push(sparse(pr.vsq[i].vars(), pr.vsq[i].gradient(x)));
        }
        for &(var, val) in &pr.var_fixed {
            g.push(x[var] - val);
            jg.push(vec![(var, 1.0)]);
        }

        let mut h = Vec::with_capacity(pr.branches.len() + pr.v_bounds.len() + pr.var_bounds.len());
        let mut jh = Vec::with_capacity(h.capacity());
        for br in &pr.branches {
            let (p, q) = (br.p.value(x), br.q.value(x));
            h.push(p * p + q * q - br.s_max_sq);
            let mut row: SparseRow = Vec::with_capacity(br.p.vars().len() + br.q.vars().len());
            for (&v, d) in br.p.vars().iter().zip(br.p.gradient(x)) {
                row.push((v, 2.0 * p * d));
            }
            for (&v, d) in br.q.vars().iter().zip(br.q.gradient(x)) {
                row.push((v, 2.0 * q * d));
            }
            jh.push(row);
        }
        for vb in &pr.v_bounds {
            let q = &pr.vsq[vb.vsq];
            let (val, grad) = (q.value(x), q.gradient(x));
            match vb.kind {
                BoundKind::Lower => {
                    h.push(vb.limit_sq - val);
                    jh.push(q.vars().iter().copied().zip(grad.into_iter().map(|d| -d)).collect());
                }
                BoundKind::Upper => {
                    h.push(val - vb.limit_sq);
                    jh.push(sparse(q.vars(), grad));
                }
            }
        }
        for vb in &pr.var_bounds {
            match vb.kind {
                BoundKind::Lower => {
                    h.push(vb.limit - x[vb.var]);
                    jh.push(vec![(vb.var, -1.0)]);
                }
                BoundKind::Upper => {
                    h.push(x[vb.var] - vb.limit);
                    jh.push(vec![(vb.var, 1.0)]);
                }
            }
        }

        Evaluation { f, df, g, jg, h, jh }
    }

    fn add_lagrangian_hessian(&self, x: &[f64], ev: &Evaluation, lam: &[f64], mu: &[f64], out: &mut DMatrix<f64>) {
        let pr = self.problem;
        let n = pr.n_bus;
        for (g, &(c2, _)) in pr.cost.iter().enumerate() {
            out[(pr.pg_index(g), pr.pg_index(g))] += 2.0 * c2;
        }
        for i in 0..n {
            pr.p_bal[i].add_hessian(lam[i], out);
            pr.q_bal[i].add_hessian(lam[n + i], out);
        }
        for (k, &(i, _)) in pr.v_fixed.iter().enumerate() {
            pr.vsq[i].add_hessian(lam[2 * n + 1 + k], out);
        }

        // ∇²(P² + Q²) = 2(∇P∇Pᵀ + ∇Q∇Qᵀ) + 2P·∇²P + 2Q·∇²Q
        for (br, &m) in pr.branches.iter().zip(mu) {
            if m == 0.0 {
                continue;
            }
            for form in [&br.p, &br.q] {
                let val = form.value(x);
                let grad = form.gradient(x);
                let vars = form.vars();
                for (a, &va) in vars.iter().enumerate() {
                    for (b, &vb) in vars.iter().enumerate() {
                        out[(va, vb)] += 2.0 * m * grad[a] * grad[b];
                    }
                }
                form.add_hessian(2.0 * m * val, out);
            }
        }
        let off = pr.branches.len();
        for (vb, &m) in pr.v_bounds.iter().zip(&mu[off..]) {
            let sign = match vb.kind {
                BoundKind::Lower => -1.0,
                BoundKind::Upper => 1.0,
            };
            pr.vsq[vb.vsq].add_hessian(sign * m, out);
        }
        debug_assert_eq!(ev.h.len(), mu.len());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::build_admittance;
    use crate::netmodel::fixtures::two_bus;

    fn finite_difference_check(lp: &LoadedProblem, x: &[f64]) {
        let ev = lp.evaluate(x);
        let step = 1e-6;
        let dense = |rows: &[SparseRow], nx: usize| {
            let mut m = DMatrix::<f64>::zeros(rows.len(), nx);
            for (i, r) in rows.iter().enumerate() {
                for &(j, v) in r {
                    m[(i, j)] += v;
                }
            }
            m
        };
        let nx = lp.n_vars();
        let jg = dense(&ev.jg, nx);
        let jh = dense(&ev.jh, nx);
        for j in 0..nx {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += step;
            xm[j] -= step;
            let (ep, em) = (lp.evaluate(&xp), lp.evaluate(&xm));
            for i in 0..ev.g.len() {
                let fd = (ep.g[i] - em.g[i]) / (2.0 * step);
                assert!((fd - jg[(i, j)]).abs() < 1e-6, "jg[{i},{j}] {fd} vs {}", jg[(i, j)]);
            }
            for i in 0..ev.h.len() {
                let fd = (ep.h[i] - em.h[i]) / (2.0 * step);
                assert!((fd - jh[(i, j)]).abs() < 1e-6, "jh[{i},{j}] {fd} vs {}", jh[(i, j)]);
            }
        }

        // Lagrangian Hessian against differences of the Lagrangian gradient.
        let lam: Vec<f64> = (0..ev.g.len()).map(|i| 0.3 + 0.1 * i as f64).collect();
        let mu: Vec<f64> = (0..ev.h.len()).map(|i| 0.5 + 0.05 * i as f64).collect();
        let grad_l = |x: &[f64]| {
            let e = lp.evaluate(x);
            let mut gl = e.df.clone();
            for (r, l) in e.jg.iter().zip(&lam) {
                for &(j, v) in r {
                    gl[j] += l * v;
                }
            }
            for (r, m) in e.jh.iter().zip(&mu) {
                for &(j, v) in r {
                    gl[j] += m * v;
                }
            }
            gl
        };
        let mut hess = DMatrix::zeros(nx, nx);
        lp.add_lagrangian_hessian(x, &ev, &lam, &mu, &mut hess);
        for j in 0..nx {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += step;
            xm[j] -= step;
            let (gp, gm) = (grad_l(&xp), grad_l(&xm));
            for i in 0..nx {
                let fd = (gp[i] - gm[i]) / (2.0 * step);
                assert!((fd - hess[(i, j)]).abs() < 1e-5, "H[{i},{j}] {fd} vs {}", hess[(i, j)]);
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut raw = two_bus(0.02, 0.2, 50.0, 20.0).to_raw();
        raw.branch[0].rate_a_mva = 80.0;
        raw.branch[0].tap = 0.97;
        raw.branch[0].shift_deg = 3.0;
        raw.branch[0].b = 0.04;
        let case = NetworkCase::from_raw(&raw).unwrap();
        let y = build_admittance(&case);
        let pr = OpfProblem::new(&case, &y);
        let loads = case.default_loads();
        let lp = LoadedProblem { problem: &pr, loads: &loads };
        let x = pr.pack(&[1.02, 0.97], &[0.0, -0.05], &[0.5, 0.0][..case.n_gen()], &[0.1, 0.0][..case.n_gen()]);
        finite_difference_check(&lp, &x);
    }

    #[test]
    fn pack_unpack_round_trip() {
        let case = two_bus(0.02, 0.2, 50.0, 20.0);
        let y = build_admittance(&case);
        let pr = OpfProblem::new(&case, &y);
        let ng = case.n_gen();
        let p: Vec<f64> = (0..ng).map(|g| 0.1 * (g + 1) as f64).collect();
        let q: Vec<f64> = (0..ng).map(|g| -0.05 * (g + 1) as f64).collect();
        let x = pr.pack(&[1.01, 0.98], &[0.0, -0.1], &p, &q);
        let (vm, va, pg, qg) = pr.unpack(&x);
        assert!((vm[1] - 0.98).abs() < 1e-15);
        assert!((va[1] + 0.1).abs() < 1e-15);
        assert_eq!(pg, p);
        assert_eq!(qg, q);
    }
}
