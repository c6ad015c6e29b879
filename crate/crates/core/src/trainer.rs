//! Penalty-augmented training: supervised loss on scaling factors plus a
//! penalty on limit violations of the power-flow reconstruction, whose
//! gradient is estimated with two symmetric power-flow evaluations.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Dataset, ScalingSpec};
use crate::mlp::{adam_step, backward, forward, AdamState, MlpError, MlpModel};
use crate::netmodel::{build_admittance, AdmittanceMatrix, NetworkCase};
use crate::powerflow::{solve_pf, PfInit, PfOptions, PowerFlowSolution};

/// Perturbed scaling factors are clipped into `[CLIP, 1 − CLIP]`.
pub const CLIP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub w1: f64,
    pub w2: f64,
    /// Smoothing radius of the zero-order estimator, in scaling-factor units.
    pub delta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Penalty charged when the reconstruction power flow fails.
    pub diverged_pf_penalty: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            w1: 1.0,
            w2: 0.1,
            delta: 1e-3,
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            diverged_pf_penalty: 10.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset does not match the model: {0}")]
    Mismatch(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}, sample {sample}: pred {pred}, pen {pen}")]
    NonFinite { epoch: usize, batch: usize, sample: usize, pred: f64, pen: f64 },
    #[error(transparent)]
    Mlp(#[from] MlpError),
}

/// Mean violation per penalized family; each term is a sum of box
/// penalties divided by the family size (slack terms are single values).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PenaltyTerms {
    pub branch: f64,
    pub pq_vmag: f64,
    pub pv_q: f64,
    pub slack_p: f64,
    pub slack_q: f64,
}

impl PenaltyTerms {
    pub fn sum(&self) -> f64 {
        self.branch + self.pq_vmag + self.pv_q + self.slack_p + self.slack_q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pred: f64,
    pub pen: f64,
    pub total: f64,
    pub terms: PenaltyTerms,
    pub pf_converged: bool,
}

/// `(1/d)·‖s_pred − s_true‖²`.
pub fn pred_loss(s_pred: &[f64], s_true: &[f64]) -> Result<f64, TrainError> {
    if s_pred.len() != s_true.len() || s_pred.is_empty() {
        return Err(TrainError::Mismatch(format!(
            "prediction length {} vs label length {}",
            s_pred.len(),
            s_true.len()
        )));
    }
    let d = s_pred.len() as f64;
    Ok(s_pred.iter().zip(s_true).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d)
}

/// Distance of `x` outside `[x_min, x_max]`.
pub fn box_penalty(x: f64, x_min: f64, x_max: f64) -> f64 {
    (x - x_max).max(0.0) + (x_min - x).max(0.0)
}

fn mean(total: f64, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Per-family violations of a converged reconstruction.
pub fn penalty_terms(case: &NetworkCase, sol: &PowerFlowSolution) -> PenaltyTerms {
    let layout = case.layout();
    // Unrated branches contribute zero but still count in the mean.
    let branch: f64 = case
        .branches
        .iter()
        .zip(&sol.branch_s)
        .filter(|(br, _)| br.is_limited())
        .map(|(br, &s)| box_penalty(s, 0.0, br.s_max))
        .sum();
    let pq: f64 =
        layout.pq_buses.iter().map(|&i| box_penalty(sol.v_mag[i], case.buses[i].v_min, case.buses[i].v_max)).sum();
    let pv: f64 = layout
        .pv_gens
        .iter()
        .zip(&sol.pv_q_gen)
        .map(|(&g, &q)| box_penalty(q, case.generators[g].q_min, case.generators[g].q_max))
        .sum();
    let sg = &case.generators[layout.slack_gen];
    PenaltyTerms {
        branch: mean(branch, case.n_branch()),
        pq_vmag: mean(pq, layout.pq_buses.len()),
        pv_q: mean(pv, layout.pv_gens.len()),
        slack_p: box_penalty(sol.slack_p_gen, sg.p_min, sg.p_max),
        slack_q: box_penalty(sol.slack_q_gen, sg.q_min, sg.q_max),
    }
}

/// Penalty of a reconstruction, or `diverged_pf_penalty` when the power
/// flow did not converge.
pub fn penalty_loss(case: &NetworkCase, sol: &PowerFlowSolution, diverged_pf_penalty: f64) -> f64 {
    if !sol.converged {
        return diverged_pf_penalty;
    }
    penalty_terms(case, sol).sum()
}

/// Result of one two-point estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoEstimate {
    pub grad: Vec<f64>,
    /// Whether either perturbed point needed clipping.
    pub clipped: bool,
}

/// Uniform direction on the unit sphere in `R^d`.
pub fn unit_sphere(d: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `(d·v/2δ)·[L(s + δv) − L(s − δv)]` for a random unit direction `v`.
/// Calls `pen_eval` exactly twice.
pub fn zo_grad<F: FnMut(&[f64]) -> f64>(
    mut pen_eval: F,
    s: &[f64],
    delta: f64,
    rng: &mut impl rand::Rng,
) -> ZoEstimate {
    let d = s.len();
    let v = unit_sphere(d, rng);
    let mut clipped = false;
    let mut shifted = |sign: f64| -> Vec<f64> {
        s.iter()
            .zip(&v)
            .map(|(&s, &v)| {
                let x = s + sign * delta * v;
                let c = x.clamp(CLIP, 1.0 - CLIP);
                clipped |= c != x;
                c
            })
            .collect()
    };
    let plus = shifted(1.0);
    let minus = shifted(-1.0);
    let diff = pen_eval(&plus) - pen_eval(&minus);
    let scale = d as f64 * diff / (2.0 * delta);
    ZoEstimate { grad: v.iter().map(|v| scale * v).collect(), clipped }
}

/// Decodes scaling factors, reconstructs by power flow and scores the
/// result. Holds everything a worker needs for one case.
#[derive(Debug, Clone)]
pub struct Reconstructor {
    pub case: NetworkCase,
    pub y: AdmittanceMatrix,
    pub spec: ScalingSpec,
    pub init: PfInit,
    pub pf: PfOptions,
}

impl Reconstructor {
    pub fn new(case: &NetworkCase, spec: &ScalingSpec, init: &PfInit) -> Reconstructor {
        Reconstructor {
            case: case.clone(),
            y: build_admittance(case),
            spec: spec.clone(),
            init: init.clone(),
            pf: PfOptions::default(),
        }
    }

    /// `None` when the decoded point cannot be solved at all (singular
    /// Jacobian or malformed input).
    pub fn reconstruct(
        &self,
        s: &[f64],
        loads: &[f64],
    ) -> Option<(crate::powerflow::IndependentVars, PowerFlowSolution)> {
        let x = self.spec.decode(s).ok()?;
        let iv = self.spec.to_independent(&x).ok()?;
        let sol = solve_pf(&self.case, &self.y, &iv, loads, &self.init, &self.pf).ok()?;
        Some((iv, sol))
    }

    /// Penalty and its breakdown; unsolvable or non-converged points cost
    /// `diverged`.
    pub fn penalty(&self, s: &[f64], loads: &[f64], diverged: f64) -> (f64, PenaltyTerms, bool) {
        match self.reconstruct(s, loads) {
            Some((_, sol)) if sol.converged => {
                let t = penalty_terms(&self.case, &sol);
                (t.sum(), t, true)
            }
            _ => (diverged, PenaltyTerms::default(), false),
        }
    }
}

/// Independent stream for `(seed, epoch, index)` via SplitMix64 mixing.
pub fn derive_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ epoch) ^ index)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub pred: f64,
    pub pen: f64,
    pub total: f64,
    /// Share of reconstructions whose power flow failed.
    pub pf_failure_rate: f64,
    pub wall_time_s: f64,
}

pub struct TrainOutcome {
    pub model: MlpModel,
    pub history: Vec<EpochRecord>,
}

struct SampleResult {
    loss: LossBreakdown,
    grad: Vec<f64>,
    clipped: bool,
}

fn sample_step(
    rec: &Reconstructor,
    cfg: &TrainConfig,
    s: &[f64],
    s_true: &[f64],
    loads: &[f64],
    seed: u64,
) -> Result<SampleResult, TrainError> {
    let d = s.len() as f64;
    let pred = pred_loss(s, s_true)?;
    let (pen, terms, pf_converged) = rec.penalty(s, loads, cfg.diverged_pf_penalty);
    let mut grad: Vec<f64> = s.iter().zip(s_true).map(|(a, b)| cfg.w1 * 2.0 * (a - b) / d).collect();
    let mut clipped = false;
    if cfg.w2 > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let est = zo_grad(|p| rec.penalty(p, loads, cfg.diverged_pf_penalty).0, s, cfg.delta, &mut rng);
        clipped = est.clipped;
        for (g, e) in grad.iter_mut().zip(est.grad) {
            *g += cfg.w2 * e;
        }
    }
    Ok(SampleResult {
        loss: LossBreakdown { pred, pen, total: cfg.w1 * pred + cfg.w2 * pen, terms, pf_converged },
        grad,
        clipped,
    })
}

fn validate(cfg: &TrainConfig) -> Result<(), TrainError> {
    let bad = |m: &str| Err(TrainError::Config(m.into()));
    if !(cfg.w1 >= 0.0 && cfg.w2 >= 0.0) {
        return bad("w1 and w2 must be non-negative");
    }
    if !(cfg.delta > 0.0) {
        return bad("delta must be positive");
    }
    if cfg.batch_size == 0 {
        return bad("batch size must be at least 1");
    }
    if !(cfg.lr > 0.0) {
        return bad("learning rate must be positive");
    }
    Ok(())
}

/// Trains `model` in place on `data` and returns it with per-epoch means.
pub fn train(
    mut model: MlpModel,
    data: &Dataset,
    case: &NetworkCase,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    validate(cfg)?;
    data.check_case(case).map_err(|e| TrainError::Mismatch(e.to_string()))?;
    if model.input_dim() != 2 * case.n_bus() || model.output_dim() != data.spec.dim() {
        return Err(TrainError::Mismatch(format!(
            "model maps {} -> {}, dataset needs {} -> {}",
            model.input_dim(),
            model.output_dim(),
            2 * case.n_bus(),
            data.spec.dim()
        )));
    }
    let rec = Reconstructor::new(case, &data.spec, &data.dependent_mean);
    let inputs: Vec<Vec<f64>> = data.samples.iter().map(|s| data.normalizer.apply(&s.loads)).collect();
    let mut adam = AdamState::new(&model, cfg.lr);
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, u64::MAX));
        order.shuffle(&mut rng);
        let (mut pred_sum, mut pen_sum, mut failures, mut clipped) = (0.0, 0.0, 0usize, 0usize);

        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let dim_in = model.input_dim();
            let mut x = DMatrix::zeros(dim_in, batch.len());
            for (j, &idx) in batch.iter().enumerate() {
                x.column_mut(j).copy_from_slice(&inputs[idx]);
            }
            let (s, trace) = forward(&model, &x)?;
            let results: Vec<Result<SampleResult, TrainError>> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &idx)| {
                    let sample = &data.samples[idx];
                    let seed = derive_seed(cfg.seed, epoch as u64, idx as u64);
                    sample_step(&rec, cfg, s.column(j).as_slice(), &sample.s_true, &sample.loads, seed)
                })
                .collect();

            let mut dl_ds = DMatrix::zeros(s.nrows(), batch.len());
            let inv = 1.0 / batch.len() as f64;
            for (j, r) in results.into_iter().enumerate() {
                let r = r?;
                let l = r.loss;
                if !l.total.is_finite() || r.grad.iter().any(|g| !g.is_finite()) {
                    return Err(TrainError::NonFinite { epoch, batch: b, sample: batch[j], pred: l.pred, pen: l.pen });
                }
                pred_sum += l.pred;
                pen_sum += l.pen;
                failures += usize::from(!l.pf_converged);
                clipped += usize::from(r.clipped);
                for (k, g) in r.grad.into_iter().enumerate() {
                    dl_ds[(k, j)] = g * inv;
                }
            }
            let grads = backward(&model, &trace, &dl_ds)?;
            adam_step(&mut model, &mut adam, &grads)?;
        }

        let n = data.samples.len().max(1) as f64;
        let (pred, pen) = (pred_sum / n, pen_sum / n);
        let rec_e = EpochRecord {
            epoch: epoch + 1,
            pred,
            pen,
            total: cfg.w1 * pred + cfg.w2 * pen,
            pf_failure_rate: failures as f64 / n,
            wall_time_s: t0.elapsed().as_secs_f64(),
        };
        if clipped > 0 {
            log::debug!("epoch {}: {clipped} perturbed points clipped into the unit box", epoch + 1);
        }
        log::info!(
            "epoch {:>4}: pred {:.6e} pen {:.6e} total {:.6e} pf failures {:.1}%",
            rec_e.epoch,
            rec_e.pred,
            rec_e.pen,
            rec_e.total,
            100.0 * rec_e.pf_failure_rate
        );
        history.push(rec_e);
    }
    Ok(TrainOutcome { model, history })
}

/// Comma-separated metrics: `epoch,pred,pen,total,wall_time_s`.
pub fn write_metrics(path: &Path, history: &[EpochRecord]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch,pred,pen,total,wall_time_s")?;
    for r in history {
        writeln!(out, "{},{:.16e},{:.16e},{:.16e},{:.6}", r.epoch, r.pred, r.pen, r.total, r.wall_time_s)?;
    }
    out.flush()
}
