//! Load scenarios, the scaling-factor codec for the model's outputs, input
//! normalization, labeled datasets and their on-disk format.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::NetworkCase;
use crate::opfref::{OpfSolution, OpfSolver};
use crate::powerflow::{IndependentVars, PfInit};

pub const FORMAT_VERSION: u32 = 1;

/// Labels this far outside a bound are clamped onto it; anything further
/// is an encode error.
const LABEL_CLAMP: f64 = 1e-6;

/// Largest tolerated fraction of scenarios whose reference solve fails.
const MAX_DROP_RATE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{var} = {value} outside [{min}, {max}]")]
    OutOfBounds { var: String, value: f64, min: f64, max: f64 },
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension { what: String, expected: usize, got: usize },
    #[error("{path}:{line}: {msg}")]
    Format { path: String, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("{dropped} of {total} reference solves failed (limit {:.0}%); first failure: {first}", MAX_DROP_RATE * 100.0)]
    DropRate { dropped: usize, total: usize, first: String },
    #[error("dataset is for case {found}, expected {expected}")]
    CaseMismatch { expected: String, found: String },
}

/// Draws `count` load vectors (`P_D` then `Q_D`, p.u.). Every entry is the
/// default load times its own uniform factor in `[lo, hi]`.
pub fn sample_loads(case: &NetworkCase, lo: f64, hi: f64, count: usize, seed: u64) -> Vec<Vec<f64>> {
    assert!(lo > 0.0 && lo <= hi, "load range must satisfy 0 < lo <= hi");
    let base = case.default_loads();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factor = Uniform::new_inclusive(lo, hi).expect("valid load range");
    (0..count)
        .map(|_| {
            base.iter()
                .map(|&d| {
                    let f = if lo == hi { lo } else { factor.sample(&mut rng) };
                    d * f
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarKind {
    SlackVmag,
    GenP,
    GenVmag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledVar {
    pub kind: VarKind,
    /// External bus id the variable belongs to.
    pub bus: u32,
    pub min: f64,
    pub max: f64,
}

impl ScaledVar {
    pub fn label(&self) -> String {
        let k = match self.kind {
            VarKind::SlackVmag => "v_slack",
            VarKind::GenP => "p_gen",
            VarKind::GenVmag => "v_mag",
        };
        format!("{k}@bus{}", self.bus)
    }

    fn degenerate(&self) -> bool {
        self.min == self.max
    }
}

/// Output layout of the model: slack `|V|`, then `(P_G, |V|)` per PV
/// generator in generator order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSpec {
    pub vars: Vec<ScaledVar>,
}

impl ScalingSpec {
    pub fn from_case(case: &NetworkCase) -> ScalingSpec {
        let layout = case.layout();
        let slack = &case.buses[layout.slack_bus];
        let mut vars = vec![ScaledVar { kind: VarKind::SlackVmag, bus: slack.id, min: slack.v_min, max: slack.v_max }];
        for &g in &layout.pv_gens {
            let gen = &case.generators[g];
            let bus = &case.buses[gen.bus];
            vars.push(ScaledVar { kind: VarKind::GenP, bus: bus.id, min: gen.p_min, max: gen.p_max });
            vars.push(ScaledVar { kind: VarKind::GenVmag, bus: bus.id, min: bus.v_min, max: bus.v_max });
        }
        ScalingSpec { vars }
    }

    pub fn dim(&self) -> usize {
        self.vars.len()
    }

    /// `s = (x − min)/(max − min)`; fixed variables map to 0.5.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>, DataError> {
        self.check_len("physical vector", x.len())?;
        self.vars
            .iter()
            .zip(x)
            .map(|(v, &x)| {
                if !(x >= v.min && x <= v.max) {
                    return Err(DataError::OutOfBounds { var: v.label(), value: x, min: v.min, max: v.max });
                }
                Ok(if v.degenerate() { 0.5 } else { (x - v.min) / (v.max - v.min) })
            })
            .collect()
    }

    /// `x = s·(max − min) + min`; fixed variables decode to their value.
    pub fn decode(&self, s: &[f64]) -> Result<Vec<f64>, DataError> {
        self.check_len("scaling vector", s.len())?;
        Ok(self
            .vars
            .iter()
            .zip(s)
            .map(|(v, &s)| if v.degenerate() { v.min } else { s * (v.max - v.min) + v.min })
            .collect())
    }

    pub fn to_independent(&self, x: &[f64]) -> Result<IndependentVars, DataError> {
        self.check_len("physical vector", x.len())?;
        let n_pv = (x.len() - 1) / 2;
        Ok(IndependentVars {
            v_slack: x[0],
            theta_slack: 0.0,
            pv_p_gen: (0..n_pv).map(|k| x[1 + 2 * k]).collect(),
            pv_v_mag: (0..n_pv).map(|k| x[2 + 2 * k]).collect(),
        })
    }

    pub fn from_independent(&self, iv: &IndependentVars) -> Result<Vec<f64>, DataError> {
        let n_pv = iv.pv_p_gen.len();
        self.check_len("independent variables", 1 + 2 * n_pv)?;
        let mut x = Vec::with_capacity(self.dim());
        x.push(iv.v_slack);
        for k in 0..n_pv {
            x.push(iv.pv_p_gen[k]);
            x.push(iv.pv_v_mag[k]);
        }
        Ok(x)
    }

    /// Independent variables of an OPF solution in this layout.
    pub fn from_opf(&self, case: &NetworkCase, sol: &OpfSolution) -> Vec<f64> {
        let layout = case.layout();
        let mut x = Vec::with_capacity(self.dim());
        x.push(sol.v_mag[layout.slack_bus]);
        for &g in &layout.pv_gens {
            x.push(sol.p_gen[g]);
            x.push(sol.v_mag[case.generators[g].bus]);
        }
        x
    }

    /// Moves values within [`LABEL_CLAMP`] of a bound onto it.
    fn clamp_label(&self, x: &mut [f64]) {
        for (v, x) in self.vars.iter().zip(x.iter_mut()) {
            if *x > v.max && *x <= v.max + LABEL_CLAMP {
                *x = v.max;
            } else if *x < v.min && *x >= v.min - LABEL_CLAMP {
                *x = v.min;
            }
        }
    }

    fn check_len(&self, what: &str, got: usize) -> Result<(), DataError> {
        if got != self.dim() {
            return Err(DataError::Dimension { what: what.into(), expected: self.dim(), got });
        }
        Ok(())
    }
}

/// Per-dimension standardization of load inputs. Dimensions with zero
/// spread pass through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Normalizer {
        Normalizer { mean: vec![0.0; dim], std: vec![0.0; dim] }
    }

    /// Population mean and standard deviation per dimension.
    pub fn fit(rows: &[&[f64]], dim: usize) -> Normalizer {
        if rows.is_empty() {
            return Normalizer::identity(dim);
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, &x) in mean.iter_mut().zip(r.iter()) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((v, &m), &x) in var.iter_mut().zip(&mean).zip(r.iter()) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt()).collect();
        Normalizer { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&x, (&m, &s))| if s > 0.0 { (x - m) / s } else { x })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSample {
    /// `P_D` then `Q_D`, p.u.
    pub loads: Vec<f64>,
    pub s_true: Vec<f64>,
    /// Reference objective, $/hr.
    pub objective: f64,
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.csv",
            Split::Test => "test.csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub case_name: String,
    pub split: Split,
    pub seed: u64,
    pub load_range: (f64, f64),
    pub spec: ScalingSpec,
    /// Fitted on the training split and shared by both splits.
    pub normalizer: Normalizer,
    /// Mean reference voltages over the training split, used as the Newton
    /// starting point when reconstructing predictions.
    pub dependent_mean: PfInit,
    pub samples: Vec<TrainSample>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    case_name: String,
    split: Split,
    seed: u64,
    load_range: (f64, f64),
    /// How load factors are drawn.
    load_draw: String,
    n_bus: usize,
    count: usize,
    spec: ScalingSpec,
    normalizer: Normalizer,
    dependent_mean: PfInit,
}

const LOAD_DRAW: &str = "independent uniform factor per load entry";

impl Dataset {
    pub fn n_bus(&self) -> usize {
        self.dependent_mean.v_mag.len()
    }

    pub fn check_case(&self, case: &NetworkCase) -> Result<(), DataError> {
        if self.case_name != case.name {
            return Err(DataError::CaseMismatch { expected: case.name.clone(), found: self.case_name.clone() });
        }
        let spec = ScalingSpec::from_case(case);
        if spec != self.spec {
            return Err(DataError::Dimension {
                what: "scaling spec".into(),
                expected: spec.dim(),
                got: self.spec.dim(),
            });
        }
        Ok(())
    }

    /// Writes a JSON header line followed by one comma-separated record per
    /// sample: loads, s_true, objective, v_mag, v_ang.
    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let io = |e: std::io::Error| DataError::Io { path: path.display().to_string(), msg: e.to_string() };
        let file = std::fs::File::create(path).map_err(io)?;
        let mut out = BufWriter::new(file);
        let header = Header {
            format_version: FORMAT_VERSION,
            case_name: self.case_name.clone(),
            split: self.split,
            seed: self.seed,
            load_range: self.load_range,
            load_draw: LOAD_DRAW.into(),
            n_bus: self.n_bus(),
            count: self.samples.len(),
            spec: self.spec.clone(),
            normalizer: self.normalizer.clone(),
            dependent_mean: self.dependent_mean.clone(),
        };
        let json = serde_json::to_string(&header).expect("header serializes");
        writeln!(out, "{json}").map_err(io)?;
        let mut line = String::new();
        for s in &self.samples {
            line.clear();
            let fields =
                s.loads.iter().chain(&s.s_true).chain(std::iter::once(&s.objective)).chain(&s.v_mag).chain(&s.v_ang);
            for (k, v) in fields.enumerate() {
                if k > 0 {
                    line.push(',');
                }
                line.push_str(&format!("{v:.16e}"));
            }
            writeln!(out, "{line}").map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Dataset, DataError> {
        let p = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|e| DataError::Io { path: p.clone(), msg: e.to_string() })?;
        let fmt = |line: usize, msg: String| DataError::Format { path: p.clone(), line, msg };
        let mut lines = BufReader::new(file).lines();
        let first = lines.next().ok_or_else(|| fmt(1, "empty file".into()))?.map_err(|e| fmt(1, e.to_string()))?;
        let header: Header = serde_json::from_str(&first).map_err(|e| fmt(1, e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(fmt(1, format!("unsupported format version {}", header.format_version)));
        }
        let n = header.n_bus;
        let d = header.spec.dim();
        let width = 2 * n + d + 1 + 2 * n;
        let mut samples = Vec::with_capacity(header.count);
        for (k, line) in lines.enumerate() {
            let line_no = k + 2;
            let line = line.map_err(|e| fmt(line_no, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|e| fmt(line_no, format!("{t:?}: {e}"))))
                .collect::<Result<_, _>>()?;
            if vals.len() != width {
                return Err(fmt(line_no, format!("expected {width} fields, got {}", vals.len())));
            }
            let (loads, rest) = vals.split_at(2 * n);
            let (s_true, rest) = rest.split_at(d);
            let (obj, rest) = rest.split_at(1);
            let (v_mag, v_ang) = rest.split_at(n);
            samples.push(TrainSample {
                loads: loads.to_vec(),
                s_true: s_true.to_vec(),
                objective: obj[0],
                v_mag: v_mag.to_vec(),
                v_ang: v_ang.to_vec(),
            });
        }
        if samples.len() != header.count {
            return Err(fmt(0, format!("header declares {} records, found {}", header.count, samples.len())));
        }
        Ok(Dataset {
            case_name: header.case_name,
            split: header.split,
            seed: header.seed,
            load_range: header.load_range,
            spec: header.spec,
            normalizer: header.normalizer,
            dependent_mean: header.dependent_mean,
            samples,
        })
    }
}

/// Labels one load vector with the reference solver.
fn label(solver: &OpfSolver, spec: &ScalingSpec, loads: Vec<f64>) -> Result<TrainSample, String> {
    let case = solver.case();
    let sol = solver.solve(&loads, None).map_err(|e| e.to_string())?;
    let mut x = spec.from_opf(case, &sol);
    spec.clamp_label(&mut x);
    let s_true = spec.encode(&x).map_err(|e| e.to_string())?;
    Ok(TrainSample { loads, s_true, objective: sol.objective, v_mag: sol.v_mag, v_ang: sol.v_ang })
}

/// Samples `count_train + count_test` scenarios and labels them in
/// parallel. Output order follows the sampling order; failed solves are
/// dropped and logged.
pub fn build_dataset(
    solver: &OpfSolver,
    count_train: usize,
    count_test: usize,
    range: (f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    let case = solver.case();
    let spec = ScalingSpec::from_case(case);
    let total = count_train + count_test;
    let loads = sample_loads(case, range.0, range.1, total, seed);
    let labeled: Vec<Result<TrainSample, String>> = loads.into_par_iter().map(|l| label(solver, &spec, l)).collect();

    let mut train = Vec::with_capacity(count_train);
    let mut test = Vec::with_capacity(count_test);
    let mut dropped = 0;
    let mut first = None;
    for (k, r) in labeled.into_iter().enumerate() {
        match r {
            Ok(s) if k < count_train => train.push(s),
            Ok(s) => test.push(s),
            Err(e) => {
                log::warn!("scenario {k}: reference solve failed: {e}");
                dropped += 1;
                first.get_or_insert(format!("scenario {k}: {e}"));
            }
        }
    }
    if total > 0 && dropped as f64 > MAX_DROP_RATE * total as f64 {
        return Err(DataError::DropRate { dropped, total, first: first.unwrap_or_default() });
    }

    let n = case.n_bus();
    let rows: Vec<&[f64]> = train.iter().map(|s| s.loads.as_slice()).collect();
    let normalizer = Normalizer::fit(&rows, 2 * n);
    let dependent_mean = if train.is_empty() {
        PfInit::flat(n)
    } else {
        let m = train.len() as f64;
        let mut init = PfInit { v_mag: vec![0.0; n], v_ang: vec![0.0; n] };
        for s in &train {
            for i in 0..n {
                init.v_mag[i] += s.v_mag[i] / m;
                init.v_ang[i] += s.v_ang[i] / m;
            }
        }
        init
    };

    let make = |split, samples| Dataset {
        case_name: case.name.clone(),
        split,
        seed,
        load_range: range,
        spec: spec.clone(),
        normalizer: normalizer.clone(),
        dependent_mean: dependent_mean.clone(),
        samples,
    };
    Ok((make(Split::Train, train), make(Split::Test, test)))
}
