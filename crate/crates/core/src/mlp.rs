//! Fully connected network with rectifier hidden layers and a logistic
//! output, hand-written back-propagation and Adam.
//!
//! Batches are matrices with one sample per column.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Normalizer, ScalingSpec};
use crate::powerflow::PfInit;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Largest and smallest outputs; keep `s` strictly inside `(0, 1)` where
/// the logistic function would round to an endpoint.
const S_MAX: f64 = 1.0 - f64::EPSILON / 2.0;
const S_MIN: f64 = f64::MIN_POSITIVE;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("{what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("forward trace was produced by a different model state")]
    StaleTrace,
    #[error("{path}:{line}: {msg}")]
    Format { path: String, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

/// `W` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Layer {
        Layer { w: DMatrix::zeros(self.w.nrows(), self.w.ncols()), b: DVector::zeros(self.b.len()) }
    }
}

#[derive(Debug, Clone)]
pub struct MlpModel {
    layers: Vec<Layer>,
    /// Changes on every parameter update; traces remember it.
    version: u64,
}

impl PartialEq for MlpModel {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations kept by [`forward`] for [`backward`]. `activations[0]` is
/// the input; `activations[k]` is the output of layer `k`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    version: u64,
    pre: Vec<DMatrix<f64>>,
    activations: Vec<DMatrix<f64>>,
}

/// Parameter gradients, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl MlpModel {
    pub fn from_layers(layers: Vec<Layer>) -> Result<MlpModel, MlpError> {
        if layers.is_empty() {
            return Err(MlpError::Dimension { what: "layer count", expected: 1, got: 0 });
        }
        for l in &layers {
            if l.b.len() != l.w.nrows() {
                return Err(MlpError::Dimension { what: "bias length", expected: l.w.nrows(), got: l.b.len() });
            }
        }
        for pair in layers.windows(2) {
            if pair[1].w.ncols() != pair[0].w.nrows() {
                return Err(MlpError::Dimension {
                    what: "layer input width",
                    expected: pair[0].w.nrows(),
                    got: pair[1].w.ncols(),
                });
            }
        }
        Ok(MlpModel { layers, version: next_version() })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable parameter access; invalidates outstanding traces.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.version = next_version();
        &mut self.layers
    }

    /// Input width, hidden widths, output width.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].w.ncols()).chain(self.layers.iter().map(|l| l.w.nrows())).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").w.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Prediction for a single input vector.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, MlpError> {
        let (s, _) = forward(self, &DMatrix::from_column_slice(x.len(), 1, x))?;
        Ok(s.as_slice().to_vec())
    }
}

/// Hidden widths used when none are given: two layers, wider for
/// networks of 100 buses or more.
pub fn default_hidden_sizes(n_bus: usize) -> Vec<usize> {
    if n_bus < 100 {
        vec![64, 32]
    } else {
        vec![256, 128]
    }
}

/// He-uniform weights for rectifier layers, Glorot-uniform for the output
/// layer, zero biases.
pub fn init_model(sizes: &[usize], seed: u64) -> MlpModel {
    assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0), "layer sizes must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = sizes.len() - 1;
    let layers = (0..n_layers)
        .map(|k| {
            let (fan_in, fan_out) = (sizes[k], sizes[k + 1]);
            let limit =
                if k + 1 < n_layers { (6.0 / fan_in as f64).sqrt() } else { (6.0 / (fan_in + fan_out) as f64).sqrt() };
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            // Row-major draw order so the stream is independent of storage layout.
            let vals: Vec<f64> = (0..fan_out * fan_in).map(|_| dist.sample(&mut rng)).collect();
            Layer { w: DMatrix::from_row_slice(fan_out, fan_in, &vals), b: DVector::zeros(fan_out) }
        })
        .collect();
    MlpModel::from_layers(layers).expect("sizes chain")
}

fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { z.exp() / (1.0 + z.exp()) };
    s.clamp(S_MIN, S_MAX)
}

pub fn forward(model: &MlpModel, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, ForwardTrace), MlpError> {
    if x.nrows() != model.input_dim() {
        return Err(MlpError::Dimension { what: "input width", expected: model.input_dim(), got: x.nrows() });
    }
    let last = model.layers.len() - 1;
    let mut pre = Vec::with_capacity(model.layers.len());
    let mut activations = Vec::with_capacity(model.layers.len() + 1);
    activations.push(x.clone());
    for (k, layer) in model.layers.iter().enumerate() {
        let mut z = &layer.w * activations.last().expect("input pushed");
        for mut col in z.column_iter_mut() {
            col += &layer.b;
        }
        let a = if k == last { z.map(sigmoid) } else { z.map(|v| v.max(0.0)) };
        pre.push(z);
        activations.push(a);
    }
    let out = activations.last().expect("at least one layer").clone();
    Ok((out, ForwardTrace { version: model.version, pre, activations }))
}

/// Gradients of `Σ_columns ⟨dl_ds[:, j], s[:, j]⟩` with respect to every
/// parameter. Pass per-sample gradients divided by the batch size to get
/// the gradient of the batch mean. The rectifier derivative at 0 is 0.
pub fn backward(model: &MlpModel, trace: &ForwardTrace, dl_ds: &DMatrix<f64>) -> Result<Gradients, MlpError> {
    if trace.version != model.version {
        return Err(MlpError::StaleTrace);
    }
    let out = trace.activations.last().expect("trace has output");
    if dl_ds.shape() != out.shape() {
        return Err(MlpError::Dimension { what: "output gradient rows", expected: out.nrows(), got: dl_ds.nrows() });
    }
    let n = model.layers.len();
    let mut grads: Vec<Layer> = Vec::with_capacity(n);
    // dL/dz for the output layer through the logistic derivative s(1 − s).
    let mut delta = dl_ds.zip_map(out, |g, s| g * s * (1.0 - s));
    for k in (0..n).rev() {
        let a_prev = &trace.activations[k];
        let dw = &delta * a_prev.transpose();
        let db = delta.column_sum();
        grads.push(Layer { w: dw, b: db });
        if k > 0 {
            let mut d_prev = model.layers[k].w.transpose() * &delta;
            d_prev.zip_apply(&trace.pre[k - 1], |d, z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = d_prev;
        }
    }
    grads.reverse();
    Ok(Gradients { layers: grads })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Layer>,
    v: Vec<Layer>,
}

impl AdamState {
    pub fn new(model: &MlpModel, lr: f64) -> AdamState {
        AdamState::with_betas(model, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(model: &MlpModel, lr: f64, beta1: f64, beta2: f64, eps: f64) -> AdamState {
        let zeros: Vec<Layer> = model.layers.iter().map(Layer::zeros_like).collect();
        AdamState { lr, beta1, beta2, eps, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn first_moment(&self) -> &[Layer] {
        &self.m
    }
}

/// Bias-corrected Adam update.
pub fn adam_step(model: &mut MlpModel, state: &mut AdamState, grads: &Gradients) -> Result<(), MlpError> {
    if grads.layers.len() != model.layers.len() {
        return Err(MlpError::Dimension {
            what: "gradient layers",
            expected: model.layers.len(),
            got: grads.layers.len(),
        });
    }
    for (l, g) in model.layers.iter().zip(&grads.layers) {
        if l.w.shape() != g.w.shape() || l.b.len() != g.b.len() {
            return Err(MlpError::Dimension { what: "gradient shape", expected: l.w.len(), got: g.w.len() });
        }
    }
    state.step += 1;
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.eps, state.lr);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = if c1 > 0.0 { *m / c1 } else { *m };
        let v_hat = if c2 > 0.0 { *v / c2 } else { *v };
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for (((layer, g), m), v) in model.layers.iter_mut().zip(&grads.layers).zip(&mut state.m).zip(&mut state.v) {
        for (((p, &g), m), v) in layer.w.iter_mut().zip(g.w.iter()).zip(m.w.iter_mut()).zip(v.w.iter_mut()) {
            update(p, g, m, v);
        }
        for (((p, &g), m), v) in layer.b.iter_mut().zip(g.b.iter()).zip(m.b.iter_mut()).zip(v.b.iter_mut()) {
            update(p, g, m, v);
        }
    }
    model.version = next_version();
    Ok(())
}

/// Everything needed to run a trained model on raw loads.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: MlpModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub case_name: String,
    pub seed: u64,
    pub normalizer: Normalizer,
    pub spec: ScalingSpec,
    pub dependent_mean: PfInit,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    layer_sizes: Vec<usize>,
    hidden_activation: String,
    output_activation: String,
    #[serde(flatten)]
    meta: CheckpointMeta,
}

impl Checkpoint {
    /// JSON header line, then per layer one line of row-major weights and
    /// one line of biases, each value in shortest round-trip form.
    pub fn write(&self, path: &Path) -> Result<(), MlpError> {
        let io = |e: std::io::Error| MlpError::Io { path: path.display().to_string(), msg: e.to_string() };
        let file = std::fs::File::create(path).map_err(io)?;
        let mut out = BufWriter::new(file);
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            layer_sizes: self.model.sizes(),
            hidden_activation: "relu".into(),
            output_activation: "sigmoid".into(),
            meta: self.meta.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(io)?;
        let join = |it: &mut dyn Iterator<Item = f64>| it.map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",");
        for l in &self.model.layers {
            let mut row_major = (0..l.w.nrows()).flat_map(|r| (0..l.w.ncols()).map(move |c| (r, c))).map(|rc| l.w[rc]);
            writeln!(out, "{}", join(&mut row_major)).map_err(io)?;
            writeln!(out, "{}", join(&mut l.b.iter().copied())).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Checkpoint, MlpError> {
        let p = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|e| MlpError::Io { path: p.clone(), msg: e.to_string() })?;
        let fmt = |line: usize, msg: String| MlpError::Format { path: p.clone(), line, msg };
        let lines: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<Result<_, _>>()
            .map_err(|e| MlpError::Io { path: p.clone(), msg: e.to_string() })?;
        let first = lines.first().ok_or_else(|| fmt(1, "empty file".into()))?;
        let header: CheckpointHeader = serde_json::from_str(first).map_err(|e| fmt(1, e.to_string()))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(fmt(1, format!("unsupported format version {}", header.format_version)));
        }
        if header.hidden_activation != "relu" || header.output_activation != "sigmoid" {
            return Err(fmt(1, "only relu hidden and sigmoid output layers are supported".into()));
        }
        let sizes = &header.layer_sizes;
        if sizes.len() < 2 {
            return Err(fmt(1, "need at least input and output sizes".into()));
        }
        let parse = |k: usize, expected: usize| -> Result<Vec<f64>, MlpError> {
            let line = lines.get(k).ok_or_else(|| fmt(k + 1, "missing parameter line".into()))?;
            let vals: Vec<f64> = line
                .split(',')
                .filter(|t| !t.is_empty())
                .map(|t| t.trim().parse::<f64>().map_err(|e| fmt(k + 1, format!("{t:?}: {e}"))))
                .collect::<Result<_, _>>()?;
            if vals.len() != expected {
                return Err(fmt(k + 1, format!("expected {expected} values, got {}", vals.len())));
            }
            Ok(vals)
        };
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for k in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[k], sizes[k + 1]);
            let w = parse(1 + 2 * k, fan_in * fan_out)?;
            let b = parse(2 + 2 * k, fan_out)?;
            layers.push(Layer { w: DMatrix::from_row_slice(fan_out, fan_in, &w), b: DVector::from_vec(b) });
        }
        let model = MlpModel::from_layers(layers).map_err(|e| fmt(1, e.to_string()))?;
        Ok(Checkpoint { meta: header.meta, model })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_parameters_give_one_half() {
        let mut m = init_model(&[3, 4, 2], 0);
        for l in m.layers_mut() {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        assert_eq!(m.predict(&[1.0, -2.0, 3.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn single_unit_sigmoid() {
        let m =
            MlpModel::from_layers(vec![Layer { w: DMatrix::from_element(1, 1, 1.0), b: DVector::zeros(1) }]).unwrap();
        let s = m.predict(&[2.0]).unwrap()[0];
        assert!((s - 0.8807970779778823).abs() < 1e-15);
    }

    #[test]
    fn saturated_outputs_stay_inside_unit_interval() {
        assert!(sigmoid(1e3) < 1.0);
        assert!(sigmoid(-1e3) > 0.0);
        assert!(sigmoid(40.0) < 1.0);
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut m = init_model(&[2, 3, 1], 1);
        let x = DMatrix::from_element(2, 1, 0.3);
        let (_, trace) = forward(&m, &x).unwrap();
        let g = backward(&m, &trace, &DMatrix::from_element(1, 1, 1.0)).unwrap();
        let mut adam = AdamState::new(&m, 1e-3);
        adam_step(&mut m, &mut adam, &g).unwrap();
        assert!(matches!(backward(&m, &trace, &DMatrix::from_element(1, 1, 1.0)), Err(MlpError::StaleTrace)));
        let other = init_model(&[2, 3, 1], 1);
        assert!(matches!(backward(&other, &trace, &DMatrix::from_element(1, 1, 1.0)), Err(MlpError::StaleTrace)));
    }

    #[test]
    fn dimension_mismatch() {
        let m = init_model(&[2, 3, 1], 1);
        assert!(matches!(m.predict(&[1.0]), Err(MlpError::Dimension { .. })));
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut m = init_model(&[2, 3, 1], 2);
        let before = m.clone();
        let mut adam = AdamState::new(&m, 1e-3);
        let zero = Gradients { layers: m.layers().iter().map(Layer::zeros_like).collect() };
        adam_step(&mut m, &mut adam, &zero).unwrap();
        assert_eq!(m, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn degenerate_betas_give_sign_step() {
        let mut m =
            MlpModel::from_layers(vec![Layer { w: DMatrix::from_element(1, 1, 0.0), b: DVector::zeros(1) }]).unwrap();
        let mut adam = AdamState::with_betas(&m, 0.1, 0.0, 0.0, 1e-8);
        let g = Gradients {
            layers: vec![Layer { w: DMatrix::from_element(1, 1, -3.0), b: DVector::from_element(1, 0.5) }],
        };
        adam_step(&mut m, &mut adam, &g).unwrap();
        let expect_w = 0.1 * 3.0 / (3.0 + 1e-8);
        let expect_b = -0.1 * 0.5 / (0.5 + 1e-8);
        assert!((m.layers()[0].w[(0, 0)] - expect_w).abs() < 1e-15);
        assert!((m.layers()[0].b[0] - expect_b).abs() < 1e-15);
    }
}
