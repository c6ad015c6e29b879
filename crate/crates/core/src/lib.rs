//! Predict-and-reconstruct AC optimal power flow.
//!
//! A feed-forward network maps bus loads to the slack voltage and the PV
//! generators' active power and voltage setpoints; a Newton power flow
//! recovers every other quantity so the balance equations hold exactly.
//! Training adds a penalty on limit violations of the reconstructed state,
//! differentiated with a two-point zero-order estimator. An interior-point
//! AC-OPF solver provides labels, benchmarks and warm-start recovery.

// `!(x > 0.0)` style checks reject NaN together with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataio;
pub mod evaluator;
pub mod mlp;
pub mod netmodel;
pub mod opfref;
pub mod powerflow;
pub mod trainer;
