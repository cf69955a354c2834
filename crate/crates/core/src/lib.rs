//! Convergence certificates for the Langevin model of SGD,
//! `dw = −∇f(w) dt + √η σ(w) dB`, with deep linear networks as the worked
//! model family, plus Euler–Maruyama simulation and Monte Carlo checks.

// `!(x > 0.0)` is the idiom here for rejecting NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certify;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod sde;
pub mod serde_float;

pub use certify::{
    ball_extremes_closed_form, ball_extremes_sampled, failure_bound, make_certificate, search_eta,
    BallExtremes, Certificate, Nn1Params,
};
pub use error::{Error, Result};
pub use experiments::{run_mc, McConfig, McReport};
pub use linalg::{psd_sqrt, sym_eigendecompose, SymMatrix};
pub use model::{DeepLinearModel, EmpiricalTask, LayeredWeights, LossModel, NetShape};
pub use sde::{simulate, SimConfig, StopReason, TrajectoryRecord};
