//! Loss models: the expected quadratic loss of a deep linear network over a
//! finite empirical distribution, and a closed-form scalar toy.
//!
//! A model is evaluated at a flattened parameter vector `w ∈ ℝᴰ`. All
//! expectations are exact finite averages over the samples with uniform
//! weights.

mod deep_linear;
pub(crate) mod task;
mod toy;

pub use deep_linear::{nn1_initializer, DeepLinearModel, LayeredWeights, NetShape, WeightsFile};
pub use task::{generate_task, BetaSpec, EmpiricalTask, TaskFile};
pub use toy::ScalarToyModel;

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::linalg::{psd_sqrt, PsdRoot, SymMatrix};

/// Evaluation surface shared by all loss models.
///
/// Implementations only have to provide the per-sample quantities and the
/// Hessian; `f`, `∇f` and `Σ(w)` are derived from them as uniform averages in
/// sample order, so the mean of [`per_sample_grads`](Self::per_sample_grads)
/// is bitwise equal to [`grad`](Self::grad).
pub trait LossModel: Send + Sync {
    /// Flattened parameter dimension `D`.
    fn dim(&self) -> usize;

    fn n_samples(&self) -> usize;

    /// `ℓ(w, z_i)`.
    fn sample_loss(&self, w: &DVector<f64>, i: usize) -> Result<f64>;

    /// `∇ℓ(w, z_i)`.
    fn per_sample_grad(&self, w: &DVector<f64>, i: usize) -> Result<DVector<f64>>;

    /// Exact Hessian of `f` at `w`.
    fn hessian(&self, w: &DVector<f64>) -> SymMatrix;

    /// All per-sample gradients in sample order.
    fn per_sample_grads(&self, w: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..self.n_samples())
            .map(|i| self.per_sample_grad(w, i).expect("index in range"))
            .collect()
    }

    fn loss(&self, w: &DVector<f64>) -> f64 {
        let n = self.n_samples();
        let total: f64 = (0..n)
            .map(|i| self.sample_loss(w, i).expect("index in range"))
            .sum();
        total / n as f64
    }

    fn grad(&self, w: &DVector<f64>) -> DVector<f64> {
        mean_vector(&self.per_sample_grads(w), self.dim())
    }

    /// `Σ(w) = Cov(∇ℓ(w, Z))`.
    fn sigma_cov(&self, w: &DVector<f64>) -> SymMatrix {
        covariance(&self.per_sample_grads(w), self.dim()).0
    }

    /// `σ(w)`, the symmetric PSD root of `Σ(w)`.
    fn noise_root(&self, w: &DVector<f64>) -> Result<PsdRoot> {
        psd_sqrt(&self.sigma_cov(w))
    }

    /// `∇f(w)` and `Σ(w)` from one pass over the per-sample gradients.
    fn grad_and_cov(&self, w: &DVector<f64>) -> (DVector<f64>, SymMatrix) {
        let (cov, mean) = covariance(&self.per_sample_grads(w), self.dim());
        (mean, cov)
    }
}

pub(crate) fn mean_vector(vs: &[DVector<f64>], dim: usize) -> DVector<f64> {
    let mut acc = DVector::zeros(dim);
    for v in vs {
        acc += v;
    }
    acc / vs.len() as f64
}

/// Centered covariance `(1/n) Σ (g_i − ḡ)(g_i − ḡ)ᵀ` and the mean `ḡ`.
pub(crate) fn covariance(vs: &[DVector<f64>], dim: usize) -> (SymMatrix, DVector<f64>) {
    let mean = mean_vector(vs, dim);
    let mut acc = DMatrix::zeros(dim, dim);
    for v in vs {
        let c = v - &mean;
        acc.ger(1.0, &c, &c, 1.0);
    }
    (SymMatrix::symmetrize(acc / vs.len() as f64), mean)
}
