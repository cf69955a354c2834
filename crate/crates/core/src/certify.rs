//! Convergence certificates.
//!
//! The pointwise ratios
//!
//! ```text
//! a(w) = ‖∇f‖² / f
//! b(w) = Tr(σᵀσ) / 4f
//! g(w) = Tr(σᵀ Hf σ) / 2f
//! ```
//!
//! are reduced over a ball `B_r(w₀)` to `A_min`, `B_max`, `G_max`, either by
//! sampling (an estimate: the sampled infimum can only overestimate `A_min`)
//! or, for deep linear networks with the positive-layer initialization, by
//! closed-form layer-norm bounds that hold over the whole ball. From these,
//! `θ = A_min − η·G_max` and the failure bound `p` decide the three
//! conditions of the convergence theorem.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{non_finite, Error, Result};
use crate::linalg::operator_norm;
use crate::model::{DeepLinearModel, LayeredWeights, LossModel};
use crate::rng::{CounterStream, Domain};

/// Default exclusion threshold `1e-12·(1 + f(w₀))`.
pub fn default_f_exclude_tol(f_w0: f64) -> f64 {
    1e-12 * (1.0 + f_w0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointDiagnostics {
    pub w: DVector<f64>,
    pub f: f64,
    pub a: f64,
    pub b: f64,
    pub g: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PointEval {
    /// `f(w) ≤ f_exclude_tol`: treated as a zero-loss point.
    Excluded {
        f: f64,
    },
    Point(PointDiagnostics),
}

pub fn point_diagnostics<M: LossModel + ?Sized>(
    model: &M,
    w: &DVector<f64>,
    f_exclude_tol: f64,
) -> Result<PointEval> {
    if w.iter().any(|x| !x.is_finite()) {
        return Err(non_finite("parameter vector"));
    }
    let f = model.loss(w);
    if !f.is_finite() {
        return Err(non_finite("f(w)"));
    }
    if f <= f_exclude_tol {
        return Ok(PointEval::Excluded { f });
    }
    let grad = model.grad(w);
    let a = grad.norm_squared() / f;
    if !a.is_finite() {
        return Err(non_finite("a(w)"));
    }
    let sigma = model.noise_root(w)?.root;
    let b = (sigma.transpose() * &sigma).trace() / (4.0 * f);
    if !b.is_finite() {
        return Err(non_finite("b(w)"));
    }
    let hess = model.hessian(w);
    let g = (sigma.transpose() * hess.matrix() * &sigma).trace() / (2.0 * f);
    if !g.is_finite() {
        return Err(non_finite("g(w)"));
    }
    Ok(PointEval::Point(PointDiagnostics {
        w: w.clone(),
        f,
        a,
        b,
        g,
    }))
}

/// How a set of ball extremes was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtremesMethod {
    Sampled {
        n_points: usize,
        seed: u64,
        f_exclude_tol: f64,
        n_excluded: usize,
    },
    ClosedForm {
        gamma: f64,
        n_floor: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallExtremes {
    pub r: f64,
    pub w0: Vec<f64>,
    #[serde(with = "crate::serde_float")]
    pub a_min: f64,
    #[serde(with = "crate::serde_float")]
    pub b_max: f64,
    #[serde(with = "crate::serde_float")]
    pub g_max: f64,
    pub method: ExtremesMethod,
    /// Every sampled point had zero loss; `A_min = ∞`, `B_max = G_max = 0`.
    pub degenerate: bool,
}

impl BallExtremes {
    /// Sampled extremes are estimates; only closed-form bounds certify.
    pub fn is_estimate(&self) -> bool {
        matches!(self.method, ExtremesMethod::Sampled { .. })
    }
}

/// Reduces `a`, `b`, `g` over `n_points` uniform draws from the closed ball
/// `B_r(w0)`. Point `k` depends only on `(seed, k)`, so a larger `n_points`
/// extends the same sample set.
pub fn ball_extremes_sampled<M: LossModel + ?Sized>(
    model: &M,
    w0: &DVector<f64>,
    r: f64,
    n_points: usize,
    seed: u64,
    f_exclude_tol: f64,
) -> Result<BallExtremes> {
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "ball radius must be > 0, got {r}"
        )));
    }
    if n_points == 0 {
        return Err(Error::InvalidConfig("n_points must be at least 1".into()));
    }
    if w0.len() != model.dim() {
        return Err(Error::Shape(format!(
            "w0 has length {}, model dimension is {}",
            w0.len(),
            model.dim()
        )));
    }
    let evals = (0..n_points)
        .into_par_iter()
        .map(|k| {
            let w = ball_point(w0, r, seed, k as u64);
            point_diagnostics(model, &w, f_exclude_tol)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut a_min = f64::INFINITY;
    let mut b_max = 0.0_f64;
    let mut g_max = f64::NEG_INFINITY;
    let mut n_excluded = 0;
    for e in &evals {
        match e {
            PointEval::Excluded { .. } => n_excluded += 1,
            PointEval::Point(p) => {
                a_min = a_min.min(p.a);
                b_max = b_max.max(p.b);
                g_max = g_max.max(p.g);
            }
        }
    }
    let degenerate = n_excluded == n_points;
    if degenerate {
        g_max = 0.0;
    }
    Ok(BallExtremes {
        r,
        w0: w0.iter().copied().collect(),
        a_min,
        b_max,
        g_max,
        method: ExtremesMethod::Sampled {
            n_points,
            seed,
            f_exclude_tol,
            n_excluded,
        },
        degenerate,
    })
}

/// The `k`-th uniform draw from `B_r(w0)`.
pub fn ball_point(w0: &DVector<f64>, r: f64, seed: u64, k: u64) -> DVector<f64> {
    let mut stream = CounterStream::new(seed, Domain::BallSampling, 0);
    stream.seek(k);
    w0 + crate::model::task::uniform_in_ball(&mut stream, w0.len(), r)
}

/// Parameters of the positive-layer initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nn1Params {
    pub gamma: f64,
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "N")]
    pub n_floor: f64,
}

impl Nn1Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma must be > 0, got {}",
                self.gamma
            )));
        }
        if !(self.m.is_finite() && self.m >= self.gamma) {
            return Err(Error::InvalidConfig(format!(
                "M must satisfy M >= gamma, got M = {}",
                self.m
            )));
        }
        if !(self.n_floor.is_finite() && self.n_floor > self.gamma / 2.0) {
            return Err(Error::InvalidConfig(format!(
                "N must exceed gamma/2 = {}, got {}",
                self.gamma / 2.0,
                self.n_floor
            )));
        }
        Ok(())
    }

    pub fn radius(&self) -> f64 {
        self.gamma / 2.0
    }
}

/// Layer-norm products from the deep linear network lemmas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNormSums {
    /// `‖W_L ⋯ W_2‖`.
    pub top_product: f64,
    /// `G_L = Σ_i ‖W_L⋯W_{i+1}‖² ‖W_{i−1}⋯W_1‖²`.
    pub g_l: f64,
    /// `F_L`, the cross-layer sum bounding the Hessian of `β(w)x`.
    pub f_l: f64,
}

/// Evaluates the sums with `norm(lo, hi)` giving (a bound on) the norm of
/// the product of 0-based layers `lo..=hi`; empty ranges are the identity
/// and must return 1.
fn layer_norm_sums(depth: usize, norm: impl Fn(usize, usize) -> f64) -> LayerNormSums {
    let range = |lo: usize, hi: isize| -> f64 {
        if hi < lo as isize {
            1.0
        } else {
            norm(lo, hi as usize)
        }
    };
    let above = |i: usize| range(i + 1, depth as isize - 1);
    let below = |i: usize| range(0, i as isize - 1);
    let mut g_l = 0.0;
    let mut f_l = 0.0;
    for i in 0..depth {
        g_l += above(i).powi(2) * below(i).powi(2);
        for j in 0..i {
            f_l += below(j) * above(i) * range(j + 1, i as isize - 1);
        }
        for j in i + 1..depth {
            f_l += range(i + 1, j as isize - 1) * below(i) * above(j);
        }
    }
    LayerNormSums {
        top_product: above(0),
        g_l,
        f_l,
    }
}

/// The sums at a specific `w`, with spectral norms of the actual products.
pub fn layer_norm_sums_at(w: &LayeredWeights) -> LayerNormSums {
    let layers = w.layers();
    layer_norm_sums(layers.len(), |lo, hi| {
        let mut prod = layers[lo].clone();
        for m in &layers[lo + 1..=hi] {
            prod = m * prod;
        }
        operator_norm(&prod)
    })
}

/// Pointwise bounds on `a`, `b`, `g` for a deep linear network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LemmaBounds {
    pub a_lower: f64,
    pub a_upper: f64,
    pub b_upper: f64,
    pub g_upper: f64,
}

pub fn lemma_bounds(model: &DeepLinearModel, w: &DVector<f64>) -> LemmaBounds {
    let weights = model.weights(w);
    let sums = layer_norm_sums_at(&weights);
    let task = model.task();
    let (lmin, lmax) = task.sigma_x_extremes();
    let k2 = task.k().powi(2);
    let d = model.dim() as f64;
    let beta_gap = (weights.beta() - task.beta_star()).norm();
    LemmaBounds {
        a_lower: 4.0 * sums.top_product.powi(2) * lmin,
        a_upper: 4.0 * sums.g_l * lmax,
        b_upper: k2 * sums.g_l,
        g_upper: 16.0 * k2 * k2 * (sums.g_l.powi(2) + d * sums.f_l * sums.g_l * beta_gap),
    }
}

/// Checks the positive-layer structure of `w0`, naming the first violation.
pub fn check_nn1_structure(w0: &LayeredWeights, params: &Nn1Params) -> Result<()> {
    params.validate()?;
    let depth = w0.shape().depth;
    let violation = |layer: usize, r: usize, c: usize, v: f64, what: &str| {
        Err(Error::Structure(format!(
            "W_{}[{r},{c}] = {v} violates {what}",
            layer + 1
        )))
    };
    for i in 0..depth {
        let m = w0.layer(i);
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                let v = m[(r, c)];
                if i == 0 {
                    if v != 0.0 {
                        return violation(i, r, c, v, "W_1 = 0");
                    }
                } else if i + 1 == depth {
                    if !(v >= params.n_floor) {
                        return violation(
                            i,
                            r,
                            c,
                            v,
                            &format!("output entries >= N = {}", params.n_floor),
                        );
                    }
                } else if !(v >= params.gamma) {
                    return violation(
                        i,
                        r,
                        c,
                        v,
                        &format!("hidden entries >= gamma = {}", params.gamma),
                    );
                } else if !(v <= params.m) {
                    return violation(i, r, c, v, &format!("hidden entries <= M = {}", params.m));
                }
            }
        }
    }
    Ok(())
}

/// Valid bounds on `A_min`, `B_max`, `G_max` over `B_{γ/2}(w0)`.
///
/// Inside the ball every layer satisfies `‖W_i‖ ≤ ‖W_i⁰‖ + γ/2`, hidden
/// entries stay `≥ γ/2` and output entries `≥ N − γ/2`. The lower bound is
/// `4λ_min(Σ_X)(N−γ/2)²(γ/2)^{2L−4}`; the upper bounds evaluate the layer-norm
/// sums with the ball-wide norm bounds and `‖β(w) − β*‖ ≤ Π(‖W_i⁰‖+γ/2) + ‖β*‖`.
pub fn ball_extremes_closed_form(
    model: &DeepLinearModel,
    w0: &LayeredWeights,
    params: &Nn1Params,
) -> Result<BallExtremes> {
    if w0.shape() != model.shape() {
        return Err(Error::Shape("w0 shape differs from the model shape".into()));
    }
    check_nn1_structure(w0, params)?;
    let r = params.radius();
    let depth = w0.shape().depth;
    let layer_bounds: Vec<f64> = w0.layers().iter().map(|m| operator_norm(m) + r).collect();
    let sums = layer_norm_sums(depth, |lo, hi| layer_bounds[lo..=hi].iter().product());

    let task = model.task();
    let (lmin, _) = task.sigma_x_extremes();
    let k2 = task.k().powi(2);
    let d = model.dim() as f64;
    let beta_gap = layer_bounds.iter().product::<f64>() + task.beta_star().norm();

    let a_min = 4.0 * lmin * (params.n_floor - r).powi(2) * r.powi(2 * depth as i32 - 4);
    let b_max = k2 * sums.g_l;
    let g_max = 16.0 * k2 * k2 * (sums.g_l.powi(2) + d * sums.f_l * sums.g_l * beta_gap);
    Ok(BallExtremes {
        r,
        w0: w0.flatten().iter().copied().collect(),
        a_min,
        b_max,
        g_max,
        method: ExtremesMethod::ClosedForm {
            gamma: params.gamma,
            n_floor: params.n_floor,
        },
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub extremes: BallExtremes,
    pub eta: f64,
    pub f_w0: f64,
    #[serde(with = "crate::serde_float")]
    pub theta: f64,
    #[serde(with = "crate::serde_float")]
    pub p: f64,
    pub cond_etay: bool,
    pub cond_bmax: bool,
    pub cond_heta: bool,
    pub certified: bool,
}

/// `p = 2√f(w₀) / (r√θ) · (1 + √η(√G_max/√θ + √B_max))`, or `+∞` if `θ ≤ 0`.
pub fn failure_bound(a_min: f64, b_max: f64, g_max: f64, eta: f64, f_w0: f64, r: f64) -> f64 {
    let theta = theta(a_min, g_max, eta);
    if !(theta > 0.0) {
        return f64::INFINITY;
    }
    if f_w0 == 0.0 {
        return 0.0;
    }
    let st = theta.sqrt();
    let g = g_max.max(0.0);
    2.0 * f_w0.sqrt() / (r * st) * (1.0 + eta.sqrt() * (g.sqrt() / st + b_max.sqrt()))
}

fn theta(a_min: f64, g_max: f64, eta: f64) -> f64 {
    if eta == 0.0 {
        a_min
    } else {
        a_min - eta * g_max
    }
}

pub fn make_certificate(extremes: &BallExtremes, eta: f64, f_w0: f64) -> Result<Certificate> {
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(Error::InvalidConfig(format!("eta must be >= 0, got {eta}")));
    }
    if !(f_w0.is_finite() && f_w0 >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "f(w0) must be >= 0, got {f_w0}"
        )));
    }
    let r = extremes.r;
    if !(r > 0.0) {
        return Err(Error::InvalidConfig(format!("radius must be > 0, got {r}")));
    }
    let theta = theta(extremes.a_min, extremes.g_max, eta);
    let p = failure_bound(extremes.a_min, extremes.b_max, extremes.g_max, eta, f_w0, r);
    let cond_etay = theta > 0.0;
    let cond_bmax = eta * extremes.b_max <= 0.25;
    let cond_heta = p < 1.0;
    Ok(Certificate {
        extremes: extremes.clone(),
        eta,
        f_w0,
        theta,
        p,
        cond_etay,
        cond_bmax,
        cond_heta,
        certified: cond_etay && cond_bmax && cond_heta,
    })
}

impl Certificate {
    /// `4f(w₀)/r² < A_min`, the noiseless specialization of the `p < 1` condition.
    pub fn chatterjee_holds(&self) -> bool {
        4.0 * self.f_w0 / self.extremes.r.powi(2) < self.extremes.a_min
    }

    pub fn recomputed_p(&self) -> f64 {
        let e = &self.extremes;
        failure_bound(e.a_min, e.b_max, e.g_max, self.eta, self.f_w0, e.r)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Number of halvings tried by [`search_eta`].
pub const ETA_GRID_POINTS: usize = 64;

/// Largest `η` on the grid `η₀·2^{-k}`, `k = 0..64`, whose certificate passes
/// every condition with `p ≤ target_p`. The grid starts at `A_min/(2G_max)`
/// (or `1/(4B_max)` when `G_max = 0`). Falls back to `η = 0` when the noiseless
/// certificate already meets the target, and returns `None` when it does not.
pub fn search_eta(extremes: &BallExtremes, f_w0: f64, target_p: f64) -> Result<Option<f64>> {
    if !(target_p > 0.0 && target_p < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "target p must lie in (0, 1), got {target_p}"
        )));
    }
    let passes = |c: &Certificate| c.certified && c.p <= target_p;
    let noiseless = make_certificate(extremes, 0.0, f_w0)?;
    if !passes(&noiseless) {
        return Ok(None);
    }
    let start = if extremes.g_max > 0.0 {
        extremes.a_min / (2.0 * extremes.g_max)
    } else if extremes.b_max > 0.0 {
        0.25 / extremes.b_max
    } else {
        1.0
    };
    if start.is_finite() && start > 0.0 {
        let mut eta = start;
        for _ in 0..ETA_GRID_POINTS {
            if passes(&make_certificate(extremes, eta, f_w0)?) {
                return Ok(Some(eta));
            }
            eta *= 0.5;
        }
    }
    Ok(Some(0.0))
}
