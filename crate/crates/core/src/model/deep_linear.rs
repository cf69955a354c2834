use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::model::{EmpiricalTask, LossModel};
use crate::rng::{CounterStream, Domain};

/// Depth `L ≥ 2`, hidden width `q ≥ 1` and input dimension `d ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    #[serde(rename = "L")]
    pub depth: usize,
    #[serde(rename = "q")]
    pub width: usize,
    #[serde(rename = "d")]
    pub input_dim: usize,
}

impl NetShape {
    pub fn new(depth: usize, width: usize, input_dim: usize) -> Result<Self> {
        let s = Self {
            depth,
            width,
            input_dim,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.width < 1 || self.input_dim < 1 {
            return Err(Error::Shape(format!(
                "need L >= 2, q >= 1, d >= 1; got L = {}, q = {}, d = {}",
                self.depth, self.width, self.input_dim
            )));
        }
        Ok(())
    }

    /// `D = q + (L−2)q² + qd`.
    pub fn param_dim(&self) -> usize {
        let q = self.width;
        q + (self.depth - 2) * q * q + q * self.input_dim
    }

    /// `(rows, cols)` of layer `i` (0-based: index 0 is `W_1`).
    pub fn layer_dims(&self, i: usize) -> (usize, usize) {
        assert!(i < self.depth, "layer index {i} out of range");
        let q = self.width;
        let rows = if i + 1 == self.depth { 1 } else { q };
        let cols = if i == 0 { self.input_dim } else { q };
        (rows, cols)
    }

    fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.depth + 1);
        let mut acc = 0;
        out.push(0);
        for i in 0..self.depth {
            let (r, c) = self.layer_dims(i);
            acc += r * c;
            out.push(acc);
        }
        out
    }
}

/// The parameter `w = (W_1, …, W_L)`.
///
/// The flat layout is layer-major (`W_1` first) and row-major inside each
/// layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredWeights {
    shape: NetShape,
    layers: Vec<DMatrix<f64>>,
}

impl LayeredWeights {
    pub fn new(shape: NetShape, layers: Vec<DMatrix<f64>>) -> Result<Self> {
        shape.validate()?;
        if layers.len() != shape.depth {
            return Err(Error::Shape(format!(
                "expected {} layers, got {}",
                shape.depth,
                layers.len()
            )));
        }
        for (i, w) in layers.iter().enumerate() {
            let dims = shape.layer_dims(i);
            if w.shape() != dims {
                return Err(Error::Shape(format!(
                    "layer {} is {}x{}, expected {}x{}",
                    i + 1,
                    w.nrows(),
                    w.ncols(),
                    dims.0,
                    dims.1
                )));
            }
        }
        Ok(Self { shape, layers })
    }

    pub fn zeros(shape: NetShape) -> Self {
        let layers = (0..shape.depth)
            .map(|i| {
                let (r, c) = shape.layer_dims(i);
                DMatrix::zeros(r, c)
            })
            .collect();
        Self { shape, layers }
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn layers(&self) -> &[DMatrix<f64>] {
        &self.layers
    }

    /// Layer `i`, 0-based (`layer(0)` is `W_1`).
    pub fn layer(&self, i: usize) -> &DMatrix<f64> {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut DMatrix<f64> {
        &mut self.layers[i]
    }

    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.shape.param_dim());
        for w in &self.layers {
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    out.push(w[(r, c)]);
                }
            }
        }
        DVector::from_vec(out)
    }

    pub fn unflatten(shape: NetShape, flat: &[f64]) -> Result<Self> {
        shape.validate()?;
        if flat.len() != shape.param_dim() {
            return Err(Error::Shape(format!(
                "flat vector has length {}, shape needs D = {}",
                flat.len(),
                shape.param_dim()
            )));
        }
        let offsets = shape.offsets();
        let layers = (0..shape.depth)
            .map(|i| {
                let (r, c) = shape.layer_dims(i);
                DMatrix::from_row_slice(r, c, &flat[offsets[i]..offsets[i + 1]])
            })
            .collect();
        Ok(Self { shape, layers })
    }

    /// `β(w) = W_L ⋯ W_2 W_1`, as a d-vector.
    pub fn beta(&self) -> DVector<f64> {
        let mut prod = self.layers[self.shape.depth - 1].clone();
        for w in self.layers[..self.shape.depth - 1].iter().rev() {
            prod *= w;
        }
        prod.transpose().column(0).into_owned()
    }

    /// Row vector `W_L ⋯ W_{i+2}` for 0-based `i` (identity `1×1` for the top layer).
    pub fn suffix(&self, i: usize) -> DMatrix<f64> {
        let l = self.shape.depth;
        let mut prod = DMatrix::identity(1, 1);
        for w in self.layers[i + 1..l].iter().rev() {
            prod *= w;
        }
        prod
    }

    /// `W_i ⋯ W_1` for 0-based `i` (identity `d×d` for `i = 0`).
    pub fn prefix(&self, i: usize) -> DMatrix<f64> {
        let mut prod = DMatrix::identity(self.shape.input_dim, self.shape.input_dim);
        for w in &self.layers[..i] {
            prod = w * prod;
        }
        prod
    }

    /// Product of the layers strictly between `j < i` (0-based):
    /// `W_{i−1} ⋯ W_{j+1}` in 0-based terms, identity when adjacent.
    pub fn between(&self, j: usize, i: usize) -> DMatrix<f64> {
        assert!(j < i);
        let (_, cols_i) = self.shape.layer_dims(i);
        let mut prod = DMatrix::identity(cols_i, cols_i);
        for w in self.layers[j + 1..i].iter().rev() {
            prod *= w;
        }
        prod
    }

    /// Sets `W_1` to the minimum-norm solution of `(W_L ⋯ W_2) W_1 = β*`.
    pub fn fit_first_layer(&mut self, beta_star: &DVector<f64>) -> Result<()> {
        let v = self.suffix(0);
        let vv = v.norm_squared();
        if vv == 0.0 {
            return Err(Error::InvalidConfig(
                "upper layers multiply to zero; the first layer cannot interpolate".into(),
            ));
        }
        self.layers[0] = v.transpose() * beta_star.transpose() / vv;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|w| w.iter().all(|x| x.is_finite()))
    }
}

/// On-disk weights. `layers[i]` is a list of rows; [`LayeredWeights::flatten`]
/// reads them layer by layer, row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub shape: NetShape,
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl WeightsFile {
    pub fn from_weights(w: &LayeredWeights) -> Self {
        Self {
            shape: w.shape,
            layers: w
                .layers
                .iter()
                .map(|m| {
                    (0..m.nrows())
                        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
                        .collect()
                })
                .collect(),
        }
    }

    pub fn into_weights(self) -> Result<LayeredWeights> {
        self.shape.validate()?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, rows) in self.layers.into_iter().enumerate() {
            let ncols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != ncols) {
                return Err(Error::Shape(format!("layer {} has ragged rows", i + 1)));
            }
            let nrows = rows.len();
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            if flat.iter().any(|x| !x.is_finite()) {
                return Err(crate::error::non_finite(format!("layer {}", i + 1)));
            }
            layers.push(DMatrix::from_row_slice(nrows, ncols, &flat));
        }
        LayeredWeights::new(self.shape, layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Initialization with `W_1 = 0`, hidden entries uniform in `[gamma, m]` and
/// output entries uniform in `[n_floor, n_floor + (m − gamma)]`.
pub fn nn1_initializer(
    shape: NetShape,
    gamma: f64,
    m: f64,
    n_floor: f64,
    seed: u64,
) -> Result<LayeredWeights> {
    shape.validate()?;
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "gamma must be > 0, got {gamma}"
        )));
    }
    if !(m.is_finite() && m >= gamma) {
        return Err(Error::InvalidConfig(format!(
            "M must satisfy M >= gamma, got M = {m}, gamma = {gamma}"
        )));
    }
    if !(n_floor.is_finite() && n_floor > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "N must be > 0, got {n_floor}"
        )));
    }
    let mut stream = CounterStream::new(seed, Domain::Initializer, 0);
    let spread = m - gamma;
    let mut w = LayeredWeights::zeros(shape);
    for i in 1..shape.depth {
        let (lo, hi) = if i + 1 == shape.depth {
            (n_floor, n_floor + spread)
        } else {
            (gamma, m)
        };
        let layer = w.layer_mut(i);
        for r in 0..layer.nrows() {
            for c in 0..layer.ncols() {
                let u = stream.uniform();
                layer[(r, c)] = if hi > lo { lo + (hi - lo) * u } else { lo };
            }
        }
    }
    Ok(w)
}

/// `f(w) = E((β(w)X − β*X)²)` over an [`EmpiricalTask`].
#[derive(Debug, Clone)]
pub struct DeepLinearModel {
    shape: NetShape,
    task: EmpiricalTask,
}

/// Per-point products shared by gradient and Hessian evaluation.
struct Factors {
    weights: LayeredWeights,
    /// `suffix[i]`: row vector above layer `i`.
    suffix: Vec<DMatrix<f64>>,
    /// `prefix[i]`: product below layer `i`.
    prefix: Vec<DMatrix<f64>>,
    beta: DVector<f64>,
}

impl DeepLinearModel {
    pub fn new(shape: NetShape, task: EmpiricalTask) -> Result<Self> {
        shape.validate()?;
        if task.input_dim() != shape.input_dim {
            return Err(Error::Shape(format!(
                "task inputs have dimension {}, shape says d = {}",
                task.input_dim(),
                shape.input_dim
            )));
        }
        Ok(Self { shape, task })
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn task(&self) -> &EmpiricalTask {
        &self.task
    }

    pub fn weights(&self, w: &DVector<f64>) -> LayeredWeights {
        LayeredWeights::unflatten(self.shape, w.as_slice()).expect("parameter dimension")
    }

    fn factors(&self, w: &DVector<f64>) -> Factors {
        let weights = self.weights(w);
        let l = self.shape.depth;
        let suffix = (0..l).map(|i| weights.suffix(i)).collect();
        let prefix = (0..l).map(|i| weights.prefix(i)).collect();
        let beta = weights.beta();
        Factors {
            weights,
            suffix,
            prefix,
            beta,
        }
    }

    fn residual(&self, beta: &DVector<f64>, x: &DVector<f64>) -> f64 {
        (beta - self.task.beta_star()).dot(x)
    }

    /// `∇(β(w)x)` flattened: block `i` is `suffix_iᵀ (prefix_i x)ᵀ`.
    fn output_grad(&self, fac: &Factors, x: &DVector<f64>, out: &mut DVector<f64>) {
        let mut k = 0;
        for i in 0..self.shape.depth {
            let u = &fac.suffix[i];
            let v = &fac.prefix[i] * x;
            for a in 0..u.ncols() {
                for b in 0..v.len() {
                    out[k] = u[(0, a)] * v[b];
                    k += 1;
                }
            }
        }
    }

    fn sample_grad_with(&self, fac: &Factors, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.shape.param_dim());
        self.output_grad(fac, x, &mut g);
        g * (2.0 * self.residual(&fac.beta, x))
    }

    pub fn beta(&self, w: &DVector<f64>) -> DVector<f64> {
        self.weights(w).beta()
    }
}

impl LossModel for DeepLinearModel {
    fn dim(&self) -> usize {
        self.shape.param_dim()
    }

    fn n_samples(&self) -> usize {
        self.task.n_samples()
    }

    fn sample_loss(&self, w: &DVector<f64>, i: usize) -> Result<f64> {
        let x = self.task.samples().get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            n: self.n_samples(),
        })?;
        let e = self.residual(&self.beta(w), x);
        Ok(e * e)
    }

    fn loss(&self, w: &DVector<f64>) -> f64 {
        let beta = self.beta(w);
        let n = self.n_samples() as f64;
        self.task
            .samples()
            .iter()
            .map(|x| self.residual(&beta, x).powi(2))
            .sum::<f64>()
            / n
    }

    fn per_sample_grad(&self, w: &DVector<f64>, i: usize) -> Result<DVector<f64>> {
        let x = self.task.samples().get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            n: self.n_samples(),
        })?;
        Ok(self.sample_grad_with(&self.factors(w), x))
    }

    fn per_sample_grads(&self, w: &DVector<f64>) -> Vec<DVector<f64>> {
        let fac = self.factors(w);
        self.task
            .samples()
            .iter()
            .map(|x| self.sample_grad_with(&fac, x))
            .collect()
    }

    fn hessian(&self, w: &DVector<f64>) -> SymMatrix {
        let fac = self.factors(w);
        let dim = self.dim();
        let n = self.n_samples() as f64;
        let l = self.shape.depth;

        // Gauss–Newton part 2E(∇s ∇sᵀ).
        let mut h = DMatrix::zeros(dim, dim);
        let mut ds = DVector::zeros(dim);
        let mut weighted = DVector::zeros(self.shape.input_dim);
        for x in self.task.samples() {
            self.output_grad(&fac, x, &mut ds);
            h.ger(2.0 / n, &ds, &ds, 1.0);
            weighted.axpy(self.residual(&fac.beta, x) / n, x, 1.0);
        }

        // Residual part 2E(e·H(s)). H(s) is linear in x, so it is evaluated
        // once at m = E(e x). Diagonal blocks vanish.
        let offsets = self.shape.offsets();
        for i in 0..l {
            let u = &fac.suffix[i];
            for j in 0..i {
                let p = fac.weights.between(j, i);
                let v = &fac.prefix[j] * &weighted;
                let (rows_i, cols_i) = self.shape.layer_dims(i);
                let (rows_j, cols_j) = self.shape.layer_dims(j);
                for a in 0..rows_i {
                    for b in 0..cols_i {
                        let row = offsets[i] + a * cols_i + b;
                        for c in 0..rows_j {
                            let ub = 2.0 * u[(0, a)] * p[(b, c)];
                            if ub == 0.0 {
                                continue;
                            }
                            for dd in 0..cols_j {
                                let col = offsets[j] + c * cols_j + dd;
                                let val = ub * v[dd];
                                h[(row, col)] += val;
                                h[(col, row)] += val;
                            }
                        }
                    }
                }
            }
        }
        SymMatrix::symmetrize(h)
    }
}
