#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use sgdlab::model::{generate_task, BetaSpec, DeepLinearModel, NetShape};
use sgdlab::rng::{CounterStream, Domain};
use sgdlab::LossModel;

/// Deterministic random deep linear instance: task with `n = d + 4` samples
/// and a Gaussian parameter vector with entries of scale `scale`.
pub fn random_instance(
    depth: usize,
    width: usize,
    d: usize,
    scale: f64,
    seed: u64,
) -> (DeepLinearModel, DVector<f64>) {
    let shape = NetShape::new(depth, width, d).unwrap();
    let task = generate_task(d, d + 4, 1.0, &BetaSpec::Seeded(seed), seed).unwrap();
    let model = DeepLinearModel::new(shape, task).unwrap();
    let w = gaussian(model.dim(), seed, 7) * scale;
    (model, w)
}

pub fn gaussian(dim: usize, seed: u64, stream: u64) -> DVector<f64> {
    let mut s = CounterStream::new(seed, Domain::Initializer, 1000 + stream);
    let mut v = vec![0.0; dim];
    s.fill_normal(&mut v);
    DVector::from_vec(v)
}

pub fn fd_grad<M: LossModel>(m: &M, w: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        w.len(),
        (0..w.len()).map(|i| {
            let h = 1e-5 * (1.0 + w[i].abs());
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += h;
            wm[i] -= h;
            (m.loss(&wp) - m.loss(&wm)) / (2.0 * h)
        }),
    )
}

pub fn fd_hessian<M: LossModel>(m: &M, w: &DVector<f64>) -> DMatrix<f64> {
    let n = w.len();
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        let step = 1e-5 * (1.0 + w[j].abs());
        let mut wp = w.clone();
        let mut wm = w.clone();
        wp[j] += step;
        wm[j] -= step;
        let col = (m.grad(&wp) - m.grad(&wm)) / (2.0 * step);
        h.set_column(j, &col);
    }
    h
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}
