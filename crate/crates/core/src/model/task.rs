use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{non_finite, Error, Result};
use crate::linalg::{lambda_extremes, SymMatrix};
use crate::model::NetShape;
use crate::rng::{CounterStream, Domain};

/// Finite input distribution `{x_i}` with uniform weights and labels `y = β*·x`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalTask {
    samples: Vec<DVector<f64>>,
    beta_star: DVector<f64>,
    k: f64,
    sigma_x: SymMatrix,
}

impl EmpiricalTask {
    pub fn new(samples: Vec<DVector<f64>>, beta_star: DVector<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidConfig(
                "task needs at least one sample".into(),
            ));
        }
        let d = beta_star.len();
        if d == 0 {
            return Err(Error::Shape("beta_star must be non-empty".into()));
        }
        if beta_star.iter().any(|x| !x.is_finite()) {
            return Err(non_finite("beta_star"));
        }
        if beta_star.iter().all(|&x| x == 0.0) {
            return Err(Error::InvalidConfig("beta_star must be nonzero".into()));
        }
        for (i, x) in samples.iter().enumerate() {
            if x.len() != d {
                return Err(Error::Shape(format!(
                    "sample {i} has dimension {}, expected {d}",
                    x.len()
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(non_finite(format!("sample {i}")));
            }
        }
        let n = samples.len() as f64;
        let k = samples.iter().map(|x| x.norm()).fold(0.0, f64::max);
        let mut second = DMatrix::zeros(d, d);
        for x in &samples {
            second.ger(1.0 / n, x, x, 1.0);
        }
        Ok(Self {
            samples,
            beta_star,
            k,
            sigma_x: SymMatrix::symmetrize(second),
        })
    }

    pub fn samples(&self) -> &[DVector<f64>] {
        &self.samples
    }

    pub fn beta_star(&self) -> &DVector<f64> {
        &self.beta_star
    }

    pub fn input_dim(&self) -> usize {
        self.beta_star.len()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    /// `K = max_i ‖x_i‖`.
    pub fn k(&self) -> f64 {
        self.k
    }

    /// Second-moment matrix `(1/n) Σ x_i x_iᵀ`.
    pub fn sigma_x(&self) -> &SymMatrix {
        &self.sigma_x
    }

    pub fn sigma_x_extremes(&self) -> (f64, f64) {
        lambda_extremes(&self.sigma_x).expect("finite second-moment matrix")
    }
}

/// On-disk task description. Field order is canonical:
/// `shape`, `beta_star`, `samples`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFile {
    pub shape: NetShape,
    pub beta_star: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
}

impl TaskFile {
    pub fn from_task(shape: NetShape, task: &EmpiricalTask) -> Self {
        Self {
            shape,
            beta_star: task.beta_star.iter().copied().collect(),
            samples: task
                .samples
                .iter()
                .map(|x| x.iter().copied().collect())
                .collect(),
        }
    }

    /// Validates and builds the task; `K` and `Σ_X` are recomputed.
    pub fn into_task(self) -> Result<(NetShape, EmpiricalTask)> {
        self.shape.validate()?;
        if self.beta_star.len() != self.shape.input_dim {
            return Err(Error::Shape(format!(
                "beta_star has length {}, shape says d = {}",
                self.beta_star.len(),
                self.shape.input_dim
            )));
        }
        let samples = self
            .samples
            .into_iter()
            .map(DVector::from_vec)
            .collect::<Vec<_>>();
        let task = EmpiricalTask::new(samples, DVector::from_vec(self.beta_star))?;
        Ok((self.shape, task))
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
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// How `β*` is chosen by [`generate_task`].
#[derive(Debug, Clone, PartialEq)]
pub enum BetaSpec {
    Literal(Vec<f64>),
    /// Gaussian direction scaled to unit norm.
    Seeded(u64),
}

/// Draws `n` inputs uniformly from the radius-`k_scale` ball in ℝᵈ, redrawing
/// the whole set until `λ_min(Σ_X) > 0.01·k_scale²/d`.
pub fn generate_task(
    d: usize,
    n: usize,
    k_scale: f64,
    beta: &BetaSpec,
    seed: u64,
) -> Result<EmpiricalTask> {
    const MAX_ATTEMPTS: usize = 1000;
    if d == 0 {
        return Err(Error::InvalidConfig("d must be at least 1".into()));
    }
    if n < d {
        return Err(Error::InvalidConfig(format!(
            "n = {n} < d = {d}: the second-moment matrix cannot be full rank"
        )));
    }
    if !(k_scale.is_finite() && k_scale > 0.0) {
        return Err(Error::InvalidConfig("K scale must be positive".into()));
    }
    let beta_star = match beta {
        BetaSpec::Literal(v) => {
            if v.len() != d {
                return Err(Error::Shape(format!(
                    "literal beta_star has length {}, expected {d}",
                    v.len()
                )));
            }
            DVector::from_column_slice(v)
        }
        BetaSpec::Seeded(s) => {
            let mut stream = CounterStream::new(*s, Domain::TaskGeneration, u64::MAX);
            let mut v = vec![0.0; d];
            stream.fill_normal(&mut v);
            let v = DVector::from_vec(v);
            let norm = v.norm();
            v / norm
        }
    };
    let threshold = 0.01 * k_scale * k_scale / d as f64;
    let mut stream = CounterStream::new(seed, Domain::TaskGeneration, 0);
    for attempt in 0..MAX_ATTEMPTS {
        stream.seek(attempt as u64);
        let samples: Vec<DVector<f64>> = (0..n)
            .map(|_| uniform_in_ball(&mut stream, d, k_scale))
            .collect();
        let task = EmpiricalTask::new(samples, beta_star.clone())?;
        if task.sigma_x_extremes().0 > threshold {
            return Ok(task);
        }
    }
    Err(Error::RejectionBudget {
        attempts: MAX_ATTEMPTS,
    })
}

/// Uniform point in the closed radius-`radius` ball around the origin.
pub(crate) fn uniform_in_ball(stream: &mut CounterStream, dim: usize, radius: f64) -> DVector<f64> {
    loop {
        let mut dir = vec![0.0; dim];
        stream.fill_normal(&mut dir);
        let dir = DVector::from_vec(dir);
        let norm = dir.norm();
        if norm == 0.0 {
            continue;
        }
        let rho = radius * stream.uniform().powf(1.0 / dim as f64);
        return dir * (rho / norm);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_and_second_moment() {
        let t = EmpiricalTask::new(
            vec![
                DVector::from_row_slice(&[1.0]),
                DVector::from_row_slice(&[2.0]),
            ],
            DVector::from_row_slice(&[1.0]),
        )
        .unwrap();
        assert_eq!(t.k(), 2.0);
        assert!((t.sigma_x().matrix()[(0, 0)] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_zero_beta_and_bad_samples() {
        let x = vec![DVector::from_row_slice(&[1.0, 0.0])];
        assert!(EmpiricalTask::new(x.clone(), DVector::zeros(2)).is_err());
        assert!(EmpiricalTask::new(x, DVector::from_row_slice(&[1.0])).is_err());
        let x = vec![DVector::from_row_slice(&[f64::INFINITY])];
        assert!(matches!(
            EmpiricalTask::new(x, DVector::from_row_slice(&[1.0])),
            Err(Error::NonFinite { .. })
        ));
        assert!(EmpiricalTask::new(Vec::new(), DVector::from_row_slice(&[1.0])).is_err());
    }

    #[test]
    fn generated_task_respects_radius_and_conditioning() {
        let t = generate_task(3, 12, 2.0, &BetaSpec::Seeded(1), 9).unwrap();
        assert!(t.samples().iter().all(|x| x.norm() <= 2.0));
        assert!(t.sigma_x_extremes().0 > 0.01 * 4.0 / 3.0);
        assert!((t.beta_star().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_pair() {
        let t = generate_task(1, 2, 1.0, &BetaSpec::Literal(vec![1.0]), 0).unwrap();
        assert_eq!(t.n_samples(), 2);
        assert!(t.sigma_x_extremes().0 > 0.0);
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(
            generate_task(3, 2, 1.0, &BetaSpec::Seeded(0), 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn loader_rejects_non_finite() {
        let text = r#"{"shape":{"L":2,"q":1,"d":1},"beta_star":[1.0],"samples":[[1e400]]}"#;
        // serde_json refuses out-of-range literals outright
        assert!(serde_json::from_str::<TaskFile>(text).is_err());
        let file = TaskFile {
            shape: NetShape::new(2, 1, 1).unwrap(),
            beta_star: vec![1.0],
            samples: vec![vec![f64::NAN]],
        };
        assert!(file.into_task().is_err());
    }
}
