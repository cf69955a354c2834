//! Trajectory simulation: Euler–Maruyama for
//! `dw = −∇f(w) dt + √η σ(w) dB`, a fourth-order Runge–Kutta reference for the
//! noiseless flow, and the discrete per-sample SGD recursion.
//!
//! All three share the same stopping predicates, checked on the time grid in
//! this order after every step: ball exit `‖w − w₀‖ > r`, absorption
//! `f(w) ≤ f_stop`, blow-up (`‖w‖ ≥ blowup_norm` or non-finite), horizon.
//! A trajectory that starts with `f(w₀) ≤ f_stop` is absorbed at `t = 0`.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LossModel;
use crate::rng::{CounterStream, Domain};

/// Default absorption tolerance `1e-10·(1 + f(w₀))`.
pub fn default_f_stop(f_w0: f64) -> f64 {
    1e-10 * (1.0 + f_w0)
}

pub const DEFAULT_BLOWUP_NORM: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub eta: f64,
    pub dt: f64,
    pub t_max: f64,
    pub r: f64,
    pub f_stop: f64,
    pub blowup_norm: f64,
    pub record_stride: usize,
    pub seed: u64,
    /// Skip the noise eigendecomposition when `Tr Σ(w) ≤ f_stop²`.
    #[serde(default)]
    pub lazy_noise: bool,
}

impl SimConfig {
    pub fn new(eta: f64, dt: f64, t_max: f64, r: f64, f_stop: f64, seed: u64) -> Self {
        Self {
            eta,
            dt,
            t_max,
            r,
            f_stop,
            blowup_norm: DEFAULT_BLOWUP_NORM,
            record_stride: 1,
            seed,
            lazy_noise: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return bad(format!("eta must be >= 0, got {}", self.eta));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad(format!("dt must be > 0, got {}", self.dt));
        }
        if !(self.t_max.is_finite() && self.t_max > 0.0) {
            return bad(format!("t_max must be > 0, got {}", self.t_max));
        }
        if self.dt > self.t_max {
            return bad(format!("dt = {} exceeds t_max = {}", self.dt, self.t_max));
        }
        if !(self.r > 0.0) {
            return bad(format!("ball radius must be > 0, got {}", self.r));
        }
        if !(self.f_stop.is_finite() && self.f_stop > 0.0) {
            return bad(format!("f_stop must be > 0, got {}", self.f_stop));
        }
        if !(self.blowup_norm > 0.0) {
            return bad(format!(
                "blow-up norm must be > 0, got {}",
                self.blowup_norm
            ));
        }
        if self.record_stride == 0 {
            return bad("record stride must be >= 1".into());
        }
        Ok(())
    }

    /// Grid steps needed to reach `t_max`.
    pub fn n_steps(&self) -> u64 {
        grid_steps(self.t_max, self.dt)
    }
}

fn grid_steps(t_max: f64, dt: f64) -> u64 {
    ((t_max / dt) * (1.0 - 1e-12)).ceil().max(1.0) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "t")]
pub enum StopReason {
    ExitedBall(f64),
    HitMinimum(f64),
    BlowUp(f64),
    Horizon(f64),
}

impl StopReason {
    pub fn time(&self) -> f64 {
        match *self {
            StopReason::ExitedBall(t)
            | StopReason::HitMinimum(t)
            | StopReason::BlowUp(t)
            | StopReason::Horizon(t) => t,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StopReason::ExitedBall(_) => "exited_ball",
            StopReason::HitMinimum(_) => "hit_minimum",
            StopReason::BlowUp(_) => "blow_up",
            StopReason::Horizon(_) => "horizon",
        }
    }

    /// Neither exited the ball nor blew up.
    pub fn stayed(&self) -> bool {
        matches!(self, StopReason::HitMinimum(_) | StopReason::Horizon(_))
    }
}

/// Receives every accepted grid state, including the stopping state.
pub trait Observer {
    fn observe(&mut self, step: u64, t: f64, w: &DVector<f64>, f: f64);
    fn finish(&mut self, _stop: StopReason) {}
}

/// Result of a driven trajectory without any recorded path.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub stop: StopReason,
    pub steps: u64,
    pub final_state: DVector<f64>,
    pub final_f: f64,
}

struct Predicates<'a> {
    w0: &'a DVector<f64>,
    r: f64,
    f_stop: f64,
    blowup_norm: f64,
}

impl Predicates<'_> {
    fn check(&self, w: &DVector<f64>, f: f64, t: f64) -> Option<StopReason> {
        if (w - self.w0).norm() > self.r {
            Some(StopReason::ExitedBall(t))
        } else if f <= self.f_stop {
            Some(StopReason::HitMinimum(t))
        } else if !f.is_finite() || !(w.norm() < self.blowup_norm) {
            Some(StopReason::BlowUp(t))
        } else {
            None
        }
    }
}

/// Generic grid loop. `advance(k, w)` maps the state at step `k` to step
/// `k + 1`, returning `None` on non-finite arithmetic.
fn drive<M, O, F>(
    model: &M,
    w0: &DVector<f64>,
    pred: Predicates<'_>,
    time_step: f64,
    n_steps: u64,
    observer: &mut O,
    mut advance: F,
) -> Outcome
where
    M: LossModel + ?Sized,
    O: Observer + ?Sized,
    F: FnMut(u64, &DVector<f64>) -> Option<DVector<f64>>,
{
    let f0 = model.loss(w0);
    observer.observe(0, 0.0, w0, f0);
    if f0 <= pred.f_stop {
        let stop = StopReason::HitMinimum(0.0);
        observer.finish(stop);
        return Outcome {
            stop,
            steps: 0,
            final_state: w0.clone(),
            final_f: f0,
        };
    }
    let mut w = w0.clone();
    let mut k = 0;
    loop {
        let next = advance(k, &w);
        k += 1;
        let t = k as f64 * time_step;
        let (w_next, f, stop) = match next {
            Some(w_next) if w_next.iter().all(|x| x.is_finite()) => {
                let f = model.loss(&w_next);
                let stop = pred.check(&w_next, f, t).or({
                    if k >= n_steps {
                        Some(StopReason::Horizon(t))
                    } else {
                        None
                    }
                });
                (w_next, f, stop)
            }
            Some(w_next) => (w_next, f64::NAN, Some(StopReason::BlowUp(t))),
            None => (
                DVector::from_element(w.len(), f64::NAN),
                f64::NAN,
                Some(StopReason::BlowUp(t)),
            ),
        };
        observer.observe(k, t, &w_next, f);
        w = w_next;
        if let Some(stop) = stop {
            observer.finish(stop);
            return Outcome {
                stop,
                steps: k,
                final_state: w,
                final_f: f,
            };
        }
    }
}

/// Recorded path, decimated by the record stride. The stopping state is
/// always recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub trajectory_id: u64,
    pub w0: DVector<f64>,
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub f_values: Vec<f64>,
    pub stop: StopReason,
    pub steps: u64,
    pub final_state: DVector<f64>,
}

struct Recorder {
    stride: u64,
    times: Vec<f64>,
    states: Vec<DVector<f64>>,
    f_values: Vec<f64>,
    last_recorded: Option<u64>,
    pending: Option<(u64, f64, DVector<f64>, f64)>,
}

impl Recorder {
    fn new(stride: usize) -> Self {
        Self {
            stride: stride as u64,
            times: Vec::new(),
            states: Vec::new(),
            f_values: Vec::new(),
            last_recorded: None,
            pending: None,
        }
    }
}

impl Observer for Recorder {
    fn observe(&mut self, step: u64, t: f64, w: &DVector<f64>, f: f64) {
        if step.is_multiple_of(self.stride) {
            self.times.push(t);
            self.states.push(w.clone());
            self.f_values.push(f);
            self.last_recorded = Some(step);
            self.pending = None;
        } else {
            self.pending = Some((step, t, w.clone(), f));
        }
    }

    fn finish(&mut self, _stop: StopReason) {
        if let Some((_, t, w, f)) = self.pending.take() {
            self.times.push(t);
            self.states.push(w);
            self.f_values.push(f);
        }
    }
}

fn into_record(rec: Recorder, out: Outcome, w0: &DVector<f64>, id: u64) -> TrajectoryRecord {
    TrajectoryRecord {
        trajectory_id: id,
        w0: w0.clone(),
        times: rec.times,
        states: rec.states,
        f_values: rec.f_values,
        stop: out.stop,
        steps: out.steps,
        final_state: out.final_state,
    }
}

/// Per-trajectory Brownian increments: step `k` always reads the same block
/// of the `(seed, trajectory)` stream.
#[derive(Debug, Clone)]
pub struct BrownianPath {
    stream: CounterStream,
    dim: usize,
}

impl BrownianPath {
    pub fn new(seed: u64, trajectory_id: u64, dim: usize) -> Self {
        Self {
            stream: CounterStream::new(seed, Domain::Brownian, trajectory_id),
            dim,
        }
    }

    /// `ξ_k ~ N(0, I_D)`.
    pub fn draw(&mut self, step: u64) -> DVector<f64> {
        let mut xi = vec![0.0; self.dim];
        self.stream.normals_at(step, &mut xi);
        DVector::from_vec(xi)
    }
}

/// Drift and diffusion parts of one Euler–Maruyama step for a given `ξ`:
/// `(−∇f(w)·dt, √(η·dt)·σ(w)·ξ)`.
pub fn em_increment<M: LossModel + ?Sized>(
    model: &M,
    w: &DVector<f64>,
    eta: f64,
    dt: f64,
    xi: &DVector<f64>,
    lazy_threshold: Option<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if eta == 0.0 {
        return Ok((model.grad(w) * (-dt), DVector::zeros(w.len())));
    }
    let (grad, cov) = model.grad_and_cov(w);
    let drift = grad * (-dt);
    if let Some(thr) = lazy_threshold {
        if cov.trace() <= thr {
            return Ok((drift, DVector::zeros(w.len())));
        }
    }
    let sigma = crate::linalg::psd_sqrt(&cov)?.root;
    Ok((drift, sigma * xi * (eta * dt).sqrt()))
}

/// Outcome of a single integrator step.
#[derive(Debug, Clone, PartialEq)]
pub enum StepResult {
    Next(DVector<f64>),
    BlowUp,
}

/// One Euler–Maruyama step `w′ = w − ∇f(w)dt + √(η dt) σ(w) ξ_step`.
pub fn em_step<M: LossModel + ?Sized>(
    model: &M,
    w: &DVector<f64>,
    cfg: &SimConfig,
    noise: &mut BrownianPath,
    step: u64,
) -> StepResult {
    let xi = if cfg.eta > 0.0 {
        noise.draw(step)
    } else {
        DVector::zeros(w.len())
    };
    let lazy = cfg.lazy_noise.then_some(cfg.f_stop * cfg.f_stop);
    match em_increment(model, w, cfg.eta, cfg.dt, &xi, lazy) {
        Ok((drift, diffusion)) => {
            let next = w + drift + diffusion;
            if next.iter().all(|x| x.is_finite()) {
                StepResult::Next(next)
            } else {
                StepResult::BlowUp
            }
        }
        Err(_) => StepResult::BlowUp,
    }
}

fn check_start<M: LossModel + ?Sized>(model: &M, w0: &DVector<f64>) -> Result<()> {
    if w0.len() != model.dim() {
        return Err(Error::Shape(format!(
            "w0 has length {}, model dimension is {}",
            w0.len(),
            model.dim()
        )));
    }
    if w0.iter().any(|x| !x.is_finite()) {
        return Err(crate::error::non_finite("w0"));
    }
    Ok(())
}

/// Euler–Maruyama trajectory with an arbitrary observer.
pub fn simulate_observed<M, O>(
    model: &M,
    w0: &DVector<f64>,
    cfg: &SimConfig,
    trajectory_id: u64,
    observer: &mut O,
) -> Result<Outcome>
where
    M: LossModel + ?Sized,
    O: Observer + ?Sized,
{
    cfg.validate()?;
    check_start(model, w0)?;
    let mut noise = BrownianPath::new(cfg.seed, trajectory_id, model.dim());
    let pred = Predicates {
        w0,
        r: cfg.r,
        f_stop: cfg.f_stop,
        blowup_norm: cfg.blowup_norm,
    };
    Ok(drive(
        model,
        w0,
        pred,
        cfg.dt,
        cfg.n_steps(),
        observer,
        |k, w| match em_step(model, w, cfg, &mut noise, k) {
            StepResult::Next(next) => Some(next),
            StepResult::BlowUp => None,
        },
    ))
}

pub fn simulate_trajectory<M: LossModel + ?Sized>(
    model: &M,
    w0: &DVector<f64>,
    cfg: &SimConfig,
    trajectory_id: u64,
) -> Result<TrajectoryRecord> {
    let mut rec = Recorder::new(cfg.record_stride);
    let out = simulate_observed(model, w0, cfg, trajectory_id, &mut rec)?;
    Ok(into_record(rec, out, w0, trajectory_id))
}

/// [`simulate_trajectory`] for trajectory id 0.
pub fn simulate<M: LossModel + ?Sized>(
    model: &M,
    w0: &DVector<f64>,
    cfg: &SimConfig,
) -> Result<TrajectoryRecord> {
    simulate_trajectory(model, w0, cfg, 0)
}

/// Classic RK4 integration of `ẇ = −∇f(w)`; `cfg.eta` is ignored.
pub fn gradient_flow<M: LossModel + ?Sized>(
    model: &M,
    w0: &DVector<f64>,
    cfg: &SimConfig,
) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    check_start(model, w0)?;
    let dt = cfg.dt;
    let pred = Predicates {
        w0,
        r: cfg.r,
        f_stop: cfg.f_stop,
        blowup_norm: cfg.blowup_norm,
    };
    let mut rec = Recorder::new(cfg.record_stride);
    let out = drive(model, w0, pred, dt, cfg.n_steps(), &mut rec, |_, w| {
        let k1 = -model.grad(w);
        let k2 = -model.grad(&(w + &k1 * (dt / 2.0)));
        let k3 = -model.grad(&(w + &k2 * (dt / 2.0)));
        let k4 = -model.grad(&(w + &k3 * dt));
        let next = w + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        next.iter().all(|x| x.is_finite()).then_some(next)
    });
    Ok(into_record(rec, out, w0, 0))
}

/// Discrete SGD `w_{k+1} = w_k − η ∇ℓ(w_k, Z_k)` with `Z_k` uniform over the
/// samples. Step `k` is reported at time `t = k·η`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub eta: f64,
    pub n_steps: u64,
    pub seed: u64,
    pub r: f64,
    pub f_stop: f64,
    pub blowup_norm: f64,
    pub record_stride: usize,
}

impl SgdConfig {
    pub fn new(eta: f64, n_steps: u64, seed: u64, r: f64, f_stop: f64) -> Self {
        Self {
            eta,
            n_steps,
            seed,
            r,
            f_stop,
            blowup_norm: DEFAULT_BLOWUP_NORM,
            record_stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "SGD step must be > 0, got {}",
                self.eta
            )));
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidConfig("n_steps must be >= 1".into()));
        }
        if !(self.r > 0.0) || !(self.f_stop > 0.0) || !(self.blowup_norm > 0.0) {
            return Err(Error::InvalidConfig(
                "radius, f_stop and blow-up norm must be positive".into(),
            ));
        }
        if self.record_stride == 0 {
            return Err(Error::InvalidConfig("record stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-trajectory stream of sample indices for the discrete recursion.
#[derive(Debug, Clone)]
pub struct SampleDraws {
    stream: CounterStream,
    n: usize,
}

impl SampleDraws {
    pub fn new(seed: u64, trajectory_id: u64, n: usize) -> Self {
        Self {
            stream: CounterStream::new(seed, Domain::SampleIndex, trajectory_id),
            n,
        }
    }

    pub fn index(&mut self, step: u64) -> usize {
        self.stream.seek(step);
        self.stream.uniform_index(self.n)
    }
}

pub fn sgd_discrete<M: LossModel + ?Sized>(
    model: &M,
    w0: &DVector<f64>,
    cfg: &SgdConfig,
    trajectory_id: u64,
) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    check_start(model, w0)?;
    let mut draws = SampleDraws::new(cfg.seed, trajectory_id, model.n_samples());
    let pred = Predicates {
        w0,
        r: cfg.r,
        f_stop: cfg.f_stop,
        blowup_norm: cfg.blowup_norm,
    };
    let mut rec = Recorder::new(cfg.record_stride);
    let out = drive(model, w0, pred, cfg.eta, cfg.n_steps, &mut rec, |k, w| {
        let i = draws.index(k);
        let g = model.per_sample_grad(w, i).ok()?;
        Some(w - g * cfg.eta)
    });
    Ok(into_record(rec, out, w0, trajectory_id))
}

/// Per-trajectory stop summary written next to the trajectory CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopSummary {
    pub trajectory_id: u64,
    pub stop: StopReason,
    pub steps: u64,
    #[serde(with = "crate::serde_float")]
    pub final_f: f64,
    #[serde(with = "crate::serde_float")]
    pub final_distance: f64,
    pub final_state: Vec<f64>,
    pub config: SimConfig,
}

impl TrajectoryRecord {
    pub fn final_f(&self) -> f64 {
        *self
            .f_values
            .last()
            .expect("at least the initial state is recorded")
    }

    pub fn stop_summary(&self, cfg: &SimConfig) -> StopSummary {
        StopSummary {
            trajectory_id: self.trajectory_id,
            stop: self.stop,
            steps: self.steps,
            final_f: self.final_f(),
            final_distance: (&self.final_state - &self.w0).norm(),
            final_state: self.final_state.iter().copied().collect(),
            config: cfg.clone(),
        }
    }

    /// CSV with a `#` config-echo line, a header `t,f,dist,w0..w{D-1}` and
    /// one row per recorded state.
    pub fn write_csv(&self, path: impl AsRef<Path>, cfg: &SimConfig) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        let num = crate::serde_float::display;
        writeln!(
            buf,
            "# eta={} dt={} t_max={} r={} f_stop={} blowup_norm={} record_stride={} seed={} trajectory_id={}",
            num(cfg.eta),
            num(cfg.dt),
            num(cfg.t_max),
            num(cfg.r),
            num(cfg.f_stop),
            num(cfg.blowup_norm),
            cfg.record_stride,
            cfg.seed,
            self.trajectory_id
        )?;
        {
            let mut wtr = csv::Writer::from_writer(&mut buf);
            let dim = self.w0.len();
            let mut header = vec!["t".to_string(), "f".to_string(), "dist".to_string()];
            header.extend((0..dim).map(|i| format!("w{i}")));
            wtr.write_record(&header).map_err(csv_err)?;
            for ((t, f), w) in self.times.iter().zip(&self.f_values).zip(&self.states) {
                let mut row = vec![*t, *f, (w - &self.w0).norm()];
                row.extend(w.iter().copied());
                wtr.serialize(row).map_err(csv_err)?;
            }
            wtr.flush()?;
        }
        fs::write(path, buf)?;
        Ok(())
    }
}

/// Contents of a trajectory CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryCsv {
    pub times: Vec<f64>,
    pub f_values: Vec<f64>,
    pub distances: Vec<f64>,
    pub states: Vec<DVector<f64>>,
}

pub fn read_trajectory_csv(path: impl AsRef<Path>) -> Result<TrajectoryCsv> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(csv_err)?;
    let mut out = TrajectoryCsv {
        times: Vec::new(),
        f_values: Vec::new(),
        distances: Vec::new(),
        states: Vec::new(),
    };
    for row in rdr.deserialize::<Vec<f64>>() {
        let row = row.map_err(csv_err)?;
        if row.len() < 3 {
            return Err(Error::Shape(format!(
                "trajectory row has {} columns",
                row.len()
            )));
        }
        out.times.push(row[0]);
        out.f_values.push(row[1]);
        out.distances.push(row[2]);
        out.states.push(DVector::from_column_slice(&row[3..]));
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}
