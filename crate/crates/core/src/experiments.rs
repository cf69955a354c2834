//! Monte Carlo checks of the convergence guarantees: the stay-and-converge
//! probability against `1 − p`, the decay rate of `f` against `θ`, and the
//! conditional tail bound `P(‖w_t − x*‖ > ε) ≤ (r/ε)e^{−θt/2}`.
//!
//! The event "never leaves the ball and never blows up" is only observable up
//! to `t_max`, so the estimated stay probability can over-count trajectories
//! that would exit later. Choosing `t_max` with `(r/ε)e^{−θ t_max/2} < 0.01`
//! keeps that bias small.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::{
    ball_extremes_closed_form, make_certificate, search_eta, BallExtremes, Certificate, Nn1Params,
};
use crate::error::{Error, Result};
use crate::linalg::lambda_extremes;
use crate::model::{nn1_initializer, DeepLinearModel, LayeredWeights, LossModel};
use crate::sde::{self, Observer, SimConfig, StopReason, TrajectoryRecord};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_BURN_IN: f64 = 0.1;
pub const MIN_FIT_POINTS: usize = 10;
const WILSON_Z: f64 = 1.959_963_984_540_054;
const ONE_SIDED_Z: f64 = 1.644_853_626_951_472_6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_traj: usize,
    pub sim: SimConfig,
    pub certificate: Option<Certificate>,
    pub checkpoints: Vec<f64>,
    pub epsilon: f64,
    #[serde(default = "default_burn_in")]
    pub burn_in_fraction: f64,
}

fn default_burn_in() -> f64 {
    DEFAULT_BURN_IN
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_traj == 0 {
            return bad("n_traj must be >= 1".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon <= self.sim.r) {
            return bad(format!(
                "epsilon must lie in (0, r = {}], got {}",
                self.sim.r, self.epsilon
            ));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return bad(format!(
                "burn-in fraction must lie in [0, 1), got {}",
                self.burn_in_fraction
            ));
        }
        let mut prev = f64::NEG_INFINITY;
        for &c in &self.checkpoints {
            if !(c >= 0.0 && c <= self.sim.t_max) || c <= prev {
                return bad(format!(
                    "checkpoints must be increasing within [0, t_max = {}], got {:?}",
                    self.sim.t_max, self.checkpoints
                ));
            }
            prev = c;
        }
        if let Some(cert) = &self.certificate {
            if (cert.eta - self.sim.eta).abs() > 0.0 {
                return bad(format!(
                    "certificate eta {} differs from simulation eta {}",
                    cert.eta, self.sim.eta
                ));
            }
            if (cert.extremes.r - self.sim.r).abs() > 1e-12 * self.sim.r {
                return bad(format!(
                    "certificate radius {} differs from simulation radius {}",
                    cert.extremes.r, self.sim.r
                ));
            }
        }
        Ok(())
    }

    /// `n` checkpoints evenly spaced over `[lo, hi]·t_max`.
    pub fn spread_checkpoints(t_max: f64, lo: f64, hi: f64, n: usize) -> Vec<f64> {
        match n {
            0 => Vec::new(),
            1 => vec![lo * t_max],
            _ => (0..n)
                .map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64) * t_max)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlopeFit {
    Fitted,
    InsufficientData,
    NotConditioned,
}

/// Fitted `d log f / dt`, or why there is none.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecaySlope {
    pub status: SlopeFit,
    #[serde(with = "crate::serde_float::option")]
    pub slope: Option<f64>,
    pub n_points: usize,
}

impl DecaySlope {
    fn insufficient(n_points: usize) -> Self {
        Self {
            status: SlopeFit::InsufficientData,
            slope: None,
            n_points,
        }
    }
}

/// Least-squares slope of `log f` against `t`. Points with `f ≤ f_stop` (the
/// absorbed tail) are dropped, then the first `burn_in_fraction` of the
/// remaining window.
pub fn fit_decay_series(
    times: &[f64],
    f_values: &[f64],
    f_stop: f64,
    burn_in_fraction: f64,
) -> DecaySlope {
    let window: Vec<(f64, f64)> = times
        .iter()
        .zip(f_values)
        .take_while(|(_, &f)| f > f_stop && f.is_finite())
        .map(|(&t, &f)| (t, f.ln()))
        .collect();
    let skip = (burn_in_fraction * window.len() as f64).floor() as usize;
    let pts = &window[skip.min(window.len())..];
    if pts.len() < MIN_FIT_POINTS {
        return DecaySlope::insufficient(pts.len());
    }
    let n = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(t, y) in pts {
        sxy += (t - tm) * (y - ym);
        sxx += (t - tm) * (t - tm);
    }
    if !(sxx > 0.0) {
        return DecaySlope::insufficient(pts.len());
    }
    DecaySlope {
        status: SlopeFit::Fitted,
        slope: Some(sxy / sxx),
        n_points: pts.len(),
    }
}

pub fn fit_decay_slope(traj: &TrajectoryRecord, f_stop: f64, burn_in_fraction: f64) -> DecaySlope {
    fit_decay_series(&traj.times, &traj.f_values, f_stop, burn_in_fraction)
}

/// 95% Wilson score interval for `k` successes out of `n`.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = WILSON_Z * WILSON_Z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = WILSON_Z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Pass,
    Fail,
    NotEvaluable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailCheckpoint {
    /// Grid time of the checkpoint (first grid time at or after the request).
    pub t: f64,
    pub fraction: f64,
    #[serde(with = "crate::serde_float")]
    pub bound: f64,
    pub slack: f64,
    pub vacuous: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailCheck {
    pub status: VerdictStatus,
    pub n_conditioned: usize,
    pub checkpoints: Vec<TailCheckpoint>,
}

/// `distances[j][c]` is `‖w_{t_c} − x*_j‖` for conditioned trajectory `j` at
/// checkpoint `c`.
/// The bound at time `t` is `(r/ε)e^{−θt/2}`; bounds above 1 pass vacuously.
/// Otherwise the check passes when the empirical fraction does not exceed the
/// bound plus `1.645·√(b(1−b)/n)`.
pub fn tail_bound_check(
    distances: &[Vec<f64>],
    times: &[f64],
    epsilon: f64,
    r: f64,
    theta: f64,
) -> TailCheck {
    let n = distances.len();
    if n == 0 {
        return TailCheck {
            status: VerdictStatus::NotEvaluable,
            n_conditioned: 0,
            checkpoints: Vec::new(),
        };
    }
    let checkpoints: Vec<TailCheckpoint> = times
        .iter()
        .enumerate()
        .map(|(c, &t)| {
            let exceed = distances.iter().filter(|d| d[c] > epsilon).count();
            let fraction = exceed as f64 / n as f64;
            let bound = if theta > 0.0 {
                r / epsilon * (-theta * t / 2.0).exp()
            } else {
                f64::INFINITY
            };
            let vacuous = bound > 1.0;
            let slack = if vacuous {
                0.0
            } else {
                ONE_SIDED_Z * (bound * (1.0 - bound) / n as f64).sqrt()
            };
            TailCheckpoint {
                t,
                fraction,
                bound,
                slack,
                vacuous,
                pass: vacuous || fraction <= bound + slack,
            }
        })
        .collect();
    let status = if checkpoints.iter().all(|c| c.pass) {
        VerdictStatus::Pass
    } else {
        VerdictStatus::Fail
    };
    TailCheck {
        status,
        n_conditioned: n,
        checkpoints,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopCounts {
    pub exited_ball: usize,
    pub hit_minimum: usize,
    pub blow_up: usize,
    pub horizon: usize,
    /// Horizon trajectories whose final loss is below `f(w₀)`.
    pub horizon_decaying: usize,
}

impl StopCounts {
    pub fn total(&self) -> usize {
        self.exited_ball + self.hit_minimum + self.blow_up + self.horizon
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub id: u64,
    pub stop: StopReason,
    pub steps: u64,
    #[serde(with = "crate::serde_float")]
    pub final_f: f64,
    pub stayed: bool,
    pub decay: DecaySlope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub claim: String,
    pub status: VerdictStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub schema_version: u32,
    pub exploratory: bool,
    pub label: String,
    pub master_seed: u64,
    pub n_traj: usize,
    pub counts: StopCounts,
    pub p_hat_stay: f64,
    pub wilson_interval: (f64, f64),
    #[serde(with = "crate::serde_float::option")]
    pub theoretical_floor: Option<f64>,
    #[serde(with = "crate::serde_float::option")]
    pub theta: Option<f64>,
    pub trajectories: Vec<TrajectorySummary>,
    #[serde(with = "crate::serde_float::option")]
    pub max_slope: Option<f64>,
    pub n_fitted_slopes: usize,
    pub tail: TailCheck,
    pub verdicts: Vec<Verdict>,
    pub notes: Vec<String>,
    pub config: McConfig,
}

impl McReport {
    pub fn any_failed(&self) -> bool {
        self.verdicts
            .iter()
            .any(|v| v.status == VerdictStatus::Fail)
    }

    pub fn verdict(&self, claim: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.claim == claim)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

pub fn persist_report(report: &McReport, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, report.to_json()?)?;
    Ok(())
}

pub fn load_report(path: impl AsRef<Path>) -> Result<McReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Collects the decimated `f` series and the states at checkpoint steps.
struct McObserver<'a> {
    stride: u64,
    checkpoint_steps: &'a [u64],
    times: Vec<f64>,
    f_values: Vec<f64>,
    snapshots: Vec<DVector<f64>>,
    next_checkpoint: usize,
}

impl Observer for McObserver<'_> {
    fn observe(&mut self, step: u64, t: f64, w: &DVector<f64>, f: f64) {
        if step.is_multiple_of(self.stride) {
            self.times.push(t);
            self.f_values.push(f);
        }
        while self.next_checkpoint < self.checkpoint_steps.len()
            && self.checkpoint_steps[self.next_checkpoint] <= step
        {
            self.snapshots.push(w.clone());
            self.next_checkpoint += 1;
        }
    }

    fn finish(&mut self, _stop: StopReason) {}
}

struct RawRun {
    summary: TrajectorySummary,
    /// `‖w_{t_c} − x*‖` per checkpoint; states after the stop are frozen.
    distances: Vec<f64>,
}

fn run_one<M: LossModel + ?Sized>(
    model: &M,
    w0: &DVector<f64>,
    mc: &McConfig,
    checkpoint_steps: &[u64],
    f0: f64,
    id: u64,
) -> Result<RawRun> {
    let mut obs = McObserver {
        stride: mc.sim.record_stride as u64,
        checkpoint_steps,
        times: Vec::new(),
        f_values: Vec::new(),
        snapshots: Vec::new(),
        next_checkpoint: 0,
    };
    let out = sde::simulate_observed(model, w0, &mc.sim, id, &mut obs)?;
    let stayed = match out.stop {
        StopReason::HitMinimum(_) => true,
        StopReason::Horizon(_) => out.final_f < f0,
        _ => false,
    };
    let conditioned = out.stop.stayed();
    let x_star = &out.final_state;
    let distances = if conditioned {
        (0..checkpoint_steps.len())
            .map(|c| obs.snapshots.get(c).map_or(0.0, |w| (w - x_star).norm()))
            .collect()
    } else {
        Vec::new()
    };
    let decay = if conditioned {
        fit_decay_series(
            &obs.times,
            &obs.f_values,
            mc.sim.f_stop,
            mc.burn_in_fraction,
        )
    } else {
        DecaySlope {
            status: SlopeFit::NotConditioned,
            slope: None,
            n_points: 0,
        }
    };
    Ok(RawRun {
        summary: TrajectorySummary {
            id,
            stop: out.stop,
            steps: out.steps,
            final_f: out.final_f,
            stayed,
            decay,
        },
        distances,
    })
}

/// Runs `n_traj` independent trajectories (ids `0..n_traj`) in parallel and
/// aggregates them in id order.
pub fn run_mc<M: LossModel + ?Sized>(
    model: &M,
    w0: &DVector<f64>,
    mc: &McConfig,
) -> Result<McReport> {
    mc.validate()?;
    let f0 = model.loss(w0);
    let dt = mc.sim.dt;
    let checkpoint_steps: Vec<u64> = mc
        .checkpoints
        .iter()
        .map(|&c| ((c / dt) * (1.0 - 1e-12)).ceil().max(0.0) as u64)
        .collect();
    let checkpoint_times: Vec<f64> = checkpoint_steps.iter().map(|&k| k as f64 * dt).collect();

    let runs: Vec<RawRun> = (0..mc.n_traj as u64)
        .into_par_iter()
        .map(|id| run_one(model, w0, mc, &checkpoint_steps, f0, id))
        .collect::<Result<_>>()?;

    let mut counts = StopCounts::default();
    for run in &runs {
        match run.summary.stop {
            StopReason::ExitedBall(_) => counts.exited_ball += 1,
            StopReason::HitMinimum(_) => counts.hit_minimum += 1,
            StopReason::BlowUp(_) => counts.blow_up += 1,
            StopReason::Horizon(_) => {
                counts.horizon += 1;
                if run.summary.stayed {
                    counts.horizon_decaying += 1;
                }
            }
        }
    }
    let n_stay = runs.iter().filter(|r| r.summary.stayed).count();
    let p_hat_stay = n_stay as f64 / mc.n_traj as f64;
    let wilson = wilson_interval(n_stay, mc.n_traj);

    let slopes: Vec<f64> = runs.iter().filter_map(|r| r.summary.decay.slope).collect();
    let max_slope = slopes.iter().copied().reduce(f64::max);

    let cert = mc.certificate.as_ref();
    let theta = cert.map(|c| c.theta);
    let distances: Vec<Vec<f64>> = runs
        .iter()
        .filter(|r| r.summary.stop.stayed())
        .map(|r| r.distances.clone())
        .collect();
    let tail = tail_bound_check(
        &distances,
        &checkpoint_times,
        mc.epsilon,
        mc.sim.r,
        theta.unwrap_or(f64::NAN),
    );

    let certified = cert.is_some_and(|c| c.certified);
    let verdicts = vec![
        stay_verdict(cert, certified, wilson.0),
        decay_verdict(cert, certified, max_slope, distances.len()),
        tail_verdict(certified, &tail),
    ];

    let label = match cert {
        Some(c) if c.certified => "certified".to_string(),
        Some(_) => "uncertified, exploratory".to_string(),
        None => "no certificate, exploratory".to_string(),
    };
    Ok(McReport {
        schema_version: SCHEMA_VERSION,
        exploratory: !certified,
        label,
        master_seed: mc.sim.seed,
        n_traj: mc.n_traj,
        counts,
        p_hat_stay,
        wilson_interval: wilson,
        theoretical_floor: cert.map(|c| 1.0 - c.p),
        theta,
        trajectories: runs.into_iter().map(|r| r.summary).collect(),
        max_slope,
        n_fitted_slopes: slopes.len(),
        tail,
        verdicts,
        notes: vec![
            "stay event is the finite-horizon surrogate {no ball exit, no blow-up by t_max}; \
             it can only over-count trajectories that would exit after t_max"
                .into(),
            "stopping predicates are checked on the time grid; reported stop times carry O(dt) bias"
                .into(),
            "x* is the frozen state for absorbed trajectories and the final state otherwise".into(),
        ],
        config: mc.clone(),
    })
}

fn stay_verdict(cert: Option<&Certificate>, certified: bool, wilson_lo: f64) -> Verdict {
    let claim = "stay_probability".to_string();
    match cert {
        Some(c) if certified => {
            let floor = 1.0 - c.p;
            Verdict {
                claim,
                status: if wilson_lo >= floor {
                    VerdictStatus::Pass
                } else {
                    VerdictStatus::Fail
                },
                detail: format!("Wilson lower bound {wilson_lo} vs 1 - p = {floor}"),
            }
        }
        _ => Verdict {
            claim,
            status: VerdictStatus::NotEvaluable,
            detail: "no passing certificate".into(),
        },
    }
}

fn decay_verdict(
    cert: Option<&Certificate>,
    certified: bool,
    max_slope: Option<f64>,
    n_conditioned: usize,
) -> Verdict {
    let claim = "decay_rate".to_string();
    let Some(c) = cert.filter(|_| certified) else {
        return Verdict {
            claim,
            status: VerdictStatus::NotEvaluable,
            detail: "no passing certificate".into(),
        };
    };
    let limit = -0.9 * c.theta;
    match max_slope {
        Some(s) => Verdict {
            claim,
            status: if s <= limit {
                VerdictStatus::Pass
            } else {
                VerdictStatus::Fail
            },
            detail: format!("max fitted slope {s} vs -0.9*theta = {limit}"),
        },
        None if n_conditioned == 0 => Verdict {
            claim,
            status: VerdictStatus::Fail,
            detail: "no trajectory stayed in the ball".into(),
        },
        None => Verdict {
            claim,
            status: VerdictStatus::NotEvaluable,
            detail: "no trajectory had enough points for a fit".into(),
        },
    }
}

fn tail_verdict(certified: bool, tail: &TailCheck) -> Verdict {
    let claim = "tail_bound".to_string();
    if !certified {
        return Verdict {
            claim,
            status: VerdictStatus::NotEvaluable,
            detail: "no passing certificate".into(),
        };
    }
    match tail.status {
        VerdictStatus::NotEvaluable => Verdict {
            claim,
            status: VerdictStatus::Fail,
            detail: "conditioned set is empty".into(),
        },
        status => {
            let failing = tail.checkpoints.iter().filter(|c| !c.pass).count();
            Verdict {
                claim,
                status,
                detail: format!(
                    "{} of {} checkpoints within bound",
                    tail.checkpoints.len() - failing,
                    tail.checkpoints.len()
                ),
            }
        }
    }
}

/// Time step `min(1e-4, 0.01/A_min, 0.25/λ_max(Hf(w₀)))`.
pub fn auto_dt(a_min: f64, hess_lambda_max: f64) -> f64 {
    let mut dt: f64 = 1e-4;
    if a_min > 0.0 && a_min.is_finite() {
        dt = dt.min(0.01 / a_min);
    }
    if hess_lambda_max > 0.0 && hess_lambda_max.is_finite() {
        dt = dt.min(0.25 / hess_lambda_max);
    }
    dt
}

/// Horizon with `(r/ε)e^{−θ t_max/2} = 0.01·e^{−1/2}`, strictly inside the 0.01 target.
pub fn auto_t_max(theta: f64, r: f64, epsilon: f64) -> f64 {
    (2.0 * (100.0 * r / epsilon).ln() + 1.0) / theta
}

/// A certified positive-layer instance with its simulation settings.
#[derive(Debug, Clone)]
pub struct Nn1Plan {
    pub params: Nn1Params,
    pub weights: LayeredWeights,
    pub w0: DVector<f64>,
    pub f_w0: f64,
    pub extremes: BallExtremes,
    pub certificate: Certificate,
    pub dt: f64,
    pub t_max: f64,
}

impl Nn1Plan {
    pub fn sim_config(&self, seed: u64) -> SimConfig {
        SimConfig::new(
            self.certificate.eta,
            self.dt,
            self.t_max,
            self.extremes.r,
            sde::default_f_stop(self.f_w0),
            seed,
        )
    }
}

/// Builds the positive-layer initialization for `N = N_start·2^k`, stopping at
/// the first `k` whose closed-form extremes admit `p ≤ target_p`, then picks
/// `η` by [`search_eta`] and the time grid by [`auto_dt`] / [`auto_t_max`].
/// With `noiseless`, `η = 0` is used instead of the search result.
pub fn plan_nn1(
    model: &DeepLinearModel,
    gamma: f64,
    m: f64,
    init_seed: u64,
    target_p: f64,
    epsilon_fraction: f64,
    noiseless: bool,
) -> Result<Nn1Plan> {
    let mut n_floor = gamma;
    for _ in 0..40 {
        let params = Nn1Params { gamma, m, n_floor };
        params.validate()?;
        let weights = nn1_initializer(model.shape(), gamma, m, n_floor, init_seed)?;
        let w0 = weights.flatten();
        let f_w0 = model.loss(&w0);
        let extremes = ball_extremes_closed_form(model, &weights, &params)?;
        if let Some(eta) = search_eta(&extremes, f_w0, target_p)? {
            let eta = if noiseless { 0.0 } else { eta };
            let certificate = make_certificate(&extremes, eta, f_w0)?;
            let (_, hmax) = lambda_extremes(&model.hessian(&w0))?;
            let dt = auto_dt(extremes.a_min, hmax);
            let t_max = auto_t_max(certificate.theta, extremes.r, epsilon_fraction * extremes.r);
            return Ok(Nn1Plan {
                params,
                weights,
                w0,
                f_w0,
                extremes,
                certificate,
                dt,
                t_max,
            });
        }
        n_floor *= 2.0;
    }
    Err(Error::InvalidConfig(format!(
        "no N up to {n_floor} gives p <= {target_p}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_exponential_slope() {
        let times: Vec<f64> = (0..100).map(|k| k as f64 * 0.01).collect();
        let f: Vec<f64> = times.iter().map(|t| 3.0 * (-2.5 * t).exp()).collect();
        let fit = fit_decay_series(&times, &f, 1e-300, 0.1);
        assert!((fit.slope.unwrap() + 2.5).abs() < 1e-10);
        let flat = vec![0.7; 100];
        assert!(
            fit_decay_series(&times, &flat, 1e-300, 0.1)
                .slope
                .unwrap()
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn too_few_points() {
        let fit = fit_decay_series(&[0.0, 1.0, 2.0], &[1.0, 0.5, 0.25], 1e-300, 0.1);
        assert_eq!(fit.status, SlopeFit::InsufficientData);
        assert!(fit.slope.is_none());
    }

    #[test]
    fn absorbed_tail_is_dropped() {
        let times: Vec<f64> = (0..30).map(|k| k as f64).collect();
        let mut f: Vec<f64> = times.iter().map(|t| (-t).exp()).collect();
        f[29] = 0.0;
        let fit = fit_decay_series(&times, &f, 1e-20, 0.0);
        assert_eq!(fit.n_points, 29);
        assert!((fit.slope.unwrap() + 1.0).abs() < 1e-10);
    }

    #[test]
    fn wilson_known_values() {
        let (lo, hi) = wilson_interval(200, 200);
        assert!((lo - 200.0 / (200.0 + WILSON_Z * WILSON_Z)).abs() < 1e-12);
        assert_eq!(hi, 1.0);
        let (lo, hi) = wilson_interval(5, 10);
        assert!((lo - 0.236_593).abs() < 1e-5 && (hi - 0.763_407).abs() < 1e-5);
    }

    #[test]
    fn tail_vacuous_and_zero() {
        let d = vec![vec![0.5, 0.0]; 4];
        let check = tail_bound_check(&d, &[0.0, 100.0], 0.25, 1.0, 1.0);
        assert!(check.checkpoints[0].vacuous && check.checkpoints[0].pass);
        assert_eq!(check.checkpoints[1].fraction, 0.0);
        assert_eq!(check.status, VerdictStatus::Pass);
        let empty = tail_bound_check(&[], &[0.0], 0.25, 1.0, 1.0);
        assert_eq!(empty.status, VerdictStatus::NotEvaluable);
    }

    #[test]
    fn checkpoint_spread() {
        let c = McConfig::spread_checkpoints(10.0, 0.1, 0.9, 5);
        assert_eq!(c.len(), 5);
        assert!((c[0] - 1.0).abs() < 1e-12 && (c[4] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn t_max_rule() {
        let t = auto_t_max(2.0, 0.25, 0.0625);
        assert!(4.0 * (-2.0 * t / 2.0).exp() < 0.01);
    }
}
