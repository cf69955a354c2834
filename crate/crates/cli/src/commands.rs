use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use sgdlab::certify::{
    ball_extremes_closed_form, ball_extremes_sampled, default_f_exclude_tol, make_certificate,
    search_eta, BallExtremes, Certificate, Nn1Params,
};
use sgdlab::experiments::{self, McConfig, McReport};
use sgdlab::linalg::lambda_extremes;
use sgdlab::model::{
    generate_task, nn1_initializer, BetaSpec, DeepLinearModel, LayeredWeights, TaskFile,
    WeightsFile,
};
use sgdlab::sde::{self, SgdConfig, SimConfig, TrajectoryRecord};
use sgdlab::serde_float::display as num;
use sgdlab::{Error, LossModel, Result};

use crate::{
    CertifyArgs, Command, InitArgs, MakeTaskArgs, McArgs, Method, SgdCompareArgs, SimArgs,
    SimulateArgs,
};

const VERDICT_FAILED: u8 = 2;

pub fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::MakeTask(a) => make_task(a),
        Command::Certify(a) => certify(a),
        Command::Simulate(a) => simulate(a),
        Command::Mc(a) => monte_carlo(a),
        Command::SgdCompare(a) => sgd_compare(a),
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

fn require_positive(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(invalid(format!(
            "--{name} must be a positive finite number, got {v}"
        )))
    }
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn make_task(a: MakeTaskArgs) -> Result<ExitCode> {
    require_positive("k-scale", a.k_scale)?;
    let beta = match a.beta_star {
        Some(v) => BetaSpec::Literal(v),
        None => BetaSpec::Seeded(a.beta_seed.unwrap_or(a.seed)),
    };
    let shape = sgdlab::NetShape::new(a.depth, a.width, a.d)?;
    let task = generate_task(a.d, a.n, a.k_scale, &beta, a.seed).map_err(|e| match e {
        Error::RejectionBudget { attempts } => invalid(format!(
            "no draw met lambda_min(Sigma_X) > 0.01 K^2/d in {attempts} attempts; try a larger --n"
        )),
        other => other,
    })?;
    let file = TaskFile::from_task(shape, &task);
    let path = a.out.unwrap_or_else(|| a.dir.out_dir.join("task.json"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_dir(parent)?;
    }
    file.save(&path)?;
    let (lmin, lmax) = task.sigma_x_extremes();
    println!("wrote {}", path.display());
    println!(
        "n = {}, d = {}, K = {}",
        task.n_samples(),
        task.input_dim(),
        num(task.k())
    );
    println!("lambda(Sigma_X) in [{}, {}]", num(lmin), num(lmax));
    Ok(ExitCode::SUCCESS)
}

fn load_model(path: &Path) -> Result<DeepLinearModel> {
    let (shape, task) = TaskFile::load(path)?.into_task()?;
    DeepLinearModel::new(shape, task)
}

struct Init {
    weights: LayeredWeights,
    params: Option<Nn1Params>,
}

fn init_given(init: &InitArgs) -> bool {
    init.weights.is_some()
        || init.gamma.is_some()
        || init.m_upper.is_some()
        || init.n_floor.is_some()
}

fn resolve_init(init: &InitArgs, model: &DeepLinearModel) -> Result<Init> {
    if let Some(path) = &init.weights {
        let weights = WeightsFile::load(path)?.into_weights()?;
        if weights.shape() != model.shape() {
            return Err(Error::Shape(format!(
                "weights shape {:?} differs from task shape {:?}",
                weights.shape(),
                model.shape()
            )));
        }
        return Ok(Init {
            weights,
            params: None,
        });
    }
    let (Some(gamma), Some(m), Some(n_floor)) = (init.gamma, init.m_upper, init.n_floor) else {
        return Err(invalid(
            "initial weights need --weights or all of --gamma, --m-upper, --n-floor",
        ));
    };
    let params = Nn1Params { gamma, m, n_floor };
    params.validate()?;
    let weights = nn1_initializer(model.shape(), gamma, m, n_floor, init.init_seed)?;
    Ok(Init {
        weights,
        params: Some(params),
    })
}

fn certify(a: CertifyArgs) -> Result<ExitCode> {
    if !(a.target_p > 0.0 && a.target_p < 1.0) {
        return Err(invalid(format!(
            "--target-p must lie in (0, 1), got {}",
            a.target_p
        )));
    }
    if let Some(eta) = a.eta {
        if !(eta.is_finite() && eta >= 0.0) {
            return Err(invalid(format!("--eta must be >= 0, got {eta}")));
        }
    }
    if a.method == Method::Sampled && a.n_points == 0 {
        return Err(invalid("--n-points must be >= 1"));
    }
    let model = load_model(&a.task)?;
    let init = resolve_init(&a.init, &model)?;
    let w0 = init.weights.flatten();
    let f0 = model.loss(&w0);

    let extremes = match a.method {
        Method::ClosedForm => {
            let params = init.params.ok_or_else(|| {
                Error::Structure(
                    "closed-form extremes need the positive-layer initializer parameters \
                     (--gamma, --m-upper, --n-floor)"
                        .into(),
                )
            })?;
            if let Some(r) = a.radius {
                if (r - params.radius()).abs() > 1e-15 * r {
                    return Err(invalid(format!(
                        "closed-form bounds hold on the radius gamma/2 = {} ball, got --radius {r}",
                        params.radius()
                    )));
                }
            }
            ball_extremes_closed_form(&model, &init.weights, &params)?
        }
        Method::Sampled => {
            let r = match (a.radius, init.params) {
                (Some(r), _) => require_positive("radius", r)?,
                (None, Some(p)) => p.radius(),
                (None, None) => return Err(invalid("--radius is required with --weights")),
            };
            ball_extremes_sampled(
                &model,
                &w0,
                r,
                a.n_points,
                a.sample_seed,
                default_f_exclude_tol(f0),
            )?
        }
    };

    let eta = match a.eta {
        Some(eta) => eta,
        None => match search_eta(&extremes, f0, a.target_p)? {
            Some(eta) => eta,
            None => {
                println!(
                    "no eta meets p <= {}: the noiseless condition already fails",
                    a.target_p
                );
                0.0
            }
        },
    };
    let cert = make_certificate(&extremes, eta, f0)?;

    let dir = &a.dir.out_dir;
    prepare_dir(dir)?;
    cert.save(dir.join("certificate.json"))?;
    WeightsFile::from_weights(&init.weights).save(dir.join("weights.json"))?;
    print!("{}", certificate_summary(&cert));
    Ok(if cert.certified {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(VERDICT_FAILED)
    })
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

fn certificate_summary(c: &Certificate) -> String {
    let e = &c.extremes;
    let mut s = String::new();
    let kind = if e.is_estimate() {
        "sampled estimates, not bounds"
    } else {
        "closed-form bounds"
    };
    let _ = writeln!(s, "f(w0)   = {}", num(c.f_w0));
    let _ = writeln!(s, "r       = {}", num(e.r));
    let _ = writeln!(s, "A_min   = {}  ({kind})", num(e.a_min));
    let _ = writeln!(s, "B_max   = {}", num(e.b_max));
    let _ = writeln!(s, "G_max   = {}", num(e.g_max));
    let _ = writeln!(s, "eta     = {}", num(c.eta));
    let _ = writeln!(s, "theta   = {}", num(c.theta));
    let _ = writeln!(s, "p       = {}", num(c.p));
    let _ = writeln!(s, "[{}] theta = A_min - eta*G_max > 0", mark(c.cond_etay));
    let _ = writeln!(
        s,
        "[{}] eta*B_max = {} <= 1/4",
        mark(c.cond_bmax),
        num(c.eta * e.b_max)
    );
    let _ = writeln!(s, "[{}] p < 1", mark(c.cond_heta));
    if c.eta == 0.0 {
        let _ = writeln!(
            s,
            "[{}] noiseless condition 4f(w0)/r^2 = {} < A_min = {}",
            mark(c.chatterjee_holds()),
            num(4.0 * c.f_w0 / (e.r * e.r)),
            num(e.a_min)
        );
    }
    let _ = writeln!(s, "certified: {}", if c.certified { "yes" } else { "no" });
    if c.certified && e.is_estimate() {
        let _ = writeln!(s, "note: sampled extremes only estimate A_min from above");
    }
    s
}

/// Default time step from a certificate: `min(1e-4, 0.01/A_min, 0.25/λ_max(Hf(w0)))`.
fn certificate_dt(model: &DeepLinearModel, w0: &DVector<f64>, e: &BallExtremes) -> Result<f64> {
    let (_, hmax) = lambda_extremes(&model.hessian(w0))?;
    Ok(experiments::auto_dt(e.a_min, hmax))
}

fn build_sim(
    args: &SimArgs,
    model: &DeepLinearModel,
    w0: &DVector<f64>,
    cert: Option<&Certificate>,
    radius_default: Option<f64>,
    epsilon_fraction: f64,
) -> Result<SimConfig> {
    let eta = match (args.eta, cert) {
        (Some(eta), _) => eta,
        (None, Some(c)) => c.eta,
        (None, None) => return Err(invalid("--eta is required without a certificate")),
    };
    let r = match (args.radius, cert, radius_default) {
        (Some(r), _, _) => r,
        (None, Some(c), _) => c.extremes.r,
        (None, None, Some(r)) => r,
        _ => return Err(invalid("--radius is required")),
    };
    require_positive("radius", r)?;
    let dt = match (args.dt, cert) {
        (Some(dt), _) => dt,
        (None, Some(c)) => certificate_dt(model, w0, &c.extremes)?,
        (None, None) => 1e-4,
    };
    let t_max = match (args.t_max, cert) {
        (Some(t), _) => t,
        (None, Some(c)) if c.theta > 0.0 => {
            experiments::auto_t_max(c.theta, r, epsilon_fraction * r)
        }
        _ => {
            return Err(invalid(
                "--t-max is required without a certificate with theta > 0",
            ))
        }
    };
    let f0 = model.loss(w0);
    let mut cfg = SimConfig::new(
        eta,
        dt,
        t_max,
        r,
        args.f_stop.unwrap_or_else(|| sde::default_f_stop(f0)),
        args.seed,
    );
    cfg.blowup_norm = args.blowup_norm;
    cfg.record_stride = args.record_stride;
    cfg.lazy_noise = args.lazy_noise;
    cfg.validate()?;
    Ok(cfg)
}

fn simulate(a: SimulateArgs) -> Result<ExitCode> {
    let model = load_model(&a.task)?;
    let init = resolve_init(&a.init, &model)?;
    let w0 = init.weights.flatten();
    let cfg = build_sim(
        &a.sim,
        &model,
        &w0,
        None,
        init.params.map(|p| p.radius()),
        0.25,
    )?;
    let rec = sde::simulate_trajectory(&model, &w0, &cfg, a.trajectory_id)?;
    let dir = &a.dir.out_dir;
    prepare_dir(dir)?;
    rec.write_csv(dir.join("trajectory.csv"), &cfg)?;
    let summary = rec.stop_summary(&cfg);
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    fs::write(dir.join("stop.json"), json)?;
    println!(
        "stop: {} at t = {} after {} steps; f = {}, |w - w0| = {}",
        rec.stop.name(),
        num(rec.stop.time()),
        rec.steps,
        num(summary.final_f),
        num(summary.final_distance)
    );
    Ok(ExitCode::SUCCESS)
}

fn monte_carlo(a: McArgs) -> Result<ExitCode> {
    if !(a.epsilon_fraction > 0.0 && a.epsilon_fraction <= 1.0) {
        return Err(invalid(format!(
            "--epsilon-fraction must lie in (0, 1], got {}",
            a.epsilon_fraction
        )));
    }
    if !(0.0 <= a.checkpoint_lo && a.checkpoint_lo <= a.checkpoint_hi && a.checkpoint_hi <= 1.0) {
        return Err(invalid("checkpoint span must satisfy 0 <= lo <= hi <= 1"));
    }
    let model = load_model(&a.task)?;
    let cert = a.certificate.as_ref().map(Certificate::load).transpose()?;
    let (w0, radius_default) = match (&cert, init_given(&a.init)) {
        (_, true) => {
            let init = resolve_init(&a.init, &model)?;
            let w0 = init.weights.flatten();
            if let Some(c) = &cert {
                if c.extremes.w0 != w0.as_slice() {
                    return Err(invalid("initial weights differ from the certificate's w0"));
                }
            }
            (w0, init.params.map(|p| p.radius()))
        }
        (Some(c), false) => {
            let w = LayeredWeights::unflatten(model.shape(), &c.extremes.w0)?;
            (w.flatten(), None)
        }
        (None, false) => return Err(invalid("mc needs --certificate or initial weights")),
    };
    if cert.is_none() {
        eprintln!("warning: no certificate given; the report is exploratory");
    }
    let sim = build_sim(
        &a.sim,
        &model,
        &w0,
        cert.as_ref(),
        radius_default,
        a.epsilon_fraction,
    )?;
    let mc = McConfig {
        n_traj: a.n_traj,
        checkpoints: McConfig::spread_checkpoints(
            sim.t_max,
            a.checkpoint_lo,
            a.checkpoint_hi,
            a.n_checkpoints,
        ),
        epsilon: a.epsilon_fraction * sim.r,
        certificate: cert,
        burn_in_fraction: a.burn_in,
        sim,
    };
    mc.validate()?;
    let report = experiments::run_mc(&model, &w0, &mc)?;

    let dir = &a.dir.out_dir;
    prepare_dir(dir)?;
    experiments::persist_report(&report, dir.join("report.json"))?;
    write_tail_files(dir, &report)?;
    write_decile_files(dir, &model, &w0, &report)?;
    if a.dump_trajectories {
        let tdir = dir.join("trajectories");
        prepare_dir(&tdir)?;
        let recs: Vec<TrajectoryRecord> = (0..mc.n_traj as u64)
            .into_par_iter()
            .map(|id| sde::simulate_trajectory(&model, &w0, &mc.sim, id))
            .collect::<Result<_>>()?;
        for rec in &recs {
            rec.write_csv(
                tdir.join(format!("traj_{:06}.csv", rec.trajectory_id)),
                &mc.sim,
            )?;
        }
    }
    print!("{}", report_summary(&report));
    Ok(if report.any_failed() {
        ExitCode::from(VERDICT_FAILED)
    } else {
        ExitCode::SUCCESS
    })
}

fn report_summary(r: &McReport) -> String {
    let mut s = String::new();
    let c = &r.counts;
    let _ = writeln!(
        s,
        "{} ({} trajectories, seed {})",
        r.label, r.n_traj, r.master_seed
    );
    let _ = writeln!(
        s,
        "stops: exited_ball {}, hit_minimum {}, blow_up {}, horizon {} ({} decaying)",
        c.exited_ball, c.hit_minimum, c.blow_up, c.horizon, c.horizon_decaying
    );
    let _ = writeln!(
        s,
        "stay fraction {} with 95% interval [{}, {}]",
        num(r.p_hat_stay),
        num(r.wilson_interval.0),
        num(r.wilson_interval.1)
    );
    if let Some(floor) = r.theoretical_floor {
        let _ = writeln!(s, "theoretical floor 1 - p = {}", num(floor));
    }
    for v in &r.verdicts {
        let status = match v.status {
            experiments::VerdictStatus::Pass => "pass",
            experiments::VerdictStatus::Fail => "FAIL",
            experiments::VerdictStatus::NotEvaluable => "not evaluable",
        };
        let _ = writeln!(s, "verdict {}: {} ({})", v.claim, status, v.detail);
    }
    s
}

fn two_column(header: &str, rows: impl Iterator<Item = (f64, f64)>) -> String {
    let mut s = format!("# {header}\n");
    for (x, y) in rows {
        let _ = writeln!(s, "{} {}", num(x), num(y));
    }
    s
}

fn write_tail_files(dir: &Path, r: &McReport) -> Result<()> {
    let cps = &r.tail.checkpoints;
    fs::write(
        dir.join("tail_fraction.txt"),
        two_column("t fraction", cps.iter().map(|c| (c.t, c.fraction))),
    )?;
    fs::write(
        dir.join("tail_bound.txt"),
        two_column("t bound", cps.iter().map(|c| (c.t, c.bound))),
    )?;
    Ok(())
}

/// `log f` against `t` for the trajectories at the slope deciles.
fn write_decile_files(
    dir: &Path,
    model: &DeepLinearModel,
    w0: &DVector<f64>,
    r: &McReport,
) -> Result<()> {
    let mut fitted: Vec<(f64, u64)> = r
        .trajectories
        .iter()
        .filter_map(|t| t.decay.slope.map(|s| (s, t.id)))
        .collect();
    if fitted.is_empty() {
        return Ok(());
    }
    fitted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let last = fitted.len() - 1;
    for k in 0..=10usize {
        let id = fitted[(k * last + 5) / 10].1;
        let rec = sde::simulate_trajectory(model, w0, &r.config.sim, id)?;
        let rows = rec
            .times
            .iter()
            .zip(&rec.f_values)
            .filter(|(_, &f)| f > 0.0)
            .map(|(&t, &f)| (t, f.ln()));
        fs::write(
            dir.join(format!("logf_decile_{:03}.txt", k * 10)),
            two_column(&format!("t log_f (trajectory {id})"), rows),
        )?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ProcessStats {
    mean_final_f: f64,
    sd_final_f: f64,
    n_finite: usize,
    stay_frequency: f64,
}

#[derive(Debug, Serialize)]
struct Comparison {
    label: &'static str,
    eta: f64,
    n_steps: u64,
    dt: f64,
    matched_time: f64,
    f_w0: f64,
    n_traj: usize,
    seed: u64,
    sgd: ProcessStats,
    sde: ProcessStats,
}

fn stats(recs: &[TrajectoryRecord]) -> ProcessStats {
    let finite: Vec<f64> = recs
        .iter()
        .map(|r| r.final_f())
        .filter(|f| f.is_finite())
        .collect();
    let n = finite.len();
    let mean = if n > 0 {
        finite.iter().sum::<f64>() / n as f64
    } else {
        f64::NAN
    };
    let sd = if n > 1 {
        (finite.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    ProcessStats {
        mean_final_f: mean,
        sd_final_f: sd,
        n_finite: n,
        stay_frequency: recs.iter().filter(|r| r.stop.stayed()).count() as f64 / recs.len() as f64,
    }
}

fn sgd_compare(a: SgdCompareArgs) -> Result<ExitCode> {
    require_positive("eta", a.eta)?;
    if a.n_steps == 0 || a.n_traj == 0 {
        return Err(invalid("--n-steps and --n-traj must be >= 1"));
    }
    let model = load_model(&a.task)?;
    let init = resolve_init(&a.init, &model)?;
    let w0 = init.weights.flatten();
    let f0 = model.loss(&w0);
    let r = match (a.radius, init.params) {
        (Some(r), _) => require_positive("radius", r)?,
        (None, Some(p)) => p.radius(),
        (None, None) => return Err(invalid("--radius is required with --weights")),
    };
    let f_stop = a.f_stop.unwrap_or_else(|| sde::default_f_stop(f0));
    let dt = a.dt.unwrap_or(a.eta);
    let t_match = a.n_steps as f64 * a.eta;
    let stride = usize::try_from(a.n_steps).unwrap_or(usize::MAX);
    let mut sgd_cfg = SgdConfig::new(a.eta, a.n_steps, a.seed, r, f_stop);
    sgd_cfg.record_stride = stride;
    sgd_cfg.validate()?;
    let mut sde_cfg = SimConfig::new(a.eta, dt, t_match, r, f_stop, a.seed);
    sde_cfg.record_stride = stride.max(1);
    sde_cfg.validate()?;

    let sgd_runs: Vec<TrajectoryRecord> = (0..a.n_traj as u64)
        .into_par_iter()
        .map(|id| sde::sgd_discrete(&model, &w0, &sgd_cfg, id))
        .collect::<Result<_>>()?;
    let sde_runs: Vec<TrajectoryRecord> = (0..a.n_traj as u64)
        .into_par_iter()
        .map(|id| sde::simulate_trajectory(&model, &w0, &sde_cfg, id))
        .collect::<Result<_>>()?;
    let cmp = Comparison {
        label: "qualitative comparison at matched time t = k*eta; no bound on the gap is claimed",
        eta: a.eta,
        n_steps: a.n_steps,
        dt,
        matched_time: t_match,
        f_w0: f0,
        n_traj: a.n_traj,
        seed: a.seed,
        sgd: stats(&sgd_runs),
        sde: stats(&sde_runs),
    };
    let dir: PathBuf = a.dir.out_dir.clone();
    prepare_dir(&dir)?;
    let mut json = serde_json::to_string_pretty(&cmp)?;
    json.push('\n');
    fs::write(dir.join("sgd_compare.json"), json)?;

    println!("{}", cmp.label);
    println!(
        "f(w0) = {}, t = {} ({} SGD steps, SDE dt = {})",
        num(f0),
        num(t_match),
        a.n_steps,
        num(dt)
    );
    println!(
        "{:<10} {:>24} {:>24} {:>10}",
        "process", "mean final f", "sd final f", "stay"
    );
    for (name, s) in [("sgd", &cmp.sgd), ("sde", &cmp.sde)] {
        println!(
            "{:<10} {:>24e} {:>24e} {:>10.4}",
            name, s.mean_final_f, s.sd_final_f, s.stay_frequency
        );
    }
    Ok(ExitCode::SUCCESS)
}
