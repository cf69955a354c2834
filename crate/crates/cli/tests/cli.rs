use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nalgebra::DVector;
use sgdlab::certify::Certificate;
use sgdlab::experiments::{load_report, VerdictStatus};
use sgdlab::model::{nn1_initializer, LayeredWeights, NetShape, TaskFile, WeightsFile};
use sgdlab::sde::{read_trajectory_csv, simulate_trajectory, StopReason, StopSummary};
use sgdlab::{DeepLinearModel, LossModel};
use tempfile::TempDir;

fn sgdlab(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgdlab"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SGDLAB_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(
        code(&o),
        0,
        "stdout:\n{}\nstderr:\n{}",
        stdout(&o),
        stderr(&o)
    );
    o
}

/// The desk instance: L = 3, q = 2, d = 2, n = 8.
fn desk_task(dir: &Path) {
    ok(sgdlab(
        dir,
        &[
            "make-task",
            "--d",
            "2",
            "--n",
            "8",
            "--seed",
            "7",
            "--out",
            "task.json",
        ],
    ));
}

const DESK_INIT: [&str; 8] = [
    "--gamma",
    "0.5",
    "--m-upper",
    "1",
    "--n-floor",
    "256",
    "--init-seed",
    "3",
];

fn certify_desk(dir: &Path, out: &str) -> Output {
    let mut args = vec!["certify", "--task", "task.json", "--out-dir", out];
    args.extend(DESK_INIT);
    sgdlab(dir, &args)
}

fn model(dir: &Path) -> DeepLinearModel {
    let (shape, task) = TaskFile::load(dir.join("task.json"))
        .unwrap()
        .into_task()
        .unwrap();
    DeepLinearModel::new(shape, task).unwrap()
}

/// Weights on the zero set: positive upper layers with a fitted first layer.
fn write_minimizer_weights(dir: &Path, m: &DeepLinearModel) -> DVector<f64> {
    let mut w = nn1_initializer(m.shape(), 0.5, 1.0, 2.0, 1).unwrap();
    w.fit_first_layer(m.task().beta_star()).unwrap();
    WeightsFile::from_weights(&w)
        .save(dir.join("min.json"))
        .unwrap();
    w.flatten()
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_owned)
        .collect()
}

#[test]
fn make_task_is_reproducible_and_well_conditioned() {
    let tmp = TempDir::new().unwrap();
    let args = [
        "make-task",
        "--d",
        "1",
        "--n",
        "2",
        "--depth",
        "2",
        "--width",
        "1",
        "--seed",
        "4",
    ];
    ok(sgdlab(tmp.path(), &args));
    let first = fs::read(tmp.path().join("task.json")).unwrap();
    ok(sgdlab(tmp.path(), &args));
    assert_eq!(first, fs::read(tmp.path().join("task.json")).unwrap());

    let file = TaskFile::load(tmp.path().join("task.json")).unwrap();
    assert_eq!(file.to_json().unwrap().as_bytes(), first.as_slice());
    let (shape, task) = file.into_task().unwrap();
    assert_eq!(shape, NetShape::new(2, 1, 1).unwrap());
    assert_eq!(task.n_samples(), 2);
    assert!(task.k() <= 1.0);
    assert!(task.sigma_x_extremes().0 > 0.01);
}

#[test]
fn out_dir_comes_from_the_environment() {
    let tmp = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_sgdlab"))
        .args(["make-task", "--d", "2", "--n", "6"])
        .current_dir(tmp.path())
        .env("SGDLAB_OUT_DIR", "from_env")
        .output()
        .unwrap();
    ok(o);
    assert!(tmp.path().join("from_env/task.json").is_file());
}

#[test]
fn certify_reports_conditions_and_is_idempotent() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    desk_task(dir);
    let o = ok(certify_desk(dir, "a"));
    let text = stdout(&o);
    assert!(text.contains("certified: yes"), "{text}");
    assert!(text.contains("[pass] p < 1"), "{text}");
    ok(certify_desk(dir, "b"));
    for f in ["certificate.json", "weights.json"] {
        assert_eq!(
            fs::read(dir.join("a").join(f)).unwrap(),
            fs::read(dir.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let cert = Certificate::load(dir.join("a/certificate.json")).unwrap();
    assert!(cert.certified && cert.p <= 0.1 && cert.eta > 0.0);
    assert_eq!(cert.recomputed_p(), cert.p);
}

#[test]
fn noiseless_certificate_prints_the_classical_condition() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    desk_task(dir);
    let mut args = vec![
        "certify",
        "--task",
        "task.json",
        "--eta",
        "0",
        "--out-dir",
        "z",
    ];
    args.extend(DESK_INIT);
    let o = sgdlab(dir, &args);
    let cert = Certificate::load(dir.join("z/certificate.json")).unwrap();
    let text = stdout(&o);
    assert!(text.contains("noiseless condition 4f(w0)/r^2"), "{text}");
    assert_eq!(cert.certified, cert.chatterjee_holds());
    assert_eq!(code(&o), if cert.certified { 0 } else { 2 });
}

#[test]
fn uncertified_run_exits_with_verdict_code() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    desk_task(dir);
    let o = sgdlab(
        dir,
        &[
            "certify",
            "--task",
            "task.json",
            "--gamma",
            "0.5",
            "--m-upper",
            "1",
            "--n-floor",
            "0.5",
            "--out-dir",
            "u",
        ],
    );
    assert_eq!(code(&o), 2, "{}", stdout(&o));
    assert!(stdout(&o).contains("certified: no"));
    assert!(
        !Certificate::load(dir.join("u/certificate.json"))
            .unwrap()
            .certified
    );
}

#[test]
fn closed_form_rejects_arbitrary_weights() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    desk_task(dir);
    let m = model(dir);
    let w = LayeredWeights::unflatten(m.shape(), &vec![0.3; m.dim()]).unwrap();
    WeightsFile::from_weights(&w)
        .save(dir.join("w.json"))
        .unwrap();
    let o = sgdlab(
        dir,
        &[
            "certify",
            "--task",
            "task.json",
            "--weights",
            "w.json",
            "--out-dir",
            "bad",
        ],
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("structure"), "{}", stderr(&o));
    assert!(!dir.join("bad").exists());
}

#[test]
fn sampled_a_min_sits_above_the_closed_form_bound() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    desk_task(dir);
    ok(certify_desk(dir, "cf"));
    let mut args = vec![
        "certify",
        "--task",
        "task.json",
        "--method",
        "sampled",
        "--n-points",
        "300",
        "--out-dir",
        "s",
    ];
    args.extend(DESK_INIT);
    let o = ok(sgdlab(dir, &args));
    assert!(stdout(&o).contains("sampled estimates"));
    let cf = Certificate::load(dir.join("cf/certificate.json")).unwrap();
    let s = Certificate::load(dir.join("s/certificate.json")).unwrap();
    assert_eq!(cf.extremes.w0, s.extremes.w0);
    assert!(s.extremes.a_min >= cf.extremes.a_min);
    assert!(s.extremes.b_max <= cf.extremes.b_max);
    assert!(s.extremes.g_max <= cf.extremes.g_max);
}

#[test]
fn invalid_input_exits_one_without_output() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let o = sgdlab(
        dir,
        &["certify", "--task", "missing.json", "--out-dir", "x"],
    );
    assert_eq!(code(&o), 1);
    assert!(!dir.join("x").exists());
    assert_eq!(code(&sgdlab(dir, &["certify"])), 1);
    assert_eq!(code(&sgdlab(dir, &["--help"])), 0);
    desk_task(dir);
    let o = sgdlab(
        dir,
        &[
            "simulate",
            "--task",
            "task.json",
            "--gamma",
            "0.5",
            "--m-upper",
            "1",
            "--n-floor",
            "2",
            "--eta",
            "0.1",
            "--dt",
            "-1",
            "--t-max",
            "1",
            "--out-dir",
            "y",
        ],
    );
    assert_eq!(code(&o), 1);
    assert!(!dir.join("y").exists());
}

#[test]
fn minimizer_start_stops_immediately() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    desk_task(dir);
    let m = model(dir);
    let w0 = write_minimizer_weights(dir, &m);
    assert!(m.loss(&w0) < 1e-20);
    ok(sgdlab(
        dir,
        &[
            "simulate",
            "--task",
            "task.json",
            "--weights",
            "min.json",
            "--radius",
            "0.25",
            "--eta",
            "0.01",
            "--t-max",
            "1",
            "--dt",
            "1e-3",
        ],
    ));
    let text = fs::read_to_string(dir.join("stop.json")).unwrap();
    let summary: StopSummary = serde_json::from_str(&text).unwrap();
    assert_eq!(summary.stop, StopReason::HitMinimum(0.0));
    assert_eq!(summary.steps, 0);
    assert_eq!(data_rows(&dir.join("trajectory.csv")).len(), 2);
}

#[test]
fn simulate_csv_matches_library_and_noiseless_ignores_seed() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    desk_task(dir);
    let base = [
        "simulate",
        "--task",
        "task.json",
        "--gamma",
        "0.5",
        "--m-upper",
        "1",
        "--n-floor",
        "2",
        "--dt",
        "1e-3",
        "--t-max",
        "0.5",
    ];
    let run = |eta: &str, seed: &str, out: &str| {
        let mut a = base.to_vec();
        a.extend(["--eta", eta, "--seed", seed, "--out-dir", out]);
        ok(sgdlab(dir, &a))
    };
    run("0", "1", "n1");
    run("0", "2", "n2");
    assert_eq!(
        data_rows(&dir.join("n1/trajectory.csv")),
        data_rows(&dir.join("n2/trajectory.csv"))
    );

    run("1e-3", "5", "noisy");
    let summary: StopSummary =
        serde_json::from_str(&fs::read_to_string(dir.join("noisy/stop.json")).unwrap()).unwrap();
    let m = model(dir);
    let w0 = nn1_initializer(m.shape(), 0.5, 1.0, 2.0, 0)
        .unwrap()
        .flatten();
    let rec = simulate_trajectory(&m, &w0, &summary.config, 0).unwrap();
    let csv = read_trajectory_csv(dir.join("noisy/trajectory.csv")).unwrap();
    assert_eq!(csv.times, rec.times);
    assert_eq!(csv.f_values, rec.f_values);
    assert_eq!(csv.states, rec.states);
    assert_eq!(
        csv.states.last().unwrap().as_slice(),
        summary.final_state.as_slice()
    );
    assert_eq!(summary.stop, rec.stop);
}

#[test]
fn monte_carlo_outputs_agree_with_the_report() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    desk_task(dir);
    ok(certify_desk(dir, "c"));
    let o = sgdlab(
        dir,
        &[
            "mc",
            "--task",
            "task.json",
            "--certificate",
            "c/certificate.json",
            "--n-traj",
            "1",
            "--seed",
            "9",
            "--out-dir",
            "mc",
        ],
    );
    let report = load_report(dir.join("mc/report.json")).unwrap();
    assert_eq!(report.n_traj, 1);
    assert!(!report.exploratory);
    // one trajectory cannot push the Wilson lower bound past 1 - p
    assert_eq!(
        report.verdict("stay_probability").unwrap().status,
        VerdictStatus::Fail
    );
    assert_eq!(code(&o), if report.any_failed() { 2 } else { 0 });
    let text = stdout(&o);
    for v in &report.verdicts {
        let status = match v.status {
            VerdictStatus::Pass => "pass",
            VerdictStatus::Fail => "FAIL",
            VerdictStatus::NotEvaluable => "not evaluable",
        };
        assert!(
            text.contains(&format!("verdict {}: {status}", v.claim)),
            "{text}"
        );
    }

    let cert = Certificate::load(dir.join("c/certificate.json")).unwrap();
    let ratio = 1.0 / 0.25;
    let bound = fs::read_to_string(dir.join("mc/tail_bound.txt")).unwrap();
    let mut rows = 0;
    for line in bound.lines().filter(|l| !l.starts_with('#')) {
        let mut it = line.split_whitespace().map(|x| x.parse::<f64>().unwrap());
        let (t, b) = (it.next().unwrap(), it.next().unwrap());
        let expected = ratio * (-cert.theta * t / 2.0).exp();
        assert!(
            (b - expected).abs() <= 1e-12 * expected,
            "{b} vs {expected}"
        );
        rows += 1;
    }
    assert_eq!(rows, report.tail.checkpoints.len());
    assert!(dir.join("mc/tail_fraction.txt").is_file());
}

#[test]
fn exploratory_monte_carlo_is_flagged() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    desk_task(dir);
    let o = ok(sgdlab(
        dir,
        &[
            "mc",
            "--task",
            "task.json",
            "--gamma",
            "0.5",
            "--m-upper",
            "1",
            "--n-floor",
            "2",
            "--eta",
            "1e-3",
            "--dt",
            "1e-3",
            "--t-max",
            "0.2",
            "--n-traj",
            "4",
        ],
    ));
    assert!(stderr(&o).contains("exploratory"));
    assert!(load_report(dir.join("report.json")).unwrap().exploratory);
}

fn compare_stats(dir: &Path, out: &str) -> (f64, serde_json::Value) {
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join(out).join("sgd_compare.json")).unwrap())
            .unwrap();
    (v["f_w0"].as_f64().unwrap(), v)
}

#[test]
fn single_sample_sgd_matches_the_diffusion_step() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    ok(sgdlab(
        dir,
        &[
            "make-task",
            "--d",
            "1",
            "--n",
            "1",
            "--depth",
            "2",
            "--width",
            "1",
            "--out",
            "task.json",
        ],
    ));
    ok(sgdlab(
        dir,
        &[
            "sgd-compare",
            "--task",
            "task.json",
            "--gamma",
            "0.5",
            "--m-upper",
            "1",
            "--n-floor",
            "1",
            "--eta",
            "0.01",
            "--n-steps",
            "40",
            "--n-traj",
            "5",
            "--out-dir",
            "o",
        ],
    ));
    let (_, v) = compare_stats(dir, "o");
    assert_eq!(v["sgd"]["mean_final_f"], v["sde"]["mean_final_f"]);
    assert_eq!(v["sgd"]["sd_final_f"], v["sde"]["sd_final_f"]);
}

#[test]
fn sgd_compare_from_minimizer_stays_put() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    desk_task(dir);
    let m = model(dir);
    write_minimizer_weights(dir, &m);
    ok(sgdlab(
        dir,
        &[
            "sgd-compare",
            "--task",
            "task.json",
            "--weights",
            "min.json",
            "--radius",
            "0.25",
            "--eta",
            "0.01",
            "--n-steps",
            "20",
            "--n-traj",
            "3",
            "--out-dir",
            "o",
        ],
    ));
    let (f0, v) = compare_stats(dir, "o");
    for p in ["sgd", "sde"] {
        let mean = v[p]["mean_final_f"].as_f64().unwrap();
        assert!((mean - f0).abs() <= 1e-14 * f0, "{p}: {mean} vs {f0}");
        assert_eq!(v[p]["stay_frequency"].as_f64().unwrap(), 1.0);
    }
}

#[test]
fn small_step_sgd_and_diffusion_both_descend() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    desk_task(dir);
    ok(sgdlab(
        dir,
        &[
            "sgd-compare",
            "--task",
            "task.json",
            "--gamma",
            "0.5",
            "--m-upper",
            "1",
            "--n-floor",
            "2",
            "--eta",
            "1e-3",
            "--n-steps",
            "500",
            "--n-traj",
            "20",
            "--threads",
            "2",
            "--out-dir",
            "o",
        ],
    ));
    let (f0, v) = compare_stats(dir, "o");
    for p in ["sgd", "sde"] {
        let mean = v[p]["mean_final_f"].as_f64().unwrap();
        assert!(mean < f0, "{p}: {mean} vs {f0}");
    }
}
