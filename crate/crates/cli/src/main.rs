mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Convergence certificates and Monte Carlo checks for the Langevin model of
/// SGD on deep linear networks.
///
/// Exit codes: 0 success, 1 invalid input or I/O error, 2 a certificate or
/// Monte Carlo verdict failed.
#[derive(Debug, Parser)]
#[command(name = "sgdlab", version)]
pub struct Cli {
    /// Worker threads for parallel stages (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an empirical task with inputs uniform in a ball.
    MakeTask(MakeTaskArgs),
    /// Compute ball extremes and the convergence certificate.
    Certify(CertifyArgs),
    /// Simulate one Euler–Maruyama trajectory.
    Simulate(SimulateArgs),
    /// Monte Carlo verification of a certificate.
    Mc(McArgs),
    /// Compare discrete SGD with the diffusion at matched time t = k·eta.
    SgdCompare(SgdCompareArgs),
}

#[derive(Debug, Args)]
pub struct OutDir {
    /// Output directory.
    #[arg(long, env = "SGDLAB_OUT_DIR", default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct MakeTaskArgs {
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub k_scale: f64,
    /// Comma-separated literal beta*.
    #[arg(long, value_delimiter = ',', conflicts_with = "beta_seed")]
    pub beta_star: Option<Vec<f64>>,
    /// Seed for a unit-norm Gaussian beta* (default: --seed).
    #[arg(long)]
    pub beta_seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Network depth L stored with the task.
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    /// Hidden width q stored with the task.
    #[arg(long, default_value_t = 2)]
    pub width: usize,
    /// Output file (default: <out-dir>/task.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub dir: OutDir,
}

/// Initial weights: either a weights file or positive-layer initializer
/// parameters.
#[derive(Debug, Args, Clone)]
pub struct InitArgs {
    #[arg(long, conflicts_with_all = ["gamma", "n_floor"])]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Upper end M of the hidden-entry interval [gamma, M].
    #[arg(long = "m-upper")]
    pub m_upper: Option<f64>,
    /// Output-layer floor N.
    #[arg(long)]
    pub n_floor: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    ClosedForm,
    Sampled,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[command(flatten)]
    pub init: InitArgs,
    /// Ball radius (default gamma/2 with initializer parameters).
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long, value_enum, default_value = "closed-form")]
    pub method: Method,
    #[arg(long, default_value_t = 1000)]
    pub n_points: usize,
    #[arg(long, default_value_t = 0)]
    pub sample_seed: u64,
    /// Fixed eta; otherwise eta is searched for --target-p.
    #[arg(long, conflicts_with = "target_p")]
    pub eta: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub target_p: f64,
    #[command(flatten)]
    pub dir: OutDir,
}

#[derive(Debug, Args, Clone)]
pub struct SimArgs {
    #[arg(long)]
    pub eta: Option<f64>,
    /// Time step (default from the certificate: min(1e-4, 0.01/A_min, 0.25/lambda_max(Hf))).
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub t_max: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    /// Absorption tolerance (default 1e-10·(1 + f(w0))).
    #[arg(long)]
    pub f_stop: Option<f64>,
    #[arg(long, default_value_t = sgdlab::sde::DEFAULT_BLOWUP_NORM)]
    pub blowup_norm: f64,
    #[arg(long, default_value_t = 1)]
    pub record_stride: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip the noise root when Tr Σ(w) ≤ f_stop².
    #[arg(long)]
    pub lazy_noise: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[command(flatten)]
    pub init: InitArgs,
    #[command(flatten)]
    pub sim: SimArgs,
    #[arg(long, default_value_t = 0)]
    pub trajectory_id: u64,
    #[command(flatten)]
    pub dir: OutDir,
}

#[derive(Debug, Args)]
pub struct McArgs {
    #[arg(long)]
    pub task: PathBuf,
    /// Certificate from `certify`; supplies w0, r, eta and theta.
    #[arg(long)]
    pub certificate: Option<PathBuf>,
    #[command(flatten)]
    pub init: InitArgs,
    #[command(flatten)]
    pub sim: SimArgs,
    #[arg(long, default_value_t = 200)]
    pub n_traj: usize,
    /// epsilon as a fraction of r.
    #[arg(long, default_value_t = 0.25)]
    pub epsilon_fraction: f64,
    #[arg(long, default_value_t = 5)]
    pub n_checkpoints: usize,
    #[arg(long, default_value_t = 0.1)]
    pub checkpoint_lo: f64,
    #[arg(long, default_value_t = 0.9)]
    pub checkpoint_hi: f64,
    #[arg(long, default_value_t = sgdlab::experiments::DEFAULT_BURN_IN)]
    pub burn_in: f64,
    /// Also write every trajectory as CSV under <out-dir>/trajectories.
    #[arg(long)]
    pub dump_trajectories: bool,
    #[command(flatten)]
    pub dir: OutDir,
}

#[derive(Debug, Args)]
pub struct SgdCompareArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[command(flatten)]
    pub init: InitArgs,
    /// SGD step size, also the diffusion's noise level.
    #[arg(long)]
    pub eta: f64,
    #[arg(long)]
    pub n_steps: u64,
    /// Euler–Maruyama step (default eta, one SDE step per SGD step).
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub f_stop: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub n_traj: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub dir: OutDir,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
