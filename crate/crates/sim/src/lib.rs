//! Scenario registry, command-line configuration and the paired
//! preconditioning comparison behind the `cnmpc-sim` binary.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, ValueEnum};
use cnmpc::jacobian::{build_exact_jacobian, ContinuationPoint};
use cnmpc::{
    Controller, ControllerConfig, ControllerError, DecisionVector, Horizon, HorizonError, KrylovConfig, MinimumTime,
    OcpModel, PreconditionerKind, RunOutcome, SimulationTrace, SolverKind, TraceError, EXAMPLE_MODEL_NAME,
};
use thiserror::Error;

/// Time-to-go used by the example's warm-start guess.
pub const EXAMPLE_GUESS_TIME_TO_GO: f64 = 1.7;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown model {0:?} (available: {EXAMPLE_MODEL_NAME})")]
    UnknownModel(String),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("failed to write {path}: {source}")]
    Output { path: PathBuf, source: TraceError },
}

impl SimError {
    /// Process exit code: 2 for configuration problems, 3 for numerical
    /// failures and 1 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            SimError::UnknownModel(_) | SimError::Controller(ControllerError::Config(_)) => 2,
            SimError::Controller(_) => 3,
            SimError::Output { .. } => 1,
        }
    }
}

type GuessFn = dyn Fn(&Horizon, &[f64], f64) -> Result<DecisionVector, HorizonError> + Send + Sync;

/// A model together with its initial state and initial-guess rule.
pub struct Scenario {
    pub name: &'static str,
    pub model: Arc<dyn OcpModel>,
    pub x0: Vec<f64>,
    pub t0: f64,
    guess: Box<GuessFn>,
}

impl Scenario {
    pub fn guess(&self, horizon: &Horizon) -> Result<DecisionVector, HorizonError> {
        (self.guess)(horizon, &self.x0, self.t0)
    }
}

impl fmt::Debug for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scenario").field("name", &self.name).field("x0", &self.x0).field("t0", &self.t0).finish()
    }
}

pub fn scenario(name: &str) -> Result<Scenario, SimError> {
    match name {
        EXAMPLE_MODEL_NAME => {
            let model = MinimumTime::default();
            let guess_model = model.clone();
            Ok(Scenario {
                name: EXAMPLE_MODEL_NAME,
                model: Arc::new(model),
                x0: vec![0.0, 0.0],
                t0: 0.0,
                guess: Box::new(move |hz, x0, t0| guess_model.warm_start(hz, x0, t0, EXAMPLE_GUESS_TIME_TO_GO)),
            })
        }
        other => Err(SimError::UnknownModel(other.to_string())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    Gmres,
    Minres,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecondArg {
    None,
    Exact,
    Approx,
}

#[derive(Debug, Clone, Parser)]
#[command(name = "cnmpc-sim", version, about = "Closed-loop continuation NMPC simulation")]
pub struct Cli {
    #[arg(long, default_value = EXAMPLE_MODEL_NAME)]
    pub model: String,
    /// Horizon steps.
    #[arg(long = "N", default_value_t = 50)]
    pub n: usize,
    /// Sampling period.
    #[arg(long, default_value_t = 0.002)]
    pub dt: f64,
    /// Difference step of the operator.
    #[arg(long, default_value_t = 1e-8)]
    pub h: f64,
    #[arg(long, default_value_t = 20)]
    pub kmax: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, value_enum, default_value_t = SolverArg::Gmres)]
    pub solver: SolverArg,
    #[arg(long, value_enum, default_value_t = PrecondArg::Approx)]
    pub precond: PrecondArg,
    /// Preconditioner setup period.
    #[arg(long, default_value_t = 0.2)]
    pub tp: f64,
    /// Horizon length before scaling by the time-to-go parameter.
    #[arg(long, default_value_t = 1.0)]
    pub horizon: f64,
    /// Build preconditioner trajectories on the 2Δτ grid.
    #[arg(long)]
    pub coarse: bool,
    /// Round the preconditioner and its factors to single precision.
    #[arg(long)]
    pub low_precision: bool,
    /// Simulation end time; runs also stop when the model reports completion.
    #[arg(long, default_value_t = 10.0)]
    pub t_final: f64,
    /// CSV output path. In compare mode the preconditioner kind is inserted before the extension.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reserved; runs are deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run the preconditioned and unpreconditioned pair.
    #[arg(long)]
    pub compare: bool,
    /// Also write a gnuplot script next to each CSV.
    #[arg(long, requires = "out")]
    pub gnuplot: bool,
}

impl Cli {
    /// Builds and validates the controller configuration.
    pub fn config(&self) -> Result<(String, ControllerConfig), SimError> {
        let cfg = ControllerConfig {
            dt: self.dt,
            h: self.h,
            steps: self.n,
            horizon_length: self.horizon,
            krylov: KrylovConfig {
                k_max: self.kmax,
                tol: self.tol,
                solver: match self.solver {
                    SolverArg::Gmres => SolverKind::Gmres,
                    SolverArg::Minres => SolverKind::Minres,
                },
            },
            precond: match self.precond {
                PrecondArg::None => PreconditionerKind::None,
                PrecondArg::Exact => PreconditionerKind::ExactJacobian,
                PrecondArg::Approx => PreconditionerKind::Approximate,
            },
            precond_period: self.tp,
            coarse: self.coarse,
            reduced_precision: self.low_precision,
            t_final: self.t_final,
        };
        cfg.validate()?;
        scenario(&self.model)?;
        Ok((self.model.clone(), cfg))
    }
}

/// Iteration statistics of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub precond: PreconditionerKind,
    pub solver: SolverKind,
    pub steps: usize,
    pub mean_iterations: f64,
    pub max_iterations: usize,
    pub capped_steps: usize,
    pub max_operator_applications: usize,
    pub setup_events: usize,
    /// Rollouts of each setup event, in order.
    pub setup_rollouts: Vec<u64>,
    pub total_rollouts: u64,
    pub total_coarse_rollouts: u64,
    pub final_state: Vec<f64>,
    pub final_time: f64,
    pub max_norm_f: f64,
    pub wall_per_step: Duration,
}

impl RunSummary {
    pub fn from_outcome(out: &RunOutcome, ctrl: &Controller) -> Self {
        let steps = out.trace.steps();
        let n = steps.len();
        let iters: usize = steps.iter().map(|r| r.iterations).sum();
        let last = out.trace.rows.last();
        Self {
            precond: ctrl.config().precond,
            solver: ctrl.config().krylov.solver,
            steps: n,
            mean_iterations: if n == 0 { 0.0 } else { iters as f64 / n as f64 },
            max_iterations: steps.iter().map(|r| r.iterations).max().unwrap_or(0),
            capped_steps: steps.iter().filter(|r| !r.converged).count(),
            max_operator_applications: steps.iter().map(|r| r.operator_applications).max().unwrap_or(0),
            setup_events: out.trace.rows.iter().filter(|r| r.setup).count(),
            setup_rollouts: out.trace.rows.iter().filter(|r| r.setup).map(|r| r.setup_rollouts).collect(),
            total_rollouts: ctrl.horizon().counter().rollouts(),
            total_coarse_rollouts: ctrl.horizon().counter().coarse_rollouts(),
            final_state: last.map(|r| r.x.clone()).unwrap_or_default(),
            final_time: last.map(|r| r.t).unwrap_or(0.0),
            max_norm_f: steps.iter().map(|r| r.norm_f).fold(0.0, f64::max),
            wall_per_step: if n == 0 { Duration::ZERO } else { out.elapsed / n as u32 },
        }
    }
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} / precond {}", self.solver, self.precond)?;
        writeln!(f, "  steps              {}", self.steps)?;
        writeln!(f, "  final t            {:.4}", self.final_time)?;
        writeln!(f, "  final state        {:?}", self.final_state)?;
        writeln!(f, "  mean iterations    {:.3}", self.mean_iterations)?;
        writeln!(f, "  max iterations     {} ({} steps at the cap)", self.max_iterations, self.capped_steps)?;
        writeln!(f, "  max ‖F‖            {:.3e}", self.max_norm_f)?;
        writeln!(f, "  setup events       {} ({:?} rollouts each)", self.setup_events, dedup(&self.setup_rollouts))?;
        writeln!(
            f,
            "  rollouts           {} full, {} coarse",
            self.total_rollouts, self.total_coarse_rollouts
        )?;
        write!(f, "  wall per step      {:?}", self.wall_per_step)
    }
}

fn dedup(v: &[u64]) -> Vec<u64> {
    let mut out = v.to_vec();
    out.sort_unstable();
    out.dedup();
    out
}

/// Result of a single configured run.
pub struct SingleRun {
    pub trace: SimulationTrace,
    pub summary: RunSummary,
}

pub fn run_single(model: &str, cfg: ControllerConfig) -> Result<SingleRun, SimError> {
    let sc = scenario(model)?;
    let ctrl = Controller::new(Arc::clone(&sc.model), cfg)?;
    let guess = sc.guess(ctrl.horizon()).map_err(ControllerError::from)?;
    let out = ctrl.run_closed_loop(&sc.x0, sc.t0, guess)?;
    let summary = RunSummary::from_outcome(&out, &ctrl);
    Ok(SingleRun { trace: out.trace, summary })
}

/// Paired runs with and without preconditioning from a shared `U_0`.
#[derive(Debug, Clone)]
pub struct ComparisonSummary {
    pub preconditioned: RunSummary,
    pub unpreconditioned: RunSummary,
    /// Steps present in both runs.
    pub common_steps: usize,
    /// Unpreconditioned mean ÷ preconditioned mean over the common steps.
    pub reduction_factor: f64,
    /// Steps where both runs converged or both hit the cap.
    pub matched_steps: usize,
    /// The same ratio restricted to the matched steps.
    pub matched_reduction_factor: Option<f64>,
    /// Rollouts of one exact-Jacobian build at the initial point.
    pub exact_setup_rollouts: u64,
}

impl fmt::Display for ComparisonSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.preconditioned)?;
        writeln!(f, "{}", self.unpreconditioned)?;
        writeln!(f, "comparison over {} common steps", self.common_steps)?;
        writeln!(f, "  reduction factor   {:.3}", self.reduction_factor)?;
        match self.matched_reduction_factor {
            Some(r) => writeln!(f, "  matched steps      {} (factor {:.3})", self.matched_steps, r)?,
            None => writeln!(f, "  matched steps      0")?,
        }
        write!(
            f,
            "  setup cost         {:?} rollouts ({}) vs {} (exact)",
            dedup(&self.preconditioned.setup_rollouts),
            self.preconditioned.precond,
            self.exact_setup_rollouts
        )
    }
}

pub struct Comparison {
    pub preconditioned: SimulationTrace,
    pub unpreconditioned: SimulationTrace,
    pub summary: ComparisonSummary,
}

fn mean_iterations(trace: &SimulationTrace, idx: &[usize]) -> f64 {
    idx.iter().map(|&i| trace.steps()[i].iterations as f64).sum::<f64>() / idx.len() as f64
}

/// Runs `cfg` (approximate preconditioning if `cfg` asks for none) and the
/// same scenario without preconditioning. Both runs start from one refined
/// `U_0` and execute concurrently.
pub fn run_comparison(model: &str, cfg: ControllerConfig) -> Result<Comparison, SimError> {
    let sc = scenario(model)?;
    let pre_cfg = ControllerConfig {
        precond: match cfg.precond {
            PreconditionerKind::None => PreconditionerKind::Approximate,
            k => k,
        },
        ..cfg
    };
    let none_cfg = ControllerConfig {
        precond: PreconditionerKind::None,
        ..cfg
    };
    let pre = Controller::new(Arc::clone(&sc.model), pre_cfg)?;
    let none = Controller::new(Arc::clone(&sc.model), none_cfg)?;

    let init = Controller::new(Arc::clone(&sc.model), none_cfg)?;
    let guess = sc.guess(init.horizon()).map_err(ControllerError::from)?;
    let (u0, _) = init.refine_initial_guess(&sc.x0, sc.t0, guess)?;
    let exact_setup_rollouts = {
        let hz = init.horizon();
        let cp = ContinuationPoint::new(hz, u0.clone(), &sc.x0, sc.t0, cfg.h).map_err(ControllerError::from)?;
        let before = hz.counter().rollouts();
        build_exact_jacobian(hz, &cp).map_err(ControllerError::from)?;
        hz.counter().rollouts() - before
    };

    let (pre_out, none_out) = std::thread::scope(|s| {
        let a = s.spawn(|| pre.run_from(&sc.x0, sc.t0, u0.clone()));
        let b = none.run_from(&sc.x0, sc.t0, u0.clone());
        (a.join().expect("preconditioned run panicked"), b)
    });
    let (pre_out, none_out) = (pre_out?, none_out?);

    let common_steps = pre_out.trace.steps().len().min(none_out.trace.steps().len());
    let all: Vec<usize> = (0..common_steps).collect();
    let matched: Vec<usize> = all
        .iter()
        .copied()
        .filter(|&i| pre_out.trace.steps()[i].converged == none_out.trace.steps()[i].converged)
        .collect();
    let ratio = |idx: &[usize]| mean_iterations(&none_out.trace, idx) / mean_iterations(&pre_out.trace, idx);
    let summary = ComparisonSummary {
        preconditioned: RunSummary::from_outcome(&pre_out, &pre),
        unpreconditioned: RunSummary::from_outcome(&none_out, &none),
        common_steps,
        reduction_factor: if common_steps == 0 { f64::NAN } else { ratio(&all) },
        matched_steps: matched.len(),
        matched_reduction_factor: (!matched.is_empty()).then(|| ratio(&matched)),
        exact_setup_rollouts,
    };
    Ok(Comparison {
        preconditioned: pre_out.trace,
        unpreconditioned: none_out.trace,
        summary,
    })
}

/// `run.csv` with tag `approx` becomes `run.approx.csv`.
pub fn tagged_path(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{tag}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{tag}"),
    };
    path.with_file_name(name)
}

/// Writes the CSV and, if asked, a gnuplot script with the `.gp` extension.
pub fn emit_trace(trace: &SimulationTrace, path: &Path, gnuplot: bool) -> Result<(), SimError> {
    let wrap = |source| SimError::Output {
        path: path.to_path_buf(),
        source,
    };
    trace.write_csv(path).map_err(wrap)?;
    if gnuplot {
        let script = path.with_extension("gp");
        let csv_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        std::fs::write(&script, trace.gnuplot_script(&csv_name)).map_err(|e| SimError::Output {
            path: script.clone(),
            source: e.into(),
        })?;
    }
    Ok(())
}
