//! Closed-loop continuation driver.
//!
//! At sample `t_j` the controller holds `U_{j−1}` and the plant state `x_j`.
//! It forms `b_j = −F[U_{j−1}, x_j, t_j]`, solves `a_j(V) = b_j/h` with the
//! configured Krylov method, sets `U_j = U_{j−1} + hV`, applies the first
//! control block and advances the plant by one Euler step. Preconditioners
//! are rebuilt at the first sample on or after each multiple of `t_p` and
//! reused unchanged in between.

use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::horizon::{DecisionVector, Horizon, HorizonError, HorizonGrid};
use crate::jacobian::{
    build_approx_preconditioner, build_exact_jacobian, factorize_preconditioner, ApproxOptions, ContinuationPoint,
    PreconditionerFactorization, PreconditionerKind,
};
use crate::krylov::{self, KrylovConfig, SolverKind};
use crate::linalg::{lu_factorize, norm2, LinalgError};
use crate::model::OcpModel;
use crate::trace::{SimulationTrace, TraceRow};

/// Newton refinement stops once `‖F‖` drops to this level.
pub const NEWTON_TOL: f64 = 1e-8;
pub const NEWTON_MAX_ITERS: usize = 50;
/// Refinement fails if the best iterate is still above this level.
pub const NEWTON_ACCEPT: f64 = 1e-3;
const LINE_SEARCH_HALVINGS: usize = 30;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Horizon(#[from] HorizonError),
    #[error("initial guess did not converge: ‖F‖ = {residual:e} after {iterations} Newton iterations")]
    InitialGuess { residual: f64, iterations: usize },
    #[error("Newton Jacobian is singular: {0}")]
    SingularJacobian(#[from] LinalgError),
    #[error("rollout diverged at t = {t}: {source}")]
    Diverged { t: f64, source: HorizonError },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig {
    /// Sampling period `Δt`.
    pub dt: f64,
    /// Difference step of the matrix-free operator.
    pub h: f64,
    pub steps: usize,
    pub horizon_length: f64,
    pub krylov: KrylovConfig,
    pub precond: PreconditionerKind,
    /// Setup period `t_p`.
    pub precond_period: f64,
    pub coarse: bool,
    pub reduced_precision: bool,
    pub t_final: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            dt: 1.0 / 500.0,
            h: 1e-8,
            steps: 50,
            horizon_length: 1.0,
            krylov: KrylovConfig::default(),
            precond: PreconditionerKind::Approximate,
            precond_period: 0.2,
            coarse: false,
            reduced_precision: false,
            t_final: 10.0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |msg: String| Err(ControllerError::Config(msg));
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad(format!("sampling period must be positive, got {}", self.dt));
        }
        if !(self.h.is_finite() && self.h > 0.0) {
            return bad(format!("difference step must be positive, got {}", self.h));
        }
        if self.steps == 0 {
            return bad("horizon needs at least one step".into());
        }
        if self.krylov.k_max == 0 {
            return bad("k_max must be at least 1".into());
        }
        if !(self.krylov.tol.is_finite() && self.krylov.tol > 0.0) {
            return bad(format!("tolerance must be positive, got {}", self.krylov.tol));
        }
        if !(self.precond_period.is_finite() && self.precond_period >= self.dt) {
            return bad(format!("preconditioner period {} is shorter than Δt", self.precond_period));
        }
        if self.coarse && self.steps % 2 != 0 {
            return bad(format!("coarse setup needs an even step count, got {}", self.steps));
        }
        if !(self.t_final >= 0.0) {
            return bad(format!("final time must be non-negative, got {}", self.t_final));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<HorizonGrid, ControllerError> {
        Ok(HorizonGrid::new(self.steps, self.horizon_length)?)
    }
}

/// Mutable part of a closed-loop run.
#[derive(Debug, Clone)]
pub struct ControllerState {
    /// `U_{j−1}`.
    pub u: DecisionVector,
    /// `x_j`.
    pub x: Vec<f64>,
    /// Sample index `j`; `t_j = t0 + j·Δt`.
    pub step: usize,
    pub t0: f64,
    pub precond: Arc<PreconditionerFactorization>,
    /// Index of the next scheduled setup instant `l·t_p`.
    next_setup: u64,
    pub setup_warnings: Vec<String>,
}

impl ControllerState {
    pub fn t(&self, dt: f64) -> f64 {
        self.t0 + self.step as f64 * dt
    }
}

/// Continuation controller for one model and configuration.
#[derive(Debug)]
pub struct Controller {
    horizon: Horizon,
    cfg: ControllerConfig,
}

impl Controller {
    pub fn new(model: Arc<dyn OcpModel>, cfg: ControllerConfig) -> Result<Self, ControllerError> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        Ok(Self {
            horizon: Horizon::new(model, grid),
            cfg,
        })
    }

    pub fn horizon(&self) -> &Horizon {
        &self.horizon
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    fn diverged(t: f64) -> impl Fn(HorizonError) -> ControllerError {
        move |source| ControllerError::Diverged { t, source }
    }

    /// Damped Newton on `F[U, x0, t0] = 0` with the finite-difference
    /// Jacobian. Returns the best iterate and its residual norm.
    pub fn refine_initial_guess(
        &self,
        x0: &[f64],
        t0: f64,
        guess: DecisionVector,
    ) -> Result<(DecisionVector, f64), ControllerError> {
        let hz = &self.horizon;
        let mut u = guess;
        let mut f = hz.assemble(x0, &u, t0)?;
        let mut norm = norm2(&f);
        let mut iterations = 0;
        while norm > NEWTON_TOL && iterations < NEWTON_MAX_ITERS {
            iterations += 1;
            let cp = ContinuationPoint::new(hz, u.clone(), x0, t0, self.cfg.h)?;
            let jac = build_exact_jacobian(hz, &cp)?;
            let neg_f: Vec<f64> = f.iter().map(|v| -v).collect();
            let step = lu_factorize(&jac)?.solve(&neg_f);
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..LINE_SEARCH_HALVINGS {
                let trial = u.offset(alpha, &step);
                if let Ok(ft) = hz.assemble(x0, &trial, t0) {
                    let nt = norm2(&ft);
                    if nt.is_finite() && nt < norm {
                        accepted = Some((trial, ft, nt));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            match accepted {
                Some((trial, ft, nt)) => {
                    u = trial;
                    f = ft;
                    norm = nt;
                }
                None => break,
            }
        }
        if norm > NEWTON_ACCEPT || !norm.is_finite() {
            return Err(ControllerError::InitialGuess {
                residual: norm,
                iterations,
            });
        }
        Ok((u, norm))
    }

    fn build_preconditioner(&self, cp: &ContinuationPoint, t: f64) -> Result<PreconditionerFactorization, ControllerError> {
        let for_minres = self.cfg.krylov.solver == SolverKind::Minres;
        let matrix = match self.cfg.precond {
            PreconditionerKind::None => return Ok(PreconditionerFactorization::none(t)),
            PreconditionerKind::ExactJacobian => build_exact_jacobian(&self.horizon, cp),
            PreconditionerKind::Approximate => build_approx_preconditioner(
                &self.horizon,
                cp,
                ApproxOptions {
                    coarse: self.cfg.coarse,
                    reduced_precision: self.cfg.reduced_precision,
                },
            ),
        }
        .map_err(Self::diverged(t))?;
        Ok(factorize_preconditioner(
            matrix,
            self.cfg.precond,
            for_minres,
            self.cfg.reduced_precision,
            t,
        ))
    }

    /// Setup index for time `t`: the number of instants `l·t_p ≤ t`.
    fn setups_due(&self, t: f64) -> u64 {
        // tolerate roundoff in t = j·Δt against l·t_p
        let slack = 1e-9 * self.cfg.dt;
        ((t + slack) / self.cfg.precond_period).floor() as u64 + 1
    }

    /// Starts a run from an already refined `U_0`: builds the first
    /// preconditioner at `(U_0, x0, t0)`, records the initial sample and
    /// advances the plant with `u_0`.
    pub fn start(&self, x0: &[f64], t0: f64, u0: DecisionVector) -> Result<(ControllerState, TraceRow), ControllerError> {
        let before = self.horizon.counter().rollouts();
        let cp = ContinuationPoint::new(&self.horizon, u0.clone(), x0, t0, self.cfg.h).map_err(Self::diverged(t0))?;
        let setup_start = self.horizon.counter().rollouts();
        let precond = self.build_preconditioner(&cp, t0)?;
        let setup_rollouts = self.horizon.counter().rollouts() - setup_start;
        let mut setup_warnings = Vec::new();
        if let Some(w) = precond.warning() {
            setup_warnings.push(format!("t = {t0}: {w}"));
        }
        let row = TraceRow {
            t: t0,
            x: x0.to_vec(),
            u: u0.u(0).to_vec(),
            p: u0.p().to_vec(),
            norm_f: norm2(cp.f_base()),
            iterations: 0,
            operator_applications: 0,
            converged: true,
            setup: self.cfg.precond != PreconditionerKind::None,
            setup_rollouts,
            rollouts: self.horizon.counter().rollouts() - before,
            residual_history: Vec::new(),
        };
        let x1 = self.plant_step(x0, t0, &u0);
        let state = ControllerState {
            u: u0,
            x: x1,
            step: 1,
            t0,
            precond: Arc::new(precond),
            next_setup: self.setups_due(t0),
            setup_warnings,
        };
        Ok((state, row))
    }

    /// Refines `guess` and starts the run.
    pub fn initialize(&self, x0: &[f64], t0: f64, guess: DecisionVector) -> Result<(ControllerState, TraceRow), ControllerError> {
        let before = self.horizon.counter().rollouts();
        let (u0, _) = self.refine_initial_guess(x0, t0, guess)?;
        let newton_rollouts = self.horizon.counter().rollouts() - before;
        let (state, mut row) = self.start(x0, t0, u0)?;
        row.rollouts += newton_rollouts;
        Ok((state, row))
    }

    fn plant_step(&self, x: &[f64], t: f64, u: &DecisionVector) -> Vec<f64> {
        let mut dx = vec![0.0; x.len()];
        self.horizon.model().plant_dynamics(t, x, u.u(0), u.p(), &mut dx);
        x.iter().zip(&dx).map(|(xi, di)| xi + di * self.cfg.dt).collect()
    }

    /// One continuation step at `t_j`; returns the sample record.
    pub fn control_step(&self, state: &mut ControllerState) -> Result<TraceRow, ControllerError> {
        let t = state.t(self.cfg.dt);
        let hz = &self.horizon;
        let before = hz.counter().rollouts();
        let cp = ContinuationPoint::new(hz, state.u.clone(), &state.x, t, self.cfg.h).map_err(Self::diverged(t))?;

        let due = self.setups_due(t);
        let mut setup_rollouts = 0;
        let setup = due > state.next_setup && self.cfg.precond != PreconditionerKind::None;
        if due > state.next_setup {
            state.next_setup = due;
        }
        if setup {
            let start = hz.counter().rollouts();
            let precond = self.build_preconditioner(&cp, t)?;
            setup_rollouts = hz.counter().rollouts() - start;
            if let Some(w) = precond.warning() {
                state.setup_warnings.push(format!("t = {t}: {w}"));
            }
            state.precond = Arc::new(precond);
        }

        let h = self.cfg.h;
        let b: Vec<f64> = cp.f_base().iter().map(|v| -v / h).collect();
        let zeros = vec![0.0; b.len()];
        let (v, report) = krylov::solve(
            |dir: &[f64]| cp.apply_operator(hz, dir),
            &b,
            &zeros,
            &self.cfg.krylov,
            state.precond.as_ref(),
        )
        .map_err(Self::diverged(t))?;

        let u_next = state.u.offset(h, &v);
        if !u_next.is_finite() {
            return Err(ControllerError::Diverged {
                t,
                source: HorizonError::NonFiniteState { node: 0 },
            });
        }
        let norm_f = norm2(&hz.assemble(&state.x, &u_next, t).map_err(Self::diverged(t))?);
        let row = TraceRow {
            t,
            x: state.x.clone(),
            u: u_next.u(0).to_vec(),
            p: u_next.p().to_vec(),
            norm_f,
            iterations: report.iterations,
            operator_applications: report.operator_applications,
            converged: report.converged,
            setup,
            setup_rollouts,
            rollouts: hz.counter().rollouts() - before,
            residual_history: report.residual_history,
        };
        state.x = self.plant_step(&state.x, t, &u_next);
        if !state.x.iter().all(|v| v.is_finite()) {
            return Err(ControllerError::Diverged {
                t,
                source: HorizonError::NonFiniteState { node: 0 },
            });
        }
        state.u = u_next;
        state.step += 1;
        Ok(row)
    }

    fn should_continue(&self, state: &ControllerState) -> bool {
        let t = state.t(self.cfg.dt);
        t <= self.cfg.t_final + 1e-9 * self.cfg.dt && !self.horizon.model().finished(state.u.p(), self.cfg.dt)
    }

    /// Runs from a refined `U_0` until `t_final` or until the model reports
    /// that it has finished.
    pub fn run_from(&self, x0: &[f64], t0: f64, u0: DecisionVector) -> Result<RunOutcome, ControllerError> {
        let started = Instant::now();
        let (mut state, row) = self.start(x0, t0, u0)?;
        let mut trace = self.empty_trace();
        trace.rows.push(row);
        while self.should_continue(&state) {
            trace.rows.push(self.control_step(&mut state)?);
        }
        Ok(RunOutcome {
            trace,
            final_state: state,
            elapsed: started.elapsed(),
        })
    }

    /// Refines the guess, then runs the closed loop.
    pub fn run_closed_loop(&self, x0: &[f64], t0: f64, guess: DecisionVector) -> Result<RunOutcome, ControllerError> {
        let (u0, _) = self.refine_initial_guess(x0, t0, guess)?;
        self.run_from(x0, t0, u0)
    }

    fn empty_trace(&self) -> SimulationTrace {
        let model = self.horizon.model();
        SimulationTrace::new(model.state_names(), model.control_names(), model.param_names())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: SimulationTrace,
    pub final_state: ControllerState,
    pub elapsed: Duration,
}
