//! Optimal control problem definition.
//!
//! A model supplies the dynamics `f`, stage cost `L`, terminal cost `φ`, the
//! path equality constraint `C = 0` and the terminal constraint `ψ = 0`,
//! together with the partial derivatives the optimality map needs. Inequality
//! constraints are expected to be rewritten with slack controls by the model
//! author.
//!
//! Partial derivatives default to central finite differences; models with
//! closed-form partials override [`OcpModel::hamiltonian_grad`] and
//! [`OcpModel::terminal_grad`].

use crate::linalg::dot;

/// Central-difference step used by the finite-difference partials.
pub const FD_STEP: f64 = 1e-6;

/// Dimensions of a model's variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub state: usize,
    /// Controls, including slack variables.
    pub control: usize,
    /// Path constraint components.
    pub path: usize,
    /// Terminal constraint components.
    pub terminal: usize,
    pub param: usize,
}

/// Point on the prediction horizon: `t` is the sampling instant the horizon
/// starts from and `tau` the horizon coordinate of the node.
///
/// How `tau` maps to physical time is up to the model. Models on a physical
/// horizon use `t + tau`; the minimum-time example uses `t + tau * p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub t: f64,
    pub tau: f64,
}

impl Stage {
    pub fn new(t: f64, tau: f64) -> Self {
        Self { t, tau }
    }
}

/// Partial derivatives of the Hamiltonian `H = L + λᵀf + μᵀC`.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianGrad {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub p: Vec<f64>,
}

/// Hamiltonian value together with its partials.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianEval {
    pub value: f64,
    pub grad_x: Vec<f64>,
    pub grad_u: Vec<f64>,
    pub grad_p: Vec<f64>,
}

/// Gradient of the terminal Lagrangian `φ + νᵀψ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalGrad {
    /// `∂φᵀ/∂x + ∂ψᵀ/∂x·ν`, the terminal costate.
    pub x: Vec<f64>,
    /// `∂φᵀ/∂p + ∂ψᵀ/∂p·ν`.
    pub p: Vec<f64>,
}

/// A finite-horizon optimal control problem.
///
/// Implementations must be pure: the controller evaluates them from several
/// places and expects identical results for identical arguments.
pub trait OcpModel: Send + Sync {
    fn dims(&self) -> ModelDims;

    /// Horizon right-hand side `f(τ, x, u, p)`.
    fn dynamics(&self, stage: Stage, x: &[f64], u: &[f64], p: &[f64], out: &mut [f64]);

    fn stage_cost(&self, stage: Stage, x: &[f64], u: &[f64], p: &[f64]) -> f64;

    fn path_constraint(&self, stage: Stage, x: &[f64], u: &[f64], p: &[f64], out: &mut [f64]);

    fn terminal_cost(&self, x: &[f64], p: &[f64]) -> f64;

    fn terminal_constraint(&self, x: &[f64], p: &[f64], out: &mut [f64]);

    fn hamiltonian_grad(
        &self,
        stage: Stage,
        x: &[f64],
        lambda: &[f64],
        u: &[f64],
        mu: &[f64],
        p: &[f64],
    ) -> HamiltonianGrad {
        fd_hamiltonian_grad(self, stage, x, lambda, u, mu, p)
    }

    fn terminal_grad(&self, x: &[f64], p: &[f64], nu: &[f64]) -> TerminalGrad {
        fd_terminal_grad(self, x, p, nu)
    }

    /// Physical right-hand side used to advance the simulated plant.
    fn plant_dynamics(&self, t: f64, x: &[f64], u: &[f64], p: &[f64], out: &mut [f64]) {
        self.dynamics(Stage::new(t, 0.0), x, u, p, out);
    }

    /// Whether a closed-loop run should stop at the current parameter value.
    fn finished(&self, _p: &[f64], _dt: f64) -> bool {
        false
    }

    fn state_names(&self) -> Vec<String> {
        (0..self.dims().state).map(|i| format!("x{i}")).collect()
    }

    fn control_names(&self) -> Vec<String> {
        (0..self.dims().control).map(|i| format!("u{i}")).collect()
    }

    fn param_names(&self) -> Vec<String> {
        (0..self.dims().param).map(|i| format!("p{i}")).collect()
    }
}

/// Evaluates `H = L + λᵀf + μᵀC` and its partials.
pub fn hamiltonian<M: OcpModel + ?Sized>(
    model: &M,
    stage: Stage,
    x: &[f64],
    lambda: &[f64],
    u: &[f64],
    mu: &[f64],
    p: &[f64],
) -> HamiltonianEval {
    let value = hamiltonian_value(model, stage, x, lambda, u, mu, p);
    let grad = model.hamiltonian_grad(stage, x, lambda, u, mu, p);
    HamiltonianEval {
        value,
        grad_x: grad.x,
        grad_u: grad.u,
        grad_p: grad.p,
    }
}

pub fn hamiltonian_value<M: OcpModel + ?Sized>(
    model: &M,
    stage: Stage,
    x: &[f64],
    lambda: &[f64],
    u: &[f64],
    mu: &[f64],
    p: &[f64],
) -> f64 {
    let dims = model.dims();
    let mut f = vec![0.0; dims.state];
    let mut c = vec![0.0; dims.path];
    model.dynamics(stage, x, u, p, &mut f);
    model.path_constraint(stage, x, u, p, &mut c);
    model.stage_cost(stage, x, u, p) + dot(lambda, &f) + dot(mu, &c)
}

fn central_difference(point: &[f64], mut eval: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = point.to_vec();
    (0..point.len())
        .map(|k| {
            work[k] = point[k] + FD_STEP;
            let plus = eval(&work);
            work[k] = point[k] - FD_STEP;
            let minus = eval(&work);
            work[k] = point[k];
            (plus - minus) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Hamiltonian partials by central differences of [`hamiltonian_value`].
pub fn fd_hamiltonian_grad<M: OcpModel + ?Sized>(
    model: &M,
    stage: Stage,
    x: &[f64],
    lambda: &[f64],
    u: &[f64],
    mu: &[f64],
    p: &[f64],
) -> HamiltonianGrad {
    HamiltonianGrad {
        x: central_difference(x, |x| hamiltonian_value(model, stage, x, lambda, u, mu, p)),
        u: central_difference(u, |u| hamiltonian_value(model, stage, x, lambda, u, mu, p)),
        p: central_difference(p, |p| hamiltonian_value(model, stage, x, lambda, u, mu, p)),
    }
}

fn terminal_value<M: OcpModel + ?Sized>(model: &M, x: &[f64], p: &[f64], nu: &[f64]) -> f64 {
    let mut psi = vec![0.0; model.dims().terminal];
    model.terminal_constraint(x, p, &mut psi);
    model.terminal_cost(x, p) + dot(nu, &psi)
}

/// Terminal partials by central differences of `φ + νᵀψ`.
pub fn fd_terminal_grad<M: OcpModel + ?Sized>(model: &M, x: &[f64], p: &[f64], nu: &[f64]) -> TerminalGrad {
    TerminalGrad {
        x: central_difference(x, |x| terminal_value(model, x, p, nu)),
        p: central_difference(p, |p| terminal_value(model, x, p, nu)),
    }
}

/// Adapter that forwards every value evaluation to the wrapped model but
/// computes all partials by central differences.
#[derive(Debug, Clone)]
pub struct FiniteDifference<M>(pub M);

impl<M: OcpModel> OcpModel for FiniteDifference<M> {
    fn dims(&self) -> ModelDims {
        self.0.dims()
    }

    fn dynamics(&self, stage: Stage, x: &[f64], u: &[f64], p: &[f64], out: &mut [f64]) {
        self.0.dynamics(stage, x, u, p, out)
    }

    fn stage_cost(&self, stage: Stage, x: &[f64], u: &[f64], p: &[f64]) -> f64 {
        self.0.stage_cost(stage, x, u, p)
    }

    fn path_constraint(&self, stage: Stage, x: &[f64], u: &[f64], p: &[f64], out: &mut [f64]) {
        self.0.path_constraint(stage, x, u, p, out)
    }

    fn terminal_cost(&self, x: &[f64], p: &[f64]) -> f64 {
        self.0.terminal_cost(x, p)
    }

    fn terminal_constraint(&self, x: &[f64], p: &[f64], out: &mut [f64]) {
        self.0.terminal_constraint(x, p, out)
    }

    fn plant_dynamics(&self, t: f64, x: &[f64], u: &[f64], p: &[f64], out: &mut [f64]) {
        self.0.plant_dynamics(t, x, u, p, out)
    }

    fn finished(&self, p: &[f64], dt: f64) -> bool {
        self.0.finished(p, dt)
    }

    fn state_names(&self) -> Vec<String> {
        self.0.state_names()
    }

    fn control_names(&self) -> Vec<String> {
        self.0.control_names()
    }

    fn param_names(&self) -> Vec<String> {
        self.0.param_names()
    }
}
