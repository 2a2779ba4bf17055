//! Continuation Newton-Krylov nonlinear model predictive control.
//!
//! The optimality conditions of a discretized finite-horizon problem are
//! written as `F[U, x, t] = 0` and tracked over time: each sample solves a
//! forward-difference linearization `a(V) = b/h` with GMRES or MINRES. The
//! Krylov solves can be preconditioned by a cheap approximate Jacobian whose
//! columns reuse a single state/costate trajectory for every control and
//! multiplier column.

pub mod controller;
pub mod example;
pub mod horizon;
pub mod jacobian;
pub mod krylov;
pub mod linalg;
pub mod model;
pub mod trace;

pub use controller::{Controller, ControllerConfig, ControllerError, ControllerState, RunOutcome};
pub use example::{make_example_model, MinTimeConstants, MinimumTime, EXAMPLE_MODEL_NAME};
pub use horizon::{DecisionLayout, DecisionVector, EvalCounter, Horizon, HorizonError, HorizonGrid, TrajectoryBundle};
pub use jacobian::{PreconditionerKind, Precision};
pub use krylov::{KrylovConfig, SolveReport, SolverKind};
pub use linalg::{DenseMatrix, LinalgError, LuFactors, SymEig};
pub use model::{FiniteDifference, HamiltonianEval, ModelDims, OcpModel, Stage};
pub use trace::{SimulationTrace, TraceError, TraceRow};
