//! Horizon discretization and the optimality map `F[U, x, t]`.
//!
//! States are rolled forward with explicit Euler, costates backward with the
//! Hamiltonian state partial evaluated at the one-step-ahead costate, and the
//! stationarity rows are stacked in the same order as the unknown vector
//! `U = [u_0..u_{N−1}, μ_0..μ_{N−1}, ν, p]`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::model::{ModelDims, OcpModel, Stage};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HorizonError {
    #[error("horizon needs at least one step")]
    NoSteps,
    #[error("horizon length must be positive and finite, got {0}")]
    BadLength(f64),
    #[error("coarse trajectories need an even step count, got {0}")]
    OddSteps(usize),
    #[error("state rollout diverged at node {node}")]
    NonFiniteState { node: usize },
    #[error("costate rollout diverged at node {node}")]
    NonFiniteCostate { node: usize },
    #[error("decision vector has length {got}, layout expects {expected}")]
    LayoutMismatch { expected: usize, got: usize },
}

/// Uniform grid `τ_i = i·Δτ`, `i = 0..=N`, over a horizon of length `T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonGrid {
    steps: usize,
    length: f64,
}

impl HorizonGrid {
    pub fn new(steps: usize, length: f64) -> Result<Self, HorizonError> {
        if steps == 0 {
            return Err(HorizonError::NoSteps);
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(HorizonError::BadLength(length));
        }
        Ok(Self { steps, length })
    }

    /// Unit horizon, `Δτ = 1/N`.
    pub fn unit(steps: usize) -> Result<Self, HorizonError> {
        Self::new(steps, 1.0)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn dtau(&self) -> f64 {
        self.length / self.steps as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        i as f64 * self.dtau()
    }
}

/// Block layout of the unknown vector `U`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecisionLayout {
    pub steps: usize,
    pub dims: ModelDims,
}

impl DecisionLayout {
    pub fn new(steps: usize, dims: ModelDims) -> Self {
        Self { steps, dims }
    }

    /// Total length `m = N·(dim_u + dim_c) + dim_ψ + dim_p`.
    pub fn len(&self) -> usize {
        self.steps * (self.dims.control + self.dims.path) + self.dims.terminal + self.dims.param
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of trailing entries (`ν` and `p`) whose columns need fresh
    /// trajectories, `l = dim_ψ + dim_p`.
    pub fn sensitive(&self) -> usize {
        self.dims.terminal + self.dims.param
    }

    pub fn u_offset(&self, i: usize) -> usize {
        i * self.dims.control
    }

    pub fn mu_offset(&self, i: usize) -> usize {
        self.steps * self.dims.control + i * self.dims.path
    }

    pub fn nu_offset(&self) -> usize {
        self.steps * (self.dims.control + self.dims.path)
    }

    pub fn p_offset(&self) -> usize {
        self.nu_offset() + self.dims.terminal
    }
}

/// The stacked unknown `U` with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionVector {
    layout: DecisionLayout,
    data: Vec<f64>,
}

impl DecisionVector {
    pub fn zeros(layout: DecisionLayout) -> Self {
        Self {
            layout,
            data: vec![0.0; layout.len()],
        }
    }

    pub fn from_vec(layout: DecisionLayout, data: Vec<f64>) -> Result<Self, HorizonError> {
        if data.len() != layout.len() {
            return Err(HorizonError::LayoutMismatch {
                expected: layout.len(),
                got: data.len(),
            });
        }
        Ok(Self { layout, data })
    }

    pub fn layout(&self) -> DecisionLayout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn u(&self, i: usize) -> &[f64] {
        let o = self.layout.u_offset(i);
        &self.data[o..o + self.layout.dims.control]
    }

    pub fn u_mut(&mut self, i: usize) -> &mut [f64] {
        let o = self.layout.u_offset(i);
        &mut self.data[o..o + self.layout.dims.control]
    }

    pub fn mu(&self, i: usize) -> &[f64] {
        let o = self.layout.mu_offset(i);
        &self.data[o..o + self.layout.dims.path]
    }

    pub fn mu_mut(&mut self, i: usize) -> &mut [f64] {
        let o = self.layout.mu_offset(i);
        &mut self.data[o..o + self.layout.dims.path]
    }

    pub fn nu(&self) -> &[f64] {
        let o = self.layout.nu_offset();
        &self.data[o..o + self.layout.dims.terminal]
    }

    pub fn nu_mut(&mut self) -> &mut [f64] {
        let o = self.layout.nu_offset();
        &mut self.data[o..o + self.layout.dims.terminal]
    }

    pub fn p(&self) -> &[f64] {
        &self.data[self.layout.p_offset()..]
    }

    pub fn p_mut(&mut self) -> &mut [f64] {
        let o = self.layout.p_offset();
        &mut self.data[o..]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self + alpha * v`
    pub fn offset(&self, alpha: f64, v: &[f64]) -> Self {
        assert_eq!(v.len(), self.data.len());
        let data = self.data.iter().zip(v).map(|(u, d)| u + alpha * d).collect();
        Self {
            layout: self.layout,
            data,
        }
    }
}

/// States `x_0..x_N` and costates `λ_0..λ_N`, stored node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    dim_x: usize,
    states: Vec<f64>,
    costates: Vec<f64>,
}

impl TrajectoryBundle {
    pub fn new(dim_x: usize, states: Vec<f64>, costates: Vec<f64>) -> Self {
        assert_eq!(states.len(), costates.len());
        assert_eq!(states.len() % dim_x.max(1), 0);
        Self {
            dim_x,
            states,
            costates,
        }
    }

    /// Number of nodes, `N + 1`.
    pub fn nodes(&self) -> usize {
        if self.dim_x == 0 {
            0
        } else {
            self.states.len() / self.dim_x
        }
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim_x..(i + 1) * self.dim_x]
    }

    pub fn costate(&self, i: usize) -> &[f64] {
        &self.costates[i * self.dim_x..(i + 1) * self.dim_x]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn costates(&self) -> &[f64] {
        &self.costates
    }
}

/// Counts rollout-bearing evaluations of the optimality map.
#[derive(Debug, Default)]
pub struct EvalCounter {
    full: AtomicU64,
    coarse: AtomicU64,
}

impl EvalCounter {
    pub fn rollouts(&self) -> u64 {
        self.full.load(Ordering::Relaxed)
    }

    /// Rollouts on the doubled step, each at half the cost of a full one.
    pub fn coarse_rollouts(&self) -> u64 {
        self.coarse.load(Ordering::Relaxed)
    }

    fn bump(&self) {
        self.full.fetch_add(1, Ordering::Relaxed);
    }

    fn bump_coarse(&self) {
        self.coarse.fetch_add(1, Ordering::Relaxed);
    }
}

/// A model on a discretized horizon, with an evaluation counter.
pub struct Horizon {
    model: Arc<dyn OcpModel>,
    grid: HorizonGrid,
    layout: DecisionLayout,
    counter: EvalCounter,
}

impl std::fmt::Debug for Horizon {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Horizon")
            .field("grid", &self.grid)
            .field("layout", &self.layout)
            .field("counter", &self.counter)
            .finish_non_exhaustive()
    }
}

impl Horizon {
    pub fn new(model: Arc<dyn OcpModel>, grid: HorizonGrid) -> Self {
        let layout = DecisionLayout::new(grid.steps(), model.dims());
        Self {
            model,
            grid,
            layout,
            counter: EvalCounter::default(),
        }
    }

    pub fn model(&self) -> &dyn OcpModel {
        self.model.as_ref()
    }

    pub fn model_arc(&self) -> Arc<dyn OcpModel> {
        Arc::clone(&self.model)
    }

    pub fn grid(&self) -> &HorizonGrid {
        &self.grid
    }

    pub fn layout(&self) -> DecisionLayout {
        self.layout
    }

    pub fn counter(&self) -> &EvalCounter {
        &self.counter
    }

    fn check(&self, u: &DecisionVector) -> Result<(), HorizonError> {
        if u.len() != self.layout.len() {
            return Err(HorizonError::LayoutMismatch {
                expected: self.layout.len(),
                got: u.len(),
            });
        }
        Ok(())
    }

    fn stage(&self, t: f64, i: usize) -> Stage {
        Stage::new(t, self.grid.node(i))
    }

    /// Explicit Euler rollout `x_{i+1} = x_i + f(τ_i, x_i, u_i, p)·Δτ`.
    pub fn forward_states(&self, x0: &[f64], u: &DecisionVector, t: f64) -> Result<Vec<f64>, HorizonError> {
        self.check(u)?;
        self.rollout_states(x0, u, t, 1)
    }

    /// Backward recursion `λ_i = λ_{i+1} + ∂Hᵀ/∂x(τ_i, x_i, λ_{i+1}, u_i, μ_i, p)·Δτ`
    /// from `λ_N = ∂φᵀ/∂x + ∂ψᵀ/∂x·ν`.
    pub fn backward_costates(&self, states: &[f64], u: &DecisionVector, t: f64) -> Result<Vec<f64>, HorizonError> {
        self.check(u)?;
        self.rollout_costates(states, u, t, 1)
    }

    /// Rollout with stride `stride`: nodes that are multiples of the stride
    /// are computed with step `stride·Δτ`, the rest are left at zero.
    fn rollout_states(&self, x0: &[f64], u: &DecisionVector, t: f64, stride: usize) -> Result<Vec<f64>, HorizonError> {
        let nx = self.layout.dims.state;
        let n = self.grid.steps();
        let h = stride as f64 * self.grid.dtau();
        let p = u.p();
        let mut states = vec![0.0; (n + 1) * nx];
        states[..nx].copy_from_slice(x0);
        if !x0.iter().all(|v| v.is_finite()) {
            return Err(HorizonError::NonFiniteState { node: 0 });
        }
        let mut f = vec![0.0; nx];
        for i in (0..n).step_by(stride) {
            let next = i + stride;
            let (head, tail) = states.split_at_mut(next * nx);
            let x = &head[i * nx..(i + 1) * nx];
            self.model.dynamics(self.stage(t, i), x, u.u(i), p, &mut f);
            let x_next = &mut tail[..nx];
            for k in 0..nx {
                x_next[k] = x[k] + f[k] * h;
            }
            if !x_next.iter().all(|v| v.is_finite()) {
                return Err(HorizonError::NonFiniteState { node: next });
            }
        }
        Ok(states)
    }

    fn rollout_costates(&self, states: &[f64], u: &DecisionVector, t: f64, stride: usize) -> Result<Vec<f64>, HorizonError> {
        let nx = self.layout.dims.state;
        let n = self.grid.steps();
        let h = stride as f64 * self.grid.dtau();
        let p = u.p();
        let mut costates = vec![0.0; (n + 1) * nx];
        let terminal = self.model.terminal_grad(&states[n * nx..], p, u.nu());
        costates[n * nx..].copy_from_slice(&terminal.x);
        if !terminal.x.iter().all(|v| v.is_finite()) {
            return Err(HorizonError::NonFiniteCostate { node: n });
        }
        let mut i = n;
        while i >= stride {
            i -= stride;
            let (head, tail) = costates.split_at_mut((i + 1) * nx);
            let lam_next = &tail[(stride - 1) * nx..stride * nx];
            let x = &states[i * nx..(i + 1) * nx];
            let grad = self.model.hamiltonian_grad(self.stage(t, i), x, lam_next, u.u(i), u.mu(i), p);
            let lam = &mut head[i * nx..];
            for k in 0..nx {
                lam[k] = lam_next[k] + grad.x[k] * h;
            }
            if !lam.iter().all(|v| v.is_finite()) {
                return Err(HorizonError::NonFiniteCostate { node: i });
            }
        }
        Ok(costates)
    }

    /// Forward and backward passes without touching the counter.
    pub fn trajectories(&self, x0: &[f64], u: &DecisionVector, t: f64) -> Result<TrajectoryBundle, HorizonError> {
        self.check(u)?;
        let states = self.rollout_states(x0, u, t, 1)?;
        let costates = self.rollout_costates(&states, u, t, 1)?;
        Ok(TrajectoryBundle::new(self.layout.dims.state, states, costates))
    }

    /// Stacks the optimality rows against given trajectories:
    /// `[H_u·Δτ; C·Δτ; ψ(x_N, p); φ_p + ψ_pᵀν + Σ H_p·Δτ]`.
    pub fn stack(&self, traj: &TrajectoryBundle, u: &DecisionVector, t: f64) -> Vec<f64> {
        let dims = self.layout.dims;
        let n = self.grid.steps();
        let dtau = self.grid.dtau();
        let p = u.p();
        let mut out = vec![0.0; self.layout.len()];
        let mut p_sum = vec![0.0; dims.param];
        for i in 0..n {
            let stage = self.stage(t, i);
            let x = traj.state(i);
            let grad = self.model.hamiltonian_grad(stage, x, traj.costate(i + 1), u.u(i), u.mu(i), p);
            let o = self.layout.u_offset(i);
            for (dst, g) in out[o..o + dims.control].iter_mut().zip(&grad.u) {
                *dst = g * dtau;
            }
            for (acc, g) in p_sum.iter_mut().zip(&grad.p) {
                *acc += g * dtau;
            }
            let o = self.layout.mu_offset(i);
            let c = &mut out[o..o + dims.path];
            self.model.path_constraint(stage, x, u.u(i), p, c);
            c.iter_mut().for_each(|v| *v *= dtau);
        }
        let x_n = traj.state(n);
        let o = self.layout.nu_offset();
        self.model.terminal_constraint(x_n, p, &mut out[o..o + dims.terminal]);
        let terminal = self.model.terminal_grad(x_n, p, u.nu());
        let o = self.layout.p_offset();
        for (k, dst) in out[o..].iter_mut().enumerate() {
            *dst = terminal.p[k] + p_sum[k];
        }
        out
    }

    /// `F[U, x, t]` together with the trajectories it was built from.
    /// Counts one rollout.
    pub fn evaluate(&self, x0: &[f64], u: &DecisionVector, t: f64) -> Result<(Vec<f64>, TrajectoryBundle), HorizonError> {
        self.counter.bump();
        let traj = self.trajectories(x0, u, t)?;
        let f = self.stack(&traj, u, t);
        Ok((f, traj))
    }

    /// `F[U, x, t]`. Counts one rollout.
    pub fn assemble(&self, x0: &[f64], u: &DecisionVector, t: f64) -> Result<Vec<f64>, HorizonError> {
        self.evaluate(x0, u, t).map(|(f, _)| f)
    }

    /// States and costates computed with step `2Δτ` on the even nodes, odd
    /// nodes filled by linear interpolation. Counts one coarse rollout.
    pub fn coarse_trajectories(&self, x0: &[f64], u: &DecisionVector, t: f64) -> Result<TrajectoryBundle, HorizonError> {
        self.check(u)?;
        let n = self.grid.steps();
        if n % 2 != 0 {
            return Err(HorizonError::OddSteps(n));
        }
        self.counter.bump_coarse();
        let nx = self.layout.dims.state;
        let mut states = self.rollout_states(x0, u, t, 2)?;
        let mut costates = self.rollout_costates(&states, u, t, 2)?;
        for values in [&mut states, &mut costates] {
            for i in (1..n).step_by(2) {
                for k in 0..nx {
                    values[i * nx + k] = 0.5 * (values[(i - 1) * nx + k] + values[(i + 1) * nx + k]);
                }
            }
        }
        Ok(TrajectoryBundle::new(nx, states, costates))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::example::{make_example_model, MinTimeConstants, MinimumTime};
    use crate::linalg::norm2;
    use crate::model::{HamiltonianGrad, TerminalGrad};

    fn example_horizon(steps: usize) -> Horizon {
        Horizon::new(Arc::new(make_example_model(MinTimeConstants::default())), HorizonGrid::unit(steps).unwrap())
    }

    /// `ẋ = c` (constant), `λ` driven by `H_x = 0`, `φ = 0`, `ψ = x`.
    struct Drift {
        c: [f64; 2],
    }

    impl OcpModel for Drift {
        fn dims(&self) -> ModelDims {
            ModelDims {
                state: 2,
                control: 1,
                path: 1,
                terminal: 2,
                param: 1,
            }
        }
        fn dynamics(&self, _: Stage, _x: &[f64], _u: &[f64], _p: &[f64], out: &mut [f64]) {
            out.copy_from_slice(&self.c);
        }
        fn stage_cost(&self, _: Stage, _x: &[f64], u: &[f64], _p: &[f64]) -> f64 {
            u[0] * u[0]
        }
        fn path_constraint(&self, _: Stage, _x: &[f64], u: &[f64], p: &[f64], out: &mut [f64]) {
            out[0] = u[0] - p[0];
        }
        fn terminal_cost(&self, _x: &[f64], _p: &[f64]) -> f64 {
            0.0
        }
        fn terminal_constraint(&self, x: &[f64], _p: &[f64], out: &mut [f64]) {
            out.copy_from_slice(x);
        }
        fn hamiltonian_grad(&self, _: Stage, _x: &[f64], _l: &[f64], u: &[f64], mu: &[f64], _p: &[f64]) -> HamiltonianGrad {
            HamiltonianGrad {
                x: vec![0.0, 0.0],
                u: vec![2.0 * u[0] + mu[0]],
                p: vec![-mu[0]],
            }
        }
        fn terminal_grad(&self, _x: &[f64], _p: &[f64], nu: &[f64]) -> TerminalGrad {
            TerminalGrad {
                x: nu.to_vec(),
                p: vec![0.0],
            }
        }
    }

    #[test]
    fn grid_rejects_empty_horizon() {
        assert_eq!(HorizonGrid::unit(0), Err(HorizonError::NoSteps));
        assert!(matches!(HorizonGrid::new(3, 0.0), Err(HorizonError::BadLength(_))));
        let g = HorizonGrid::new(4, 2.0).unwrap();
        assert_eq!(g.dtau(), 0.5);
        assert_eq!(g.node(3), 1.5);
    }

    #[test]
    fn layout_matches_example_dimensions() {
        let h = example_horizon(50);
        let layout = h.layout();
        assert_eq!(layout.len(), 3 * 50 + 3);
        assert_eq!(layout.sensitive(), 3);
        assert_eq!(layout.mu_offset(0), 100);
        assert_eq!(layout.nu_offset(), 150);
        assert_eq!(layout.p_offset(), 152);
        let mut u = DecisionVector::zeros(layout);
        u.p_mut()[0] = 2.0;
        u.nu_mut()[1] = -1.0;
        assert_eq!(u.as_slice()[152], 2.0);
        assert_eq!(u.as_slice()[151], -1.0);
        assert!(DecisionVector::from_vec(layout, vec![0.0; 3]).is_err());
    }

    #[test]
    fn zero_dynamics_keeps_state() {
        let h = Horizon::new(Arc::new(Drift { c: [0.0, 0.0] }), HorizonGrid::unit(5).unwrap());
        let u = DecisionVector::zeros(h.layout());
        let states = h.forward_states(&[0.3, -0.7], &u, 0.0).unwrap();
        for i in 0..=5 {
            assert_eq!(&states[2 * i..2 * i + 2], &[0.3, -0.7]);
        }
    }

    #[test]
    fn costate_is_nu_without_state_coupling() {
        let h = Horizon::new(Arc::new(Drift { c: [1.0, 2.0] }), HorizonGrid::unit(6).unwrap());
        let mut u = DecisionVector::zeros(h.layout());
        u.nu_mut().copy_from_slice(&[0.25, -4.0]);
        let traj = h.trajectories(&[0.0, 0.0], &u, 0.0).unwrap();
        for i in 0..=6 {
            assert_eq!(traj.costate(i), &[0.25, -4.0]);
        }
    }

    #[test]
    fn example_rollout_is_geometric() {
        let h = example_horizon(4);
        let mut u = DecisionVector::zeros(h.layout());
        u.p_mut()[0] = 1.0;
        let states = h.forward_states(&[0.0, 0.0], &u, 0.0).unwrap();
        assert_eq!(states.len(), 10);
        let dtau: f64 = 0.25;
        for i in 0..=4 {
            let expected = (1.0 + dtau).powi(i as i32) - 1.0;
            assert!((states[2 * i] - expected).abs() < 1e-15);
            assert_eq!(states[2 * i + 1], 0.0);
        }
        assert_eq!(example_horizon(50).forward_states(&[0.0, 0.0], &DecisionVector::zeros(example_horizon(50).layout()), 0.0).unwrap().len(), 51 * 2);
    }

    fn random_example_point(h: &Horizon, seed: u64) -> DecisionVector {
        let mut u = DecisionVector::zeros(h.layout());
        for (k, v) in u.as_mut_slice().iter_mut().enumerate() {
            *v = 0.5 * ((k as f64 + 1.0) * 0.731 + seed as f64).sin();
        }
        u.p_mut()[0] = 1.3;
        u
    }

    #[test]
    fn example_costates_follow_explicit_recursion() {
        let h = example_horizon(8);
        let u = random_example_point(&h, 3);
        let traj = h.trajectories(&[0.1, 0.2], &u, 0.4).unwrap();
        let k = MinTimeConstants::default();
        let p = u.p()[0];
        let dtau = h.grid().dtau();
        assert_eq!(traj.costate(8), u.nu());
        for i in (0..8).rev() {
            let (l1, l2) = (traj.costate(i + 1)[0], traj.costate(i + 1)[1]);
            let ui = u.u(i)[0];
            let expected = l1 + dtau * (p * k.a * (ui.cos() * l1 + ui.sin() * l2));
            assert!((traj.costate(i)[0] - expected).abs() <= 1e-14);
            assert_eq!(traj.costate(i)[1], u.nu()[1]);
        }
    }

    /// Independent transcription of the example's optimality rows.
    fn example_rows(k: &MinTimeConstants, u: &DecisionVector, x0: [f64; 2], t: f64, n: usize) -> Vec<f64> {
        let dtau = 1.0 / n as f64;
        let p = u.p()[0];
        let mut xs = vec![x0];
        for i in 0..n {
            let [x, y] = xs[i];
            let ui = u.u(i)[0];
            xs.push([x + dtau * p * (k.a * x + k.b) * ui.cos(), y + dtau * p * (k.a * x + k.b) * ui.sin()]);
        }
        let mut lam = vec![[0.0; 2]; n + 1];
        lam[n] = [u.nu()[0], u.nu()[1]];
        for i in (0..n).rev() {
            let ui = u.u(i)[0];
            let [l1, l2] = lam[i + 1];
            lam[i] = [l1 + dtau * (p * k.a * (ui.cos() * l1 + ui.sin() * l2)), l2];
        }
        let mut rows = vec![];
        let mut c_rows = vec![];
        let mut p_sum = 0.0;
        for i in 0..n {
            let tau = i as f64 * dtau;
            let (ui, udi, mui) = (u.u(i)[0], u.u(i)[1], u.mu(i)[0]);
            let cu = k.c0 + k.c1 * (k.omega * (t + tau * p)).sin();
            let [l1, l2] = lam[i + 1];
            let xi = xs[i][0];
            rows.push(dtau * (p * (k.a * xi + k.b) * (-ui.sin() * l1 + ui.cos() * l2) + 2.0 * (ui - cu) * mui));
            rows.push(dtau * (2.0 * mui * udi - k.w_d * p));
            c_rows.push(dtau * ((ui - cu).powi(2) + udi * udi - k.r_u * k.r_u));
            p_sum += (k.a * xi + k.b) * (ui.cos() * l1 + ui.sin() * l2)
                - 2.0 * (ui - cu) * mui * k.c1 * (k.omega * (t + tau * p)).cos() * k.omega * tau
                - k.w_d * udi;
        }
        rows.extend(c_rows);
        rows.push(xs[n][0] - k.x_target);
        rows.push(xs[n][1] - k.y_target);
        rows.push(dtau * p_sum + 1.0);
        rows
    }

    #[test]
    fn assembled_map_matches_example_rows() {
        let k = MinTimeConstants::default();
        for seed in 0..5 {
            let h = example_horizon(7);
            let u = random_example_point(&h, seed);
            let f = h.assemble(&[0.1, -0.2], &u, 0.37).unwrap();
            let oracle = example_rows(&k, &u, [0.1, -0.2], 0.37, 7);
            assert_eq!(f.len(), oracle.len());
            for (a, b) in f.iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn assemble_counts_one_rollout() {
        let h = example_horizon(6);
        let u = random_example_point(&h, 1);
        assert_eq!(h.counter().rollouts(), 0);
        h.assemble(&[0.0, 0.0], &u, 0.0).unwrap();
        h.assemble(&[0.0, 0.0], &u, 0.0).unwrap();
        let traj = h.trajectories(&[0.0, 0.0], &u, 0.0).unwrap();
        h.stack(&traj, &u, 0.0);
        assert_eq!(h.counter().rollouts(), 2);
    }

    /// Solution of the N = 2 example rows built by hand.
    ///
    /// Headings fix states and (up to the scale `s` of `ν`) costates. Each
    /// node then gives `μ_i` from its `H_u` row and `u_{d,i}` from its band
    /// row. The slack rows need `μ_0·u_{d,0} = μ_1·u_{d,1}`, which is solved
    /// for the second heading by bisection; `w_d` and the target point are
    /// then read off, and `s` zeroes the parameter row.
    pub(crate) fn manufactured_instance() -> (MinTimeConstants, DecisionVector, [f64; 2], f64) {
        let n = 2;
        let dtau = 0.5;
        let (p, t, x0) = (0.9, 0.1, [0.0, 0.0]);
        let nu_dir = [-0.4, -0.3];
        let mut k = MinTimeConstants::default();
        k.r_u = 0.5;

        struct Nodes {
            xs: Vec<[f64; 2]>,
            lam: Vec<[f64; 2]>,
            offset: [f64; 2],
            ud: [f64; 2],
            mu: [f64; 2],
        }
        let nodes = |k: &MinTimeConstants, headings: [f64; 2], nu: [f64; 2]| {
            let mut xs = vec![x0];
            for i in 0..n {
                let [x, y] = xs[i];
                let v = p * (k.a * x + k.b);
                xs.push([x + dtau * v * headings[i].cos(), y + dtau * v * headings[i].sin()]);
            }
            let mut lam = vec![[0.0; 2]; n + 1];
            lam[n] = nu;
            for i in (0..n).rev() {
                let [l1, l2] = lam[i + 1];
                lam[i] = [l1 + dtau * p * k.a * (headings[i].cos() * l1 + headings[i].sin() * l2), l2];
            }
            let mut offset = [0.0; 2];
            let mut ud = [0.0; 2];
            let mut mu = [0.0; 2];
            for i in 0..n {
                let tau = i as f64 * dtau;
                offset[i] = headings[i] - (k.c0 + k.c1 * (k.omega * (t + tau * p)).sin());
                ud[i] = (k.r_u * k.r_u - offset[i] * offset[i]).sqrt();
                let [l1, l2] = lam[i + 1];
                let torque = p * (k.a * xs[i][0] + k.b) * (-headings[i].sin() * l1 + headings[i].cos() * l2);
                mu[i] = -torque / (2.0 * offset[i]);
            }
            Nodes { xs, lam, offset, ud, mu }
        };

        let u0 = 0.8;
        let gap = |u1: f64| {
            let nd = nodes(&k, [u0, u1], nu_dir);
            nd.mu[0] * nd.ud[0] - nd.mu[1] * nd.ud[1]
        };
        // scan the band for a sign change away from the μ pole at the band
        // center, then bisect
        let cu1 = k.c0 + k.c1 * (k.omega * (t + dtau * p)).sin();
        let grid: Vec<f64> = (-199..200).filter(|j| *j != 0).map(|j| cu1 + k.r_u * j as f64 / 200.0).collect();
        let (mut lo, mut hi) = grid
            .windows(2)
            .map(|w| (w[0], w[1]))
            .find(|(a, b)| (a - cu1).signum() == (b - cu1).signum() && gap(*a).signum() != gap(*b).signum())
            .expect("sign change in band");
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if gap(mid).signum() == gap(lo).signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let headings = [u0, 0.5 * (lo + hi)];

        // parameter row is 1 + s·K with everything linear in s
        let nd = nodes(&k, headings, nu_dir);
        let w_d_unit = 2.0 * nd.mu[0] * nd.ud[0] / p;
        let mut slope = 0.0;
        for i in 0..n {
            let tau = i as f64 * dtau;
            let [l1, l2] = nd.lam[i + 1];
            slope += (k.a * nd.xs[i][0] + k.b) * (headings[i].cos() * l1 + headings[i].sin() * l2)
                - 2.0 * nd.offset[i] * nd.mu[i] * k.c1 * (k.omega * (t + tau * p)).cos() * k.omega * tau
                - w_d_unit * nd.ud[i];
        }
        let s = -1.0 / (dtau * slope);
        let nd = nodes(&k, headings, [s * nu_dir[0], s * nu_dir[1]]);
        k.w_d = 2.0 * nd.mu[0] * nd.ud[0] / p;
        k.x_target = nd.xs[n][0];
        k.y_target = nd.xs[n][1];

        let mut u = DecisionVector::zeros(DecisionLayout::new(n, MinimumTime::default().dims()));
        for i in 0..n {
            u.u_mut(i).copy_from_slice(&[headings[i], nd.ud[i]]);
            u.mu_mut(i)[0] = nd.mu[i];
        }
        u.nu_mut().copy_from_slice(&[s * nu_dir[0], s * nu_dir[1]]);
        u.p_mut()[0] = p;
        (k, u, x0, t)
    }

    #[test]
    fn manufactured_solution_zeroes_the_map() {
        let (k, u, x0, t) = manufactured_instance();
        let h = Horizon::new(Arc::new(make_example_model(k)), HorizonGrid::unit(2).unwrap());
        let f = h.assemble(&x0, &u, t).unwrap();
        assert!(norm2(&f) <= 1e-10, "‖F‖ = {:e}", norm2(&f));
    }

    #[test]
    fn coarse_trajectory_exact_on_affine_data() {
        let h = Horizon::new(Arc::new(Drift { c: [1.0, -2.0] }), HorizonGrid::unit(8).unwrap());
        let mut u = DecisionVector::zeros(h.layout());
        u.nu_mut().copy_from_slice(&[0.5, 0.25]);
        let fine = h.trajectories(&[0.1, 0.2], &u, 0.0).unwrap();
        let coarse = h.coarse_trajectories(&[0.1, 0.2], &u, 0.0).unwrap();
        for (a, b) in fine.states().iter().zip(coarse.states()) {
            assert!((a - b).abs() <= 1e-14);
        }
        assert_eq!(fine.costates(), coarse.costates());
        assert_eq!(h.counter().coarse_rollouts(), 1);
        assert_eq!(h.counter().rollouts(), 0);
    }

    #[test]
    fn coarse_trajectory_rejects_odd_steps() {
        let h = example_horizon(3);
        let u = DecisionVector::zeros(h.layout());
        assert_eq!(h.coarse_trajectories(&[0.0, 0.0], &u, 0.0), Err(HorizonError::OddSteps(3)));
    }

    #[test]
    fn coarse_deviation_is_first_order() {
        let deviation = |n: usize| {
            let h = example_horizon(n);
            let mut u = DecisionVector::zeros(h.layout());
            for i in 0..n {
                // smooth control profile independent of n
                let tau = h.grid().node(i);
                u.u_mut(i)[0] = 0.8 + 0.3 * (3.0 * tau).sin();
                u.u_mut(i)[1] = 0.1;
                u.mu_mut(i)[0] = 0.02;
            }
            u.nu_mut().copy_from_slice(&[-0.5, -0.4]);
            u.p_mut()[0] = 1.2;
            let fine = h.trajectories(&[0.0, 0.0], &u, 0.0).unwrap();
            let coarse = h.coarse_trajectories(&[0.0, 0.0], &u, 0.0).unwrap();
            fine.states()
                .iter()
                .chain(fine.costates())
                .zip(coarse.states().iter().chain(coarse.costates()))
                .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
        };
        let ratio = deviation(50) / deviation(100);
        assert!((1.6..=2.4).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn map_rows_vanish_with_horizon() {
        let h = Horizon::new(Arc::new(MinimumTime::default()), HorizonGrid::new(4, 1e-300).unwrap());
        let u = random_example_point(&h, 2);
        let f = h.assemble(&[0.0, 0.0], &u, 0.0).unwrap();
        assert!(f[..h.layout().nu_offset()].iter().all(|v| v.abs() < 1e-290));
    }

    #[test]
    fn divergent_rollout_is_reported() {
        let h = example_horizon(4);
        let mut u = DecisionVector::zeros(h.layout());
        u.p_mut()[0] = f64::INFINITY;
        assert!(matches!(h.assemble(&[0.0, 0.0], &u, 0.0), Err(HorizonError::NonFiniteState { .. })));
    }
}
