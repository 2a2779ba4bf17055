//! Built-in minimum-time example: steer `(x, y)` to a target point in
//! shortest time while the heading `u` stays inside a moving sinusoidal band.
//!
//! The band `c_u − r_u ≤ u ≤ c_u + r_u` is written as the equality
//! `(u − c_u)² + u_d² − r_u² = 0` with slack control `u_d`. The scalar
//! parameter `p` is the time to go; the horizon `[t, t + p]` is mapped onto
//! `τ ∈ [0, 1]`, which is why dynamics and stage cost carry a factor `p`.

use crate::horizon::{DecisionLayout, DecisionVector, Horizon, HorizonError};
use crate::model::{HamiltonianGrad, ModelDims, OcpModel, Stage, TerminalGrad};

/// Registry name of the example model.
pub const EXAMPLE_MODEL_NAME: &str = "example-mintime";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinTimeConstants {
    pub a: f64,
    pub b: f64,
    pub x_target: f64,
    pub y_target: f64,
    pub c0: f64,
    pub c1: f64,
    pub omega: f64,
    pub r_u: f64,
    pub w_d: f64,
}

impl Default for MinTimeConstants {
    fn default() -> Self {
        Self {
            a: 1.0,
            b: 1.0,
            x_target: 1.0,
            y_target: 1.0,
            c0: 0.8,
            c1: 0.3,
            omega: 10.0,
            r_u: 0.2,
            w_d: 0.005,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MinimumTime {
    pub k: MinTimeConstants,
}

pub fn make_example_model(constants: MinTimeConstants) -> MinimumTime {
    MinimumTime { k: constants }
}

impl MinimumTime {
    /// Physical time of a horizon node under the map `τ ↦ t + τp`.
    fn node_time(stage: Stage, p: f64) -> f64 {
        stage.t + stage.tau * p
    }

    /// Band center `c_u` at physical time `time`.
    pub fn band_center(&self, time: f64) -> f64 {
        self.k.c0 + self.k.c1 * (self.k.omega * time).sin()
    }

    /// Path constraint residual `(u − c_u)² + u_d² − r_u²` at physical time.
    pub fn band_residual(&self, time: f64, u: f64, u_d: f64) -> f64 {
        let d = u - self.band_center(time);
        d * d + u_d * u_d - self.k.r_u * self.k.r_u
    }

    /// Initial guess for Newton refinement: heading on the band center,
    /// slack at the band radius, `μ` from `2μu_d = w_d·p`, `ν = (s, s)` with
    /// `s` chosen so that the parameter row of the optimality map vanishes for
    /// the resulting rollout.
    pub fn warm_start(
        &self,
        horizon: &Horizon,
        x0: &[f64],
        t: f64,
        time_to_go: f64,
    ) -> Result<DecisionVector, HorizonError> {
        let layout = horizon.layout();
        let n = layout.steps;
        let mut guess = DecisionVector::zeros(layout);
        let mu = self.k.w_d * time_to_go / (2.0 * self.k.r_u);
        for i in 0..n {
            let time = t + horizon.grid().node(i) * time_to_go;
            let u = guess.u_mut(i);
            u[0] = self.band_center(time);
            u[1] = self.k.r_u;
            guess.mu_mut(i)[0] = mu;
        }
        guess.p_mut()[0] = time_to_go;

        // With ν = (s, s) the costate is linear in s, so the parameter row is
        // affine in s: row(s) = row(0) + s·slope.
        let base = horizon.assemble(x0, &guess, t)?;
        let row0 = *base.last().expect("non-empty map");
        guess.nu_mut().copy_from_slice(&[1.0, 1.0]);
        let row1 = *horizon.assemble(x0, &guess, t)?.last().expect("non-empty map");
        let slope = row1 - row0;
        let s = if slope.abs() > f64::EPSILON { -row0 / slope } else { -1.0 };
        guess.nu_mut().copy_from_slice(&[s, s]);
        Ok(guess)
    }

    pub fn layout(&self, steps: usize) -> DecisionLayout {
        DecisionLayout::new(steps, self.dims())
    }
}

impl OcpModel for MinimumTime {
    fn dims(&self) -> ModelDims {
        ModelDims {
            state: 2,
            control: 2,
            path: 1,
            terminal: 2,
            param: 1,
        }
    }

    fn dynamics(&self, _stage: Stage, x: &[f64], u: &[f64], p: &[f64], out: &mut [f64]) {
        let speed = p[0] * (self.k.a * x[0] + self.k.b);
        out[0] = speed * u[0].cos();
        out[1] = speed * u[0].sin();
    }

    fn stage_cost(&self, _stage: Stage, _x: &[f64], u: &[f64], p: &[f64]) -> f64 {
        -self.k.w_d * u[1] * p[0]
    }

    fn path_constraint(&self, stage: Stage, _x: &[f64], u: &[f64], p: &[f64], out: &mut [f64]) {
        out[0] = self.band_residual(Self::node_time(stage, p[0]), u[0], u[1]);
    }

    fn terminal_cost(&self, _x: &[f64], p: &[f64]) -> f64 {
        p[0]
    }

    fn terminal_constraint(&self, x: &[f64], _p: &[f64], out: &mut [f64]) {
        out[0] = x[0] - self.k.x_target;
        out[1] = x[1] - self.k.y_target;
    }

    fn hamiltonian_grad(
        &self,
        stage: Stage,
        x: &[f64],
        lambda: &[f64],
        u: &[f64],
        mu: &[f64],
        p: &[f64],
    ) -> HamiltonianGrad {
        let k = &self.k;
        let p = p[0];
        let mu = mu[0];
        let (sin_u, cos_u) = u[0].sin_cos();
        let speed = k.a * x[0] + k.b;
        let phase = k.omega * Self::node_time(stage, p);
        let offset = u[0] - (k.c0 + k.c1 * phase.sin());
        HamiltonianGrad {
            x: vec![p * k.a * (cos_u * lambda[0] + sin_u * lambda[1]), 0.0],
            u: vec![
                p * speed * (-sin_u * lambda[0] + cos_u * lambda[1]) + 2.0 * offset * mu,
                2.0 * mu * u[1] - k.w_d * p,
            ],
            p: vec![
                speed * (cos_u * lambda[0] + sin_u * lambda[1])
                    - 2.0 * offset * mu * k.c1 * phase.cos() * k.omega * stage.tau
                    - k.w_d * u[1],
            ],
        }
    }

    fn terminal_grad(&self, _x: &[f64], _p: &[f64], nu: &[f64]) -> TerminalGrad {
        TerminalGrad {
            x: nu.to_vec(),
            p: vec![1.0],
        }
    }

    fn plant_dynamics(&self, _t: f64, x: &[f64], u: &[f64], _p: &[f64], out: &mut [f64]) {
        let speed = self.k.a * x[0] + self.k.b;
        out[0] = speed * u[0].cos();
        out[1] = speed * u[0].sin();
    }

    fn finished(&self, p: &[f64], dt: f64) -> bool {
        p[0] <= dt
    }

    fn state_names(&self) -> Vec<String> {
        vec!["x".into(), "y".into()]
    }

    fn control_names(&self) -> Vec<String> {
        vec!["u".into(), "u_d".into()]
    }

    fn param_names(&self) -> Vec<String> {
        vec!["p".into()]
    }
}
