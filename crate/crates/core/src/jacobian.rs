//! Matrix-free directional operator, explicit finite-difference Jacobian and
//! the cheap approximate Jacobian used as a preconditioner.
//!
//! The operator is `a(V) = (F[U + hV, x, t] − F[U, x, t]) / h` around a
//! continuation point. The explicit Jacobian applies it to every unit vector
//! and therefore needs one state/costate rollout per column. The approximate
//! Jacobian evaluates the control and multiplier columns against the single
//! base trajectory and only re-rolls the trajectories for the `ν` and `p`
//! columns, so its setup costs `l = dim ψ + dim p` rollouts instead of `m`.

use crate::horizon::{DecisionVector, Horizon, HorizonError, TrajectoryBundle};
use crate::krylov::Preconditioner;
use crate::linalg::{abs_spd, lu_factorize, DenseMatrix, LinalgError, LuFactors};

/// Linearization point `(U_{j−1}, x_j, t_j)` with the cached base evaluation.
#[derive(Debug, Clone)]
pub struct ContinuationPoint {
    u_prev: DecisionVector,
    x: Vec<f64>,
    t: f64,
    h: f64,
    f_base: Vec<f64>,
    base_traj: TrajectoryBundle,
}

impl ContinuationPoint {
    /// Evaluates `F[U_{j−1}, x_j, t_j]` once (one rollout) and caches it.
    pub fn new(horizon: &Horizon, u_prev: DecisionVector, x: &[f64], t: f64, h: f64) -> Result<Self, HorizonError> {
        assert!(h > 0.0, "difference step must be positive");
        let (f_base, base_traj) = horizon.evaluate(x, &u_prev, t)?;
        Ok(Self {
            u_prev,
            x: x.to_vec(),
            t,
            h,
            f_base,
            base_traj,
        })
    }

    pub fn u_prev(&self) -> &DecisionVector {
        &self.u_prev
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn f_base(&self) -> &[f64] {
        &self.f_base
    }

    pub fn base_traj(&self) -> &TrajectoryBundle {
        &self.base_traj
    }

    /// `b = −F[U_{j−1}, x_j, t_j]`.
    pub fn rhs(&self) -> Vec<f64> {
        self.f_base.iter().map(|v| -v).collect()
    }

    /// `a(V) = (F[U + hV] − F[U]) / h`; one rollout.
    pub fn apply_operator(&self, horizon: &Horizon, v: &[f64]) -> Result<Vec<f64>, HorizonError> {
        let shifted = self.u_prev.offset(self.h, v);
        let f = horizon.assemble(&self.x, &shifted, self.t)?;
        Ok(difference_quotient(&f, &self.f_base, self.h))
    }

    fn unit_shift(&self, k: usize) -> DecisionVector {
        let mut shifted = self.u_prev.clone();
        shifted.as_mut_slice()[k] += self.h;
        shifted
    }
}

fn difference_quotient(f: &[f64], base: &[f64], h: f64) -> Vec<f64> {
    f.iter().zip(base).map(|(a, b)| (a - b) / h).collect()
}

/// `A` with columns `a(e_k)`; exactly `m` rollouts.
pub fn build_exact_jacobian(horizon: &Horizon, cp: &ContinuationPoint) -> Result<DenseMatrix, HorizonError> {
    let m = cp.u_prev.len();
    let columns = (0..m)
        .map(|k| {
            let f = horizon.assemble(&cp.x, &cp.unit_shift(k), cp.t)?;
            Ok(difference_quotient(&f, &cp.f_base, cp.h))
        })
        .collect::<Result<Vec<_>, HorizonError>>()?;
    Ok(DenseMatrix::from_columns(&columns))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ApproxOptions {
    /// Roll trajectories on the doubled step and interpolate.
    pub coarse: bool,
    /// Round the matrix to `f32`.
    pub reduced_precision: bool,
}

/// Approximate Jacobian `M`.
///
/// Control and multiplier columns restack the optimality rows at `U + h·e_k`
/// against the frozen base trajectory. The trailing `ν`/`p` columns are
/// full difference quotients with fresh trajectories and the trailing rows
/// are their transposes. The frozen block is symmetrized; the `l×l` corner
/// keeps its difference quotients unchanged.
///
/// Costs `l` full rollouts, or `l + 1` coarse ones with `opts.coarse`.
pub fn build_approx_preconditioner(
    horizon: &Horizon,
    cp: &ContinuationPoint,
    opts: ApproxOptions,
) -> Result<DenseMatrix, HorizonError> {
    let layout = horizon.layout();
    let m = layout.len();
    let free = m - layout.sensitive();

    let coarse_base;
    let (traj, base): (&TrajectoryBundle, Vec<f64>) = if opts.coarse {
        coarse_base = horizon.coarse_trajectories(&cp.x, &cp.u_prev, cp.t)?;
        let f = horizon.stack(&coarse_base, &cp.u_prev, cp.t);
        (&coarse_base, f)
    } else {
        (&cp.base_traj, cp.f_base.clone())
    };

    let mut raw = DenseMatrix::zeros(m, m);
    for k in 0..free {
        let f = horizon.stack(traj, &cp.unit_shift(k), cp.t);
        raw.set_column(k, &difference_quotient(&f, &base, cp.h));
    }
    for k in free..m {
        let shifted = cp.unit_shift(k);
        let f = if opts.coarse {
            let tr = horizon.coarse_trajectories(&cp.x, &shifted, cp.t)?;
            horizon.stack(&tr, &shifted, cp.t)
        } else {
            horizon.assemble(&cp.x, &shifted, cp.t)?
        };
        raw.set_column(k, &difference_quotient(&f, &base, cp.h));
    }
    let mut sym = raw.clone();
    for i in 0..free {
        for k in 0..free {
            sym[(i, k)] = 0.5 * (raw[(i, k)] + raw[(k, i)]);
        }
        for k in free..m {
            sym[(k, i)] = raw[(i, k)];
        }
    }
    Ok(if opts.reduced_precision { sym.rounded_to_f32() } else { sym })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreconditionerKind {
    None,
    ExactJacobian,
    Approximate,
}

impl std::fmt::Display for PreconditionerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PreconditionerKind::None => "none",
            PreconditionerKind::ExactJacobian => "exact",
            PreconditionerKind::Approximate => "approx",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Working,
    Reduced,
}

/// A factored preconditioner ready for `z = M⁻¹r`.
#[derive(Debug, Clone)]
pub struct PreconditionerFactorization {
    kind: PreconditionerKind,
    matrix: Option<DenseMatrix>,
    lu: Option<LuFactors>,
    /// Factors belong to `|M|` rather than `M`.
    spd: bool,
    built_at: f64,
    precision: Precision,
    symmetry_defect: f64,
    warning: Option<String>,
}

impl PreconditionerFactorization {
    /// `M = I`.
    pub fn none(built_at: f64) -> Self {
        Self {
            kind: PreconditionerKind::None,
            matrix: None,
            lu: None,
            spd: false,
            built_at,
            precision: Precision::Working,
            symmetry_defect: 0.0,
            warning: None,
        }
    }

    pub fn kind(&self) -> PreconditionerKind {
        self.kind
    }

    pub fn matrix(&self) -> Option<&DenseMatrix> {
        self.matrix.as_ref()
    }

    pub fn lu(&self) -> Option<&LuFactors> {
        self.lu.as_ref()
    }

    pub fn is_spd(&self) -> bool {
        self.spd
    }

    pub fn built_at(&self) -> f64 {
        self.built_at
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// `‖M − Mᵀ‖_F / ‖M‖_F` of the matrix as handed in.
    pub fn symmetry_defect(&self) -> f64 {
        self.symmetry_defect
    }

    /// Set when factorization failed and the preconditioner fell back to `I`.
    pub fn warning(&self) -> Option<&str> {
        self.warning.as_deref()
    }
}

impl Preconditioner for PreconditionerFactorization {
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        match &self.lu {
            Some(lu) => lu.solve(r),
            None => r.to_vec(),
        }
    }
}

/// LU of `M` (GMRES) or of `|M|` (MINRES). A singular matrix downgrades to
/// the identity with a warning instead of failing.
pub fn factorize_preconditioner(
    matrix: DenseMatrix,
    kind: PreconditionerKind,
    for_minres: bool,
    reduced_precision: bool,
    built_at: f64,
) -> PreconditionerFactorization {
    let symmetry_defect = matrix.symmetry_defect();
    let target: Result<DenseMatrix, LinalgError> = if for_minres { abs_spd(&matrix) } else { Ok(matrix.clone()) };
    let factors = target.and_then(|t| {
        let t = if reduced_precision { t.rounded_to_f32() } else { t };
        lu_factorize(&t)
    });
    let precision = if reduced_precision { Precision::Reduced } else { Precision::Working };
    match factors {
        Ok(lu) => PreconditionerFactorization {
            kind,
            lu: Some(if reduced_precision { lu.rounded_to_f32() } else { lu }),
            matrix: Some(matrix),
            spd: for_minres,
            built_at,
            precision,
            symmetry_defect,
            warning: None,
        },
        Err(err) => PreconditionerFactorization {
            warning: Some(format!("preconditioner factorization failed ({err}); iterating without preconditioning")),
            symmetry_defect,
            ..PreconditionerFactorization::none(built_at)
        },
    }
}
