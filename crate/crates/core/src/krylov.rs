//! Left-preconditioned GMRES(k_max) and preconditioned MINRES.
//!
//! Both solvers take the operator as a fallible closure so that a diverging
//! rollout inside a matrix-free product surfaces as the caller's error type.
//! A zero initial guess is taken to satisfy `a(0) = 0` and costs no operator
//! application, so a solve never applies the operator more than `k_max` times.

use crate::linalg::{axpy, dot, norm2, DenseMatrix, LuFactors};

/// Happy-breakdown threshold relative to the initial residual.
pub const BREAKDOWN_RATIO: f64 = 1e-14;

/// Applies `z = M⁻¹ r`.
pub trait Preconditioner {
    fn apply(&self, r: &[f64]) -> Vec<f64>;
}

/// `M = I`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Preconditioner for Identity {
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        r.to_vec()
    }
}

impl Preconditioner for LuFactors {
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        self.solve(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Gmres,
    Minres,
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolverKind::Gmres => "gmres",
            SolverKind::Minres => "minres",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrylovConfig {
    pub k_max: usize,
    /// Relative to the initial preconditioned residual norm.
    pub tol: f64,
    pub solver: SolverKind,
}

impl Default for KrylovConfig {
    fn default() -> Self {
        Self {
            k_max: 20,
            tol: 1e-5,
            solver: SolverKind::Gmres,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolveReport {
    pub iterations: usize,
    pub operator_applications: usize,
    /// Preconditioned residual norms, starting with the initial one.
    pub residual_history: Vec<f64>,
    pub converged: bool,
    pub breakdown: bool,
    /// `‖VᵀV − I‖_F` of the Arnoldi basis at exit (GMRES only).
    pub basis_orthogonality: f64,
}

impl SolveReport {
    pub fn final_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(0.0)
    }
}

/// Runs the configured solver.
pub fn solve<E>(
    a: impl FnMut(&[f64]) -> Result<Vec<f64>, E>,
    b: &[f64],
    x0: &[f64],
    cfg: &KrylovConfig,
    precond: &dyn Preconditioner,
) -> Result<(Vec<f64>, SolveReport), E> {
    match cfg.solver {
        SolverKind::Gmres => gmres(a, b, x0, cfg, precond),
        SolverKind::Minres => minres(a, b, x0, cfg, precond),
    }
}

fn initial_residual<E>(
    a: &mut impl FnMut(&[f64]) -> Result<Vec<f64>, E>,
    b: &[f64],
    x0: &[f64],
    applications: &mut usize,
) -> Result<Vec<f64>, E> {
    if x0.iter().all(|&v| v == 0.0) {
        return Ok(b.to_vec());
    }
    *applications += 1;
    let ax = a(x0)?;
    Ok(b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect())
}

/// Preconditioned GMRES with Givens-rotation least squares and early exit.
pub fn gmres<E>(
    mut a: impl FnMut(&[f64]) -> Result<Vec<f64>, E>,
    b: &[f64],
    x0: &[f64],
    cfg: &KrylovConfig,
    precond: &dyn Preconditioner,
) -> Result<(Vec<f64>, SolveReport), E> {
    let n = b.len();
    assert_eq!(x0.len(), n, "initial guess has wrong length");
    let mut report = SolveReport::default();
    let r = initial_residual(&mut a, b, x0, &mut report.operator_applications)?;
    let z = precond.apply(&r);
    let beta = norm2(&z);
    report.residual_history.push(beta);
    if beta == 0.0 || cfg.k_max == 0 {
        report.converged = beta == 0.0;
        return Ok((x0.to_vec(), report));
    }

    let k_max = cfg.k_max;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k_max + 1);
    basis.push(z.iter().map(|v| v / beta).collect());
    // columns of the rotated Hessenberg matrix, i.e. the triangular factor
    let mut r_cols: Vec<Vec<f64>> = Vec::with_capacity(k_max);
    let mut cs: Vec<f64> = Vec::with_capacity(k_max);
    let mut sn: Vec<f64> = Vec::with_capacity(k_max);
    let mut g = vec![0.0; k_max + 1];
    g[0] = beta;

    for k in 0..k_max {
        report.operator_applications += 1;
        let av = a(&basis[k])?;
        let mut w = precond.apply(&av);
        let norm_before = norm2(&w);

        let mut h: Vec<f64> = basis.iter().map(|v| dot(v, &w)).collect();
        for (v, hj) in basis.iter().zip(&h) {
            axpy(-hj, v, &mut w);
        }
        let mut h_next = norm2(&w);
        if h_next < 0.7 * norm_before {
            // second classical Gram-Schmidt pass
            let corr: Vec<f64> = basis.iter().map(|v| dot(v, &w)).collect();
            for (v, c) in basis.iter().zip(&corr) {
                axpy(-c, v, &mut w);
            }
            for (hj, c) in h.iter_mut().zip(&corr) {
                *hj += c;
            }
            h_next = norm2(&w);
        }

        for j in 0..k {
            let (hj, hj1) = (h[j], h[j + 1]);
            h[j] = cs[j] * hj + sn[j] * hj1;
            h[j + 1] = -sn[j] * hj + cs[j] * hj1;
        }
        let denom = h[k].hypot(h_next);
        let (c, s) = if denom == 0.0 { (1.0, 0.0) } else { (h[k] / denom, h_next / denom) };
        h[k] = denom;
        cs.push(c);
        sn.push(s);
        g[k + 1] = -s * g[k];
        g[k] *= c;
        r_cols.push(h);

        let residual = g[k + 1].abs();
        report.residual_history.push(residual);
        report.iterations = k + 1;

        if h_next <= BREAKDOWN_RATIO * beta {
            report.breakdown = true;
            break;
        }
        basis.push(w.iter().map(|v| v / h_next).collect());
        if residual <= cfg.tol * beta {
            break;
        }
    }

    let k = report.iterations;
    let mut y = vec![0.0; k];
    for i in (0..k).rev() {
        let s: f64 = (i + 1..k).map(|j| r_cols[j][i] * y[j]).sum();
        y[i] = (g[i] - s) / r_cols[i][i];
    }
    let mut x = x0.to_vec();
    for (v, yi) in basis.iter().zip(&y) {
        axpy(*yi, v, &mut x);
    }
    report.converged = report.final_residual() <= cfg.tol * beta;
    report.basis_orthogonality = orthogonality_defect(&basis);
    Ok((x, report))
}

fn orthogonality_defect(basis: &[Vec<f64>]) -> f64 {
    let k = basis.len();
    let gram = DenseMatrix::from_fn(k, k, |i, j| dot(&basis[i], &basis[j]));
    gram.sub(&DenseMatrix::identity(k)).frobenius_norm()
}

/// Preconditioned MINRES for symmetric operators with an SPD
/// preconditioner. Residuals are measured in the `M⁻¹`-norm.
pub fn minres<E>(
    mut a: impl FnMut(&[f64]) -> Result<Vec<f64>, E>,
    b: &[f64],
    x0: &[f64],
    cfg: &KrylovConfig,
    precond: &dyn Preconditioner,
) -> Result<(Vec<f64>, SolveReport), E> {
    let n = b.len();
    assert_eq!(x0.len(), n, "initial guess has wrong length");
    let mut report = SolveReport::default();
    let mut x = x0.to_vec();
    let mut r1 = initial_residual(&mut a, b, x0, &mut report.operator_applications)?;
    let mut y = precond.apply(&r1);
    let beta1_sq = dot(&r1, &y);
    if !(beta1_sq > 0.0) {
        // zero residual, or a preconditioner that is not positive definite
        report.residual_history.push(beta1_sq.max(0.0).sqrt());
        report.converged = beta1_sq == 0.0;
        report.breakdown = beta1_sq < 0.0;
        return Ok((x, report));
    }
    let beta1 = beta1_sq.sqrt();
    report.residual_history.push(beta1);

    let mut r2 = r1.clone();
    let mut old_beta = 0.0;
    let mut beta = beta1;
    let mut dbar = 0.0;
    let mut epsilon = 0.0;
    let mut phibar = beta1;
    let mut cs = -1.0;
    let mut sn = 0.0;
    let mut w = vec![0.0; n];
    let mut w2 = vec![0.0; n];

    for k in 0..cfg.k_max {
        let v: Vec<f64> = y.iter().map(|yi| yi / beta).collect();
        report.operator_applications += 1;
        y = a(&v)?;
        if k > 0 {
            axpy(-beta / old_beta, &r1, &mut y);
        }
        let alpha = dot(&v, &y);
        axpy(-alpha / beta, &r2, &mut y);
        r1 = std::mem::replace(&mut r2, y);
        y = precond.apply(&r2);
        old_beta = beta;
        let beta_sq = dot(&r2, &y);
        beta = beta_sq.max(0.0).sqrt();

        let old_epsilon = epsilon;
        let delta = cs * dbar + sn * alpha;
        let gbar = sn * dbar - cs * alpha;
        epsilon = sn * beta;
        dbar = -cs * beta;
        let gamma = gbar.hypot(beta).max(f64::EPSILON);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;

        let w1 = std::mem::replace(&mut w2, std::mem::take(&mut w));
        w = v
            .iter()
            .zip(&w1)
            .zip(&w2)
            .map(|((vi, w1i), w2i)| (vi - old_epsilon * w1i - delta * w2i) / gamma)
            .collect();
        axpy(phi, &w, &mut x);

        report.iterations = k + 1;
        report.residual_history.push(phibar.abs());
        if phibar.abs() <= cfg.tol * beta1 {
            break;
        }
        if beta <= BREAKDOWN_RATIO * beta1 || beta_sq < 0.0 {
            report.breakdown = true;
            break;
        }
    }
    report.converged = report.final_residual() <= cfg.tol * beta1;
    Ok((x, report))
}
