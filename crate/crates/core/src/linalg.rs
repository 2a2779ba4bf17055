//! Dense linear algebra kernels: row-major matrices, LU with partial pivoting,
//! triangular solves, cyclic Jacobi eigendecomposition and the symmetric
//! absolute value used for SPD preconditioning.

use std::ops::{Index, IndexMut};

use thiserror::Error;

/// Relative pivot magnitude below which a matrix is treated as singular.
pub const SINGULAR_PIVOT_RATIO: f64 = 1e-14;

/// Relative eigenvalue floor applied by [`abs_spd`].
pub const EIGEN_FLOOR_RATIO: f64 = 1e-12;

const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is numerically singular (pivot {pivot:e} at column {column})")]
    Singular { column: usize, pivot: f64 },
    #[error("Jacobi eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {off:e})")]
    NoConvergence { sweeps: usize, off: f64 },
}

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from row-major data.
    ///
    /// Panics if `data.len() != rows * cols`.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major data has wrong length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for row in rows {
            assert_eq!(row.len(), n_cols, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_row_major(n_rows, n_cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Assembles a square matrix from its columns.
    pub fn from_columns(columns: &[Vec<f64>]) -> Self {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        let mut m = Self::zeros(rows, cols);
        for (j, col) in columns.iter().enumerate() {
            assert_eq!(col.len(), rows, "ragged columns");
            m.set_column(j, col);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (i, &v) in values.iter().enumerate() {
            self[(i, j)] = v;
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Self::from_row_major(self.rows, self.cols, data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(M + Mᵀ) / 2`.
    pub fn symmetrized(&self) -> Self {
        assert!(self.is_square());
        Self::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    /// `‖M − Mᵀ‖_F / ‖M‖_F`, zero for the zero matrix.
    pub fn symmetry_defect(&self) -> f64 {
        let norm = self.frobenius_norm();
        if norm == 0.0 {
            return 0.0;
        }
        self.sub(&self.transpose()).frobenius_norm() / norm
    }

    /// Rounds every entry to the nearest `f32` value.
    pub fn rounded_to_f32(&self) -> Self {
        let data = self.data.iter().map(|&v| v as f32 as f64).collect();
        Self::from_row_major(self.rows, self.cols, data)
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// LU factors with row permutation: `P·M = L·U`.
///
/// `permutation[i]` is the row of `M` that ended up in row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LuFactors {
    lower: DenseMatrix,
    upper: DenseMatrix,
    permutation: Vec<usize>,
}

impl LuFactors {
    pub fn lower(&self) -> &DenseMatrix {
        &self.lower
    }

    pub fn upper(&self) -> &DenseMatrix {
        &self.upper
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn dim(&self) -> usize {
        self.permutation.len()
    }

    /// `P·M` for a matrix of matching height.
    pub fn permute_rows(&self, m: &DenseMatrix) -> DenseMatrix {
        DenseMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(self.permutation[i], j)])
    }

    /// Rounds both triangular factors to `f32` precision.
    pub fn rounded_to_f32(&self) -> Self {
        Self {
            lower: self.lower.rounded_to_f32(),
            upper: self.upper.rounded_to_f32(),
            permutation: self.permutation.clone(),
        }
    }

    /// Solves `M·z = r` by forward and back substitution.
    pub fn solve(&self, r: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(r.len(), n, "right-hand side has wrong length");
        let mut z: Vec<f64> = self.permutation.iter().map(|&p| r[p]).collect();
        for i in 0..n {
            let row = self.lower.row(i);
            let s = dot(&row[..i], &z[..i]);
            z[i] -= s;
        }
        for i in (0..n).rev() {
            let row = self.upper.row(i);
            let s = dot(&row[i + 1..], &z[i + 1..]);
            z[i] = (z[i] - s) / row[i];
        }
        z
    }
}

/// Gaussian elimination with partial (row) pivoting.
pub fn lu_factorize(m: &DenseMatrix) -> Result<LuFactors, LinalgError> {
    if !m.is_square() {
        return Err(LinalgError::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    let n = m.rows();
    let threshold = SINGULAR_PIVOT_RATIO * m.max_abs();
    let mut a = m.clone();
    let mut permutation: Vec<usize> = (0..n).collect();

    for k in 0..n {
        let (pivot_row, pivot_abs) = (k..n)
            .map(|i| (i, a[(i, k)].abs()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if !(pivot_abs > threshold) {
            return Err(LinalgError::Singular {
                column: k,
                pivot: pivot_abs,
            });
        }
        if pivot_row != k {
            for j in 0..n {
                a.data.swap(k * n + j, pivot_row * n + j);
            }
            permutation.swap(k, pivot_row);
        }
        let pivot = a[(k, k)];
        for i in k + 1..n {
            let factor = a[(i, k)] / pivot;
            a[(i, k)] = factor;
            if factor == 0.0 {
                continue;
            }
            for j in k + 1..n {
                a.data[i * n + j] -= factor * a.data[k * n + j];
            }
        }
    }

    let lower = DenseMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => a[(i, j)],
        std::cmp::Ordering::Equal => 1.0,
        std::cmp::Ordering::Less => 0.0,
    });
    let upper = DenseMatrix::from_fn(n, n, |i, j| if j >= i { a[(i, j)] } else { 0.0 });
    Ok(LuFactors {
        lower,
        upper,
        permutation,
    })
}

pub fn lu_solve(factors: &LuFactors, r: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if r.len() != factors.dim() {
        return Err(LinalgError::DimensionMismatch {
            expected: factors.dim(),
            got: r.len(),
        });
    }
    Ok(factors.solve(r))
}

/// Spectral factorization `M = Q·diag(λ)·Qᵀ` with ascending eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEig {
    pub eigenvalues: Vec<f64>,
    /// Eigenvectors stored as columns.
    pub eigenvectors: DenseMatrix,
}

impl SymEig {
    /// `Q·diag(d)·Qᵀ` for an arbitrary diagonal.
    pub fn recompose_with(&self, diag: &[f64]) -> DenseMatrix {
        let q = &self.eigenvectors;
        let n = q.rows();
        let mut out = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let s: f64 = (0..n).map(|k| q[(i, k)] * diag[k] * q[(j, k)]).sum();
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }

    pub fn recompose(&self) -> DenseMatrix {
        self.recompose_with(&self.eigenvalues)
    }
}

/// Cyclic Jacobi eigendecomposition of the symmetric part of `m`.
pub fn sym_eig(m: &DenseMatrix) -> Result<SymEig, LinalgError> {
    if !m.is_square() {
        return Err(LinalgError::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    let n = m.rows();
    let mut a = m.symmetrized();
    let mut q = DenseMatrix::identity(n);
    let scale = a.frobenius_norm();

    let off_norm = |a: &DenseMatrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[(i, j)] * a[(i, j)];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = scale == 0.0;
    let mut sweeps = 0;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        sweeps += 1;
        for p in 0..n {
            for r in p + 1..n {
                let apr = a[(p, r)];
                if apr.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(r, r)] - a[(p, p)]) / (2.0 * apr);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut q, p, r, c, s);
            }
        }
        converged = off_norm(&a) <= f64::EPSILON * scale;
    }
    if !converged {
        return Err(LinalgError::NoConvergence {
            sweeps,
            off: off_norm(&a),
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let eigenvalues = order.iter().map(|&i| a[(i, i)]).collect();
    let eigenvectors = DenseMatrix::from_fn(n, n, |i, j| q[(i, order[j])]);
    Ok(SymEig {
        eigenvalues,
        eigenvectors,
    })
}

/// Applies the Jacobi rotation zeroing `a[(p, r)]` and accumulates it into `q`.
fn rotate(a: &mut DenseMatrix, q: &mut DenseMatrix, p: usize, r: usize, c: f64, s: f64) {
    let n = a.rows();
    for k in 0..n {
        let akp = a[(k, p)];
        let akr = a[(k, r)];
        a[(k, p)] = c * akp - s * akr;
        a[(k, r)] = s * akp + c * akr;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let ark = a[(r, k)];
        a[(p, k)] = c * apk - s * ark;
        a[(r, k)] = s * apk + c * ark;
    }
    a[(p, r)] = 0.0;
    a[(r, p)] = 0.0;
    for k in 0..n {
        let qkp = q[(k, p)];
        let qkr = q[(k, r)];
        q[(k, p)] = c * qkp - s * qkr;
        q[(k, r)] = s * qkp + c * qkr;
    }
}

/// Symmetric absolute value `Q·diag(max(|λ|, ε))·Qᵀ`, with
/// `ε = 1e-12·max|λ|`, so the result is always SPD.
pub fn abs_spd(m: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    let eig = sym_eig(m)?;
    let largest = eig.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let floor = (EIGEN_FLOOR_RATIO * largest).max(f64::MIN_POSITIVE);
    let diag: Vec<f64> = eig.eigenvalues.iter().map(|v| v.abs().max(floor)).collect();
    Ok(eig.recompose_with(&diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_matrix(rng: &mut StdRng, n: usize) -> DenseMatrix {
        DenseMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_symmetric(rng: &mut StdRng, n: usize) -> DenseMatrix {
        random_matrix(rng, n).symmetrized()
    }

    #[test]
    fn lu_of_identity_is_trivial() {
        let f = lu_factorize(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(f.lower(), &DenseMatrix::identity(3));
        assert_eq!(f.upper(), &DenseMatrix::identity(3));
        assert_eq!(f.permutation(), &[0, 1, 2]);
    }

    #[test]
    fn lu_of_swap_matrix_pivots() {
        let m = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let f = lu_factorize(&m).unwrap();
        assert_eq!(f.permutation(), &[1, 0]);
        assert_eq!(f.lower(), &DenseMatrix::identity(2));
        assert_eq!(f.upper(), &DenseMatrix::identity(2));
    }

    #[test]
    fn lu_reconstructs_random_matrix() {
        let mut rng = StdRng::seed_from_u64(7);
        let m = random_matrix(&mut rng, 10);
        let f = lu_factorize(&m).unwrap();
        let defect = f.permute_rows(&m).sub(&f.lower().matmul(f.upper())).frobenius_norm();
        assert!(defect <= 1e-12 * m.frobenius_norm(), "defect {defect}");
    }

    #[test]
    fn lu_pivots_on_largest_entry() {
        let m = DenseMatrix::from_rows(&[vec![0.1, 1.0], vec![-3.0, 2.0]]);
        let f = lu_factorize(&m).unwrap();
        assert_eq!(f.permutation()[0], 1);
    }

    #[test]
    fn lu_detects_singularity() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(matches!(lu_factorize(&m), Err(LinalgError::Singular { column: 1, .. })));
        assert!(matches!(
            lu_factorize(&DenseMatrix::zeros(2, 2)),
            Err(LinalgError::Singular { column: 0, .. })
        ));
        assert!(matches!(
            lu_factorize(&DenseMatrix::zeros(2, 3)),
            Err(LinalgError::NotSquare { .. })
        ));
    }

    #[test]
    fn lu_solve_simple_cases() {
        let f = lu_factorize(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(lu_solve(&f, &[1.0, -2.0, 3.5]).unwrap(), vec![1.0, -2.0, 3.5]);
        let f = lu_factorize(&DenseMatrix::from_diag(&[2.0, 4.0])).unwrap();
        assert_eq!(lu_solve(&f, &[2.0, 4.0]).unwrap(), vec![1.0, 1.0]);
        assert!(matches!(
            lu_solve(&f, &[1.0]),
            Err(LinalgError::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn lu_solve_random_residual() {
        let mut rng = StdRng::seed_from_u64(11);
        // diagonally shifted to stay well conditioned
        let m = DenseMatrix::from_fn(20, 20, |i, j| {
            rng.gen_range(-1.0..1.0) + if i == j { 8.0 } else { 0.0 }
        });
        let r: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z = lu_factorize(&m).unwrap().solve(&r);
        let res: Vec<f64> = m.matvec(&z).iter().zip(&r).map(|(a, b)| a - b).collect();
        assert!(norm2(&res) <= 1e-10 * norm2(&r));
    }

    #[test]
    fn eig_of_small_known_matrices() {
        let e = sym_eig(&DenseMatrix::from_diag(&[3.0, 1.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 3.0]);
        assert_eq!(e.eigenvectors.column(0).iter().map(|v| v.abs()).collect::<Vec<_>>(), vec![0.0, 1.0]);

        let e = sym_eig(&DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]])).unwrap();
        assert!((e.eigenvalues[0] + 1.0).abs() < 1e-14);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn eig_defect_on_random_symmetric() {
        let mut rng = StdRng::seed_from_u64(3);
        let m = random_symmetric(&mut rng, 8);
        let e = sym_eig(&m).unwrap();
        let q = &e.eigenvectors;
        let mq = m.matmul(q);
        let ql = q.matmul(&DenseMatrix::from_diag(&e.eigenvalues));
        assert!(mq.sub(&ql).frobenius_norm() <= 1e-8);
        let qtq = q.transpose().matmul(q);
        assert!(qtq.sub(&DenseMatrix::identity(8)).frobenius_norm() <= 1e-8);
        assert!(e.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn abs_spd_flips_negative_eigenvalues() {
        let a = abs_spd(&DenseMatrix::from_diag(&[2.0, -3.0])).unwrap();
        assert_eq!(a, DenseMatrix::from_diag(&[2.0, 3.0]));
        assert_eq!(abs_spd(&DenseMatrix::identity(4)).unwrap(), DenseMatrix::identity(4));
    }

    #[test]
    fn abs_spd_spectrum_is_absolute_spectrum() {
        let mut rng = StdRng::seed_from_u64(5);
        let m = random_symmetric(&mut rng, 6);
        let mut expected: Vec<f64> = sym_eig(&m).unwrap().eigenvalues.iter().map(|v| v.abs()).collect();
        expected.sort_by(f64::total_cmp);
        let got = sym_eig(&abs_spd(&m).unwrap()).unwrap().eigenvalues;
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() <= 1e-8, "{g} vs {e}");
        }
    }

    #[test]
    fn abs_spd_floors_singular_input() {
        let a = abs_spd(&DenseMatrix::from_diag(&[1.0, 0.0])).unwrap();
        let e = sym_eig(&a).unwrap();
        assert!(e.eigenvalues[0] > 0.0);
    }

    #[test]
    fn f32_rounding_is_idempotent() {
        let m = DenseMatrix::from_rows(&[vec![0.1, 1.0 / 3.0]]);
        let r = m.rounded_to_f32();
        assert_ne!(r, m);
        assert_eq!(r.rounded_to_f32(), r);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn square(n: usize) -> impl Strategy<Value = DenseMatrix> {
            prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |d| DenseMatrix::from_row_major(n, n, d))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn solve_recovers_vector(m in (2usize..9).prop_flat_map(square), seed in 0u64..1000) {
                // shift towards diagonal dominance to bound the condition number
                let n = m.rows();
                let shifted = DenseMatrix::from_fn(n, n, |i, j| m[(i, j)] + if i == j { n as f64 } else { 0.0 });
                let z: Vec<f64> = (0..n).map(|i| ((seed + i as u64) as f64 * 0.37).sin()).collect();
                let r = shifted.matvec(&z);
                let got = lu_factorize(&shifted).unwrap().solve(&r);
                let err: Vec<f64> = got.iter().zip(&z).map(|(a, b)| a - b).collect();
                prop_assert!(norm2(&err) <= 1e-8 * norm2(&z).max(1e-300));
            }

            #[test]
            fn abs_spd_idempotent_on_spd(m in (2usize..7).prop_flat_map(square)) {
                let n = m.rows();
                let spd = m.transpose().matmul(&m);
                let spd = DenseMatrix::from_fn(n, n, |i, j| spd[(i, j)] + if i == j { 0.5 } else { 0.0 });
                let a = abs_spd(&spd).unwrap();
                prop_assert!(a.sub(&spd).frobenius_norm() <= 1e-8 * spd.frobenius_norm());
            }
        }
    }
}
