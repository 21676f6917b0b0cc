//! Dense linear-algebra kernels shared by every estimator.
//!
//! Everything here is a pure function over small dense matrices (tens of
//! rows), so the routines favour numerical robustness over raw speed:
//! weighted least squares is solved by whitening with a Cholesky factor and
//! a column-pivoted Householder QR, never through the normal equations.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::{Mat, Vector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("design matrix is rank deficient (rank {rank} of {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Solution of a weighted least-squares problem.
#[derive(Debug, Clone, PartialEq)]
pub struct WlsResult {
    pub estimate: Vector,
    pub covariance: Mat,
}

/// Solves `min (z - Hθ)ᵀ R⁻¹ (z - Hθ)`.
///
/// Returns `θ = (HᵀR⁻¹H)⁻¹HᵀR⁻¹z` together with its covariance
/// `(HᵀR⁻¹H)⁻¹`. `R` may be any symmetric positive definite matrix (it need
/// not be diagonal).
pub fn wls_solve(h: &Mat, r: &Mat, z: &Vector) -> Result<WlsResult, NumericsError> {
    let (q, p) = h.shape();
    if r.nrows() != q || r.ncols() != q {
        return Err(NumericsError::DimensionMismatch(format!(
            "weight is {}x{}, design has {q} rows",
            r.nrows(),
            r.ncols()
        )));
    }
    if z.len() != q {
        return Err(NumericsError::DimensionMismatch(format!(
            "observation has length {}, design has {q} rows",
            z.len()
        )));
    }
    if p == 0 {
        return Err(NumericsError::DimensionMismatch("design has no columns".into()));
    }
    if q < p {
        return Err(NumericsError::RankDeficient { rank: q, cols: p });
    }

    let chol = Cholesky::new(symmetrize(r)).ok_or(NumericsError::NotPositiveDefinite)?;
    let l = chol.l();
    let hw = l
        .solve_lower_triangular(h)
        .ok_or(NumericsError::NotPositiveDefinite)?;
    let zw = l
        .solve_lower_triangular(z)
        .ok_or(NumericsError::NotPositiveDefinite)?;

    let qr = PivotedQr::new(hw, zw);
    let rank = qr.rank();
    if rank < p {
        return Err(NumericsError::RankDeficient { rank, cols: p });
    }
    Ok(qr.solution())
}

/// Householder QR with column pivoting applied to a whitened system
/// `[A | b]`; only `R`, `Qᵀb` and the permutation are retained.
struct PivotedQr {
    r: Mat,
    qtb: Vector,
    perm: Vec<usize>,
}

impl PivotedQr {
    fn new(mut a: Mat, mut b: Vector) -> Self {
        let (q, p) = a.shape();
        let mut perm: Vec<usize> = (0..p).collect();

        for k in 0..p {
            // Pivot on the largest remaining column norm.
            let mut best = k;
            let mut best_norm = -1.0;
            for j in k..p {
                let norm = a.view((k, j), (q - k, 1)).norm_squared();
                if norm > best_norm {
                    best_norm = norm;
                    best = j;
                }
            }
            if best != k {
                a.swap_columns(k, best);
                perm.swap(k, best);
            }

            let mut v: Vector = a.column(k).rows(k, q - k).into_owned();
            let xnorm = v.norm();
            if xnorm == 0.0 {
                continue;
            }
            let alpha = if v[0] >= 0.0 { -xnorm } else { xnorm };
            v[0] -= alpha;
            let vnorm2 = v.norm_squared();
            if vnorm2 == 0.0 {
                continue;
            }

            for j in k..p {
                let mut col = a.column_mut(j);
                let mut col = col.rows_mut(k, q - k);
                let s = 2.0 * v.dot(&col) / vnorm2;
                col.axpy(-s, &v, 1.0);
            }
            let mut tail = b.rows_mut(k, q - k);
            let s = 2.0 * v.dot(&tail) / vnorm2;
            tail.axpy(-s, &v, 1.0);
        }

        let r = a.view((0, 0), (p, p)).upper_triangle();
        Self { r, qtb: b, perm }
    }

    /// Numerical rank from the pivoted diagonal.
    fn rank(&self) -> usize {
        let (q, p) = (self.qtb.len(), self.r.ncols());
        let lead = self.r[(0, 0)].abs();
        if lead == 0.0 {
            return 0;
        }
        let tol = q.max(p) as f64 * f64::EPSILON * lead;
        (0..p).take_while(|&k| self.r[(k, k)].abs() > tol).count()
    }

    fn solution(&self) -> WlsResult {
        let p = self.r.ncols();
        let y = self.qtb.rows(0, p).into_owned();
        let w = self
            .r
            .solve_upper_triangular(&y)
            .expect("full-rank triangular factor");
        let r_inv = self
            .r
            .solve_upper_triangular(&Mat::identity(p, p))
            .expect("full-rank triangular factor");
        let cov_w = &r_inv * r_inv.transpose();

        let mut estimate = Vector::zeros(p);
        let mut covariance = Mat::zeros(p, p);
        for i in 0..p {
            estimate[self.perm[i]] = w[i];
            for j in 0..p {
                covariance[(self.perm[i], self.perm[j])] = cov_w[(i, j)];
            }
        }
        WlsResult {
            estimate,
            covariance: symmetrize(&covariance),
        }
    }
}

/// `sqrt(rᵀ S⁻¹ r)`, computed with a Cholesky solve on the symmetrized `S`.
pub fn mahalanobis(r: &Vector, s: &Mat) -> Result<f64, NumericsError> {
    if s.nrows() != r.len() || s.ncols() != r.len() {
        return Err(NumericsError::DimensionMismatch(format!(
            "residual has length {}, covariance is {}x{}",
            r.len(),
            s.nrows(),
            s.ncols()
        )));
    }
    if r.is_empty() {
        return Ok(0.0);
    }
    let chol = Cholesky::new(symmetrize(s)).ok_or(NumericsError::NotPositiveDefinite)?;
    let y = chol.solve(r);
    Ok(r.dot(&y).max(0.0).sqrt())
}

/// Exact zero-order-hold discretization of `ẋ = Ax + Bu` with period `ts`.
///
/// Exponentiates the augmented generator `[[A, B], [0, 0]]·ts` and reads
/// `A_d` and `B_d` off its top block row.
pub fn discretize_zoh(a: &Mat, b: &Mat, ts: f64) -> Result<(Mat, Mat), NumericsError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(NumericsError::DimensionMismatch(format!(
            "state matrix is {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if b.nrows() != n {
        return Err(NumericsError::DimensionMismatch(format!(
            "input matrix has {} rows, state matrix has {n}",
            b.nrows()
        )));
    }
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(NumericsError::DimensionMismatch(format!(
            "sampling period must be positive and finite, got {ts}"
        )));
    }
    let m = b.ncols();
    let mut gen = Mat::zeros(n + m, n + m);
    gen.view_mut((0, 0), (n, n)).copy_from(&(a * ts));
    gen.view_mut((0, n), (n, m)).copy_from(&(b * ts));
    let e = expm(&gen);
    Ok((
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
    ))
}

// Padé(13) coefficients and the matching 1-norm bound for scaling and squaring
// (Higham 2005).
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

/// Matrix exponential by scaling and squaring around a degree-13 Padé core.
pub fn expm(a: &Mat) -> Mat {
    let n = a.nrows();
    if n == 0 {
        return a.clone();
    }
    let norm1 = (0..n)
        .map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm1 > THETA13 {
        (norm1 / THETA13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let a = a * 2f64.powi(-squarings);

    let b = &PADE13;
    let ident = Mat::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;

    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &ident * b[1];
    let u = &a * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &ident * b[0];

    let numer = &v + &u;
    let denom = &v - &u;
    let mut result = denom
        .lu()
        .solve(&numer)
        .expect("Padé denominator is nonsingular after scaling");
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// `(P + Pᵀ)/2`.
pub fn symmetrize(p: &Mat) -> Mat {
    (p + p.transpose()) * 0.5
}

/// Symmetrizes `P` and, only if a Cholesky probe fails, clamps negative
/// eigenvalues to zero.
pub fn symmetrize_psd(p: &Mat) -> Mat {
    let sym = symmetrize(p);
    if sym.nrows() == 0 || Cholesky::new(sym.clone()).is_some() {
        return sym;
    }
    let eig = SymmetricEigen::new(sym);
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&clamped) * v.transpose()))
}

/// Symmetrizes `P` and raises every eigenvalue to at least `floor`.
///
/// Used to turn a rank-deficient residual covariance into something a
/// Cholesky solve accepts.
pub fn project_pd(p: &Mat, floor: f64) -> Mat {
    let sym = symmetrize(p);
    if sym.nrows() == 0 {
        return sym;
    }
    let eig = SymmetricEigen::new(sym);
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&clamped) * v.transpose()))
}

/// Minimum eigenvalue of the symmetric part of `p`.
pub fn min_eigenvalue(p: &Mat) -> f64 {
    if p.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(p))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// True when `p` is symmetric to `1e-12` relative and its minimum eigenvalue
/// is at least `-1e-10·trace`.
pub fn is_symmetric_psd(p: &Mat) -> bool {
    if !p.is_square() {
        return false;
    }
    let scale = p.amax().max(f64::MIN_POSITIVE);
    let asym = (p - p.transpose()).amax();
    if asym > 1e-12 * scale {
        return false;
    }
    let trace = p.trace().abs();
    min_eigenvalue(p) >= -1e-10 * trace
}

/// Block-diagonal matrix from square blocks.
pub fn block_diag(blocks: &[&Mat]) -> Mat {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let m: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(n, m);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Stacks vectors end to end.
pub fn vstack(parts: &[&Vector]) -> Vector {
    let n: usize = parts.iter().map(|v| v.len()).sum();
    let mut out = DVector::zeros(n);
    let mut r = 0;
    for v in parts {
        out.rows_mut(r, v.len()).copy_from(v);
        r += v.len();
    }
    out
}

/// Numerical rank and singular values, with the threshold
/// `max(rows, cols)·ε·σ_max`.
pub fn numerical_rank(m: &Mat) -> (usize, f64) {
    if m.nrows() == 0 || m.ncols() == 0 {
        return (0, 0.0);
    }
    let sv = m.singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let tol = m.nrows().max(m.ncols()) as f64 * f64::EPSILON * smax;
    (sv.iter().filter(|&&s| s > tol).count(), tol)
}
