//! Dense symmetric linear algebra: a cyclic Jacobi eigensolver, spectral
//! matrix functions, sample covariances and condition numbers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::points::PointCloud;

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative tolerance used when checking symmetry of input matrices.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Jacobi stops once the off-diagonal Frobenius norm drops below this
/// fraction of the full Frobenius norm.
pub const JACOBI_OFF_TOL: f64 = 1e-13;
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// A symmetric matrix together with its eigendecomposition
/// `entries = eigvecs * diag(eigvals) * eigvecs^T`, eigenvalues ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralMatrix {
    entries: Mat,
    eigvals: Vec<f64>,
    eigvecs: Mat,
}

impl SpectralMatrix {
    /// Decomposes a symmetric matrix; see [`sym_eig`].
    pub fn from_symmetric(s: &Mat) -> Result<Self> {
        sym_eig(s)
    }

    /// Builds a matrix from a known spectrum. `eigvecs` must be orthogonal;
    /// the pair is re-sorted ascending.
    pub fn from_eigen(eigvals: &[f64], eigvecs: &Mat) -> Result<Self> {
        let d = eigvals.len();
        if eigvecs.nrows() != d || eigvecs.ncols() != d || d == 0 {
            return Err(Error::Dimension(format!(
                "{d} eigenvalues with a {}x{} eigenvector matrix",
                eigvecs.nrows(),
                eigvecs.ncols()
            )));
        }
        let (vals, vecs) = sort_ascending(eigvals.to_vec(), eigvecs.clone());
        let entries = compose(&vals, &vecs, |l| l);
        Ok(Self {
            entries,
            eigvals: vals,
            eigvecs: vecs,
        })
    }

    pub fn diagonal(values: &[f64]) -> Result<Self> {
        Self::from_eigen(values, &Mat::identity(values.len(), values.len()))
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            entries: Mat::identity(dim, dim),
            eigvals: vec![1.0; dim],
            eigvecs: Mat::identity(dim, dim),
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.eigvals.len()
    }

    pub fn entries(&self) -> &Mat {
        &self.entries
    }

    /// Eigenvalues in ascending order.
    pub fn eigvals(&self) -> &[f64] {
        &self.eigvals
    }

    /// Orthogonal matrix whose columns are the eigenvectors.
    pub fn eigvecs(&self) -> &Mat {
        &self.eigvecs
    }

    pub fn min_eig(&self) -> f64 {
        self.eigvals[0]
    }

    pub fn max_eig(&self) -> f64 {
        self.eigvals[self.eigvals.len() - 1]
    }

    pub fn is_positive_definite(&self) -> bool {
        self.min_eig() > 0.0
    }

    pub fn ensure_positive_definite(&self) -> Result<()> {
        if self.is_positive_definite() {
            Ok(())
        } else {
            Err(Error::NotPositiveDefinite(self.min_eig()))
        }
    }

    /// `U f(Λ) U^T` for a scalar function of the eigenvalues.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> Mat {
        compose(&self.eigvals, &self.eigvecs, f)
    }

    /// Same eigenvectors, eigenvalues mapped by `f` (re-sorted if needed).
    pub fn with_spectrum(&self, f: impl Fn(f64) -> f64) -> Self {
        let vals: Vec<f64> = self.eigvals.iter().map(|&l| f(l)).collect();
        let (vals, vecs) = sort_ascending(vals, self.eigvecs.clone());
        let entries = compose(&vals, &vecs, |l| l);
        Self {
            entries,
            eigvals: vals,
            eigvecs: vecs,
        }
    }

    pub fn cond_number(&self) -> Result<f64> {
        cond_number(self)
    }

    pub fn inv_sqrt(&self) -> Result<Mat> {
        inv_sqrt(self, 0.0)
    }

    pub fn inverse(&self) -> Result<Mat> {
        self.ensure_positive_definite()?;
        Ok(self.map_spectrum(|l| 1.0 / l))
    }

    pub fn sqrt(&self) -> Result<Mat> {
        if self.min_eig() < 0.0 {
            return Err(Error::NotPositiveDefinite(self.min_eig()));
        }
        Ok(self.map_spectrum(f64::sqrt))
    }

    /// `eigvecs * diag(eigvals) * eigvecs^T`, recomputed from the spectrum.
    pub fn reconstruct(&self) -> Mat {
        compose(&self.eigvals, &self.eigvecs, |l| l)
    }
}

fn compose(vals: &[f64], vecs: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    let d = vals.len();
    let mut scaled = vecs.clone();
    for (j, &l) in vals.iter().enumerate() {
        let fl = f(l);
        for i in 0..d {
            scaled[(i, j)] *= fl;
        }
    }
    let out = scaled * vecs.transpose();
    symmetrize(&out)
}

fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Sorts eigenpairs ascending and fixes the sign of each eigenvector so that
/// its largest-magnitude component is positive.
fn sort_ascending(vals: Vec<f64>, vecs: Mat) -> (Vec<f64>, Mat) {
    let d = vals.len();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(a.cmp(&b)));
    let mut out_vals = Vec::with_capacity(d);
    let mut out_vecs = Mat::zeros(d, d);
    for (dst, &src) in order.iter().enumerate() {
        out_vals.push(vals[src]);
        let col = vecs.column(src);
        let mut pivot = 0;
        for i in 1..d {
            if col[i].abs() > col[pivot].abs() + 1e-14 {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            out_vecs[(i, dst)] = sign * col[i];
        }
    }
    (out_vals, out_vecs)
}

fn max_asymmetry(s: &Mat) -> f64 {
    let n = s.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((s[(i, j)] - s[(j, i)]).abs());
        }
    }
    worst
}

fn off_diagonal_norm(a: &Mat) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += a[(i, j)] * a[(i, j)];
            }
        }
    }
    acc.sqrt()
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
pub fn sym_eig(s: &Mat) -> Result<SpectralMatrix> {
    let n = s.nrows();
    if n == 0 || s.ncols() != n {
        return Err(Error::Dimension(format!(
            "expected a non-empty square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            context: "sym_eig input".into(),
            step: 0,
        });
    }
    let scale = s.amax().max(1.0);
    let asym = max_asymmetry(s);
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::Asymmetric(asym));
    }

    let mut a = symmetrize(s);
    let mut v = Mat::identity(n, n);
    let total = a.norm();
    let threshold = JACOBI_OFF_TOL * total;

    let mut converged = false;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&a) <= threshold {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                // A <- J^T A J with J the (p, q) plane rotation
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        let off = off_diagonal_norm(&a);
        if off > threshold {
            return Err(Error::Convergence {
                sweeps: JACOBI_MAX_SWEEPS,
                off_norm: off,
            });
        }
    }

    let vals: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    let (eigvals, eigvecs) = sort_ascending(vals, v);
    Ok(SpectralMatrix {
        entries: symmetrize(s),
        eigvals,
        eigvecs,
    })
}

/// `λ_max / λ_min` of a positive-definite matrix.
pub fn cond_number(s: &SpectralMatrix) -> Result<f64> {
    s.ensure_positive_definite()?;
    Ok(s.max_eig() / s.min_eig())
}

/// `(S + ridge·I)^{-1/2}`.
pub fn inv_sqrt(s: &SpectralMatrix, ridge: f64) -> Result<Mat> {
    if ridge < 0.0 {
        return Err(Error::Domain {
            name: "ridge",
            value: ridge,
            range: "[0, inf)",
        });
    }
    let lo = s.min_eig() + ridge;
    if lo <= 0.0 {
        return Err(Error::NotPositiveDefinite(lo));
    }
    Ok(s.map_spectrum(|l| 1.0 / (l + ridge).sqrt()))
}

/// Second-moment matrix `(1/n) Σ x xᵀ`, or the mean-subtracted covariance
/// (also normalized by `n`) when `centered` is set.
pub fn sample_covariance(points: &PointCloud, centered: bool) -> Result<Mat> {
    let n = points.len();
    if n < 2 {
        return Err(Error::SampleSize { needed: 2, got: n });
    }
    let d = points.dim();
    let mut mean = vec![0.0; d];
    if centered {
        for row in points.rows() {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
    }
    let mut acc = Mat::zeros(d, d);
    let mut centered_row = vec![0.0; d];
    for row in points.rows() {
        for k in 0..d {
            centered_row[k] = row[k] - mean[k];
        }
        for i in 0..d {
            let xi = centered_row[i];
            for j in i..d {
                acc[(i, j)] += xi * centered_row[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = acc[(i, j)] / n as f64;
            acc[(i, j)] = v;
            acc[(j, i)] = v;
        }
    }
    Ok(acc)
}

/// Plane rotation by `angle` radians (2x2).
pub fn rotation2(angle: f64) -> Mat {
    let (s, c) = angle.sin_cos();
    Mat::from_row_slice(2, 2, &[c, -s, s, c])
}

/// Frobenius norm of `a - b`.
pub fn frobenius_diff(a: &Mat, b: &Mat) -> f64 {
    (a - b).norm()
}
