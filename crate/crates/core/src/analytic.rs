//! The exactly solvable Gaussian transport model.
//!
//! Source `x0 ~ N(0, I)`, target `x1 ~ N(0, H)`, linear path
//! `x_t = (1 - t) x0 + t x1`. The marginal covariance, score and optimal
//! linear velocity are all closed form, and gradient descent on the
//! per-time regression `E‖A x_t - (x1 - x0)‖²` decouples along the
//! eigenvectors of `Σ_t = (1 - t)² I + t² H`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_unit_interval, Error, Result};
use crate::linalg::{inv_sqrt, Mat, SpectralMatrix};
use crate::rng;

#[derive(Debug, Clone)]
pub struct GaussianTransport {
    h: SpectralMatrix,
}

/// Eigenvalue of `Σ_t` associated with an eigenvalue `lambda` of `H`.
#[inline]
pub fn sigma_eigenvalue(lambda: f64, t: f64) -> f64 {
    (1.0 - t) * (1.0 - t) + t * t * lambda
}

impl GaussianTransport {
    pub fn new(h: SpectralMatrix) -> Result<Self> {
        h.ensure_positive_definite()?;
        Ok(Self { h })
    }

    pub fn from_matrix(h: &Mat) -> Result<Self> {
        Self::new(SpectralMatrix::from_symmetric(h)?)
    }

    pub fn h(&self) -> &SpectralMatrix {
        &self.h
    }

    pub fn dim(&self) -> usize {
        self.h.dim()
    }

    /// `Σ_t = (1 - t)² I + t² H`, sharing eigenvectors with `H`.
    pub fn sigma_t(&self, t: f64) -> Result<SpectralMatrix> {
        check_unit_interval("t", t)?;
        Ok(self.h.with_spectrum(|l| sigma_eigenvalue(l, t)))
    }

    /// `σ_i(t)` in the order of the eigenvalues of `H` (ascending).
    pub fn sigma_eigvals(&self, t: f64) -> Result<Vec<f64>> {
        check_unit_interval("t", t)?;
        Ok(self.h.eigvals().iter().map(|&l| sigma_eigenvalue(l, t)).collect())
    }

    /// Cross-covariance `C = Cov(x1 - x0, x_t) = tH - (1 - t)I`.
    pub fn cross_covariance(&self, t: f64) -> Result<Mat> {
        check_unit_interval("t", t)?;
        Ok(self.h.map_spectrum(|l| t * l - (1.0 - t)))
    }

    /// Score of the intermediate marginal, `-Σ_t⁻¹ x`.
    pub fn analytic_score(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        check_unit_interval("t", t)?;
        self.check_dim(x)?;
        let inv = self.h.map_spectrum(|l| -1.0 / sigma_eigenvalue(l, t));
        Ok(mat_vec(&inv, x))
    }

    /// Log-density of `N(0, Σ_t)` at `x`.
    pub fn log_density(&self, t: f64, x: &[f64]) -> Result<f64> {
        let sigma = self.sigma_t(t)?;
        self.check_dim(x)?;
        Ok(gaussian_log_density(&sigma, x))
    }

    /// `A*(t) = (tH - (1 - t)I) Σ_t⁻¹`.
    pub fn optimal_velocity_matrix(&self, t: f64) -> Result<Mat> {
        check_unit_interval("t", t)?;
        Ok(self.h.map_spectrum(|l| (t * l - (1.0 - t)) / sigma_eigenvalue(l, t)))
    }

    /// `κ(Σ_t)` over a grid, from the eigenvalue formula.
    pub fn condition_trajectory(&self, ts: &[f64]) -> Result<Vec<(f64, f64)>> {
        if ts.is_empty() {
            return Err(Error::Invalid("empty time grid".into()));
        }
        let lo = self.h.min_eig();
        let hi = self.h.max_eig();
        ts.iter()
            .map(|&t| {
                check_unit_interval("t", t)?;
                Ok((t, sigma_eigenvalue(hi, t) / sigma_eigenvalue(lo, t)))
            })
            .collect()
    }

    pub fn predicted_gd_iterations(&self, t: f64, eta: f64, eps: f64) -> Result<GdIterationEstimate> {
        let sig = self.sigma_eigvals(t)?;
        let s_min = sig.iter().copied().fold(f64::INFINITY, f64::min);
        let s_max = sig.iter().copied().fold(0.0, f64::max);
        predicted_iterations(s_min, s_max, eta, eps)
    }

    /// Full-batch gradient descent `A ← A - 2η(AΣ_t - C)` from `a0`.
    pub fn gd_simulate(&self, t: f64, eta: f64, steps: usize, a0: &Mat) -> Result<GdTrace> {
        if !(eta > 0.0) {
            return Err(Error::Domain {
                name: "eta",
                value: eta,
                range: "(0, inf)",
            });
        }
        if steps == 0 {
            return Err(Error::Invalid("gd_simulate needs at least one step".into()));
        }
        let sigma = self.sigma_t(t)?;
        let c = self.cross_covariance(t)?;
        let a_star = self.optimal_velocity_matrix(t)?;
        self.check_square(a0)?;
        Ok(run_gd(&sigma, &c, &a_star, eta, steps, a0, t))
    }

    /// Single-sample SGD on the per-time regression, starting from `A = 0`.
    pub fn sgd_simulate(&self, t: f64, eta: f64, steps: usize, seed: u64) -> Result<SgdTrace> {
        let d = self.dim();
        self.sgd_simulate_from(t, eta, steps, seed, &Mat::zeros(d, d))
    }

    pub fn sgd_simulate_from(&self, t: f64, eta: f64, steps: usize, seed: u64, a0: &Mat) -> Result<SgdTrace> {
        let sigma = self.sigma_t(t)?;
        let limit = 1.0 / sigma.max_eig();
        if !(eta > 0.0 && eta < limit) {
            return Err(Error::Stability { eta, limit });
        }
        if steps < SGD_MIN_STEPS {
            return Err(Error::SampleSize {
                needed: SGD_MIN_STEPS,
                got: steps,
            });
        }
        self.check_square(a0)?;
        let d = self.dim();
        let a_star = self.optimal_velocity_matrix(t)?;
        let u = sigma.eigvecs().clone();
        let sig_vals = sigma.eigvals().to_vec();
        let h_half = self.h.sqrt()?;
        let mut rng = rng::stream(seed, "analytic.sgd");

        let burn_in = steps - steps / 2;
        let window = steps - burn_in;
        let block_len = (window / SGD_BLOCKS).max(1);
        let mut block_sums = vec![vec![0.0; SGD_BLOCKS]; d];
        let mut block_counts = vec![0usize; SGD_BLOCKS];
        let mut noise_sums = vec![0.0; d];
        let mut noise_count = 0usize;

        let mut a = a0.clone();
        let mut x0 = vec![0.0; d];
        let mut z = vec![0.0; d];
        let mut x_t = vec![0.0; d];
        let mut y = vec![0.0; d];
        let mut resid = vec![0.0; d];
        let mut prev_modes = (&a - &a_star) * &u;
        for m in 0..steps {
            for k in 0..d {
                x0[k] = StandardNormal.sample(&mut rng);
                z[k] = StandardNormal.sample(&mut rng);
            }
            for i in 0..d {
                let mut x1 = 0.0;
                for k in 0..d {
                    x1 += h_half[(i, k)] * z[k];
                }
                x_t[i] = (1.0 - t) * x0[i] + t * x1;
                y[i] = x1 - x0[i];
            }
            for i in 0..d {
                let mut acc = -y[i];
                for k in 0..d {
                    acc += a[(i, k)] * x_t[k];
                }
                resid[i] = acc;
            }
            for i in 0..d {
                let g = 2.0 * eta * resid[i];
                for k in 0..d {
                    a[(i, k)] -= g * x_t[k];
                }
            }
            let modes = (&a - &a_star) * &u;
            if m >= burn_in {
                let b = ((m - burn_in) / block_len).min(SGD_BLOCKS - 1);
                block_counts[b] += 1;
                for i in 0..d {
                    let col = modes.column(i);
                    block_sums[i][b] += col.norm_squared();
                    let contraction = 1.0 - 2.0 * eta * sig_vals[i];
                    let noise = col - prev_modes.column(i) * contraction;
                    noise_sums[i] += noise.norm_squared();
                }
                noise_count += 1;
            }
            prev_modes = modes;
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    context: "sgd_simulate".into(),
                    step: m,
                });
            }
        }
        let per_mode_variance = block_sums
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .zip(&block_counts)
                    .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
                    .collect()
            })
            .collect();
        let noise_scale_estimates = noise_sums
            .into_iter()
            .map(|s| s / noise_count as f64 / (eta * eta))
            .collect();
        Ok(SgdTrace {
            eta,
            t,
            sigma_eigvals: sig_vals,
            per_mode_variance,
            noise_scale_estimates,
        })
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "vector of length {} for a {}-dimensional model",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn check_square(&self, a: &Mat) -> Result<()> {
        let d = self.dim();
        if a.nrows() != d || a.ncols() != d {
            return Err(Error::Dimension(format!(
                "{}x{} matrix for a {d}-dimensional model",
                a.nrows(),
                a.ncols()
            )));
        }
        Ok(())
    }
}

pub const SGD_MIN_STEPS: usize = 1000;
/// Number of blocks the trailing half of an SGD run is averaged over.
pub const SGD_BLOCKS: usize = 10;

pub(crate) fn mat_vec(m: &Mat, x: &[f64]) -> Vec<f64> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)] * x[j]).sum())
        .collect()
}

/// Log-density of a zero-mean Gaussian with the given covariance.
pub fn gaussian_log_density(cov: &SpectralMatrix, x: &[f64]) -> f64 {
    let u = cov.eigvecs();
    let d = cov.dim();
    let mut quad = 0.0;
    let mut log_det = 0.0;
    for (i, &l) in cov.eigvals().iter().enumerate() {
        let proj: f64 = (0..d).map(|k| u[(k, i)] * x[k]).sum();
        quad += proj * proj / l;
        log_det += l.ln();
    }
    -0.5 * (quad + log_det + d as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Iteration-count prediction for gradient descent on a quadratic whose
/// Hessian eigenvalues (up to the factor 2) span `[s_min, s_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GdIterationEstimate {
    /// Contraction factor of the slowest mode, `1 - 2ησ_min`.
    pub rho: f64,
    /// `log(1/ε) / (-log |ρ|)`, at least one iteration.
    pub exact: f64,
    /// Small-step approximation `log(1/ε) / (2ησ_min)`.
    pub approx: f64,
}

pub fn predicted_iterations(s_min: f64, s_max: f64, eta: f64, eps: f64) -> Result<GdIterationEstimate> {
    let limit = 1.0 / s_max;
    if !(eta > 0.0 && eta < limit) {
        return Err(Error::Stability { eta, limit });
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Domain {
            name: "eps",
            value: eps,
            range: "(0, 1)",
        });
    }
    let rho = 1.0 - 2.0 * eta * s_min;
    let log_inv_eps = (1.0 / eps).ln();
    let exact = if rho.abs() == 0.0 {
        1.0
    } else {
        (log_inv_eps / -rho.abs().ln()).max(1.0)
    };
    Ok(GdIterationEstimate {
        rho,
        exact,
        approx: log_inv_eps / (2.0 * eta * s_min),
    })
}

/// Deterministic gradient-descent trace in the eigenbasis of `Σ_t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GdTrace {
    pub eta: f64,
    pub t: f64,
    /// Eigenvalues `σ_i(t)`, ascending; mode `i` below refers to this order.
    pub sigma_eigvals: Vec<f64>,
    /// `per_mode_errors[i][k]`: signed error of mode `i` after `k` steps,
    /// measured along the direction of that mode's initial error column.
    pub per_mode_errors: Vec<Vec<f64>>,
    /// `‖A_k - A*‖_F` for `k = 0..=steps`.
    pub frobenius_errors: Vec<f64>,
    /// Largest error component orthogonal to the initial direction of its
    /// mode, over all modes and steps. Zero in exact arithmetic.
    pub max_orthogonal_residual: f64,
    /// Set when the iterates overflowed; later entries are `+inf`.
    pub diverged: bool,
}

impl GdTrace {
    pub fn steps(&self) -> usize {
        self.frobenius_errors.len() - 1
    }

    /// Contraction factor `1 - 2ησ_i` of each mode.
    pub fn contraction_factors(&self) -> Vec<f64> {
        self.sigma_eigvals.iter().map(|&s| 1.0 - 2.0 * self.eta * s).collect()
    }
}

fn run_gd(sigma: &SpectralMatrix, c: &Mat, a_star: &Mat, eta: f64, steps: usize, a0: &Mat, t: f64) -> GdTrace {
    let d = sigma.dim();
    let u = sigma.eigvecs();
    let modes0 = (a0 - a_star) * u;
    let directions: Vec<_> = (0..d)
        .map(|i| {
            let col = modes0.column(i).into_owned();
            let n = col.norm();
            if n > 0.0 {
                col / n
            } else {
                col
            }
        })
        .collect();

    let mut per_mode_errors = vec![Vec::with_capacity(steps + 1); d];
    let mut frobenius_errors = Vec::with_capacity(steps + 1);
    let mut max_orthogonal_residual = 0.0_f64;
    let mut diverged = false;

    let mut a = a0.clone();
    let record = |a: &Mat, per_mode: &mut Vec<Vec<f64>>, frob: &mut Vec<f64>, orth: &mut f64| -> bool {
        let e = a - a_star;
        let fe = e.norm();
        if !fe.is_finite() {
            return false;
        }
        frob.push(fe);
        let modes = &e * u;
        for i in 0..d {
            let col = modes.column(i);
            let along = col.dot(&directions[i]);
            per_mode[i].push(along);
            let resid = (col - &directions[i] * along).norm();
            *orth = orth.max(resid);
        }
        true
    };
    record(
        &a,
        &mut per_mode_errors,
        &mut frobenius_errors,
        &mut max_orthogonal_residual,
    );
    let sig = sigma.entries();
    for _ in 0..steps {
        if !diverged {
            let grad = (&a * sig - c) * (2.0 * eta);
            a -= grad;
            diverged = !record(
                &a,
                &mut per_mode_errors,
                &mut frobenius_errors,
                &mut max_orthogonal_residual,
            );
        }
        if diverged {
            frobenius_errors.push(f64::INFINITY);
            for row in per_mode_errors.iter_mut() {
                row.push(f64::INFINITY);
            }
        }
    }
    GdTrace {
        eta,
        t,
        sigma_eigvals: sigma.eigvals().to_vec(),
        per_mode_errors,
        frobenius_errors,
        max_orthogonal_residual,
        diverged,
    }
}

/// Stochastic trace summary: mean squared per-mode error over the trailing
/// half of the run, in [`SGD_BLOCKS`] consecutive blocks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgdTrace {
    pub eta: f64,
    pub t: f64,
    pub sigma_eigvals: Vec<f64>,
    /// `per_mode_variance[i][w]`: mean of `‖(A_m - A*) u_i‖²` over block `w`.
    pub per_mode_variance: Vec<Vec<f64>>,
    /// Per-mode noise variance divided by `η²`, i.e. estimates of the
    /// constants `c_i` in `Var(ζ_i) ≈ c_i η²`.
    pub noise_scale_estimates: Vec<f64>,
}

impl SgdTrace {
    /// Block-averaged steady-state variance of each mode.
    pub fn steady_state_variance(&self) -> Vec<f64> {
        self.per_mode_variance
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .collect()
    }

    /// `Var(e_i) · σ_i / η` per mode; constant across modes when the
    /// steady-state variance scales like `η / σ_i`.
    pub fn normalized_variance(&self) -> Vec<f64> {
        self.steady_state_variance()
            .iter()
            .zip(&self.sigma_eigvals)
            .map(|(v, s)| v * s / self.eta)
            .collect()
    }
}

/// How gradient descent picks its step size from the input covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StepRule {
    Fixed {
        eta: f64,
    },
    /// `η = fraction / λ_max`.
    InverseLambdaMax {
        fraction: f64,
    },
    /// `η = 1 / L` with `L = 2 λ_max` the Lipschitz constant of the gradient
    /// of `E‖Ax - y‖²`.
    InverseLipschitz,
}

impl StepRule {
    pub fn eta(&self, lambda_max: f64) -> f64 {
        match *self {
            StepRule::Fixed { eta } => eta,
            StepRule::InverseLambdaMax { fraction } => fraction / lambda_max,
            StepRule::InverseLipschitz => 0.5 / lambda_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Result {
    pub kappa: f64,
    pub eta_plain: f64,
    pub eta_whitened: f64,
    pub k_plain: u64,
    pub k_whitened: u64,
    pub plain_converged: bool,
    pub whitened_converged: bool,
}

/// Iteration cap for [`theorem1_experiment`].
pub const THEOREM1_MAX_ITERS: u64 = 10_000_000;

/// Gradient descent with exact population gradients on `E‖Ax - y‖²` with
/// input second moment `sigma`, plain versus whitened by `sigma^{-1/2}`.
/// Counts iterations until `‖A_k - A*‖_F ≤ eps ‖A_0 - A*‖_F`.
pub fn theorem1_experiment(sigma: &SpectralMatrix, rule: StepRule, eps: f64) -> Result<Theorem1Result> {
    sigma.ensure_positive_definite()?;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Domain {
            name: "eps",
            value: eps,
            range: "(0, 1)",
        });
    }
    let d = sigma.dim();
    // target map with every eigen-direction excited
    let a_true = Mat::from_fn(d, d, |i, j| {
        1.0 / (1.0 + i as f64 + j as f64) + if i == j { 0.5 } else { 0.0 }
    });
    let c = &a_true * sigma.entries();
    let eta_plain = rule.eta(sigma.max_eig());
    let (k_plain, plain_converged) = gd_iterations_to(sigma.entries(), &c, eta_plain, eps);

    let p = inv_sqrt(sigma, 0.0)?;
    let sigma_w = &p * sigma.entries() * &p;
    let sigma_w = (&sigma_w + sigma_w.transpose()) * 0.5;
    let c_w = &c * &p;
    let whitened = SpectralMatrix::from_symmetric(&sigma_w)?;
    let eta_whitened = rule.eta(whitened.max_eig());
    let (k_whitened, whitened_converged) = gd_iterations_to(&sigma_w, &c_w, eta_whitened, eps);

    Ok(Theorem1Result {
        kappa: sigma.cond_number()?,
        eta_plain,
        eta_whitened,
        k_plain,
        k_whitened,
        plain_converged,
        whitened_converged,
    })
}

fn gd_iterations_to(sigma: &Mat, c: &Mat, eta: f64, eps: f64) -> (u64, bool) {
    let d = sigma.nrows();
    let a_star = SpectralMatrix::from_symmetric(sigma)
        .and_then(|s| s.inverse())
        .map(|inv| c * inv)
        .expect("positive-definite input");
    let mut a = Mat::zeros(d, d);
    let e0 = (&a - &a_star).norm();
    let target = eps * e0;
    let step = Mat::identity(d, d) - sigma * (2.0 * eta);
    let offset = c * (2.0 * eta);
    for k in 1..=THEOREM1_MAX_ITERS {
        a = &a * &step + &offset;
        let e = (&a - &a_star).norm();
        if !e.is_finite() {
            return (k, false);
        }
        if e <= target {
            return (k, true);
        }
    }
    (THEOREM1_MAX_ITERS, false)
}

/// Samples `n` pairs and returns the empirical per-time regression loss
/// `mean ‖A x_t - (x1 - x0)‖²` for each candidate matrix.
pub fn empirical_regression_loss(
    model: &GaussianTransport,
    t: f64,
    candidates: &[Mat],
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_unit_interval("t", t)?;
    let d = model.dim();
    let h_half = model.h.sqrt()?;
    let mut rng = rng::stream(seed, "analytic.regression_loss");
    let mut totals = vec![0.0; candidates.len()];
    let mut x0 = vec![0.0; d];
    let mut z = vec![0.0; d];
    let mut x_t = vec![0.0; d];
    let mut y = vec![0.0; d];
    for _ in 0..n {
        for k in 0..d {
            x0[k] = StandardNormal.sample(&mut rng);
            z[k] = StandardNormal.sample(&mut rng);
        }
        for i in 0..d {
            let x1: f64 = (0..d).map(|k| h_half[(i, k)] * z[k]).sum();
            x_t[i] = (1.0 - t) * x0[i] + t * x1;
            y[i] = x1 - x0[i];
        }
        for (total, a) in totals.iter_mut().zip(candidates) {
            let pred = mat_vec(a, &x_t);
            *total += pred.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        }
    }
    Ok(totals.into_iter().map(|s| s / n as f64).collect())
}
