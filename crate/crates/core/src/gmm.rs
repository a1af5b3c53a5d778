//! Zero-mean Gaussian mixture targets.
//!
//! Each component `k` induces its own intermediate covariance
//! `Σ_{t,k} = (1 - t)² I + t² H_k`; the mixture velocity is a
//! posterior-weighted sum of the per-component optimal linear maps.

use crate::analytic::{gaussian_log_density, mat_vec, sigma_eigenvalue, GaussianTransport, GdTrace};
use crate::error::{check_unit_interval, Error, Result};
use crate::linalg::{Mat, SpectralMatrix};

/// Tolerance on `Σ π_k = 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct ZeroMeanGmm {
    weights: Vec<f64>,
    components: Vec<SpectralMatrix>,
    dim: usize,
}

impl ZeroMeanGmm {
    pub fn new(weights: Vec<f64>, components: Vec<SpectralMatrix>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::Dimension(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        if let Some(&w) = weights.iter().find(|w| !(**w > 0.0)) {
            return Err(Error::Domain {
                name: "mixture weight",
                value: w,
                range: "(0, 1]",
            });
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Domain {
                name: "sum of mixture weights",
                value: total,
                range: "1",
            });
        }
        let dim = components[0].dim();
        for c in &components {
            if c.dim() != dim {
                return Err(Error::Dimension(format!(
                    "components of dimension {dim} and {}",
                    c.dim()
                )));
            }
            c.ensure_positive_definite()?;
        }
        Ok(Self {
            weights,
            components,
            dim,
        })
    }

    /// Mixture with explicit means; any nonzero mean is rejected.
    pub fn with_means(weights: Vec<f64>, means: &[Vec<f64>], components: Vec<SpectralMatrix>) -> Result<Self> {
        if means.iter().flatten().any(|&m| m != 0.0) {
            return Err(Error::Invalid("mixture means must be zero".into()));
        }
        Self::new(weights, components)
    }

    /// Equal weights.
    pub fn uniform(components: Vec<SpectralMatrix>) -> Result<Self> {
        let k = components.len().max(1);
        Self::new(vec![1.0 / k as f64; components.len()], components)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[SpectralMatrix] {
        &self.components
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn component(&self, k: usize) -> Result<&SpectralMatrix> {
        self.components.get(k).ok_or(Error::Index {
            index: k,
            len: self.components.len(),
        })
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension(format!(
                "point of length {} for a {}-dimensional mixture",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn component_sigma_t(&self, k: usize, t: f64) -> Result<SpectralMatrix> {
        let h = self.component(k)?;
        check_unit_interval("t", t)?;
        Ok(h.with_spectrum(|l| sigma_eigenvalue(l, t)))
    }

    /// `A*_k(t) = (tH_k - (1 - t)I) Σ_{t,k}⁻¹`.
    pub fn component_optimal_matrix(&self, k: usize, t: f64) -> Result<Mat> {
        let h = self.component(k)?;
        check_unit_interval("t", t)?;
        Ok(h.map_spectrum(|l| (t * l - (1.0 - t)) / sigma_eigenvalue(l, t)))
    }

    fn component_log_densities(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        check_unit_interval("t", t)?;
        self.check_point(x)?;
        (0..self.n_components())
            .map(|k| {
                let s = self.component_sigma_t(k, t)?;
                Ok(self.weights[k].ln() + gaussian_log_density(&s, x))
            })
            .collect()
    }

    /// Responsibilities `w_k(x) ∝ π_k N(x; 0, Σ_{t,k})`, normalized in log
    /// space with max subtraction.
    pub fn posterior_weights(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.component_log_densities(t, x)?))
    }

    pub fn log_density(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(log_sum_exp(&self.component_log_densities(t, x)?))
    }

    /// `-Σ_k w_k(x) Σ_{t,k}⁻¹ x`.
    pub fn mixture_score(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let w = self.posterior_weights(t, x)?;
        let mut out = vec![0.0; self.dim];
        for (k, wk) in w.iter().enumerate() {
            let inv = self.components[k].map_spectrum(|l| 1.0 / sigma_eigenvalue(l, t));
            for (o, v) in out.iter_mut().zip(mat_vec(&inv, x)) {
                *o -= wk * v;
            }
        }
        Ok(out)
    }

    /// `Σ_k w_k(x) A*_k(t) x`.
    pub fn mixture_velocity(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let w = self.posterior_weights(t, x)?;
        let mut out = vec![0.0; self.dim];
        for (k, wk) in w.iter().enumerate() {
            let a = self.component_optimal_matrix(k, t)?;
            for (o, v) in out.iter_mut().zip(mat_vec(&a, x)) {
                *o += wk * v;
            }
        }
        Ok(out)
    }

    /// `κ(Σ_{t,k})` for every component.
    pub fn component_condition_numbers(&self, t: f64) -> Result<Vec<f64>> {
        (0..self.n_components())
            .map(|k| self.component_sigma_t(k, t)?.cond_number())
            .collect()
    }

    /// Per-component whitening `T_k = Λ_k^{-1/2} U_kᵀ`.
    pub fn whitening_transforms(&self) -> Result<WhitenedGmm> {
        let mut transforms = Vec::with_capacity(self.n_components());
        let mut inverse_transforms = Vec::with_capacity(self.n_components());
        let mut whitened = Vec::with_capacity(self.n_components());
        for h in &self.components {
            h.ensure_positive_definite()?;
            let u = h.eigvecs();
            let mut t = u.transpose();
            let mut t_inv = u.clone();
            for (i, &l) in h.eigvals().iter().enumerate() {
                let s = l.sqrt();
                for j in 0..self.dim {
                    t[(i, j)] /= s;
                    t_inv[(j, i)] *= s;
                }
            }
            let w = &t * h.entries() * t.transpose();
            let w = (&w + w.transpose()) * 0.5;
            whitened.push(SpectralMatrix::from_symmetric(&w)?);
            transforms.push(t);
            inverse_transforms.push(t_inv);
        }
        Ok(WhitenedGmm {
            transforms,
            inverse_transforms,
            whitened: ZeroMeanGmm::new(self.weights.clone(), whitened)?,
        })
    }

    /// Runs one population-gradient recursion per component from `A = 0`,
    /// assuming each sample is routed to its own component. With
    /// `whitened`, every component is replaced by its whitened version
    /// `H̃_k = I`.
    pub fn gated_gd_simulate(&self, t: f64, eta: f64, steps: usize, whitened: bool) -> Result<Vec<GdTrace>> {
        if !(eta > 0.0) {
            return Err(Error::Domain {
                name: "eta",
                value: eta,
                range: "(0, inf)",
            });
        }
        let d = self.dim;
        let a0 = Mat::zeros(d, d);
        (0..self.n_components())
            .map(|k| {
                let h = if whitened {
                    SpectralMatrix::identity(d)
                } else {
                    self.components[k].clone()
                };
                GaussianTransport::new(h)?.gd_simulate(t, eta, steps, &a0)
            })
            .collect()
    }
}

/// `(component, mode)` with the largest contraction factor, i.e. the mode
/// that converges last.
pub fn slowest_mode(traces: &[GdTrace]) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), f64)> = None;
    for (k, tr) in traces.iter().enumerate() {
        for (i, rho) in tr.contraction_factors().into_iter().enumerate() {
            if best.is_none_or(|(_, b)| rho.abs() > b) {
                best = Some(((k, i), rho.abs()));
            }
        }
    }
    best.map(|(idx, _)| idx)
}

/// `(component, mode)` with the smallest `σ_{k,i}(t)`.
pub fn smallest_sigma_mode(gmm: &ZeroMeanGmm, t: f64) -> Result<(usize, usize)> {
    check_unit_interval("t", t)?;
    let mut best = ((0, 0), f64::INFINITY);
    for (k, h) in gmm.components().iter().enumerate() {
        for (i, &l) in h.eigvals().iter().enumerate() {
            let s = sigma_eigenvalue(l, t);
            if s < best.1 {
                best = ((k, i), s);
            }
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone)]
pub struct WhitenedGmm {
    pub transforms: Vec<Mat>,
    pub inverse_transforms: Vec<Mat>,
    /// Mixture of the whitened components `T_k H_k T_kᵀ`.
    pub whitened: ZeroMeanGmm,
}

impl WhitenedGmm {
    /// `Σ_k w_k(x) T_k⁻¹ Ã_k T_k x`, with the weights of the original
    /// mixture and one whitened-space matrix per component.
    pub fn recovered_velocity(&self, gmm: &ZeroMeanGmm, t: f64, x: &[f64], whitened_maps: &[Mat]) -> Result<Vec<f64>> {
        if whitened_maps.len() != self.transforms.len() {
            return Err(Error::Dimension(format!(
                "{} whitened maps for {} components",
                whitened_maps.len(),
                self.transforms.len()
            )));
        }
        let w = gmm.posterior_weights(t, x)?;
        let mut out = vec![0.0; x.len()];
        for (k, wk) in w.iter().enumerate() {
            let m = &self.inverse_transforms[k] * &whitened_maps[k] * &self.transforms[k];
            for (o, v) in out.iter_mut().zip(mat_vec(&m, x)) {
                *o += wk * v;
            }
        }
        Ok(out)
    }
}

/// `((2t - 1) / ((1 - t)² + t²)) I`, the optimal map of every whitened
/// component.
pub fn whitened_optimal_matrix(dim: usize, t: f64) -> Result<Mat> {
    check_unit_interval("t", t)?;
    let c = (2.0 * t - 1.0) / sigma_eigenvalue(1.0, t);
    Ok(Mat::identity(dim, dim) * c)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_grad;
    use crate::linalg::{frobenius_diff, rotation2};
    use proptest::prelude::*;

    fn diag(v: &[f64]) -> SpectralMatrix {
        SpectralMatrix::diagonal(v).unwrap()
    }

    fn two_component() -> ZeroMeanGmm {
        ZeroMeanGmm::new(vec![0.3, 0.7], vec![diag(&[1.0, 1.0]), diag(&[1.0, 1e-3])]).unwrap()
    }

    #[test]
    fn construction_checks() {
        assert!(ZeroMeanGmm::new(vec![0.5, 0.6], vec![diag(&[1.0]), diag(&[2.0])]).is_err());
        assert!(ZeroMeanGmm::new(vec![1.0, 0.0], vec![diag(&[1.0]), diag(&[2.0])]).is_err());
        assert!(ZeroMeanGmm::new(vec![0.5, 0.5], vec![diag(&[1.0]), diag(&[2.0, 1.0])]).is_err());
        assert!(ZeroMeanGmm::new(vec![1.0], vec![diag(&[-1.0])]).is_err());
        assert!(ZeroMeanGmm::with_means(vec![1.0], &[vec![0.5]], vec![diag(&[1.0])]).is_err());
        assert!(ZeroMeanGmm::with_means(vec![1.0], &[vec![0.0]], vec![diag(&[1.0])]).is_ok());
    }

    #[test]
    fn component_sigma_examples() {
        let g = ZeroMeanGmm::uniform(vec![diag(&[4.0, 0.25]), diag(&[2.0, 3.0])]).unwrap();
        for k in 0..2 {
            assert!(frobenius_diff(g.component_sigma_t(k, 0.0).unwrap().entries(), &Mat::identity(2, 2)) < 1e-15);
            assert!(
                frobenius_diff(
                    g.component_sigma_t(k, 1.0).unwrap().entries(),
                    g.components()[k].entries()
                ) < 1e-15
            );
        }
        let s = g.component_sigma_t(0, 0.5).unwrap();
        assert!((s.entries()[(0, 0)] - 1.25).abs() < 1e-15);
        assert!((s.entries()[(1, 1)] - 0.3125).abs() < 1e-15);
        assert!(matches!(g.component_sigma_t(2, 0.5), Err(Error::Index { .. })));
        assert!(g.component_sigma_t(0, 1.5).is_err());
    }

    #[test]
    fn posterior_trivial_cases() {
        let h = SpectralMatrix::from_symmetric(
            &(rotation2(0.4)
                * Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 9.0]))
                * rotation2(0.4).transpose()),
        )
        .unwrap();
        let g = ZeroMeanGmm::new(vec![0.2, 0.8], vec![h.clone(), h]).unwrap();
        let w = g.posterior_weights(0.6, &[1.3, -0.4]).unwrap();
        assert!((w[0] - 0.2).abs() < 1e-12 && (w[1] - 0.8).abs() < 1e-12);
        let single = ZeroMeanGmm::new(vec![1.0], vec![diag(&[3.0, 0.5])]).unwrap();
        assert_eq!(single.posterior_weights(0.3, &[5.0, 1.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn posterior_matches_density_ratio() {
        // At t = 1 the component covariances equal H_k.
        let g = ZeroMeanGmm::uniform(vec![diag(&[1.0, 1.0]), diag(&[4.0, 4.0])]).unwrap();
        let x = [2.0, 0.0];
        let w = g.posterior_weights(1.0, &x).unwrap();
        let dens = |s: f64| (-(x[0] * x[0] + x[1] * x[1]) / (2.0 * s)).exp() / (2.0 * std::f64::consts::PI * s);
        let ratio = dens(1.0) / dens(4.0);
        assert!((w[0] / w[1] - ratio).abs() / ratio < 1e-12);
    }

    #[test]
    fn posterior_stable_for_extreme_ratios() {
        let g = ZeroMeanGmm::uniform(vec![diag(&[1e-3, 1e-3]), diag(&[1e3, 1e3])]).unwrap();
        let w = g.posterior_weights(1.0, &[200.0, 0.0]).unwrap();
        assert!(w.iter().all(|v| v.is_finite()));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w[1] > 1.0 - 1e-12);
    }

    #[test]
    fn score_and_velocity_reductions() {
        let h = diag(&[2.0, 0.1]);
        let single = ZeroMeanGmm::new(vec![1.0], vec![h.clone()]).unwrap();
        let model = GaussianTransport::new(h).unwrap();
        let x = [0.7, -1.1];
        let t = 0.35;
        let s1 = single.mixture_score(t, &x).unwrap();
        let s2 = model.analytic_score(t, &x).unwrap();
        let v1 = single.mixture_velocity(t, &x).unwrap();
        let v2 = mat_vec(&model.optimal_velocity_matrix(t).unwrap(), &x);
        for i in 0..2 {
            assert!((s1[i] - s2[i]).abs() < 1e-12);
            assert!((v1[i] - v2[i]).abs() < 1e-12);
        }
        let g = two_component();
        assert_eq!(g.mixture_score(t, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(g.mixture_velocity(t, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn score_matches_log_density_gradient() {
        let g = ZeroMeanGmm::new(vec![0.4, 0.6], vec![diag(&[3.0, 0.2]), diag(&[0.5, 2.0])]).unwrap();
        for &(t, x) in &[(0.3, [0.8, -0.5]), (0.7, [-1.2, 0.3]), (0.95, [0.1, 1.7])] {
            let s = g.mixture_score(t, &x).unwrap();
            let fd = finite_difference_grad(&x, 1e-5, |p| g.log_density(t, p).unwrap());
            for i in 0..2 {
                assert!((s[i] - fd[i]).abs() / s[i].abs().max(1e-3) < 1e-6);
            }
        }
    }

    #[test]
    fn velocity_saturates_on_dominant_component() {
        let g = ZeroMeanGmm::uniform(vec![diag(&[50.0, 50.0]), diag(&[0.01, 0.01])]).unwrap();
        let t = 0.9;
        let x = [6.0, 6.0];
        let w = g.posterior_weights(t, &x).unwrap();
        assert!(w[0] > 0.999);
        let v = g.mixture_velocity(t, &x).unwrap();
        let v1 = mat_vec(&g.component_optimal_matrix(0, t).unwrap(), &x);
        for i in 0..2 {
            assert!((v[i] - v1[i]).abs() < 1e-3);
        }
    }

    #[test]
    fn whitening_examples() {
        let r = rotation2(0.9);
        let rotated = SpectralMatrix::from_symmetric(
            &(&r * Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![0.01, 30.0])) * r.transpose()),
        )
        .unwrap();
        let g = ZeroMeanGmm::uniform(vec![SpectralMatrix::identity(2), diag(&[4.0, 9.0]), rotated]).unwrap();
        let w = g.whitening_transforms().unwrap();
        let id = Mat::identity(2, 2);
        for k in 0..3 {
            let t = &w.transforms[k];
            let h = g.components()[k].entries();
            assert!(frobenius_diff(&(t * h * t.transpose()), &id) < 1e-9);
            assert!(frobenius_diff(&(&w.inverse_transforms[k] * t), &id) < 1e-10);
        }
        assert!(frobenius_diff(&(&w.transforms[0] * w.transforms[0].transpose()), &id) < 1e-15);
        let mut abs: Vec<f64> = w.transforms[1].iter().map(|v| v.abs()).filter(|v| *v > 0.0).collect();
        abs.sort_by(f64::total_cmp);
        assert!((abs[0] - 1.0 / 3.0).abs() < 1e-15 && (abs[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn whitened_optimal_examples() {
        assert_eq!(whitened_optimal_matrix(2, 0.5).unwrap(), Mat::zeros(2, 2));
        assert_eq!(whitened_optimal_matrix(2, 1.0).unwrap(), Mat::identity(2, 2));
        assert_eq!(whitened_optimal_matrix(2, 0.0).unwrap(), -Mat::identity(2, 2));
        assert!(whitened_optimal_matrix(2, -0.1).is_err());
    }

    #[test]
    fn whitened_components_are_perfectly_conditioned() {
        let g = ZeroMeanGmm::uniform(vec![diag(&[1e-3, 1.0]), diag(&[7.0, 2e3])]).unwrap();
        let w = g.whitening_transforms().unwrap();
        for t in [0.0, 0.2, 0.5, 0.9, 1.0] {
            for kappa in w.whitened.component_condition_numbers(t).unwrap() {
                assert!((kappa - 1.0).abs() < 1e-10);
            }
            let a = whitened_optimal_matrix(2, t).unwrap();
            for k in 0..2 {
                assert!(frobenius_diff(&w.whitened.component_optimal_matrix(k, t).unwrap(), &a) < 1e-10);
            }
        }
    }

    #[test]
    fn recovered_velocity_with_scalar_maps() {
        // With the shared isotropic whitened map the recovery is c·x, which
        // equals the mixture velocity only when every H_k is the identity.
        let t = 0.7;
        let x = [0.4, -0.9];
        let c = (2.0 * t - 1.0) / sigma_eigenvalue(1.0, t);
        let g = two_component();
        let w = g.whitening_transforms().unwrap();
        let maps = vec![whitened_optimal_matrix(2, t).unwrap(); 2];
        let v = w.recovered_velocity(&g, t, &x, &maps).unwrap();
        for i in 0..2 {
            assert!((v[i] - c * x[i]).abs() < 1e-12);
        }
        let iso = ZeroMeanGmm::uniform(vec![SpectralMatrix::identity(2), SpectralMatrix::identity(2)]).unwrap();
        let wi = iso.whitening_transforms().unwrap();
        let vi = wi.recovered_velocity(&iso, t, &x, &maps).unwrap();
        let vm = iso.mixture_velocity(t, &x).unwrap();
        for i in 0..2 {
            assert!((vi[i] - vm[i]).abs() < 1e-12);
        }
        assert!(w.recovered_velocity(&g, t, &x, &maps[..1]).is_err());
    }

    #[test]
    fn gated_gd_examples() {
        let iso = ZeroMeanGmm::uniform(vec![SpectralMatrix::identity(2), SpectralMatrix::identity(2)]).unwrap();
        let traces = iso.gated_gd_simulate(0.4, 0.2, 50, false).unwrap();
        assert_eq!(traces[0].frobenius_errors, traces[1].frobenius_errors);

        let g = two_component();
        let t = 0.9;
        let eta = 0.2;
        let traces = g.gated_gd_simulate(t, eta, 10, false).unwrap();
        let expected = 1.0 - 2.0 * eta * sigma_eigenvalue(1e-3, t);
        let (k, i) = slowest_mode(&traces).unwrap();
        assert_eq!((k, i), (1, 0));
        assert!((traces[k].contraction_factors()[i] - expected).abs() < 1e-15);
        assert_eq!(smallest_sigma_mode(&g, t).unwrap(), (1, 0));

        let white = g.gated_gd_simulate(t, eta, 10, true).unwrap();
        let rho = 1.0 - 2.0 * eta * sigma_eigenvalue(1.0, t);
        for tr in &white {
            for f in tr.contraction_factors() {
                assert!((f - rho).abs() < 1e-15);
            }
        }
        assert!(g.gated_gd_simulate(t, 0.0, 10, false).is_err());
    }

    fn spd2() -> impl Strategy<Value = SpectralMatrix> {
        (1e-3f64..1e3, 1e-3f64..1e3, 0.0f64..std::f64::consts::PI).prop_map(|(a, b, th)| {
            let r = rotation2(th);
            let m = &r * Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![a, b])) * r.transpose();
            SpectralMatrix::from_symmetric(&((&m + m.transpose()) * 0.5)).unwrap()
        })
    }

    proptest! {
        #[test]
        fn posterior_is_a_distribution(
            h1 in spd2(), h2 in spd2(), h3 in spd2(),
            p in 0.05f64..0.9, t in 0.0f64..=1.0,
            x in prop::array::uniform2(-20.0f64..20.0),
        ) {
            let q = (1.0 - p) / 2.0;
            let g = ZeroMeanGmm::new(vec![p, q, 1.0 - p - q], vec![h1, h2, h3]).unwrap();
            let w = g.posterior_weights(t, &x).unwrap();
            prop_assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // common shift of all component log-densities leaves the weights unchanged
            let logs = g.component_log_densities(t, &x).unwrap();
            let shifted: Vec<f64> = logs.iter().map(|l| l + 123.4).collect();
            let ws = softmax(&shifted);
            for (a, b) in w.iter().zip(&ws) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn conjugated_maps_recover_mixture_velocity(
            h1 in spd2(), h2 in spd2(), t in 0.0f64..=1.0,
            x in prop::array::uniform2(-5.0f64..5.0),
        ) {
            let g = ZeroMeanGmm::uniform(vec![h1, h2]).unwrap();
            let w = g.whitening_transforms().unwrap();
            let maps: Vec<Mat> = (0..2)
                .map(|k| &w.transforms[k] * g.component_optimal_matrix(k, t).unwrap() * &w.inverse_transforms[k])
                .collect();
            let v = w.recovered_velocity(&g, t, &x, &maps).unwrap();
            let want = g.mixture_velocity(t, &x).unwrap();
            for i in 0..2 {
                prop_assert!((v[i] - want[i]).abs() <= 1e-8 * (1.0 + want[i].abs()));
            }
        }

        #[test]
        fn slowest_mode_is_smallest_sigma(
            h1 in spd2(), h2 in spd2(), t in 0.0f64..=1.0,
        ) {
            let g = ZeroMeanGmm::uniform(vec![h1, h2]).unwrap();
            let s_max = (0..2)
                .map(|k| g.component_sigma_t(k, t).unwrap().max_eig())
                .fold(0.0, f64::max);
            let eta = 0.4 / s_max;
            let traces = g.gated_gd_simulate(t, eta, 1, false).unwrap();
            let (k, i) = slowest_mode(&traces).unwrap();
            let s = traces[k].sigma_eigvals[i];
            let smin = (0..2)
                .map(|k| g.component_sigma_t(k, t).unwrap().min_eig())
                .fold(f64::INFINITY, f64::min);
            prop_assert_eq!(s, smin);
        }
    }
}
