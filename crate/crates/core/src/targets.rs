//! Base and target probability models.
//!
//! A [`TargetModel`] carries an unnormalized potential `U` (density `exp(-U)`),
//! its gradient, the log normalization when it is known in closed form, and
//! exact samplers for the families that admit them. Gaussian mixtures also
//! expose their exact Ornstein-Uhlenbeck time marginals and scores, which
//! serve as oracles for the diffusion-based code paths.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::vecops::log_sum_exp;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Eigen-decomposition of one mode covariance, `C = Q diag(lambda) Q^T`.
#[derive(Debug, Clone, PartialEq)]
struct ModeSpectrum {
    /// Column-major eigenvectors: column `i` is `q[i*d..(i+1)*d]`.
    q: Vec<f64>,
    lambda: Vec<f64>,
}

/// Finite mixture of Gaussians. Point masses (zero covariance) are allowed;
/// they only have a density after positive OU time.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    probs: Vec<f64>,
    means: Vec<Vec<f64>>,
    covs: Vec<Vec<f64>>,
    spectra: Vec<ModeSpectrum>,
}

/// Exact parameters of a mixture evolved by the OU process to time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureTimeMarginal {
    pub means_hat: Vec<Vec<f64>>,
    /// Row-major `d x d` covariances.
    pub covs_hat: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

/// Score of a mixture together with its first derivatives, at one point.
#[derive(Debug, Clone)]
pub(crate) struct ScoreDerivatives {
    pub score: Vec<f64>,
    /// Row-major Hessian of `log rho_t`, symmetric.
    pub hessian: Vec<f64>,
    pub divergence: f64,
    pub grad_divergence: Vec<f64>,
}

impl GaussianMixture {
    /// Builds a mixture from per-mode probabilities, means and row-major covariances.
    pub fn new(
        dim: usize,
        probs: Vec<f64>,
        means: Vec<Vec<f64>>,
        covs: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("mixture dimension must be >= 1".into()));
        }
        let n = probs.len();
        if n == 0 || means.len() != n || covs.len() != n {
            return Err(Error::InvalidArgument(format!(
                "mixture needs matching probs/means/covs (got {}, {}, {})",
                n,
                means.len(),
                covs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument("mode probabilities must be >= 0".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "mode probabilities must sum to 1 (sum = {total})"
            )));
        }
        let mut spectra = Vec::with_capacity(n);
        for (j, (m, c)) in means.iter().zip(&covs).enumerate() {
            check_dim(dim, m.len())?;
            check_dim(dim * dim, c.len())?;
            if m.iter().chain(c).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("mixture mode {j}")));
            }
            spectra.push(spectrum(dim, c, j)?);
        }
        Ok(Self { dim, probs, means, covs, spectra })
    }

    /// Mixture with isotropic modes `C_j = var_j I`.
    pub fn isotropic(dim: usize, probs: Vec<f64>, means: Vec<Vec<f64>>, vars: &[f64]) -> Result<Self> {
        let covs = vars
            .iter()
            .map(|&v| {
                let mut c = vec![0.0; dim * dim];
                for i in 0..dim {
                    c[i * dim + i] = v;
                }
                c
            })
            .collect();
        Self::new(dim, probs, means, covs)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_modes(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covs(&self) -> &[Vec<f64>] {
        &self.covs
    }

    fn has_point_mass(&self) -> bool {
        self.spectra.iter().any(|s| s.lambda.iter().any(|&l| l <= 0.0))
    }

    /// Exact OU-evolved parameters: means scaled by `e^{-t}`, covariances
    /// `C e^{-2t} + (1 - e^{-2t}) I`.
    pub fn ou_marginal(&self, t: f64) -> Result<MixtureTimeMarginal> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::InvalidArgument(format!("OU time must be >= 0, got {t}")));
        }
        let d = self.dim;
        let decay = (-t).exp();
        let var_scale = (-2.0 * t).exp();
        let var_add = -(-2.0 * t).exp_m1();
        let means_hat = self.means.iter().map(|m| m.iter().map(|v| v * decay).collect()).collect();
        let covs_hat = self
            .covs
            .iter()
            .map(|c| {
                let mut out: Vec<f64> = c.iter().map(|v| v * var_scale).collect();
                for i in 0..d {
                    out[i * d + i] += var_add;
                }
                out
            })
            .collect();
        Ok(MixtureTimeMarginal { means_hat, covs_hat, probs: self.probs.clone() })
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::InvalidArgument(format!("OU time must be >= 0, got {t}")));
        }
        if t == 0.0 && self.has_point_mass() {
            return Err(Error::Singular(
                "mixture has a degenerate mode; its density only exists for t > 0".into(),
            ));
        }
        Ok(())
    }

    /// Per-mode log weights `log p_j + log N(x; m_j(t), C_j(t))` and the
    /// whitened residuals `y` with variances `mu` (in the eigenbasis), both
    /// flattened mode-major as `[j * d + i]`.
    fn mode_terms(&self, t: f64, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let m = self.n_modes();
        let decay = (-t).exp();
        let var_scale = (-2.0 * t).exp();
        let var_add = -(-2.0 * t).exp_m1();
        let mut logw = Vec::with_capacity(m);
        let mut ys = vec![0.0; m * d];
        let mut mus = vec![0.0; m * d];
        for j in 0..m {
            let spec = &self.spectra[j];
            let mean = &self.means[j];
            let (y, mu) = (&mut ys[j * d..(j + 1) * d], &mut mus[j * d..(j + 1) * d]);
            let (mut quad, mut logdet) = (0.0, 0.0);
            for i in 0..d {
                let row = &spec.q[i * d..(i + 1) * d];
                y[i] = row.iter().zip(x.iter().zip(mean)).map(|(a, (xv, mv))| a * (xv - mv * decay)).sum();
                mu[i] = spec.lambda[i] * var_scale + var_add;
                quad += y[i] * y[i] / mu[i];
                logdet += mu[i].ln();
            }
            let lp = if self.probs[j] > 0.0 { self.probs[j].ln() } else { f64::NEG_INFINITY };
            logw.push(lp - 0.5 * (d as f64) * LN_2PI - 0.5 * logdet - 0.5 * quad);
        }
        (logw, ys, mus)
    }

    /// Log density of the mixture evolved to OU time `t` (`t = 0` is the mixture itself).
    pub fn log_density_at(&self, t: f64, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        self.check_time(t)?;
        let (logw, _, _) = self.mode_terms(t, x);
        Ok(log_sum_exp(&logw))
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.log_density_at(0.0, x)
    }

    /// Exact score `grad log rho_t(x)`.
    pub fn score_at(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        self.check_time(t)?;
        Ok(self.score_unchecked(t, x))
    }

    fn responsibilities(logw: &[f64]) -> Vec<f64> {
        let lse = log_sum_exp(logw);
        logw.iter().map(|l| (l - lse).exp()).collect()
    }

    pub(crate) fn score_unchecked(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let (logw, ys, mus) = self.mode_terms(t, x);
        let resp = Self::responsibilities(&logw);
        let mut s = vec![0.0; d];
        for j in 0..self.n_modes() {
            if resp[j] == 0.0 {
                continue;
            }
            let q = &self.spectra[j].q;
            for i in 0..d {
                let c = -resp[j] * ys[j * d + i] / mus[j * d + i];
                for (k, sk) in s.iter_mut().enumerate() {
                    *sk += c * q[i * d + k];
                }
            }
        }
        s
    }

    /// Score, Hessian of the log density, its trace, and the gradient of the trace.
    pub(crate) fn score_derivatives(&self, t: f64, x: &[f64]) -> ScoreDerivatives {
        let d = self.dim;
        let m = self.n_modes();
        let (logw, ys, mus) = self.mode_terms(t, x);
        let resp = Self::responsibilities(&logw);
        // per-mode score s_j = -P_j r_j, P_j s_j, and tr P_j
        let mut sj = vec![vec![0.0; d]; m];
        let mut pj_sj = vec![vec![0.0; d]; m];
        let mut tr_p = vec![0.0; m];
        for j in 0..m {
            let q = &self.spectra[j].q;
            for i in 0..d {
                let mu = mus[j * d + i];
                tr_p[j] += 1.0 / mu;
                let a = -ys[j * d + i] / mu;
                let b = -ys[j * d + i] / (mu * mu);
                for k in 0..d {
                    sj[j][k] += a * q[i * d + k];
                    pj_sj[j][k] += b * q[i * d + k];
                }
            }
        }
        let mut score = vec![0.0; d];
        for j in 0..m {
            for k in 0..d {
                score[k] += resp[j] * sj[j][k];
            }
        }
        // H = sum_j r_j (-P_j + s_j s_j^T) - s s^T
        let mut hessian = vec![0.0; d * d];
        for j in 0..m {
            if resp[j] == 0.0 {
                continue;
            }
            let q = &self.spectra[j].q;
            for a in 0..d {
                for b in 0..d {
                    let mut p_ab = 0.0;
                    for i in 0..d {
                        p_ab += q[i * d + a] * q[i * d + b] / mus[j * d + i];
                    }
                    hessian[a * d + b] += resp[j] * (sj[j][a] * sj[j][b] - p_ab);
                }
            }
        }
        for a in 0..d {
            for b in 0..d {
                hessian[a * d + b] -= score[a] * score[b];
            }
        }
        let divergence: f64 = (0..d).map(|a| hessian[a * d + a]).sum();
        // grad div = sum_j r_j (s_j - s)(|s_j|^2 - tr P_j) - 2 sum_j r_j P_j s_j - 2 H s
        let mut grad_divergence = vec![0.0; d];
        for j in 0..m {
            if resp[j] == 0.0 {
                continue;
            }
            let c = sj[j].iter().map(|v| v * v).sum::<f64>() - tr_p[j];
            for k in 0..d {
                grad_divergence[k] +=
                    resp[j] * ((sj[j][k] - score[k]) * c - 2.0 * pj_sj[j][k]);
            }
        }
        for a in 0..d {
            let hs: f64 = (0..d).map(|b| hessian[a * d + b] * score[b]).sum();
            grad_divergence[a] -= 2.0 * hs;
        }
        ScoreDerivatives { score, hessian, divergence, grad_divergence }
    }

    /// Exact i.i.d. draws: categorical mode choice, then a Gaussian draw.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let d = self.dim;
        let mut cdf = Vec::with_capacity(self.n_modes());
        let mut acc = 0.0;
        for p in &self.probs {
            acc += p;
            cdf.push(acc);
        }
        (0..n)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * acc;
                let j = cdf.iter().position(|&c| u < c).unwrap_or(self.n_modes() - 1);
                let j = if self.probs[j] > 0.0 {
                    j
                } else {
                    // u landed exactly on the boundary of an empty mode
                    self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(j)
                };
                let spec = &self.spectra[j];
                let mut x = self.means[j].clone();
                for i in 0..d {
                    let z: f64 = StandardNormal.sample(rng);
                    let a = spec.lambda[i].sqrt() * z;
                    for (k, xk) in x.iter_mut().enumerate() {
                        *xk += a * spec.q[i * d + k];
                    }
                }
                x
            })
            .collect()
    }
}

fn spectrum(d: usize, c: &[f64], mode: usize) -> Result<ModeSpectrum> {
    let scale = c.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    for i in 0..d {
        for j in 0..i {
            if (c[i * d + j] - c[j * d + i]).abs() > 1e-12 * scale {
                return Err(Error::InvalidArgument(format!("covariance of mode {mode} is not symmetric")));
            }
        }
    }
    let m = DMatrix::from_row_slice(d, d, c);
    let eig = SymmetricEigen::new(m);
    let mut lambda = Vec::with_capacity(d);
    for &l in eig.eigenvalues.iter() {
        if l < -1e-12 * scale {
            return Err(Error::InvalidArgument(format!(
                "covariance of mode {mode} is not positive semidefinite"
            )));
        }
        lambda.push(if l <= 1e-14 * scale { 0.0 } else { l });
    }
    let mut q = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            q[i * d + k] = eig.eigenvectors[(k, i)];
        }
    }
    Ok(ModeSpectrum { q, lambda })
}

/// Family of the potential.
#[derive(Debug, Clone, PartialEq)]
pub enum PotentialKind {
    /// `U(x) = |x|^2 / 2`
    StandardNormal,
    /// `U(x) = -log rho_mix(x)`
    GaussianMixture(GaussianMixture),
    /// `U(x) = a (x_1^2 - 1)^2 + |x_{2..}|^2 / 2`
    DoubleWell { a: f64 },
}

/// Unnormalized probability model with density proportional to `exp(-U)`.
///
/// A constant `offset` is added to every potential so normalization constants
/// can be made nontrivial on purpose.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    dim: usize,
    kind: PotentialKind,
    offset: f64,
    log_z: Option<f64>,
}

impl TargetModel {
    pub fn standard_normal(dim: usize) -> Result<Self> {
        Self::standard_normal_with_offset(dim, 0.0)
    }

    pub fn standard_normal_with_offset(dim: usize, offset: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be >= 1".into()));
        }
        Ok(Self {
            dim,
            kind: PotentialKind::StandardNormal,
            offset,
            log_z: Some(0.5 * dim as f64 * LN_2PI - offset),
        })
    }

    /// Mixture target. Every mode must have a positive definite covariance.
    pub fn gaussian_mixture(mixture: GaussianMixture, offset: f64) -> Result<Self> {
        if mixture.has_point_mass() {
            return Err(Error::InvalidArgument(
                "target mixture covariances must be positive definite".into(),
            ));
        }
        Ok(Self {
            dim: mixture.dim(),
            kind: PotentialKind::GaussianMixture(mixture),
            offset,
            log_z: Some(-offset),
        })
    }

    /// `U(x) = alpha |x|^2 / 2`, i.e. `N(0, I / alpha)` with `Z = (2 pi / alpha)^{d/2}`.
    pub fn isotropic_gaussian(dim: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("precision must be > 0, got {alpha}")));
        }
        let mix = GaussianMixture::isotropic(dim, vec![1.0], vec![vec![0.0; dim]], &[1.0 / alpha])?;
        let offset = -0.5 * dim as f64 * (2.0 * std::f64::consts::PI / alpha).ln();
        Self::gaussian_mixture(mix, offset)
    }

    pub fn double_well(dim: usize, a: f64) -> Result<Self> {
        Self::double_well_with_offset(dim, a, 0.0)
    }

    pub fn double_well_with_offset(dim: usize, a: f64, offset: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be >= 1".into()));
        }
        if !(a > 0.0) || !a.is_finite() {
            return Err(Error::InvalidArgument(format!("double-well height must be > 0, got {a}")));
        }
        Ok(Self { dim, kind: PotentialKind::DoubleWell { a }, offset, log_z: None })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &PotentialKind {
        &self.kind
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// Natural log of `Z = integral exp(-U)`, when known exactly.
    pub fn log_z(&self) -> Option<f64> {
        self.log_z
    }

    pub fn mixture(&self) -> Option<&GaussianMixture> {
        match &self.kind {
            PotentialKind::GaussianMixture(m) => Some(m),
            _ => None,
        }
    }

    pub fn potential(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        Ok(self.potential_unchecked(x))
    }

    pub(crate) fn potential_unchecked(&self, x: &[f64]) -> f64 {
        let u = match &self.kind {
            PotentialKind::StandardNormal => 0.5 * x.iter().map(|v| v * v).sum::<f64>(),
            PotentialKind::GaussianMixture(m) => {
                let (logw, _, _) = m.mode_terms(0.0, x);
                -log_sum_exp(&logw)
            }
            PotentialKind::DoubleWell { a } => {
                let w = x[0] * x[0] - 1.0;
                a * w * w + 0.5 * x[1..].iter().map(|v| v * v).sum::<f64>()
            }
        };
        u + self.offset
    }

    pub fn grad_potential(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        Ok(self.grad_potential_unchecked(x))
    }

    pub(crate) fn grad_potential_unchecked(&self, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            PotentialKind::StandardNormal => x.to_vec(),
            PotentialKind::GaussianMixture(m) => {
                m.score_unchecked(0.0, x).into_iter().map(|v| -v).collect()
            }
            PotentialKind::DoubleWell { a } => {
                let mut g = x.to_vec();
                g[0] = 4.0 * a * x[0] * (x[0] * x[0] - 1.0);
                g
            }
        }
    }

    /// Normalized log density `-U(x) - log Z`; requires a known normalization.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let log_z = self
            .log_z
            .ok_or_else(|| Error::Unsupported("normalization of this model is unknown".into()))?;
        Ok(-self.potential(x)? - log_z)
    }

    /// `n` i.i.d. draws from the base (standard normal) model.
    pub fn sample_base<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        match self.kind {
            PotentialKind::StandardNormal => Ok((0..n)
                .map(|_| (0..self.dim).map(|_| StandardNormal.sample(rng)).collect())
                .collect()),
            _ => Err(Error::Unsupported("only the standard normal model is a samplable base".into())),
        }
    }

    /// Exact i.i.d. draws from a mixture target.
    pub fn sample_mixture_exact<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        match &self.kind {
            PotentialKind::GaussianMixture(m) => Ok(m.sample(n, rng)),
            _ => Err(Error::Unsupported("exact sampling needs a Gaussian mixture".into())),
        }
    }

    pub fn ou_marginal(&self, t: f64) -> Result<MixtureTimeMarginal> {
        self.mixture()
            .ok_or_else(|| Error::Unsupported("OU marginals need a Gaussian mixture".into()))?
            .ou_marginal(t)
    }

    pub fn exact_score(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.mixture()
            .ok_or_else(|| Error::Unsupported("exact scores need a Gaussian mixture".into()))?
            .score_at(t, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn phi(x: f64) -> f64 {
        (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    fn two_mode() -> TargetModel {
        let m = GaussianMixture::isotropic(1, vec![0.5, 0.5], vec![vec![-2.0], vec![2.0]], &[1.0, 1.0])
            .unwrap();
        TargetModel::gaussian_mixture(m, 0.0).unwrap()
    }

    #[test]
    fn standard_normal_potential_values() {
        let t = TargetModel::standard_normal(1).unwrap();
        assert_eq!(t.potential(&[0.0]).unwrap(), 0.0);
        let t2 = TargetModel::standard_normal(2).unwrap();
        assert_eq!(t2.potential(&[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(t2.grad_potential(&[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
        assert!(matches!(t2.potential(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn two_mode_potential_at_origin() {
        // independent scalar evaluation, frozen: 2 + ln(2 pi) / 2
        let direct = -(0.5 * phi(-2.0) + 0.5 * phi(2.0)).ln();
        assert!((direct - 2.918_938_533_204_673).abs() < 1e-12);
        let u = two_mode().potential(&[0.0]).unwrap();
        assert!((u - direct).abs() < 1e-12);
        assert!(two_mode().grad_potential(&[0.0]).unwrap()[0].abs() < 1e-15);
    }

    #[test]
    fn mixture_gradient_matches_finite_difference() {
        let t = two_mode();
        let h = 1e-5;
        let fd = (t.potential(&[1.0 + h]).unwrap() - t.potential(&[1.0 - h]).unwrap()) / (2.0 * h);
        let g = t.grad_potential(&[1.0]).unwrap()[0];
        assert!(((g - fd) / fd).abs() < 1e-6, "{g} vs {fd}");
    }

    #[test]
    fn gradients_match_fd_at_random_points() {
        let mix = GaussianMixture::new(
            2,
            vec![0.3, 0.7],
            vec![vec![1.0, -1.0], vec![-1.5, 0.5]],
            vec![vec![1.0, 0.3, 0.3, 0.5], vec![0.4, -0.1, -0.1, 2.0]],
        )
        .unwrap();
        let models = [
            TargetModel::gaussian_mixture(mix, 0.7).unwrap(),
            TargetModel::double_well(2, 2.0).unwrap(),
            TargetModel::standard_normal(2).unwrap(),
        ];
        let mut rng = stream(11, &[]);
        for model in &models {
            for _ in 0..100 {
                let x = crate::rng::standard_normal_vec(&mut rng, 2);
                let g = model.grad_potential(&x).unwrap();
                for i in 0..2 {
                    let h = 1e-5;
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    let fd = (model.potential(&xp).unwrap() - model.potential(&xm).unwrap()) / (2.0 * h);
                    let err = (g[i] - fd).abs() / fd.abs().max(1e-2);
                    assert!(err < 1e-5, "component {i}: {} vs {fd}", g[i]);
                }
            }
        }
    }

    #[test]
    fn base_sampling_moments_and_determinism() {
        let base = TargetModel::standard_normal(1).unwrap();
        assert!(base.sample_base(0, &mut stream(1, &[])).unwrap().is_empty());
        let n = 100_000;
        let xs = base.sample_base(n, &mut stream(1, &[])).unwrap();
        let m = xs.iter().map(|x| x[0]).sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x[0] - m).powi(2)).sum::<f64>() / n as f64;
        assert!(m.abs() < 4.0 / (n as f64).sqrt());
        assert!((v - 1.0).abs() < 0.05);
        let again = base.sample_base(n, &mut stream(1, &[])).unwrap();
        assert_eq!(xs, again);
        assert!(matches!(two_mode().sample_base(3, &mut stream(1, &[])), Err(Error::Unsupported(_))));
    }

    #[test]
    fn mixture_sampling() {
        let single = GaussianMixture::isotropic(1, vec![1.0], vec![vec![0.0]], &[1.0]).unwrap();
        let t = TargetModel::gaussian_mixture(single, 0.0).unwrap();
        let n = 100_000;
        let xs = t.sample_mixture_exact(n, &mut stream(2, &[])).unwrap();
        let m = xs.iter().map(|x| x[0]).sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x[0] - m).powi(2)).sum::<f64>() / n as f64;
        assert!(m.abs() < 4.0 / (n as f64).sqrt());
        assert!((v - 1.0).abs() < 0.05);

        let lopsided =
            GaussianMixture::isotropic(1, vec![1.0, 0.0], vec![vec![-50.0], vec![50.0]], &[1.0, 1.0]).unwrap();
        let xs = lopsided.sample(10_000, &mut stream(3, &[]));
        assert!(xs.iter().all(|x| x[0] < 0.0));

        let xs = two_mode().sample_mixture_exact(n, &mut stream(4, &[])).unwrap();
        let m = xs.iter().map(|x| x[0]).sum::<f64>() / n as f64;
        // mixture std = sqrt(1 + 4)
        assert!(m.abs() < 4.0 * 5f64.sqrt() / (n as f64).sqrt());
        assert!(TargetModel::double_well(1, 2.0).unwrap().sample_mixture_exact(1, &mut stream(0, &[])).is_err());
    }

    #[test]
    fn ou_marginal_values() {
        let t = two_mode();
        let m0 = t.ou_marginal(0.0).unwrap();
        assert_eq!(m0.means_hat, vec![vec![-2.0], vec![2.0]]);
        assert_eq!(m0.covs_hat, vec![vec![1.0], vec![1.0]]);

        let four = GaussianMixture::isotropic(1, vec![1.0], vec![vec![4.0]], &[1.0]).unwrap();
        let m = four.ou_marginal(2f64.ln()).unwrap();
        assert!((m.means_hat[0][0] - 2.0).abs() < 1e-14);
        assert!((m.covs_hat[0][0] - 1.0).abs() < 1e-14);

        let late = t.ou_marginal(20.0).unwrap();
        for (mh, ch) in late.means_hat.iter().zip(&late.covs_hat) {
            assert!(mh[0].abs() < 1e-8);
            assert!((ch[0] - 1.0).abs() < 1e-8);
        }
        assert_eq!(late.probs, vec![0.5, 0.5]);
        assert!(t.ou_marginal(-1.0).is_err());
    }

    #[test]
    fn point_mass_marginals_are_positive_definite_after_zero() {
        let pm = GaussianMixture::new(2, vec![0.5, 0.5], vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![vec![0.0; 4]; 2])
            .unwrap();
        let m = pm.ou_marginal(0.1).unwrap();
        let v = -(-0.2f64).exp_m1();
        assert!((m.covs_hat[0][0] - v).abs() < 1e-15 && m.covs_hat[0][1] == 0.0);
        assert!(pm.score_at(0.1, &[0.3, 0.2]).is_ok());
        assert!(matches!(pm.score_at(0.0, &[0.3, 0.2]), Err(Error::Singular(_))));
        assert!(TargetModel::gaussian_mixture(pm, 0.0).is_err());
    }

    #[test]
    fn exact_score_closed_forms() {
        let std1 = GaussianMixture::isotropic(2, vec![1.0], vec![vec![0.0, 0.0]], &[1.0]).unwrap();
        for &t in &[0.0, 0.3, 2.0] {
            let s = std1.score_at(t, &[0.7, -1.2]).unwrap();
            assert!((s[0] + 0.7).abs() < 1e-14 && (s[1] - 1.2).abs() < 1e-14);
        }
        let sigma2 = 3.0;
        let wide = GaussianMixture::isotropic(1, vec![1.0], vec![vec![0.0]], &[sigma2]).unwrap();
        for &t in &[0.0, 0.5, 1.5] {
            let e = (-2.0 * t as f64).exp();
            let want = -0.9 / (sigma2 * e + 1.0 - e);
            assert!((wide.score_at(t, &[0.9]).unwrap()[0] - want).abs() < 1e-13);
        }
        let s = two_mode().exact_score(0.4, &[0.0]).unwrap();
        assert!(s[0].abs() < 1e-15);
    }

    #[test]
    fn exact_score_matches_fd_of_log_density() {
        let mix = GaussianMixture::new(
            2,
            vec![0.25, 0.75],
            vec![vec![2.0, 0.0], vec![-1.0, 1.0]],
            vec![vec![0.5, 0.2, 0.2, 0.4], vec![0.0; 4]],
        )
        .unwrap();
        let mut rng = stream(5, &[]);
        for &t in &[0.05, 0.5, 1.0] {
            for _ in 0..20 {
                let x = crate::rng::standard_normal_vec(&mut rng, 2);
                let s = mix.score_at(t, &x).unwrap();
                for i in 0..2 {
                    let h = 1e-5;
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    let fd = (mix.log_density_at(t, &xp).unwrap() - mix.log_density_at(t, &xm).unwrap())
                        / (2.0 * h);
                    assert!((s[i] - fd).abs() / fd.abs().max(1e-2) < 1e-5);
                }
            }
        }
    }

    #[test]
    fn score_derivatives_match_fd() {
        let mix = GaussianMixture::new(
            2,
            vec![0.4, 0.6],
            vec![vec![1.0, 0.5], vec![-1.0, -0.5]],
            vec![vec![0.6, 0.1, 0.1, 0.3], vec![0.2, 0.0, 0.0, 0.9]],
        )
        .unwrap();
        let t = 0.3;
        let x = [0.2, -0.4];
        let sd = mix.score_derivatives(t, &x);
        let h = 1e-5;
        let mut div_fd_grad = [0.0; 2];
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let sp = mix.score_unchecked(t, &xp);
            let sm = mix.score_unchecked(t, &xm);
            for k in 0..2 {
                let fd = (sp[k] - sm[k]) / (2.0 * h);
                assert!((sd.hessian[k * 2 + i] - fd).abs() < 1e-6);
            }
            let dp = mix.score_derivatives(t, &xp).divergence;
            let dm = mix.score_derivatives(t, &xm).divergence;
            div_fd_grad[i] = (dp - dm) / (2.0 * h);
        }
        for i in 0..2 {
            assert!((sd.grad_divergence[i] - div_fd_grad[i]).abs() < 1e-5);
        }
        assert!((sd.divergence - (sd.hessian[0] + sd.hessian[3])).abs() < 1e-15);
    }

    #[test]
    fn normalization_constants_by_quadrature() {
        let mix = GaussianMixture::new(
            2,
            vec![0.5, 0.5],
            vec![vec![1.0, 0.0], vec![-1.0, 0.5]],
            vec![vec![0.5, 0.1, 0.1, 0.3], vec![0.4, 0.0, 0.0, 0.6]],
        )
        .unwrap();
        let models = [
            TargetModel::standard_normal_with_offset(2, 0.3).unwrap(),
            TargetModel::gaussian_mixture(mix, -1.2).unwrap(),
            TargetModel::isotropic_gaussian(2, 4.0).unwrap(),
        ];
        for model in &models {
            let (lo, hi, n) = (-8.0, 8.0, 801);
            let h = (hi - lo) / (n - 1) as f64;
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let x = [lo + i as f64 * h, lo + j as f64 * h];
                    total += (-model.potential(&x).unwrap()).exp();
                }
            }
            total *= h * h;
            let z = model.log_z().unwrap().exp();
            assert!(((total - z) / z).abs() < 1e-4, "{total} vs {z}");
        }
        let g = TargetModel::isotropic_gaussian(1, 4.0).unwrap();
        assert!((g.potential(&[0.5]).unwrap() - 0.5).abs() < 1e-14);
        assert!(TargetModel::double_well(2, 2.0).unwrap().log_z().is_none());
    }

    #[test]
    fn rejects_bad_mixtures() {
        assert!(GaussianMixture::isotropic(1, vec![0.5, 0.6], vec![vec![0.0], vec![1.0]], &[1.0, 1.0]).is_err());
        assert!(GaussianMixture::new(2, vec![1.0], vec![vec![0.0, 0.0]], vec![vec![1.0, 0.5, 0.4, 1.0]]).is_err());
        assert!(GaussianMixture::new(2, vec![1.0], vec![vec![0.0, 0.0]], vec![vec![1.0, 2.0, 2.0, 1.0]]).is_err());
        assert!(GaussianMixture::new(1, vec![-0.5, 1.5], vec![vec![0.0], vec![1.0]], vec![vec![1.0]; 2]).is_err());
    }
}
