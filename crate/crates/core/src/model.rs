//! Area-level log model with measurement error in the covariates.
//!
//! On the log scale each area carries a direct estimate `z = theta + e`,
//! `e ~ N(0, psi)`, with `theta = W'beta + nu`, `nu ~ N(0, sigma2_nu)`.
//! The covariates are observed as `w = W + eta`, `eta ~ N_p(0, Sigma)`.
//! Conditionally on `z`, `theta` is normal with mean
//! `gamma z + (1 - gamma) W'beta` and variance `gamma psi`, where
//! `gamma = (beta'Sigma beta + sigma2_nu) / (beta'Sigma beta + sigma2_nu + psi)`.
//! The estimand is `Y = exp(theta)`, so predictors and their conditional
//! variance follow from the log-normal moment generating function.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest exponent whose `exp` is still finite.
const MAX_EXPONENT: f64 = 709.782_712_893_384;

/// One small area's observed data, all on the log scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaObservation {
    pub area_id: String,
    /// Log of the direct estimate.
    pub z: f64,
    /// Observed log-covariates.
    pub w: DVector<f64>,
    /// Known sampling variance of `z`.
    pub psi: f64,
    /// Known measurement-error covariance of `w`.
    pub sigma_me: DMatrix<f64>,
}

impl AreaObservation {
    /// Builds a validated observation.
    pub fn new(
        area_id: impl Into<String>,
        z: f64,
        w: DVector<f64>,
        psi: f64,
        sigma_me: DMatrix<f64>,
    ) -> Result<Self> {
        let area_id = area_id.into();
        if !z.is_finite() || w.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "area '{area_id}': z and w must be finite"
            )));
        }
        if !psi.is_finite() || psi < 0.0 {
            return Err(Error::InvalidInput(format!(
                "area '{area_id}': psi must be finite and non-negative, got {psi}"
            )));
        }
        let p = w.len();
        if sigma_me.nrows() != p || sigma_me.ncols() != p {
            return Err(Error::DimensionMismatch(format!(
                "area '{area_id}': sigma_me is {}x{}, expected {p}x{p}",
                sigma_me.nrows(),
                sigma_me.ncols()
            )));
        }
        if !is_symmetric_psd(&sigma_me) {
            return Err(Error::NonPsdSigma { area: area_id });
        }
        Ok(Self {
            area_id,
            z,
            w,
            psi,
            sigma_me,
        })
    }

    /// Scalar-covariate convenience constructor.
    pub fn scalar(area_id: impl Into<String>, z: f64, w: f64, psi: f64, sigma_me: f64) -> Result<Self> {
        Self::new(
            area_id,
            z,
            DVector::from_element(1, w),
            psi,
            DMatrix::from_element(1, 1, sigma_me),
        )
    }

    pub fn p(&self) -> usize {
        self.w.len()
    }

    /// Same area with the measurement-error covariance set to zero.
    pub fn without_measurement_error(&self) -> Self {
        let p = self.p();
        Self {
            sigma_me: DMatrix::zeros(p, p),
            ..self.clone()
        }
    }
}

/// Symmetry within a relative tolerance and non-negative spectrum.
pub fn is_symmetric_psd(m: &DMatrix<f64>) -> bool {
    if m.nrows() != m.ncols() || m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let scale = m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return true;
    }
    let tol = 1e-10 * scale;
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return false;
            }
        }
    }
    if n == 1 {
        return m[(0, 0)] >= 0.0;
    }
    let eig = m.clone().symmetric_eigen();
    eig.eigenvalues.iter().all(|&l| l >= -tol * n as f64)
}

/// A factor `L` with `L L' = m` for a symmetric PSD `m` (eigen square root,
/// so singular covariances are fine).
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 1 {
        return DMatrix::from_element(1, 1, m[(0, 0)].max(0.0).sqrt());
    }
    let eig = m.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

/// Regression coefficients and random-effect variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub beta: DVector<f64>,
    pub sigma2_nu: f64,
}

impl ModelParams {
    pub fn new(beta: DVector<f64>, sigma2_nu: f64) -> Result<Self> {
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidInput("beta must be finite".into()));
        }
        if !sigma2_nu.is_finite() || sigma2_nu < 0.0 {
            return Err(Error::InvalidInput(format!(
                "sigma2_nu must be finite and non-negative, got {sigma2_nu}"
            )));
        }
        Ok(Self { beta, sigma2_nu })
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    /// `beta' Sigma beta + sigma2_nu`: the model variance of `theta` around `w'beta`.
    pub fn signal_variance(&self, sigma_me: &DMatrix<f64>) -> f64 {
        quadratic_form(&self.beta, sigma_me) + self.sigma2_nu
    }
}

/// `v' A v`.
pub fn quadratic_form(v: &DVector<f64>, a: &DMatrix<f64>) -> f64 {
    (v.transpose() * a * v)[(0, 0)]
}

/// Shrinkage factor `(beta'Sigma beta + sigma2_nu) / (beta'Sigma beta + sigma2_nu + psi)`.
pub fn shrinkage_gamma(params: &ModelParams, sigma_me: &DMatrix<f64>, psi: f64) -> Result<f64> {
    if sigma_me.nrows() != params.p() || sigma_me.ncols() != params.p() {
        return Err(Error::DimensionMismatch(format!(
            "sigma_me is {}x{}, beta has length {}",
            sigma_me.nrows(),
            sigma_me.ncols(),
            params.p()
        )));
    }
    if !psi.is_finite() || psi < 0.0 {
        return Err(Error::InvalidInput(format!("psi must be non-negative, got {psi}")));
    }
    // A PSD Sigma keeps the quadratic form non-negative; clamp rounding noise.
    let signal = params.signal_variance(sigma_me).max(0.0);
    if signal == 0.0 && psi == 0.0 {
        return Err(Error::DegenerateVariance);
    }
    Ok((signal / (signal + psi)).clamp(0.0, 1.0))
}

/// Conditional law of `theta` given `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorMoments {
    pub mean: f64,
    pub variance: f64,
    pub gamma: f64,
}

fn check_covariate(params: &ModelParams, covariate: &DVector<f64>) -> Result<()> {
    if covariate.len() != params.p() {
        return Err(Error::DimensionMismatch(format!(
            "covariate has length {}, beta has length {}",
            covariate.len(),
            params.p()
        )));
    }
    Ok(())
}

/// Posterior moments of `theta | z`, with `covariate` standing in for the latent `W`.
pub fn posterior_moments(
    obs: &AreaObservation,
    params: &ModelParams,
    covariate: &DVector<f64>,
) -> Result<PosteriorMoments> {
    check_covariate(params, covariate)?;
    let gamma = shrinkage_gamma(params, &obs.sigma_me, obs.psi)?;
    let synthetic = covariate.dot(&params.beta);
    Ok(PosteriorMoments {
        mean: gamma * obs.z + (1.0 - gamma) * synthetic,
        variance: gamma * obs.psi,
        gamma,
    })
}

fn checked_exp(exponent: f64) -> Result<f64> {
    if exponent.is_nan() || exponent > MAX_EXPONENT {
        return Err(Error::Overflow { exponent });
    }
    Ok(exponent.exp())
}

/// Log of the Bayes predictor `E[exp(theta) | z]`.
pub fn log_bayes_predict(
    obs: &AreaObservation,
    params: &ModelParams,
    covariate: &DVector<f64>,
) -> Result<f64> {
    let post = posterior_moments(obs, params, covariate)?;
    Ok(post.mean + 0.5 * post.variance)
}

/// Bayes predictor `exp{gamma z + (1 - gamma) m'beta + gamma psi / 2}` for a given covariate vector `m`.
pub fn bayes_predict(
    obs: &AreaObservation,
    params: &ModelParams,
    covariate: &DVector<f64>,
) -> Result<f64> {
    checked_exp(log_bayes_predict(obs, params, covariate)?)
}

/// Empirical Bayes predictor of `Y = exp(theta)` using the observed covariates.
pub fn eb_predict(obs: &AreaObservation, params: &ModelParams) -> Result<f64> {
    bayes_predict(obs, params, &obs.w)
}

/// Conditional variance of `exp(theta)` given `z`:
/// `exp{psi gamma} (exp{psi gamma} - 1) exp{2 [gamma z + (1 - gamma) m'beta]}`.
pub fn m1_term(
    obs: &AreaObservation,
    params: &ModelParams,
    covariate: &DVector<f64>,
) -> Result<f64> {
    let post = posterior_moments(obs, params, covariate)?;
    let v = post.variance;
    if v == 0.0 {
        return Ok(0.0);
    }
    checked_exp(v + v.exp_m1().ln() + 2.0 * post.mean)
}

/// Per-area EB prediction on the original scale with its plug-in `M1` term.
#[derive(Debug, Clone, PartialEq)]
pub struct EbPrediction {
    pub area_id: String,
    pub gamma: f64,
    pub prediction: f64,
    pub m1_hat: f64,
}

/// EB predictions for every area at `params`, in input order.
pub fn predict_all(areas: &[AreaObservation], params: &ModelParams) -> Result<Vec<EbPrediction>> {
    areas
        .iter()
        .map(|a| {
            let post = posterior_moments(a, params, &a.w)?;
            Ok(EbPrediction {
                area_id: a.area_id.clone(),
                gamma: post.gamma,
                prediction: checked_exp(post.mean + 0.5 * post.variance)?,
                m1_hat: m1_term(a, params, &a.w)?,
            })
        })
        .collect()
}
