//! Moment estimation of `(beta, sigma2_nu)`.
//!
//! `beta` solves the measurement-error corrected weighted normal equations
//! `sum_i D_i (w_i w_i' - Sigma_i) beta = sum_i D_i w_i z_i` with
//! `D_i^{-1} = beta'Sigma_i beta + sigma2_nu + psi_i`, and `sigma2_nu` comes
//! from the mean squared residual minus the mean sampling variance,
//! truncated at zero. The two are alternated until the parameters settle.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{quadratic_form, shrinkage_gamma, AreaObservation, ModelParams};

/// Which variance components the `sigma2_nu` moment equation removes from the
/// mean squared residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMoment {
    /// `mean (z - w'beta)^2 - mean psi`.
    #[default]
    SamplingOnly,
    /// `mean (z - w'beta)^2 - mean psi - mean beta'Sigma beta`, i.e. the
    /// residual variance implied by the `D_i` weights.
    SamplingAndMeasurement,
}

impl VarianceMoment {
    pub fn as_str(self) -> &'static str {
        match self {
            VarianceMoment::SamplingOnly => "sampling-only",
            VarianceMoment::SamplingAndMeasurement => "sampling-and-measurement",
        }
    }
}

impl std::str::FromStr for VarianceMoment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampling-only" => Ok(VarianceMoment::SamplingOnly),
            "sampling-and-measurement" => Ok(VarianceMoment::SamplingAndMeasurement),
            other => Err(Error::InvalidInput(format!("unknown variance moment '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub max_iterations: usize,
    /// Threshold on `max |delta| / (1 + |value|)` over all parameters.
    pub rel_tolerance: f64,
    /// Starting `beta`; the unit-weight solve is used when absent.
    pub beta_init: Option<DVector<f64>>,
    pub variance_moment: VarianceMoment,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            rel_tolerance: 1e-10,
            beta_init: None,
            variance_moment: VarianceMoment::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidInput("max_iterations must be at least 1".into()));
        }
        if !(self.rel_tolerance > 0.0 && self.rel_tolerance.is_finite()) {
            return Err(Error::InvalidInput("rel_tolerance must be positive".into()));
        }
        Ok(())
    }

    /// Same settings, started from `beta`.
    pub fn warm_started(&self, beta: &DVector<f64>) -> Self {
        Self {
            beta_init: Some(beta.clone()),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFit {
    pub params: ModelParams,
    pub gammas: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    pub sigma2_truncated: bool,
    /// Relative step of the final iteration.
    pub last_step: f64,
}

fn common_dimension(areas: &[AreaObservation]) -> Result<usize> {
    let p = areas.first().map(|a| a.p()).unwrap_or(0);
    if let Some(bad) = areas.iter().find(|a| a.p() != p) {
        return Err(Error::DimensionMismatch(format!(
            "area '{}' has {} covariates, expected {p}",
            bad.area_id,
            bad.p()
        )));
    }
    Ok(p)
}

fn solve_weighted<F>(areas: &[AreaObservation], p: usize, weight: F) -> Result<DVector<f64>>
where
    F: Fn(&AreaObservation) -> Result<f64>,
{
    let mut lhs = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for area in areas {
        let d = weight(area)?;
        lhs += d * (&area.w * area.w.transpose() - &area.sigma_me);
        rhs += d * area.z * &area.w;
    }
    solve_general(lhs, rhs)
}

/// Dense solve with an explicit conditioning check; the matrix need not be
/// symmetric positive definite.
fn solve_general(lhs: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    if lhs.iter().any(|v| !v.is_finite()) || rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularMomentMatrix {
            condition: f64::INFINITY,
            left_out: None,
        });
    }
    let singular = lhs.clone().singular_values();
    let s_max = singular.max();
    let s_min = singular.min();
    let condition = if s_min > 0.0 { s_max / s_min } else { f64::INFINITY };
    if s_max == 0.0 || condition > 1.0 / f64::EPSILON {
        return Err(Error::SingularMomentMatrix {
            condition,
            left_out: None,
        });
    }
    lhs.lu().solve(&rhs).ok_or(Error::SingularMomentMatrix {
        condition,
        left_out: None,
    })
}

fn precision_weight(area: &AreaObservation, params: &ModelParams) -> Result<f64> {
    let total = quadratic_form(&params.beta, &area.sigma_me) + params.sigma2_nu + area.psi;
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::DegenerateVariance);
    }
    Ok(1.0 / total)
}

/// Solves the weighted moment equations for `beta` with `D_i` taken from `params_current`.
pub fn solve_beta(areas: &[AreaObservation], params_current: &ModelParams) -> Result<DVector<f64>> {
    let p = common_dimension(areas)?;
    if p != params_current.p() {
        return Err(Error::DimensionMismatch(format!(
            "beta has length {}, areas have {p} covariates",
            params_current.p()
        )));
    }
    if areas.len() < p || p == 0 {
        return Err(Error::InsufficientAreas { m: areas.len(), p });
    }
    solve_weighted(areas, p, |a| precision_weight(a, params_current))
}

/// The unit-weight solve used as the default starting point.
pub fn solve_beta_unweighted(areas: &[AreaObservation]) -> Result<DVector<f64>> {
    let p = common_dimension(areas)?;
    if areas.len() < p || p == 0 {
        return Err(Error::InsufficientAreas { m: areas.len(), p });
    }
    solve_weighted(areas, p, |_| Ok(1.0))
}

/// Residual-moment estimate of `sigma2_nu`, truncated at zero.
/// Returns the estimate and whether truncation fired.
pub fn estimate_sigma2(areas: &[AreaObservation], beta: &DVector<f64>) -> Result<(f64, bool)> {
    estimate_sigma2_with(areas, beta, VarianceMoment::SamplingOnly)
}

pub fn estimate_sigma2_with(
    areas: &[AreaObservation],
    beta: &DVector<f64>,
    moment: VarianceMoment,
) -> Result<(f64, bool)> {
    let p = common_dimension(areas)?;
    if areas.is_empty() {
        return Err(Error::InsufficientAreas { m: 0, p });
    }
    if beta.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "beta has length {}, areas have {p} covariates",
            beta.len()
        )));
    }
    let m = areas.len() as f64;
    let mut sq_resid = 0.0;
    let mut psi = 0.0;
    let mut me = 0.0;
    for area in areas {
        let r = area.z - area.w.dot(beta);
        sq_resid += r * r;
        psi += area.psi;
        if moment == VarianceMoment::SamplingAndMeasurement {
            me += quadratic_form(beta, &area.sigma_me);
        }
    }
    let raw = (sq_resid - psi - me) / m;
    if raw < 0.0 {
        Ok((0.0, true))
    } else {
        Ok((raw, false))
    }
}

fn relative_step(old: &ModelParams, new: &ModelParams) -> f64 {
    let rel = |a: f64, b: f64| (b - a).abs() / (1.0 + b.abs());
    old.beta
        .iter()
        .zip(new.beta.iter())
        .map(|(&a, &b)| rel(a, b))
        .fold(rel(old.sigma2_nu, new.sigma2_nu), f64::max)
}

/// Alternates the `beta` and `sigma2_nu` moment equations until the relative
/// step falls below `config.rel_tolerance` or the iteration budget runs out.
/// Non-convergence is reported through `ModelFit::converged`, not as an error.
pub fn fit(areas: &[AreaObservation], config: &FitConfig) -> Result<ModelFit> {
    config.validate()?;
    let p = common_dimension(areas)?;
    let m = areas.len();
    if m <= p || p == 0 {
        return Err(Error::InsufficientAreas { m, p });
    }

    let beta0 = match &config.beta_init {
        Some(b) if b.len() != p => {
            return Err(Error::DimensionMismatch(format!(
                "beta_init has length {}, areas have {p} covariates",
                b.len()
            )))
        }
        Some(b) => b.clone(),
        None => solve_beta_unweighted(areas)?,
    };
    let (sigma0, mut truncated) = estimate_sigma2_with(areas, &beta0, config.variance_moment)?;
    let mut current = ModelParams {
        beta: beta0,
        sigma2_nu: sigma0,
    };

    let mut converged = false;
    let mut iterations_used = 0;
    let mut last_step = f64::INFINITY;
    while iterations_used < config.max_iterations {
        iterations_used += 1;
        let beta = solve_beta(areas, &current)?;
        let (sigma2_nu, trunc) = estimate_sigma2_with(areas, &beta, config.variance_moment)?;
        let next = ModelParams { beta, sigma2_nu };
        last_step = relative_step(&current, &next);
        current = next;
        truncated = trunc;
        if last_step < config.rel_tolerance {
            converged = true;
            break;
        }
    }

    let gammas = areas
        .iter()
        .map(|a| shrinkage_gamma(&current, &a.sigma_me, a.psi))
        .collect::<Result<Vec<_>>>()?;

    Ok(ModelFit {
        params: current,
        gammas,
        iterations_used,
        converged,
        sigma2_truncated: truncated,
        last_step,
    })
}
