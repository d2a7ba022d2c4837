//! Jackknife and parametric-bootstrap estimators of the MSPE of the EB predictor.
//!
//! Both estimators bias-correct the plug-in conditional variance `M1` and add
//! a term for the variability of the EB predictor due to estimating
//! `(beta, sigma2_nu)`. Leave-one-out refits and bootstrap replicates run in
//! parallel; all reductions happen afterwards in index order, so results are
//! identical for any thread count.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimation::{fit, FitConfig, ModelFit};
use crate::model::{eb_predict, m1_term, psd_factor, AreaObservation, ModelParams};
use crate::rng::{keyed_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct JackknifeMspe {
    /// Bias-corrected `M1`.
    pub m1_j: f64,
    /// `(m - 1)/m * sum_j (Y_eb - Y_eb(-j))^2`.
    pub m2_j: f64,
    pub total: f64,
    pub loo_nonconverged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapMspe {
    /// `2 M1(phi_hat) - mean_b M1(phi*_b)`.
    pub m1_bias_corrected: f64,
    /// `mean_b (Y_eb*_b - Y_eb)^2`.
    pub m2_star: f64,
    /// Not clipped; may be negative.
    pub total: f64,
    /// Replicates that contributed.
    pub b_replicates: usize,
    pub negative: bool,
}

/// Per-area bootstrap estimates plus replicate bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapOutcome {
    pub areas: Vec<BootstrapMspe>,
    pub requested: usize,
    /// Replicates dropped because the refit or a per-area term failed.
    pub failed: usize,
    /// Replicates kept whose refit hit the iteration budget.
    pub nonconverged: usize,
}

impl BootstrapOutcome {
    pub fn failure_rate(&self) -> f64 {
        self.failed as f64 / self.requested as f64
    }
}

/// `(M1_i, Y_eb_i)` at `params`, each evaluated at area `i`'s own data.
fn area_terms(areas: &[AreaObservation], params: &ModelParams) -> Result<Vec<(f64, f64)>> {
    areas
        .iter()
        .map(|a| Ok((m1_term(a, params, &a.w)?, eb_predict(a, params)?)))
        .collect()
}

/// Fit on all areas except `left_out`, warm-started from `start`.
pub fn leave_one_out_fit(
    areas: &[AreaObservation],
    left_out: usize,
    start: &DVector<f64>,
    config: &FitConfig,
) -> Result<ModelFit> {
    let subset: Vec<AreaObservation> = areas
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != left_out)
        .map(|(_, a)| a.clone())
        .collect();
    fit(&subset, &config.warm_started(start)).map_err(|e| match e {
        Error::SingularMomentMatrix { condition, .. } => Error::SingularMomentMatrix {
            condition,
            left_out: Some(left_out),
        },
        other => other,
    })
}

/// Jackknife MSPE for every area.
pub fn jackknife_mspe(
    areas: &[AreaObservation],
    full_fit: &ModelFit,
    config: &FitConfig,
) -> Result<Vec<JackknifeMspe>> {
    let m = areas.len();
    let p = full_fit.params.p();
    if m < p + 2 {
        return Err(Error::InsufficientAreas { m, p });
    }
    let full = area_terms(areas, &full_fit.params)?;

    let loo: Vec<ModelFit> = (0..m)
        .into_par_iter()
        .map(|j| leave_one_out_fit(areas, j, &full_fit.params.beta, config))
        .collect::<Result<_>>()?;
    let loo_nonconverged = loo.iter().filter(|f| !f.converged).count();

    // loo_terms[j][i] = (M1_i(-j), Y_eb_i(-j))
    let loo_terms: Vec<Vec<(f64, f64)>> = loo
        .par_iter()
        .map(|f| area_terms(areas, &f.params))
        .collect::<Result<_>>()?;

    let factor = (m as f64 - 1.0) / m as f64;
    Ok(full
        .iter()
        .enumerate()
        .map(|(i, &(m1, y))| {
            let mut m1_diff = 0.0;
            let mut sq = 0.0;
            for terms in &loo_terms {
                let (m1_j, y_j) = terms[i];
                m1_diff += m1 - m1_j;
                sq += (y - y_j) * (y - y_j);
            }
            let m1_j = m1 - factor * m1_diff;
            let m2_j = factor * sq;
            JackknifeMspe {
                m1_j,
                m2_j,
                total: m1_j + m2_j,
                loo_nonconverged,
            }
        })
        .collect())
}

/// Generates the starred data set for one bootstrap replicate.
pub trait ReplicateSampler: Sync {
    fn draw(
        &self,
        areas: &[AreaObservation],
        fit: &ModelFit,
        replicate: usize,
    ) -> Result<Vec<AreaObservation>>;
}

/// `nu* ~ N(0, sigma2_hat)`, `w* ~ N_p(w, Sigma)`, `z* ~ N(w*'beta_hat + nu*, psi)`,
/// drawn from a stream keyed by `(seed, replicate, area)`.
#[derive(Debug, Clone, Copy)]
pub struct ParametricSampler {
    pub seed: u64,
}

impl ReplicateSampler for ParametricSampler {
    fn draw(
        &self,
        areas: &[AreaObservation],
        fit: &ModelFit,
        replicate: usize,
    ) -> Result<Vec<AreaObservation>> {
        let nu_sd = fit.params.sigma2_nu.sqrt();
        areas
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let mut rng = keyed_rng(self.seed, Stream::Bootstrap, replicate as u64, i as u64);
                let nu = nu_sd * rng.sample::<f64, _>(StandardNormal);
                let eta = DVector::from_fn(a.p(), |_, _| rng.sample::<f64, _>(StandardNormal));
                let w_star = &a.w + psd_factor(&a.sigma_me) * eta;
                let e = a.psi.sqrt() * rng.sample::<f64, _>(StandardNormal);
                let z_star = w_star.dot(&fit.params.beta) + nu + e;
                Ok(AreaObservation {
                    area_id: a.area_id.clone(),
                    z: z_star,
                    w: w_star,
                    psi: a.psi,
                    sigma_me: a.sigma_me.clone(),
                })
            })
            .collect()
    }
}

/// Parametric-bootstrap MSPE with `b` replicates.
pub fn bootstrap_mspe(
    areas: &[AreaObservation],
    full_fit: &ModelFit,
    b: usize,
    seed: u64,
    config: &FitConfig,
) -> Result<BootstrapOutcome> {
    bootstrap_mspe_with(areas, full_fit, b, config, &ParametricSampler { seed })
}

enum Replicate {
    Kept { terms: Vec<(f64, f64)>, converged: bool },
    Failed(Error),
}

pub fn bootstrap_mspe_with<S: ReplicateSampler>(
    areas: &[AreaObservation],
    full_fit: &ModelFit,
    b: usize,
    config: &FitConfig,
    sampler: &S,
) -> Result<BootstrapOutcome> {
    if b < 2 {
        return Err(Error::InvalidInput(format!("bootstrap needs b >= 2, got {b}")));
    }
    let m = areas.len();
    let p = full_fit.params.p();
    if m <= p {
        return Err(Error::InsufficientAreas { m, p });
    }
    let full = area_terms(areas, &full_fit.params)?;
    let warm = config.warm_started(&full_fit.params.beta);

    let replicates: Vec<Replicate> = (0..b)
        .into_par_iter()
        .map(|r| {
            let run = || -> Result<(Vec<(f64, f64)>, bool)> {
                let starred = sampler.draw(areas, full_fit, r)?;
                let refit = fit(&starred, &warm)?;
                Ok((area_terms(areas, &refit.params)?, refit.converged))
            };
            match run() {
                Ok((terms, converged)) => Replicate::Kept { terms, converged },
                Err(e) => Replicate::Failed(e),
            }
        })
        .collect();

    let mut m1_sum = vec![0.0; m];
    let mut sq_sum = vec![0.0; m];
    let mut kept = 0usize;
    let mut nonconverged = 0usize;
    let mut first_error = None;
    for rep in replicates {
        match rep {
            Replicate::Kept { terms, converged } => {
                kept += 1;
                if !converged {
                    nonconverged += 1;
                }
                for (i, (m1_star, y_star)) in terms.into_iter().enumerate() {
                    m1_sum[i] += m1_star;
                    let d = y_star - full[i].1;
                    sq_sum[i] += d * d;
                }
            }
            Replicate::Failed(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    if kept == 0 {
        return Err(first_error.unwrap_or_else(|| Error::InvalidInput("no bootstrap replicates".into())));
    }

    let kept_f = kept as f64;
    let per_area = full
        .iter()
        .enumerate()
        .map(|(i, &(m1, _))| {
            let m1_bias_corrected = 2.0 * m1 - m1_sum[i] / kept_f;
            let m2_star = sq_sum[i] / kept_f;
            let total = m1_bias_corrected + m2_star;
            BootstrapMspe {
                m1_bias_corrected,
                m2_star,
                total,
                b_replicates: kept,
                negative: total < 0.0,
            }
        })
        .collect();

    Ok(BootstrapOutcome {
        areas: per_area,
        requested: b,
        failed: b - kept,
        nonconverged,
    })
}
