//! Model-based simulation studies.
//!
//! Each replicate draws a fresh synthetic population from a stream keyed by
//! `(seed, replicate)`:
//!
//! * `W_i ~ N(covariate_mean, covariate_var)` per covariate,
//! * `psi_i ~ Gamma(shape = psi_shape, scale = psi_scale)`,
//! * `round(k m / 100)` areas chosen without replacement get `Sigma_i = d I`,
//!   the rest `Sigma_i = 0`,
//! * `theta_i = W_i'beta + nu_i`, `z_i = theta_i + e_i`, `w_i = W_i + eta_i`,
//!   `Y_i = exp(theta_i)`.
//!
//! Replicates run in parallel and are reduced in replicate order.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimation::{fit, FitConfig, ModelFit};
use crate::model::{eb_predict, AreaObservation};
use crate::mspe::{bootstrap_mspe, jackknife_mspe};
use crate::rng::{keyed_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub m: usize,
    /// Share of areas (in percent) that receive measurement error.
    pub k_percent: u32,
    /// Measurement-error variance of the affected areas.
    pub d: f64,
    pub beta_true: DVector<f64>,
    pub sigma2_nu_true: f64,
    pub r_replications: usize,
    pub b_bootstrap: usize,
    pub seed: u64,
    pub covariate_mean: f64,
    /// Variance (not standard deviation) of the latent covariates.
    pub covariate_var: f64,
    pub psi_shape: f64,
    /// Gamma scale (mean = shape * scale).
    pub psi_scale: f64,
    pub fit: FitConfig,
}

impl SimulationConfig {
    /// The standard design: `beta = 3`, `sigma2_nu = 2`, `W ~ N(5, 9)`,
    /// `psi ~ Gamma(4.5, 2)`, `R = B = 1000`.
    pub fn standard(m: usize, k_percent: u32, d: f64, seed: u64) -> Self {
        Self {
            m,
            k_percent,
            d,
            beta_true: DVector::from_element(1, 3.0),
            sigma2_nu_true: 2.0,
            r_replications: 1000,
            b_bootstrap: 1000,
            seed,
            covariate_mean: 5.0,
            covariate_var: 9.0,
            psi_shape: 4.5,
            psi_scale: 2.0,
            fit: FitConfig::default(),
        }
    }

    pub fn p(&self) -> usize {
        self.beta_true.len()
    }

    /// Number of areas that receive `Sigma_i = d I`.
    pub fn n_measurement_error(&self) -> usize {
        (self.k_percent as f64 * self.m as f64 / 100.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.k_percent > 100 {
            return bad(format!("k_percent must be in 0..=100, got {}", self.k_percent));
        }
        if self.m == 0 || self.p() == 0 {
            return bad("m and p must be positive".into());
        }
        if !(self.d >= 0.0 && self.d.is_finite()) {
            return bad(format!("d must be non-negative, got {}", self.d));
        }
        if !(self.sigma2_nu_true >= 0.0) || !(self.covariate_var >= 0.0) {
            return bad("variances must be non-negative".into());
        }
        if !(self.psi_shape > 0.0 && self.psi_scale > 0.0) {
            return bad("psi_shape and psi_scale must be positive".into());
        }
        if self.r_replications == 0 {
            return bad("r_replications must be positive".into());
        }
        self.fit.validate()
    }
}

/// A generated area with its latent quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticArea {
    /// Latent log-covariates.
    pub w_true: DVector<f64>,
    pub theta: f64,
    /// `exp(theta)`, the estimand.
    pub y_true: f64,
    pub obs: AreaObservation,
}

pub fn generate_population(config: &SimulationConfig, replicate: usize) -> Result<Vec<SyntheticArea>> {
    config.validate()?;
    let m = config.m;
    let p = config.p();
    let mut rng = keyed_rng(config.seed, Stream::Population, replicate as u64, 0);

    let covariate = Normal::new(config.covariate_mean, config.covariate_var.sqrt())
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let psi_dist = Gamma::new(config.psi_shape, config.psi_scale)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;

    let w_true: Vec<DVector<f64>> = (0..m)
        .map(|_| DVector::from_fn(p, |_, _| covariate.sample(&mut rng)))
        .collect();
    let psi: Vec<f64> = (0..m).map(|_| psi_dist.sample(&mut rng)).collect();
    let mut has_me = vec![false; m];
    for i in index::sample(&mut rng, m, config.n_measurement_error()) {
        has_me[i] = true;
    }
    let nu_sd = config.sigma2_nu_true.sqrt();
    let me_sd = config.d.sqrt();

    (0..m)
        .map(|i| {
            let nu = nu_sd * rng.sample::<f64, _>(StandardNormal);
            let e = psi[i].sqrt() * rng.sample::<f64, _>(StandardNormal);
            let eta = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let (w, sigma_me) = if has_me[i] {
                (&w_true[i] + me_sd * eta, DMatrix::identity(p, p) * config.d)
            } else {
                (w_true[i].clone(), DMatrix::zeros(p, p))
            };
            let theta = w_true[i].dot(&config.beta_true) + nu;
            let obs = AreaObservation::new(format!("area{}", i + 1), theta + e, w, psi[i], sigma_me)?;
            Ok(SyntheticArea {
                w_true: w_true[i].clone(),
                theta,
                y_true: theta.exp(),
                obs,
            })
        })
        .collect()
}

/// The three model-based estimators of the study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    /// Uses the latent covariates, no measurement-error term.
    TrueCovariate,
    /// Uses the observed covariates but sets every `Sigma_i` to zero.
    IgnoringError,
    /// Uses the observed covariates and their `Sigma_i`.
    MeasurementError,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [
        Estimator::TrueCovariate,
        Estimator::IgnoringError,
        Estimator::MeasurementError,
    ];

    pub fn areas(self, population: &[SyntheticArea]) -> Vec<AreaObservation> {
        population
            .iter()
            .map(|s| match self {
                Estimator::TrueCovariate => AreaObservation {
                    w: s.w_true.clone(),
                    ..s.obs.without_measurement_error()
                },
                Estimator::IgnoringError => s.obs.without_measurement_error(),
                Estimator::MeasurementError => s.obs.clone(),
            })
            .collect()
    }
}

/// One replicate's truths, predictions and fits.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateEstimates {
    pub y_true: Vec<f64>,
    pub direct: Vec<f64>,
    /// Indexed like `Estimator::ALL`.
    pub predictions: [Vec<f64>; 3],
    pub fits: [ModelFit; 3],
}

pub fn simulate_replicate(config: &SimulationConfig, replicate: usize) -> Result<ReplicateEstimates> {
    let population = generate_population(config, replicate)?;
    let mut predictions: [Vec<f64>; 3] = Default::default();
    let mut fits = Vec::with_capacity(3);
    for (slot, est) in Estimator::ALL.into_iter().enumerate() {
        let areas = est.areas(&population);
        let f = fit(&areas, &config.fit)?;
        predictions[slot] = areas
            .iter()
            .map(|a| eb_predict(a, &f.params))
            .collect::<Result<_>>()?;
        fits.push(f);
    }
    let fits: [ModelFit; 3] = fits.try_into().expect("three estimators");
    Ok(ReplicateEstimates {
        y_true: population.iter().map(|s| s.y_true).collect(),
        direct: population.iter().map(|s| s.obs.z.exp()).collect(),
        predictions,
        fits,
    })
}

/// `ln |x|` with the sign carried separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SignedLog {
    pub log_abs: f64,
    pub negative: bool,
}

impl SignedLog {
    pub fn of(x: f64) -> Self {
        Self {
            log_abs: x.abs().ln(),
            negative: x < 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub name: &'static str,
    /// Per-area mean of the prediction over replicates.
    pub mean_prediction: Vec<f64>,
    /// Per-area empirical MSE.
    pub emse: Vec<f64>,
    pub mean_prediction_avg: f64,
    pub log_mean_prediction_avg: f64,
    pub emse_avg: f64,
    pub log_emse_avg: f64,
    /// Fraction of replicates with a truncated `sigma2_nu` (None for the direct estimator).
    pub zero_proportion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmseReport {
    pub m: usize,
    pub k_percent: u32,
    pub d: f64,
    pub seed: u64,
    pub r_requested: usize,
    pub r_used: usize,
    pub r_failed: usize,
    /// Direct, true covariate, ignoring error, measurement error.
    pub estimators: Vec<EstimatorSummary>,
}

pub const ESTIMATOR_NAMES: [&str; 4] = ["direct", "true_covariate", "ignoring_error", "eb"];

fn summarize(name: &'static str, preds: &[&[f64]], truths: &[&[f64]], zeros: Option<f64>) -> EstimatorSummary {
    let r = preds.len() as f64;
    let m = preds.first().map(|p| p.len()).unwrap_or(0);
    let mut mean_prediction = vec![0.0; m];
    let mut emse = vec![0.0; m];
    for (pred, truth) in preds.iter().zip(truths) {
        for i in 0..m {
            mean_prediction[i] += pred[i];
            let d = pred[i] - truth[i];
            emse[i] += d * d;
        }
    }
    mean_prediction.iter_mut().for_each(|v| *v /= r);
    emse.iter_mut().for_each(|v| *v /= r);
    let mean_prediction_avg = mean(&mean_prediction);
    let emse_avg = mean(&emse);
    EstimatorSummary {
        name,
        mean_prediction,
        emse,
        mean_prediction_avg,
        log_mean_prediction_avg: mean_prediction_avg.ln(),
        emse_avg,
        log_emse_avg: emse_avg.ln(),
        zero_proportion: zeros,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn partition<T>(results: Vec<Result<T>>) -> (Vec<T>, usize) {
    let total = results.len();
    let ok: Vec<T> = results.into_iter().filter_map(|r| r.ok()).collect();
    let failed = total - ok.len();
    (ok, failed)
}

fn all_failed(config: &SimulationConfig) -> Error {
    Error::InvalidInput(format!(
        "every one of the {} replicates failed to fit",
        config.r_replications
    ))
}

/// Empirical MSE of the direct estimator and the three EB variants.
pub fn run_emse_study(config: &SimulationConfig) -> Result<EmseReport> {
    config.validate()?;
    let results: Vec<Result<ReplicateEstimates>> = (0..config.r_replications)
        .into_par_iter()
        .map(|r| simulate_replicate(config, r))
        .collect();
    let (reps, failed) = partition(results);
    if reps.is_empty() {
        return Err(all_failed(config));
    }
    let truths: Vec<&[f64]> = reps.iter().map(|r| r.y_true.as_slice()).collect();
    let r_used = reps.len() as f64;

    let mut estimators = vec![summarize(
        ESTIMATOR_NAMES[0],
        &reps.iter().map(|r| r.direct.as_slice()).collect::<Vec<_>>(),
        &truths,
        None,
    )];
    for slot in 0..3 {
        let preds: Vec<&[f64]> = reps.iter().map(|r| r.predictions[slot].as_slice()).collect();
        let zeros = reps.iter().filter(|r| r.fits[slot].sigma2_truncated).count() as f64 / r_used;
        estimators.push(summarize(ESTIMATOR_NAMES[slot + 1], &preds, &truths, Some(zeros)));
    }

    Ok(EmseReport {
        m: config.m,
        k_percent: config.k_percent,
        d: config.d,
        seed: config.seed,
        r_requested: config.r_replications,
        r_used: reps.len(),
        r_failed: failed,
        estimators,
    })
}

/// One area of one replicate in the MSPE study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MspeDraw {
    pub replicate: usize,
    pub area: usize,
    pub squared_error: f64,
    pub mspe_jackknife: f64,
    pub mspe_bootstrap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MspeAreaSummary {
    pub area: usize,
    pub emse: f64,
    pub mean_jackknife: f64,
    pub mean_bootstrap: f64,
    pub rb_jackknife: f64,
    pub rb_bootstrap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MspeReport {
    pub m: usize,
    pub k_percent: u32,
    pub d: f64,
    pub seed: u64,
    pub b_bootstrap: usize,
    pub r_requested: usize,
    pub r_used: usize,
    pub r_failed: usize,
    pub per_area: Vec<MspeAreaSummary>,
    pub emse_avg: f64,
    pub mean_jackknife_avg: f64,
    pub mean_bootstrap_avg: f64,
    /// Area average of the per-area relative biases.
    pub rb_jackknife_avg: f64,
    pub rb_bootstrap_avg: f64,
    pub log_emse: SignedLog,
    pub log_jackknife: SignedLog,
    pub log_bootstrap: SignedLog,
    /// `ln|mean mspe| - ln EMSE`, signed by the mean mspe.
    pub log_ratio_jackknife: SignedLog,
    pub log_ratio_bootstrap: SignedLog,
    pub negative_bootstrap_fraction: f64,
    pub loo_nonconverged: usize,
    pub bootstrap_failed: usize,
    pub draws: Vec<MspeDraw>,
}

struct MspeReplicate {
    squared_error: Vec<f64>,
    jackknife: Vec<f64>,
    bootstrap: Vec<f64>,
    loo_nonconverged: usize,
    bootstrap_failed: usize,
}

fn mspe_replicate(config: &SimulationConfig, replicate: usize) -> Result<MspeReplicate> {
    let population = generate_population(config, replicate)?;
    let areas = Estimator::MeasurementError.areas(&population);
    let full = fit(&areas, &config.fit)?;
    let squared_error = areas
        .iter()
        .zip(&population)
        .map(|(a, s)| eb_predict(a, &full.params).map(|y| (y - s.y_true).powi(2)))
        .collect::<Result<Vec<_>>>()?;
    let jack = jackknife_mspe(&areas, &full, &config.fit)?;
    let boot_seed: u64 = keyed_rng(config.seed, Stream::StudyBootstrapSeed, replicate as u64, 0).random();
    let boot = bootstrap_mspe(&areas, &full, config.b_bootstrap, boot_seed, &config.fit)?;
    Ok(MspeReplicate {
        squared_error,
        jackknife: jack.iter().map(|j| j.total).collect(),
        bootstrap: boot.areas.iter().map(|b| b.total).collect(),
        loo_nonconverged: jack.first().map(|j| j.loo_nonconverged).unwrap_or(0),
        bootstrap_failed: boot.failed,
    })
}

/// Relative bias of the jackknife and bootstrap MSPE estimators against the empirical MSE.
pub fn run_mspe_study(config: &SimulationConfig) -> Result<MspeReport> {
    config.validate()?;
    if config.b_bootstrap < 2 {
        return Err(Error::InvalidInput("b_bootstrap must be at least 2".into()));
    }
    let results: Vec<Result<MspeReplicate>> = (0..config.r_replications)
        .into_par_iter()
        .map(|r| mspe_replicate(config, r))
        .collect();
    let indexed: Vec<Result<(usize, MspeReplicate)>> = results
        .into_iter()
        .enumerate()
        .map(|(r, res)| res.map(|x| (r, x)))
        .collect();
    let (reps, failed) = partition(indexed);
    if reps.is_empty() {
        return Err(all_failed(config));
    }
    Ok(summarize_mspe(config, &reps, failed))
}

fn summarize_mspe(config: &SimulationConfig, reps: &[(usize, MspeReplicate)], failed: usize) -> MspeReport {
    let m = config.m;
    let r = reps.len() as f64;
    let mut emse = vec![0.0; m];
    let mut jack = vec![0.0; m];
    let mut boot = vec![0.0; m];
    let mut negatives = 0usize;
    let mut draws = Vec::with_capacity(reps.len() * m);
    for (replicate, rep) in reps {
        for i in 0..m {
            emse[i] += rep.squared_error[i];
            jack[i] += rep.jackknife[i];
            boot[i] += rep.bootstrap[i];
            if rep.bootstrap[i] < 0.0 {
                negatives += 1;
            }
            draws.push(MspeDraw {
                replicate: *replicate,
                area: i + 1,
                squared_error: rep.squared_error[i],
                mspe_jackknife: rep.jackknife[i],
                mspe_bootstrap: rep.bootstrap[i],
            });
        }
    }
    let per_area: Vec<MspeAreaSummary> = (0..m)
        .map(|i| {
            let e = emse[i] / r;
            let j = jack[i] / r;
            let b = boot[i] / r;
            MspeAreaSummary {
                area: i + 1,
                emse: e,
                mean_jackknife: j,
                mean_bootstrap: b,
                rb_jackknife: (j - e) / e,
                rb_bootstrap: (b - e) / e,
            }
        })
        .collect();
    let avg = |f: fn(&MspeAreaSummary) -> f64| mean(&per_area.iter().map(f).collect::<Vec<_>>());
    let emse_avg = avg(|a| a.emse);
    let mean_jackknife_avg = avg(|a| a.mean_jackknife);
    let mean_bootstrap_avg = avg(|a| a.mean_bootstrap);
    let ratio = |x: f64| SignedLog {
        log_abs: x.abs().ln() - emse_avg.ln(),
        negative: x < 0.0,
    };
    MspeReport {
        m,
        k_percent: config.k_percent,
        d: config.d,
        seed: config.seed,
        b_bootstrap: config.b_bootstrap,
        r_requested: config.r_replications,
        r_used: reps.len(),
        r_failed: failed,
        rb_jackknife_avg: avg(|a| a.rb_jackknife),
        rb_bootstrap_avg: avg(|a| a.rb_bootstrap),
        log_emse: SignedLog::of(emse_avg),
        log_jackknife: SignedLog::of(mean_jackknife_avg),
        log_bootstrap: SignedLog::of(mean_bootstrap_avg),
        log_ratio_jackknife: ratio(mean_jackknife_avg),
        log_ratio_bootstrap: ratio(mean_bootstrap_avg),
        emse_avg,
        mean_jackknife_avg,
        mean_bootstrap_avg,
        per_area,
        negative_bootstrap_fraction: negatives as f64 / (r * m as f64),
        loo_nonconverged: reps.iter().map(|(_, x)| x.loo_nonconverged).sum(),
        bootstrap_failed: reps.iter().map(|(_, x)| x.bootstrap_failed).sum(),
        draws,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZeroProportionRow {
    pub m: usize,
    pub k_percent: u32,
    pub r_used: usize,
    pub r_failed: usize,
    pub true_covariate: f64,
    pub ignoring_error: f64,
    pub eb: f64,
}

/// Fraction of replicates in which `sigma2_nu` is truncated to zero, for every `(m, k)` pair.
pub fn zero_proportion_study(
    base: &SimulationConfig,
    ms: &[usize],
    ks: &[u32],
) -> Result<Vec<ZeroProportionRow>> {
    let mut rows = Vec::with_capacity(ms.len() * ks.len());
    for &m in ms {
        for &k in ks {
            let config = SimulationConfig {
                m,
                k_percent: k,
                ..base.clone()
            };
            config.validate()?;
            let results: Vec<Result<[bool; 3]>> = (0..config.r_replications)
                .into_par_iter()
                .map(|r| {
                    let population = generate_population(&config, r)?;
                    let mut flags = [false; 3];
                    for (slot, est) in Estimator::ALL.into_iter().enumerate() {
                        flags[slot] = fit(&est.areas(&population), &config.fit)?.sigma2_truncated;
                    }
                    Ok(flags)
                })
                .collect();
            let (flags, failed) = partition(results);
            let n = flags.len() as f64;
            let share = |slot: usize| flags.iter().filter(|f| f[slot]).count() as f64 / n;
            rows.push(ZeroProportionRow {
                m,
                k_percent: k,
                r_used: flags.len(),
                r_failed: failed,
                true_covariate: share(0),
                ignoring_error: share(1),
                eb: share(2),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MisspecificationRow {
    pub m: usize,
    pub k_percent: u32,
    pub d_true: f64,
    pub d_mis: f64,
    pub r_used: usize,
    pub r_failed: usize,
    /// `100 * mean |beta_hat - beta_hat_mis|` (first coefficient).
    pub mean_abs_difference_x100: f64,
    /// `100 * mean (beta_hat - beta_true)`.
    pub bias_x100: f64,
    /// `100 * mean (beta_hat_mis - beta_true)`.
    pub bias_mis_x100: f64,
}

/// Fits `beta` with the true measurement-error variance and with a wrong one
/// on the same generated data.
pub fn misspecification_study(config: &SimulationConfig, d_true: f64, d_mis: f64) -> Result<MisspecificationRow> {
    let config = SimulationConfig {
        d: d_true,
        ..config.clone()
    };
    config.validate()?;
    if !(d_mis >= 0.0 && d_mis.is_finite()) {
        return Err(Error::InvalidInput(format!("d_mis must be non-negative, got {d_mis}")));
    }
    let p = config.p();
    let results: Vec<Result<(f64, f64)>> = (0..config.r_replications)
        .into_par_iter()
        .map(|r| {
            let population = generate_population(&config, r)?;
            let areas = Estimator::MeasurementError.areas(&population);
            let mis: Vec<AreaObservation> = areas
                .iter()
                .map(|a| {
                    if a.sigma_me.iter().any(|&v| v != 0.0) {
                        AreaObservation {
                            sigma_me: DMatrix::identity(p, p) * d_mis,
                            ..a.clone()
                        }
                    } else {
                        a.clone()
                    }
                })
                .collect();
            let beta = fit(&areas, &config.fit)?.params.beta[0];
            let beta_mis = fit(&mis, &config.fit)?.params.beta[0];
            Ok((beta, beta_mis))
        })
        .collect();
    let (pairs, failed) = partition(results);
    if pairs.is_empty() {
        return Err(all_failed(&config));
    }
    let n = pairs.len() as f64;
    let truth = config.beta_true[0];
    let sum = |f: &dyn Fn(&(f64, f64)) -> f64| pairs.iter().map(f).sum::<f64>();
    Ok(MisspecificationRow {
        m: config.m,
        k_percent: config.k_percent,
        d_true,
        d_mis,
        r_used: pairs.len(),
        r_failed: failed,
        mean_abs_difference_x100: 100.0 * sum(&|(b, bm)| (b - bm).abs()) / n,
        bias_x100: 100.0 * sum(&|(b, _)| b - truth) / n,
        bias_mis_x100: 100.0 * sum(&|(_, bm)| bm - truth) / n,
    })
}
