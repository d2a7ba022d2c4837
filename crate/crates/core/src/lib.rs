//! Empirical Bayes prediction of positive, skewed small-area quantities under
//! an area-level log model whose covariates carry measurement error, with
//! jackknife and parametric-bootstrap MSPE estimation and a Monte-Carlo
//! harness for model-based simulation studies.

pub mod error;
pub mod estimation;
pub mod io;
pub mod model;
pub mod mspe;
pub mod report;
pub mod rng;
pub mod simulation;

pub use error::{Error, ErrorClass, Result};
pub use estimation::{
    estimate_sigma2, estimate_sigma2_with, fit, solve_beta, FitConfig, ModelFit, VarianceMoment,
};
pub use model::{
    eb_predict, m1_term, posterior_moments, predict_all, shrinkage_gamma, AreaObservation,
    EbPrediction, ModelParams, PosteriorMoments,
};
pub use mspe::{bootstrap_mspe, jackknife_mspe, BootstrapMspe, BootstrapOutcome, JackknifeMspe};
