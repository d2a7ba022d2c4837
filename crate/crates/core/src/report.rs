//! Tabular and JSON renderings of fits, predictions, MSPE estimates and study reports.
//! Rows always follow input area order; log-rescaled columns sit next to raw ones.

use serde::Serialize;

use crate::estimation::{ModelFit, VarianceMoment};
use crate::io::{fmt_f64, Table};
use crate::model::{AreaObservation, EbPrediction};
use crate::mspe::{BootstrapOutcome, JackknifeMspe};
use crate::simulation::{EmseReport, MisspecificationRow, MspeReport, ZeroProportionRow};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub beta: Vec<f64>,
    pub sigma2_nu: f64,
    pub converged: bool,
    pub sigma2_truncated: bool,
    pub iterations_used: usize,
    pub last_step: f64,
    pub variance_moment: &'static str,
    pub areas: Vec<AreaGamma>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AreaGamma {
    pub area_id: String,
    pub gamma: f64,
}

impl FitSummary {
    pub fn new(areas: &[AreaObservation], fit: &ModelFit, moment: VarianceMoment) -> Self {
        Self {
            beta: fit.params.beta.iter().copied().collect(),
            sigma2_nu: fit.params.sigma2_nu,
            converged: fit.converged,
            sigma2_truncated: fit.sigma2_truncated,
            iterations_used: fit.iterations_used,
            last_step: fit.last_step,
            variance_moment: moment.as_str(),
            areas: areas
                .iter()
                .zip(&fit.gammas)
                .map(|(a, &gamma)| AreaGamma {
                    area_id: a.area_id.clone(),
                    gamma,
                })
                .collect(),
        }
    }
}

pub fn predictions_table(areas: &[AreaObservation], preds: &[EbPrediction]) -> Table {
    let mut t = Table::new(["area_id", "z", "direct", "gamma", "eb_prediction", "log_eb_prediction", "m1_hat"]);
    for (a, p) in areas.iter().zip(preds) {
        t.push(vec![
            p.area_id.clone(),
            fmt_f64(a.z),
            fmt_f64(a.z.exp()),
            fmt_f64(p.gamma),
            fmt_f64(p.prediction),
            fmt_f64(p.prediction.ln()),
            fmt_f64(p.m1_hat),
        ]);
    }
    t
}

pub fn jackknife_table(preds: &[EbPrediction], jack: &[JackknifeMspe]) -> Table {
    let mut t = Table::new([
        "area_id",
        "eb_prediction",
        "m1_hat",
        "m1_jackknife",
        "m2_jackknife",
        "mspe",
        "log_abs_mspe",
        "negative",
        "loo_nonconverged",
    ]);
    for (p, j) in preds.iter().zip(jack) {
        t.push(vec![
            p.area_id.clone(),
            fmt_f64(p.prediction),
            fmt_f64(p.m1_hat),
            fmt_f64(j.m1_j),
            fmt_f64(j.m2_j),
            fmt_f64(j.total),
            fmt_f64(j.total.abs().ln()),
            (j.total < 0.0).to_string(),
            j.loo_nonconverged.to_string(),
        ]);
    }
    t
}

pub fn bootstrap_table(preds: &[EbPrediction], boot: &BootstrapOutcome) -> Table {
    let mut t = Table::new([
        "area_id",
        "eb_prediction",
        "m1_hat",
        "m1_bias_corrected",
        "m2_star",
        "mspe",
        "log_abs_mspe",
        "negative",
        "b_replicates",
    ]);
    for (p, b) in preds.iter().zip(&boot.areas) {
        t.push(vec![
            p.area_id.clone(),
            fmt_f64(p.prediction),
            fmt_f64(p.m1_hat),
            fmt_f64(b.m1_bias_corrected),
            fmt_f64(b.m2_star),
            fmt_f64(b.total),
            fmt_f64(b.total.abs().ln()),
            b.negative.to_string(),
            b.b_replicates.to_string(),
        ]);
    }
    t
}

/// One row per estimator: area-averaged mean prediction and EMSE, raw and logged.
pub fn emse_table(report: &EmseReport) -> Table {
    let mut t = Table::new([
        "m",
        "k",
        "d",
        "estimator",
        "mean_prediction",
        "log_mean_prediction",
        "emse",
        "log_emse",
        "zero_proportion",
        "r_used",
    ]);
    for e in &report.estimators {
        t.push(vec![
            report.m.to_string(),
            report.k_percent.to_string(),
            fmt_f64(report.d),
            e.name.to_string(),
            fmt_f64(e.mean_prediction_avg),
            fmt_f64(e.log_mean_prediction_avg),
            fmt_f64(e.emse_avg),
            fmt_f64(e.log_emse_avg),
            e.zero_proportion.map(fmt_f64).unwrap_or_default(),
            report.r_used.to_string(),
        ]);
    }
    t
}

pub fn emse_area_table(report: &EmseReport) -> Table {
    let mut t = Table::new(["area", "estimator", "mean_prediction", "emse", "log_emse"]);
    for e in &report.estimators {
        for (i, (mp, emse)) in e.mean_prediction.iter().zip(&e.emse).enumerate() {
            t.push(vec![
                (i + 1).to_string(),
                e.name.to_string(),
                fmt_f64(*mp),
                fmt_f64(*emse),
                fmt_f64(emse.ln()),
            ]);
        }
    }
    t
}

/// The area-averaged summary row (EMSE, mean mspe, relative biases).
pub fn mspe_table(report: &MspeReport) -> Table {
    let mut t = Table::new([
        "m",
        "k",
        "d",
        "b",
        "r_used",
        "emse",
        "mspe_jackknife",
        "mspe_bootstrap",
        "rb_jackknife",
        "rb_bootstrap",
        "log_emse",
        "log_abs_mspe_jackknife",
        "jackknife_negative",
        "log_abs_mspe_bootstrap",
        "bootstrap_negative",
        "log_ratio_jackknife",
        "log_ratio_bootstrap",
        "negative_bootstrap_fraction",
    ]);
    t.push(vec![
        report.m.to_string(),
        report.k_percent.to_string(),
        fmt_f64(report.d),
        report.b_bootstrap.to_string(),
        report.r_used.to_string(),
        fmt_f64(report.emse_avg),
        fmt_f64(report.mean_jackknife_avg),
        fmt_f64(report.mean_bootstrap_avg),
        fmt_f64(report.rb_jackknife_avg),
        fmt_f64(report.rb_bootstrap_avg),
        fmt_f64(report.log_emse.log_abs),
        fmt_f64(report.log_jackknife.log_abs),
        report.log_jackknife.negative.to_string(),
        fmt_f64(report.log_bootstrap.log_abs),
        report.log_bootstrap.negative.to_string(),
        fmt_f64(report.log_ratio_jackknife.log_abs),
        fmt_f64(report.log_ratio_bootstrap.log_abs),
        fmt_f64(report.negative_bootstrap_fraction),
    ]);
    t
}

pub fn mspe_area_table(report: &MspeReport) -> Table {
    let mut t = Table::new(["area", "emse", "mean_jackknife", "mean_bootstrap", "rb_jackknife", "rb_bootstrap"]);
    for a in &report.per_area {
        t.push(vec![
            a.area.to_string(),
            fmt_f64(a.emse),
            fmt_f64(a.mean_jackknife),
            fmt_f64(a.mean_bootstrap),
            fmt_f64(a.rb_jackknife),
            fmt_f64(a.rb_bootstrap),
        ]);
    }
    t
}

/// Per-replicate, per-area values behind the distribution comparison plots.
pub fn mspe_draws_table(report: &MspeReport) -> Table {
    let mut t = Table::new(["replicate", "area", "squared_error", "mspe_jackknife", "mspe_bootstrap"]);
    for d in &report.draws {
        t.push(vec![
            d.replicate.to_string(),
            d.area.to_string(),
            fmt_f64(d.squared_error),
            fmt_f64(d.mspe_jackknife),
            fmt_f64(d.mspe_bootstrap),
        ]);
    }
    t
}

pub fn zero_table(rows: &[ZeroProportionRow]) -> Table {
    let mut t = Table::new(["m", "k", "r_used", "true_covariate", "ignoring_error", "eb"]);
    for r in rows {
        t.push(vec![
            r.m.to_string(),
            r.k_percent.to_string(),
            r.r_used.to_string(),
            fmt_f64(r.true_covariate),
            fmt_f64(r.ignoring_error),
            fmt_f64(r.eb),
        ]);
    }
    t
}

pub fn misspecification_table(rows: &[MisspecificationRow]) -> Table {
    let mut t = Table::new([
        "m",
        "k",
        "d_true",
        "d_mis",
        "r_used",
        "mean_abs_difference_x100",
        "bias_x100",
        "bias_mis_x100",
    ]);
    for r in rows {
        t.push(vec![
            r.m.to_string(),
            r.k_percent.to_string(),
            fmt_f64(r.d_true),
            fmt_f64(r.d_mis),
            r.r_used.to_string(),
            fmt_f64(r.mean_abs_difference_x100),
            fmt_f64(r.bias_x100),
            fmt_f64(r.bias_mis_x100),
        ]);
    }
    t
}
