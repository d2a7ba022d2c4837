//! Invariant checks shared by the property tests and the acceptance run.

use logsae::io::{read_dataset, write_dataset};
use logsae::{
    eb_predict, estimate_sigma2, fit, jackknife_mspe, m1_term, shrinkage_gamma, solve_beta, AreaObservation,
    FitConfig, ModelParams,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestError, TestRng, TestRunner};

type Check = std::result::Result<(), TestCaseError>;

fn params(beta: f64, sigma2: f64) -> ModelParams {
    ModelParams::new(DVector::from_element(1, beta), sigma2).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// (z, w, psi, sigma_me)
pub fn scalar_area() -> impl Strategy<Value = (f64, f64, f64, f64)> {
    (-3.0..3.0f64, 0.5..4.0f64, 0.01..2.0f64, prop_oneof![Just(0.0), 0.001..0.2f64])
}

pub fn dataset(min: usize, max: usize) -> impl Strategy<Value = Vec<AreaObservation>> {
    (0.3..1.5f64, prop::collection::vec((scalar_area(), -1.0..1.0f64), min..=max)).prop_map(|(beta, rows)| {
        rows.into_iter()
            .enumerate()
            .map(|(i, ((_, w, psi, s), u))| AreaObservation::scalar(format!("a{i}"), beta * w + u, w, psi, s).unwrap())
            .collect()
    })
}

pub fn gamma_is_a_weight(beta: f64, s2: f64, s: f64, psi: f64) -> Check {
    let sig = DMatrix::from_element(1, 1, s);
    if let Ok(g) = shrinkage_gamma(&params(beta, s2), &sig, psi) {
        prop_assert!((0.0..=1.0).contains(&g), "gamma {g}");
    }
    Ok(())
}

pub fn gamma_monotone(beta: f64, s2: f64, s: f64, psi: f64, bump: f64) -> Check {
    let sig = DMatrix::from_element(1, 1, s);
    let g = shrinkage_gamma(&params(beta, s2), &sig, psi).unwrap();
    let more_noise = shrinkage_gamma(&params(beta, s2), &sig, psi + bump).unwrap();
    let more_signal = shrinkage_gamma(&params(beta, s2 + bump), &sig, psi).unwrap();
    prop_assert!(more_noise <= g);
    prop_assert!(more_signal >= g);
    Ok(())
}

pub fn predictor_shift(area: (f64, f64, f64, f64), beta: f64, s2: f64, c: f64) -> Check {
    let (z, w, psi, s) = area;
    let a = AreaObservation::scalar("a", z, w, psi, s).unwrap();
    let p = params(beta, s2);
    let g = shrinkage_gamma(&p, &a.sigma_me, psi).unwrap();
    let base = eb_predict(&a, &p).unwrap();
    let shifted = eb_predict(&AreaObservation { z: z + c, ..a.clone() }, &p).unwrap();
    prop_assert!(close(shifted, base * (g * c).exp(), 1e-12), "{shifted} vs {}", base * (g * c).exp());
    if c > 0.0 {
        prop_assert!(shifted > base);
    }
    Ok(())
}

pub fn m1_sign(area: (f64, f64, f64, f64), psi: f64, beta: f64, s2: f64) -> Check {
    let (z, w, _, s) = area;
    let a = AreaObservation::scalar("a", z, w, psi, s).unwrap();
    let p = params(beta, s2);
    let Ok(g) = shrinkage_gamma(&p, &a.sigma_me, psi) else { return Ok(()) };
    let m1 = m1_term(&a, &p, &a.w).unwrap();
    prop_assert!(m1 >= 0.0);
    prop_assert_eq!(m1 == 0.0, g * psi == 0.0);
    Ok(())
}

pub fn sigma2_truncation(areas: &[AreaObservation], beta: f64) -> Check {
    let b = DVector::from_element(1, beta);
    let (s2, truncated) = estimate_sigma2(areas, &b).unwrap();
    let m = areas.len() as f64;
    let raw = areas.iter().map(|a| (a.z - a.w[0] * beta).powi(2) - a.psi).sum::<f64>() / m;
    prop_assert!(s2 >= 0.0);
    prop_assert_eq!(truncated, raw < 0.0);
    if !truncated {
        prop_assert!(close(s2, raw, 1e-12));
    }
    Ok(())
}

pub fn fit_permutation(areas: &[AreaObservation], rot: usize) -> Check {
    let config = FitConfig::default();
    let Ok(a) = fit(areas, &config) else { return Ok(()) };
    let mut moved = areas.to_vec();
    moved.rotate_left(rot % areas.len());
    moved.reverse();
    let b = fit(&moved, &config).unwrap();
    prop_assert!(close(a.params.beta[0], b.params.beta[0], 1e-9));
    prop_assert!(close(a.params.sigma2_nu, b.params.sigma2_nu, 1e-9));
    prop_assert_eq!(a.sigma2_truncated, b.sigma2_truncated);

    let p = params(a.params.beta[0], a.params.sigma2_nu);
    prop_assert!(close(solve_beta(areas, &p).unwrap()[0], solve_beta(&moved, &p).unwrap()[0], 1e-12));
    let s_a = estimate_sigma2(areas, &p.beta).unwrap().0;
    let s_b = estimate_sigma2(&moved, &p.beta).unwrap().0;
    prop_assert!(close(s_a, s_b, 1e-12));
    Ok(())
}

pub fn csv_round_trip(areas: &[AreaObservation]) -> Check {
    let mut buf = Vec::new();
    write_dataset(areas, &mut buf).unwrap();
    prop_assert_eq!(read_dataset(buf.as_slice()).unwrap(), areas.to_vec());
    Ok(())
}

pub fn jackknife_m2_nonnegative(areas: &[AreaObservation]) -> Check {
    let config = FitConfig::default();
    let Ok(full) = fit(areas, &config) else { return Ok(()) };
    let Ok(jack) = jackknife_mspe(areas, &full, &config) else { return Ok(()) };
    for j in jack {
        prop_assert!(j.m2_j >= 0.0);
    }
    Ok(())
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn fmt<T: std::fmt::Debug>(r: std::result::Result<(), TestError<T>>) -> std::result::Result<(), String> {
    r.map_err(|e| format!("{e}"))
}

/// Runs every invariant with a fixed generator seed; returns `(name, outcome)`.
pub fn run_all(cases: u32) -> Vec<(&'static str, std::result::Result<(), String>)> {
    let mut out = Vec::new();
    out.push((
        "gamma in [0, 1]",
        fmt(runner(cases).run(&(-3.0..3.0f64, 0.0..5.0f64, 0.0..1.0f64, 0.0..5.0f64), |(b, s2, s, psi)| {
            gamma_is_a_weight(b, s2, s, psi)
        })),
    ));
    out.push((
        "gamma monotone in psi and sigma2",
        fmt(runner(cases).run(
            &(-3.0..3.0f64, 0.01..5.0f64, 0.0..1.0f64, 0.01..5.0f64, 0.0..3.0f64),
            |(b, s2, s, psi, bump)| gamma_monotone(b, s2, s, psi, bump),
        )),
    ));
    out.push((
        "predictor shift exp(gamma c) and monotone in z",
        fmt(runner(cases).run(&(scalar_area(), 0.2..2.0f64, 0.01..2.0f64, 0.0..2.0f64), |(a, b, s2, c)| {
            predictor_shift(a, b, s2, c)
        })),
    ));
    out.push((
        "m1 >= 0, zero iff gamma psi = 0",
        fmt(runner(cases).run(
            &(
                scalar_area(),
                prop_oneof![Just(0.0), 0.01..2.0f64],
                0.2..2.0f64,
                prop_oneof![Just(0.0), 0.01..2.0f64],
            ),
            |(a, psi, b, s2)| m1_sign(a, psi, b, s2),
        )),
    ));
    out.push((
        "sigma2 >= 0 with exact truncation flag",
        fmt(runner(cases).run(&(dataset(3, 25), 0.0..2.0f64), |(areas, b)| sigma2_truncation(&areas, b))),
    ));
    out.push((
        "fit invariant to area order",
        fmt(runner(cases).run(&(dataset(5, 25), 0usize..25), |(areas, rot)| fit_permutation(&areas, rot))),
    ));
    out.push((
        "dataset CSV round trip",
        fmt(runner(cases).run(&dataset(1, 15), |areas| csv_round_trip(&areas))),
    ));
    out.push((
        "jackknife M2 >= 0",
        fmt(runner(cases.min(48)).run(&dataset(4, 15), |areas| jackknife_m2_nonnegative(&areas))),
    ));
    out
}
