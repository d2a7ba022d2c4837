use approx::assert_relative_eq;
use logsae::model::log_bayes_predict;
use logsae::{eb_predict, m1_term, posterior_moments, AreaObservation, Error, ModelParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn obs(z: f64, w: &[f64], psi: f64, diag: &[f64]) -> AreaObservation {
    AreaObservation::new(
        "a",
        z,
        DVector::from_row_slice(w),
        psi,
        DMatrix::from_diagonal(&DVector::from_row_slice(diag)),
    )
    .unwrap()
}

#[test]
fn sampled_posterior_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..3 {
        let a = obs(rng.random_range(0.0..2.0), &[rng.random_range(0.5..1.5)], rng.random_range(0.05..0.5), &[0.1]);
        let params = ModelParams::new(DVector::from_element(1, 0.9), rng.random_range(0.1..0.8)).unwrap();
        let post = posterior_moments(&a, &params, &a.w).unwrap();
        let draw = Normal::new(post.mean, post.variance.sqrt()).unwrap();
        let n = 200_000;
        let ys: Vec<f64> = (0..n).map(|_| draw.sample(&mut rng).exp()).collect();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let dev2: Vec<f64> = ys.iter().map(|y| (y - mean).powi(2)).collect();
        let var = dev2.iter().sum::<f64>() / n as f64;
        let var_se = (dev2.iter().map(|d| (d - var).powi(2)).sum::<f64>() / n as f64 / n as f64).sqrt();
        let mean_se = (var / n as f64).sqrt();
        let eb = eb_predict(&a, &params).unwrap();
        let m1 = m1_term(&a, &params, &a.w).unwrap();
        assert!((mean - eb).abs() < 3.0 * mean_se, "mean {mean} vs {eb}");
        assert!((var - m1).abs() < 3.0 * var_se, "var {var} vs {m1}");
    }
}

#[test]
fn predictor_shift_scales_by_shrinkage() {
    let a = obs(1.3, &[0.4, 2.0], 0.3, &[0.05, 0.0]);
    let params = ModelParams::new(DVector::from_vec(vec![0.6, 0.2]), 0.4).unwrap();
    let g = posterior_moments(&a, &params, &a.w).unwrap().gamma;
    let c = 0.75;
    let shifted = AreaObservation { z: a.z + c, ..a.clone() };
    assert_relative_eq!(
        eb_predict(&shifted, &params).unwrap(),
        eb_predict(&a, &params).unwrap() * (g * c).exp(),
        max_relative = 1e-13
    );
}

#[test]
fn large_log_values_stay_in_log_space() {
    let a = obs(400.0, &[1.0], 1.0, &[0.0]);
    let params = ModelParams::new(DVector::from_element(1, 400.0), 1.0).unwrap();
    let log_pred = log_bayes_predict(&a, &params, &a.w).unwrap();
    assert_relative_eq!(log_pred, 400.25, max_relative = 1e-15);
    assert!(eb_predict(&a, &params).unwrap().is_finite());
    // M1 needs exp(2 * 400) and must refuse rather than return inf
    assert!(matches!(m1_term(&a, &params, &a.w), Err(Error::Overflow { .. })));
}

#[test]
fn supplied_covariate_replaces_observed() {
    let a = obs(2.0, &[1.0], 1.0, &[0.0]);
    let params = ModelParams::new(DVector::from_element(1, 1.0), 1.0).unwrap();
    let latent = DVector::from_element(1, 3.0);
    let post = posterior_moments(&a, &params, &latent).unwrap();
    assert_relative_eq!(post.mean, 0.5 * 2.0 + 0.5 * 3.0);
}
