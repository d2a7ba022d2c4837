//! Straight-line reference implementations used as oracles. They share no
//! code with the library beyond the RNG key derivation for bootstrap draws.

#![allow(dead_code)]

pub mod invariants;

use logsae::rng::{keyed_rng, Stream};
use logsae::AreaObservation;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct Area {
    pub z: f64,
    pub w: Vec<f64>,
    pub psi: f64,
    /// Row-major p x p.
    pub s: Vec<Vec<f64>>,
}

impl Area {
    pub fn to_obs(&self, id: usize) -> AreaObservation {
        let p = self.w.len();
        AreaObservation::new(
            format!("a{id}"),
            self.z,
            DVector::from_vec(self.w.clone()),
            self.psi,
            DMatrix::from_fn(p, p, |r, c| self.s[r][c]),
        )
        .unwrap()
    }
}

pub fn to_obs(areas: &[Area]) -> Vec<AreaObservation> {
    areas.iter().enumerate().map(|(i, a)| a.to_obs(i)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn quad(b: &[f64], s: &[Vec<f64>]) -> f64 {
    let mut q = 0.0;
    for r in 0..b.len() {
        for c in 0..b.len() {
            q += b[r] * s[r][c] * b[c];
        }
    }
    q
}

/// Cramer's rule for p = 1 or 2.
fn solve_small(a: &[Vec<f64>], rhs: &[f64]) -> Vec<f64> {
    match rhs.len() {
        1 => vec![rhs[0] / a[0][0]],
        2 => {
            let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            vec![
                (rhs[0] * a[1][1] - a[0][1] * rhs[1]) / det,
                (a[0][0] * rhs[1] - rhs[0] * a[1][0]) / det,
            ]
        }
        p => panic!("oracle handles p <= 2, got {p}"),
    }
}

/// Weighted moment equation for beta; `weights = None` means unit weights.
pub fn beta_step(areas: &[Area], weights: Option<&[f64]>) -> Vec<f64> {
    let p = areas[0].w.len();
    let mut a = vec![vec![0.0; p]; p];
    let mut rhs = vec![0.0; p];
    for (i, ar) in areas.iter().enumerate() {
        let d = weights.map_or(1.0, |w| w[i]);
        for r in 0..p {
            rhs[r] += d * ar.w[r] * ar.z;
            for c in 0..p {
                a[r][c] += d * (ar.w[r] * ar.w[c] - ar.s[r][c]);
            }
        }
    }
    solve_small(&a, &rhs)
}

pub fn sigma2_step(areas: &[Area], beta: &[f64]) -> f64 {
    let m = areas.len() as f64;
    let mut ss = 0.0;
    let mut psi = 0.0;
    for a in areas {
        let r = a.z - dot(&a.w, beta);
        ss += r * r;
        psi += a.psi;
    }
    (ss / m - psi / m).max(0.0)
}

/// Iteration budget and tolerance of the default library configuration.
pub const BUDGET: (usize, f64) = (200, 1e-10);

/// Gauss-Seidel alternation from `start` (or the unit-weight solve), stopping
/// once the largest relative step falls below `tol` or after `max_iter` rounds.
pub fn fit_from(areas: &[Area], start: Option<&[f64]>, max_iter: usize, tol: f64) -> (Vec<f64>, f64) {
    let mut beta = start.map_or_else(|| beta_step(areas, None), |b| b.to_vec());
    let mut s2 = sigma2_step(areas, &beta);
    for _ in 0..max_iter {
        let weights: Vec<f64> = areas
            .iter()
            .map(|a| 1.0 / (quad(&beta, &a.s) + s2 + a.psi))
            .collect();
        let nb = beta_step(areas, Some(&weights));
        let ns = sigma2_step(areas, &nb);
        let step = nb
            .iter()
            .zip(&beta)
            .map(|(n, o)| (n - o).abs() / (1.0 + n.abs()))
            .fold((ns - s2).abs() / (1.0 + ns.abs()), f64::max);
        beta = nb;
        s2 = ns;
        if step < tol {
            break;
        }
    }
    (beta, s2)
}

/// Run far past the library's tolerance.
pub fn fit(areas: &[Area]) -> (Vec<f64>, f64) {
    fit_from(areas, None, 100_000, 1e-15)
}

fn fit_budgeted(areas: &[Area], start: Option<&[f64]>) -> (Vec<f64>, f64) {
    fit_from(areas, start, BUDGET.0, BUDGET.1)
}

pub fn gamma(a: &Area, beta: &[f64], s2: f64) -> f64 {
    let sig = quad(beta, &a.s) + s2;
    sig / (sig + a.psi)
}

/// (posterior mean of exp(theta), posterior variance of exp(theta)).
pub fn predict(a: &Area, beta: &[f64], s2: f64) -> (f64, f64) {
    let g = gamma(a, beta, s2);
    let mu = g * a.z + (1.0 - g) * dot(&a.w, beta);
    let v = g * a.psi;
    let y = (mu + v / 2.0).exp();
    (y, (2.0 * mu + v).exp() * (v.exp() - 1.0))
}

/// (m1_j, m2_j, total) per area; refits are warm-started like the library's.
pub fn jackknife(areas: &[Area]) -> Vec<(f64, f64, f64)> {
    let m = areas.len();
    let (beta, s2) = fit_budgeted(areas, None);
    let mut loo = Vec::new();
    for j in 0..m {
        let sub: Vec<Area> = areas
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != j)
            .map(|(_, a)| a.clone())
            .collect();
        loo.push(fit_budgeted(&sub, Some(&beta)));
    }
    let f = (m as f64 - 1.0) / m as f64;
    let mut out = Vec::new();
    for a in areas {
        let (y, m1) = predict(a, &beta, s2);
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        for (bj, sj) in &loo {
            let (yj, m1j) = predict(a, bj, *sj);
            d1 += m1 - m1j;
            d2 += (y - yj) * (y - yj);
        }
        let m1_j = m1 - f * d1;
        let m2_j = f * d2;
        out.push((m1_j, m2_j, m1_j + m2_j));
    }
    out
}

/// Bootstrap replicate `r` (p = 1) drawn from the same keyed streams as the library sampler.
pub fn bootstrap_draw(areas: &[Area], beta: &[f64], s2: f64, seed: u64, r: usize) -> Vec<Area> {
    areas
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut rng = keyed_rng(seed, Stream::Bootstrap, r as u64, i as u64);
            let nu = s2.sqrt() * rng.sample::<f64, _>(StandardNormal);
            let eta: Vec<f64> = (0..a.w.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            assert_eq!(a.w.len(), 1, "bootstrap oracle handles p = 1");
            let w = vec![a.w[0] + a.s[0][0].sqrt() * eta[0]];
            let e = a.psi.sqrt() * rng.sample::<f64, _>(StandardNormal);
            Area {
                z: dot(&w, beta) + nu + e,
                w,
                psi: a.psi,
                s: a.s.clone(),
            }
        })
        .collect()
}

/// (m1_bias_corrected, m2_star, total) per area.
pub fn bootstrap(areas: &[Area], b: usize, seed: u64) -> Vec<(f64, f64, f64)> {
    let (beta, s2) = fit_budgeted(areas, None);
    let m = areas.len();
    let mut m1_sum = vec![0.0; m];
    let mut sq_sum = vec![0.0; m];
    for r in 0..b {
        let star = bootstrap_draw(areas, &beta, s2, seed, r);
        let (bs, ss) = fit_budgeted(&star, Some(&beta));
        for (i, a) in areas.iter().enumerate() {
            let (y, _) = predict(a, &beta, s2);
            let (ys, m1s) = predict(a, &bs, ss);
            m1_sum[i] += m1s;
            sq_sum[i] += (ys - y) * (ys - y);
        }
    }
    areas
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let (_, m1) = predict(a, &beta, s2);
            let c = 2.0 * m1 - m1_sum[i] / b as f64;
            let m2 = sq_sum[i] / b as f64;
            (c, m2, c + m2)
        })
        .collect()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

/// Random dataset with well-conditioned moment matrices. `with_me` adds a diagonal
/// measurement-error covariance to roughly half of the areas.
pub fn random_areas<R: Rng>(rng: &mut R, m: usize, p: usize, with_me: bool) -> Vec<Area> {
    let beta: Vec<f64> = (0..p).map(|_| rng.random_range(0.5..1.5)).collect();
    (0..m)
        .map(|_| {
            let w: Vec<f64> = (0..p).map(|_| rng.random_range(1.0..4.0)).collect();
            let psi: f64 = rng.random_range(0.05..0.6);
            let mut s = vec![vec![0.0; p]; p];
            if with_me && rng.random_bool(0.5) {
                for (k, row) in s.iter_mut().enumerate() {
                    row[k] = rng.random_range(0.01..0.1);
                }
            }
            let z = dot(&w, &beta) + rng.random_range(-0.8..0.8) + psi.sqrt() * rng.sample::<f64, _>(StandardNormal);
            Area { z, w, psi, s }
        })
        .collect()
}
