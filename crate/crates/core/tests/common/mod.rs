#![allow(dead_code)]

use chrono::NaiveDate;
use gamcast::fit::{assemble_design, Design};
use gamcast::ingest::{covariates_for_range, CovariateTable};
use gamcast::splines::{SmoothSpec, Term};
use gamcast::Family;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 3, 2).unwrap()
}

/// Covariates for `n` days anchored at the first day (day 0, a Monday).
pub fn covariates(n: usize) -> CovariateTable {
    covariates_for_range(start(), 0, n, start())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn data_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/regions")
}

/// Known two-smooth model on the log scale: a hump in time plus a weekly wave.
pub struct TwoSmooth {
    pub intercept: f64,
    pub trend: Vec<f64>,
    pub weekly: Vec<f64>,
}

impl TwoSmooth {
    /// Smooths centered over the observed rows, matching the fitted constraint.
    pub fn new(cov: &CovariateTable) -> Self {
        let n = cov.len() as f64;
        let raw_t: Vec<f64> = cov
            .day
            .iter()
            .map(|&d| 1.2 * (-((d as f64 - 0.45 * n) / (0.18 * n)).powi(2)).exp())
            .collect();
        let raw_w: Vec<f64> = cov
            .dow
            .iter()
            .map(|&d| 0.25 * (2.0 * std::f64::consts::PI * d as f64 / 7.0).sin())
            .collect();
        let mt = raw_t.iter().sum::<f64>() / n;
        let mw = raw_w.iter().sum::<f64>() / n;
        Self {
            intercept: 2.0 + mt + mw,
            trend: raw_t.iter().map(|v| v - mt).collect(),
            weekly: raw_w.iter().map(|v| v - mw).collect(),
        }
    }

    pub fn eta(&self, i: usize) -> f64 {
        self.intercept + self.trend[i] + self.weekly[i]
    }

    pub fn simulate(&self, fam: &Family, seed: u64) -> Vec<f64> {
        let mut r = rng(seed);
        (0..self.trend.len()).map(|i| fam.sample(self.eta(i).exp(), &mut r)).collect()
    }
}

pub fn trend_weekly_design(cov: &CovariateTable) -> Design {
    let specs = vec![
        Term::Trend.default_spec(cov).unwrap(),
        Term::Weekly.default_spec(cov).unwrap(),
    ];
    assemble_design(cov, &specs).unwrap()
}

pub fn small_design(cov: &CovariateTable, trend_rank: usize) -> Design {
    let lo = *cov.day.first().unwrap() as f64;
    let hi = *cov.day.last().unwrap() as f64;
    let specs = vec![
        SmoothSpec::cubic("trend", "day", trend_rank, lo, hi).unwrap(),
        SmoothSpec::cyclic("weekly", "dow", 4, 7.0).unwrap(),
    ];
    assemble_design(cov, &specs).unwrap()
}

/// Unpenalized maximum likelihood by Fisher scoring, each step solved as a
/// weighted least-squares problem through a QR factorization.
pub fn irls_oracle(x: &DMatrix<f64>, y: &[f64], fam: &Family) -> DVector<f64> {
    let (n, p) = x.shape();
    let ybar = y.iter().sum::<f64>() / n as f64;
    let mut eta = DVector::from_element(n, ybar.max(0.1).ln());
    let mut beta = DVector::zeros(p);
    for _ in 0..200 {
        let mu = eta.map(f64::exp);
        let w: Vec<f64> = mu
            .iter()
            .map(|&m| match fam.theta() {
                Some(t) => m * t / (m + t),
                None => m,
            })
            .collect();
        let z: Vec<f64> = (0..n).map(|i| eta[i] + (y[i] - mu[i]) / mu[i]).collect();
        let mut a = x.clone();
        let mut b = DVector::zeros(n);
        for i in 0..n {
            let s = w[i].sqrt();
            a.row_mut(i).scale_mut(s);
            b[i] = s * z[i];
        }
        let qr = a.qr();
        let qtb = qr.q().transpose() * b;
        let new = qr.r().solve_upper_triangular(&qtb).expect("full rank");
        let delta = (&new - &beta).amax();
        beta = new;
        eta = x * &beta;
        if delta < 1e-13 * (1.0 + beta.amax()) {
            break;
        }
    }
    beta
}

/// Three-point Gauss-Legendre rule on [a, b]; exact for quintics.
pub fn gauss_legendre3(a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let nodes = [-(0.6f64).sqrt(), 0.0, (0.6f64).sqrt()];
    let weights = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    nodes.iter().zip(weights).map(|(x, w)| w * f(c + h * x)).sum::<f64>() * h
}
