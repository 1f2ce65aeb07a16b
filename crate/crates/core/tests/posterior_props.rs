mod common;

use common::*;
use gamcast::fit::{fit_fixed, optimize, predict, GamFit, HyperParams, Scale};
use gamcast::posterior::{draw_coefficients, peak_distribution, rmvn, smooth_interval, trend_matrix};
use gamcast::splines::Term;
use gamcast::{assemble_design, Family};
use nalgebra::{DMatrix, DVector};

fn trend_fit(n: usize, eta: impl Fn(f64) -> f64, seed: u64) -> GamFit {
    let cov = covariates(n);
    let design = assemble_design(&cov, &[Term::Trend.default_spec(&cov).unwrap()]).unwrap();
    let mut r = rng(seed);
    let y: Vec<f64> = (0..n).map(|i| Family::Poisson.sample(eta(i as f64).exp(), &mut r)).collect();
    optimize(&design, &y, &Family::Poisson, &HyperParams::initial(&design, &y, &Family::Poisson)).unwrap()
}

fn two_smooth_fit(n: usize, seed: u64) -> GamFit {
    let cov = covariates(n);
    let design = trend_weekly_design(&cov);
    let y = TwoSmooth::new(&cov).simulate(&Family::Poisson, seed);
    optimize(&design, &y, &Family::Poisson, &HyperParams::initial(&design, &y, &Family::Poisson)).unwrap()
}

#[test]
fn rmvn_moments_within_monte_carlo_error() {
    let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.6, -0.3, 0.6, 1.0, 0.2, -0.3, 0.2, 0.5]);
    let mean = DVector::from_vec(vec![1.0, -2.0, 0.5]);
    let n = 100_000;
    let d = rmvn(n, &mean, &cov, 7).unwrap();
    let nf = n as f64;
    let m: Vec<f64> = (0..3).map(|j| d.samples.column(j).sum() / nf).collect();
    for j in 0..3 {
        assert!((m[j] - mean[j]).abs() < 4.0 * (cov[(j, j)] / nf).sqrt());
    }
    for a in 0..3 {
        for b in 0..3 {
            let s: f64 = (0..n).map(|i| (d.samples[(i, a)] - m[a]) * (d.samples[(i, b)] - m[b])).sum::<f64>() / (nf - 1.0);
            // Var of a sample covariance for Gaussian data.
            let se = ((cov[(a, a)] * cov[(b, b)] + cov[(a, b)].powi(2)) / nf).sqrt();
            assert!((s - cov[(a, b)]).abs() < 3.0 * se, "({a},{b}) {s} vs {}", cov[(a, b)]);
        }
    }
    let small = rmvn(1000, &mean, &cov, 7).unwrap();
    let err_small = (small.samples.row_mean().transpose() - &mean).amax();
    let err_big = (d.samples.row_mean().transpose() - &mean).amax();
    assert!(err_big < err_small.max(0.02));
}

#[test]
fn smooth_bands_bracket_the_mode() {
    let fit = two_smooth_fit(100, 5);
    let grid: Vec<f64> = (0..=70).map(|i| i as f64 * 0.1).collect();
    let w = smooth_interval(&fit, "weekly", &grid).unwrap();
    for i in 0..grid.len() {
        assert!(w.lo95[i] < w.mode[i] && w.mode[i] < w.hi95[i]);
    }
    let last = grid.len() - 1;
    assert!((w.mode[0] - w.mode[last]).abs() < 1e-8);
    assert!((w.lo95[0] - w.lo95[last]).abs() < 1e-8);
    assert!((w.hi95[0] - w.hi95[last]).abs() < 1e-8);
    let t = smooth_interval(&fit, "trend", &[0.0, 50.0, 99.0]).unwrap();
    assert!(t.hi95.iter().zip(&t.lo95).all(|(h, l)| h > l));
    assert!(smooth_interval(&fit, "monthly", &[0.0]).is_err());
}

#[test]
fn increasing_trend_peaks_on_last_day() {
    let fit = trend_fit(60, |d| 2.0 + 0.05 * d, 3);
    let pk = peak_distribution(&fit, 2000, 1).unwrap();
    assert_eq!(pk.mode_day, 59);
    assert!(pk.day_probabilities[59] > 0.99);
    assert_eq!(pk.interval_95.1, 59);
}

#[test]
fn symmetric_hump_peaks_in_the_middle() {
    let fit = trend_fit(61, |d| 5.0 - ((d - 30.0) / 12.0).powi(2), 17);
    let pk = peak_distribution(&fit, 5000, 2).unwrap();
    assert!((28..=32).contains(&pk.mode_day), "mode {}", pk.mode_day);
    let (lo, hi) = pk.interval_95;
    assert!(lo <= 30 && hi >= 30);
    let left = 30 - lo as i64;
    let right = hi as i64 - 30;
    assert!((left - right).abs() <= 2, "interval {lo}..{hi}");
}

#[test]
fn trend_plus_cyclic_is_full_prediction() {
    let fit = two_smooth_fit(80, 9);
    let xt = trend_matrix(&fit).unwrap();
    let xc = &fit.design.x - &xt;
    let draws = draw_coefficients(&fit, 50, 4).unwrap();
    for s in 0..50 {
        let b = draws.samples.row(s).transpose();
        let full = &fit.design.x * &b;
        let parts = &xt * &b + &xc * &b;
        assert!((full - parts).amax() < 1e-10);
    }
}

#[test]
fn peak_is_invariant_to_the_link() {
    let fit = two_smooth_fit(90, 13);
    let xt = trend_matrix(&fit).unwrap();
    let draws = draw_coefficients(&fit, 300, 6).unwrap();
    let pk = peak_distribution(&fit, 300, 6).unwrap();
    let mut counts = vec![0usize; fit.n()];
    for s in 0..300 {
        let eta = &xt * draws.samples.row(s).transpose();
        let mu: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
        let i_eta = eta.argmax().0;
        let i_mu = mu.iter().enumerate().fold(0, |b, (i, v)| if *v > mu[b] { i } else { b });
        assert_eq!(i_eta, i_mu);
        counts[i_mu] += 1;
    }
    for (c, p) in counts.iter().zip(&pk.day_probabilities) {
        assert!((*c as f64 / 300.0 - p).abs() < 1e-12);
    }
}

#[test]
fn peak_distribution_contract() {
    let fit = two_smooth_fit(70, 21);
    let pk = peak_distribution(&fit, 1000, 8).unwrap();
    assert!((pk.day_probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(pk.interval_95.0 <= pk.mode_day && pk.mode_day <= pk.interval_95.1);
    assert_eq!(pk.trend.mode.len(), 70);
    for i in 0..70 {
        assert!(pk.trend.lo95[i] > 0.0 && pk.trend.lo95[i] <= pk.trend.hi95[i]);
    }
    assert!(peak_distribution(&fit, 99, 8).is_err());

    // No trend smooth, no peak.
    let cov = covariates(70);
    let design = assemble_design(&cov, &[Term::Weekly.default_spec(&cov).unwrap()]).unwrap();
    let y = TwoSmooth::new(&cov).simulate(&Family::Poisson, 2);
    let wk = fit_fixed(&design, &y, &Family::Poisson, &HyperParams::new(vec![0.0], None)).unwrap();
    assert!(peak_distribution(&wk, 200, 1).is_err());
    let pred = predict(&wk, &cov, Scale::Link).unwrap();
    assert_eq!(pred.mean.len(), 70);
}
