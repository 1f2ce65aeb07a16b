mod common;

use common::*;
use gamcast::diagnostics::{acf, check_bundle, default_max_lag};
use gamcast::family::deviance;
use gamcast::fit::{optimize, GamFit, HyperParams};
use gamcast::stats::quantile_sorted;
use gamcast::Family;
use proptest::prelude::*;

fn fitted(n: usize, fam: &Family, seed: u64) -> (GamFit, Vec<f64>) {
    let cov = covariates(n);
    let design = trend_weekly_design(&cov);
    let y = TwoSmooth::new(&cov).simulate(fam, seed);
    let fit = optimize(&design, &y, fam, &HyperParams::initial(&design, &y, fam)).unwrap();
    (fit, y)
}

fn qq_gap(fit: &GamFit, y: &[f64], seed: u64) -> f64 {
    check_bundle(fit, y, seed)
        .unwrap()
        .qq
        .iter()
        .map(|(t, o)| (t - o).abs())
        .fold(0.0, f64::max)
}

#[test]
fn panels_cover_every_row() {
    let (fit, y) = fitted(100, &Family::negbin(6.0).unwrap(), 1);
    let b = check_bundle(&fit, &y, 3).unwrap();
    assert_eq!(b.qq.len(), 100);
    assert_eq!(b.resid_vs_eta.len(), 100);
    assert_eq!(b.response_vs_fitted.len(), 100);
    assert_eq!(b.hist.counts.iter().sum::<usize>(), 100);
    assert!(b.qq.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
    let ss: f64 = b.residuals.iter().map(|r| r * r).sum();
    let dev = deviance(&fit.family, &y, &fit.fitted).unwrap();
    assert!((ss - dev).abs() < 1e-9 * dev.max(1.0));
    assert!((dev - fit.deviance).abs() < 1e-8 * dev.max(1.0));
    assert_eq!(b, check_bundle(&fit, &y, 3).unwrap());
    assert!(check_bundle(&fit, &y[1..], 3).is_err());
}

#[test]
fn saturated_fit_lies_on_identity() {
    let (mut fit, y) = fitted(60, &Family::Poisson, 2);
    fit.fitted = y.iter().map(|v| v.max(1e-8)).collect();
    let b = check_bundle(&fit, &y, 1).unwrap();
    assert!(b.response_vs_fitted.iter().all(|(f, o)| (f - o).abs() < 1e-6));
    assert!(b.residuals.iter().all(|r| r.abs() < 1e-3));
}

#[test]
fn correct_model_is_calibrated() {
    let (fit, y) = fitted(120, &Family::negbin(8.0).unwrap(), 5);
    let gap = qq_gap(&fit, &y, 11);
    let mut r = rng(99);
    let mut null: Vec<f64> = (0..40)
        .map(|_| {
            let ysim: Vec<f64> = fit.fitted.iter().map(|&m| fit.family.sample(m, &mut r)).collect();
            qq_gap(&fit, &ysim, 11)
        })
        .collect();
    null.sort_by(f64::total_cmp);
    assert!(gap <= quantile_sorted(&null, 0.95), "gap {gap}, null {:?}", &null[30..]);
}

#[test]
fn residual_acf_of_good_fit_is_quiet() {
    let (fit, y) = fitted(140, &Family::Poisson, 8);
    let b = check_bundle(&fit, &y, 0).unwrap();
    let a = acf(&b.residuals, default_max_lag(140)).unwrap();
    assert_eq!(a.values.len(), 26);
    assert!(a.significant_lags().len() <= 4, "{:?}", a.significant_lags());
}

proptest! {
    #[test]
    fn acf_bounded(x in prop::collection::vec(-100.0f64..100.0, 3..80), frac in 0.0f64..1.0) {
        let max_lag = 1 + ((x.len() - 2) as f64 * frac) as usize;
        let a = acf(&x, max_lag).unwrap();
        prop_assert_eq!(a.values[0], 1.0);
        prop_assert!(a.values.iter().all(|v| v.abs() <= 1.0 + 1e-12));
        prop_assert_eq!(a.lags.len(), max_lag + 1);
    }
}
