//! Residual checks for a fitted model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GamError, Result};
use crate::family;
use crate::fit::GamFit;
use crate::ingest::Histogram;
use crate::stats;

/// Replicate datasets behind the simulated Q-Q reference.
pub const QQ_REPLICATES: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckBundle {
    /// `(theoretical, observed)` pairs, ascending.
    pub qq: Vec<(f64, f64)>,
    pub hist: Histogram,
    pub resid_vs_eta: Vec<(f64, f64)>,
    pub response_vs_fitted: Vec<(f64, f64)>,
    pub residuals: Vec<f64>,
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Deviance residual diagnostics. The Q-Q reference averages, rank by rank,
/// the sorted residuals of datasets simulated from the fitted means.
pub fn check_bundle(fit: &GamFit, y: &[f64], seed: u64) -> Result<CheckBundle> {
    if y.len() != fit.fitted.len() {
        return Err(GamError::dims(format!(
            "{} responses for a fit with {} rows",
            y.len(),
            fit.fitted.len()
        )));
    }
    let n = y.len();
    let residuals = family::deviance_residuals(&fit.family, y, &fit.fitted)?;
    let observed = sorted(residuals.clone());

    let mut reference = vec![0.0; n];
    for r in 0..QQ_REPLICATES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let ysim: Vec<f64> = fit.fitted.iter().map(|&m| fit.family.sample(m, &mut rng)).collect();
        let rs = sorted(family::deviance_residuals(&fit.family, &ysim, &fit.fitted)?);
        for (acc, v) in reference.iter_mut().zip(rs) {
            *acc += v / QQ_REPLICATES as f64;
        }
    }

    let (edges, counts) = stats::histogram(&residuals, stats::sturges_bins(n));
    Ok(CheckBundle {
        qq: reference.into_iter().zip(observed).collect(),
        hist: Histogram { edges, counts },
        resid_vs_eta: fit.eta.iter().copied().zip(residuals.iter().copied()).collect(),
        response_vs_fitted: fit.fitted.iter().copied().zip(y.iter().copied()).collect(),
        residuals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcfResult {
    pub lags: Vec<usize>,
    pub values: Vec<f64>,
    /// Half-width of the white-noise band.
    pub band: f64,
}

impl AcfResult {
    /// Lags (excluding 0) whose autocorrelation falls outside the band.
    pub fn significant_lags(&self) -> Vec<usize> {
        self.lags
            .iter()
            .zip(&self.values)
            .filter(|(&l, v)| l > 0 && v.abs() > self.band)
            .map(|(&l, _)| l)
            .collect()
    }
}

pub fn default_max_lag(n: usize) -> usize {
    25.min(n.saturating_sub(1))
}

/// Sample autocorrelation with the biased (divide by n) autocovariance.
pub fn acf(residuals: &[f64], max_lag: usize) -> Result<AcfResult> {
    let n = residuals.len();
    if max_lag < 1 || max_lag >= n {
        return Err(GamError::invalid(format!("max_lag {max_lag} must lie in 1..{n}")));
    }
    let m = stats::mean(residuals);
    let d: Vec<f64> = residuals.iter().map(|v| v - m).collect();
    let c0: f64 = d.iter().map(|v| v * v).sum();
    let values = (0..=max_lag)
        .map(|k| {
            if k == 0 {
                1.0
            } else if c0 == 0.0 {
                0.0
            } else {
                d[k..].iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() / c0
            }
        })
        .collect();
    Ok(AcfResult {
        lags: (0..=max_lag).collect(),
        values,
        band: 1.96 / (n as f64).sqrt(),
    })
}
