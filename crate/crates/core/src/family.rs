//! Poisson and negative binomial response distributions with a log link.
//!
//! The negative binomial has mean `mu` and variance `mu + mu^2 / theta`,
//! i.e. `NB(theta, p)` with `p = mu / (mu + theta)`. All likelihood terms are
//! evaluated in log space.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{GamError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Family {
    Poisson,
    #[serde(rename = "negbin")]
    NegBin { theta: f64 },
}

impl Family {
    pub fn negbin(theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(GamError::invalid(format!("theta must be positive, got {theta}")));
        }
        Ok(Family::NegBin { theta })
    }

    pub fn theta(&self) -> Option<f64> {
        match self {
            Family::Poisson => None,
            Family::NegBin { theta } => Some(*theta),
        }
    }

    /// Same family with a different dispersion (no-op for Poisson).
    pub fn with_theta(&self, theta: f64) -> Self {
        match self {
            Family::Poisson => Family::Poisson,
            Family::NegBin { .. } => Family::NegBin { theta },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Poisson => "poisson",
            Family::NegBin { .. } => "negbin",
        }
    }

    pub fn variance(&self, mu: f64) -> Result<f64> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(GamError::invalid(format!("mu must be positive, got {mu}")));
        }
        Ok(self.variance_unchecked(mu))
    }

    pub(crate) fn variance_unchecked(&self, mu: f64) -> f64 {
        match self {
            Family::Poisson => mu,
            Family::NegBin { theta } => mu + mu * mu / theta,
        }
    }

    /// Log-density of one observation.
    pub(crate) fn log_density(&self, y: f64, mu: f64) -> f64 {
        match *self {
            Family::Poisson => {
                let t = if y > 0.0 { y * mu.ln() } else { 0.0 };
                t - mu - ln_gamma(y + 1.0)
            }
            Family::NegBin { theta } => {
                let mt = mu + theta;
                let t = if y > 0.0 { y * (mu.ln() - mt.ln()) } else { 0.0 };
                ln_gamma_ratio(y, theta) - ln_gamma(y + 1.0) - theta * (mu / theta).ln_1p() + t
            }
        }
    }

    /// Contribution of one observation to the deviance.
    pub(crate) fn unit_deviance(&self, y: f64, mu: f64) -> f64 {
        let d = match *self {
            Family::Poisson => {
                let t = if y > 0.0 { y * (y / mu).ln() } else { 0.0 };
                2.0 * (t - (y - mu))
            }
            Family::NegBin { theta } => {
                let t = if y > 0.0 { y * (y / mu).ln() } else { 0.0 };
                2.0 * (t - (y + theta) * ((y - mu) / (mu + theta)).ln_1p())
            }
        };
        d.max(0.0)
    }

    /// d log f / d eta for a log link.
    pub(crate) fn score_eta(&self, y: f64, mu: f64) -> f64 {
        match *self {
            Family::Poisson => y - mu,
            Family::NegBin { theta } => y - (y + theta) * mu / (mu + theta),
        }
    }

    /// -d^2 log f / d eta^2, the observed information per observation. Always
    /// positive for these two families under the log link.
    pub(crate) fn neg_hess_eta(&self, y: f64, mu: f64) -> f64 {
        match *self {
            Family::Poisson => mu,
            Family::NegBin { theta } => {
                let mt = mu + theta;
                (y + theta) * theta * mu / (mt * mt)
            }
        }
    }

    /// Derivative of `neg_hess_eta` with respect to eta.
    pub(crate) fn d_neg_hess_eta(&self, y: f64, mu: f64) -> f64 {
        match *self {
            Family::Poisson => mu,
            Family::NegBin { theta } => {
                let mt = mu + theta;
                (y + theta) * theta * mu * (theta - mu) / (mt * mt * mt)
            }
        }
    }

    /// Draws one count with mean `mu`.
    pub fn sample<R: Rng + ?Sized>(&self, mu: f64, rng: &mut R) -> f64 {
        let rate = match *self {
            Family::Poisson => mu,
            Family::NegBin { theta } => match Gamma::new(theta, mu / theta) {
                Ok(g) => g.sample(rng),
                Err(_) => mu,
            },
        };
        if !(rate > 0.0) {
            return 0.0;
        }
        match Poisson::new(rate) {
            Ok(p) => p.sample(rng),
            Err(_) => rate.round(),
        }
    }
}

/// `ln Gamma(y + theta) - ln Gamma(theta)`, summed directly for small
/// integer `y` to avoid cancellation when theta is huge.
fn ln_gamma_ratio(y: f64, theta: f64) -> f64 {
    if y == 0.0 {
        return 0.0;
    }
    if y < 64.0 && y.fract() == 0.0 {
        let n = y as usize;
        return (0..n).map(|i| (theta + i as f64).ln()).sum();
    }
    ln_gamma(y + theta) - ln_gamma(theta)
}

fn check_inputs(y: &[f64], mu: &[f64]) -> Result<()> {
    if y.len() != mu.len() {
        return Err(GamError::dims(format!("y has {} entries, mu has {}", y.len(), mu.len())));
    }
    if let Some(bad) = y.iter().find(|v| !(**v >= 0.0) || v.fract() != 0.0) {
        return Err(GamError::invalid(format!("count {bad} is not a non-negative integer")));
    }
    if let Some(bad) = mu.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(GamError::invalid(format!("mu = {bad} is not positive and finite")));
    }
    Ok(())
}

pub fn variance(family: &Family, mu: f64) -> Result<f64> {
    family.variance(mu)
}

pub fn log_likelihood(family: &Family, y: &[f64], mu: &[f64]) -> Result<f64> {
    check_inputs(y, mu)?;
    let ll: f64 = y.iter().zip(mu).map(|(&y, &m)| family.log_density(y, m)).sum();
    if !ll.is_finite() {
        return Err(GamError::numerical("log-likelihood is not finite"));
    }
    Ok(ll)
}

pub fn deviance(family: &Family, y: &[f64], mu: &[f64]) -> Result<f64> {
    check_inputs(y, mu)?;
    Ok(y.iter().zip(mu).map(|(&y, &m)| family.unit_deviance(y, m)).sum())
}

pub fn deviance_residuals(family: &Family, y: &[f64], mu: &[f64]) -> Result<Vec<f64>> {
    check_inputs(y, mu)?;
    Ok(y.iter()
        .zip(mu)
        .map(|(&y, &m)| {
            let r = family.unit_deviance(y, m).sqrt();
            if y > m {
                r
            } else if y < m {
                -r
            } else {
                0.0
            }
        })
        .collect())
}
