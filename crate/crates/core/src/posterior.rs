//! Simulation from the Gaussian approximation to the coefficient posterior.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GamError, Result};
use crate::fit::GamFit;
use crate::linalg;
use crate::splines::SmoothKind;
use crate::stats::quantile_sorted;

pub const DEFAULT_N_SIM: usize = 10_000;
pub const MIN_N_SIM: usize = 100;
const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    /// One draw per row.
    pub samples: DMatrix<f64>,
    pub seed: u64,
    /// Free-form description of the generating fit.
    pub fit_ref: String,
}

impl PosteriorDraws {
    pub fn n_sim(&self) -> usize {
        self.samples.nrows()
    }
}

/// Draws `n_sim` vectors from N(mean, cov). Draw `i` uses its own ChaCha
/// stream, so any subset of draws can be regenerated independently.
pub fn rmvn(n_sim: usize, mean: &DVector<f64>, cov: &DMatrix<f64>, seed: u64) -> Result<PosteriorDraws> {
    if n_sim == 0 {
        return Err(GamError::invalid("n_sim must be positive"));
    }
    let p = mean.len();
    if cov.nrows() != p || cov.ncols() != p {
        return Err(GamError::dims(format!(
            "covariance is {}x{}, mean has length {p}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    let chol = match cov.clone().cholesky() {
        Some(c) => c,
        None => {
            let ridge = 1e-10 * cov.trace().abs() / p as f64;
            let bumped = cov + DMatrix::identity(p, p) * ridge;
            linalg::cholesky(&bumped, "posterior covariance")?
        }
    };
    let l = chol.l();
    let mut samples = DMatrix::zeros(n_sim, p);
    let mut z = DVector::zeros(p);
    for i in 0..n_sim {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let draw = mean + &l * &z;
        samples.row_mut(i).copy_from(&draw.transpose());
    }
    Ok(PosteriorDraws {
        samples,
        seed,
        fit_ref: String::new(),
    })
}

/// Posterior draws of the coefficients of a fitted model.
pub fn draw_coefficients(fit: &GamFit, n_sim: usize, seed: u64) -> Result<PosteriorDraws> {
    let mut d = rmvn(n_sim, &fit.beta_hat, &fit.v, seed)?;
    d.fit_ref = format!("{}: {}", fit.family.name(), fit.design.formula.join("+"));
    Ok(d)
}

/// A smooth with pointwise 95% bands, all on the link scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothBand {
    pub term: String,
    pub x: Vec<f64>,
    pub mode: Vec<f64>,
    pub lo95: Vec<f64>,
    pub hi95: Vec<f64>,
}

pub fn smooth_interval(fit: &GamFit, term: &str, grid: &[f64]) -> Result<SmoothBand> {
    let j = fit
        .design
        .term_index(term)
        .ok_or_else(|| GamError::invalid(format!("no smooth named {term:?} in the fit")))?;
    let r = fit.design.block_range(j);
    let xj = fit.design.blocks[j].evaluate(grid)?;
    let bj = fit.beta_hat.rows(r.start, r.len());
    let vjj = fit.v.view((r.start, r.start), (r.len(), r.len())).into_owned();
    let mode: Vec<f64> = (&xj * bj).iter().copied().collect();
    let se: Vec<f64> = linalg::row_quadratic_forms(&xj, &vjj)
        .into_iter()
        .map(|v| v.max(0.0).sqrt())
        .collect();
    Ok(SmoothBand {
        term: term.to_string(),
        x: grid.to_vec(),
        lo95: mode.iter().zip(&se).map(|(m, s)| m - Z95 * s).collect(),
        hi95: mode.iter().zip(&se).map(|(m, s)| m + Z95 * s).collect(),
        mode,
    })
}

/// Underlying trend on the response scale over the observed days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendBand {
    pub mode: Vec<f64>,
    pub lo95: Vec<f64>,
    pub hi95: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakDistribution {
    /// Probability that day `i` (0-based row of the fit) is the peak.
    pub day_probabilities: Vec<f64>,
    pub mode_day: usize,
    pub interval_95: (usize, usize),
    pub trend: TrendBand,
    pub n_sim: usize,
    pub seed: u64,
}

/// Model matrix over the observed rows with every cyclic column zeroed.
pub fn trend_matrix(fit: &GamFit) -> Result<DMatrix<f64>> {
    let d = &fit.design;
    if !d.blocks.iter().any(|b| b.spec.kind == SmoothKind::Cubic) {
        return Err(GamError::invalid("fit has no trend smooth"));
    }
    let mut x = d.x.clone();
    for (j, b) in d.blocks.iter().enumerate() {
        if b.spec.kind == SmoothKind::Cyclic {
            let r = d.block_range(j);
            x.columns_mut(r.start, r.len()).fill(0.0);
        }
    }
    Ok(x)
}

/// Index of the first maximum.
pub(crate) fn argmax_first<'a>(v: impl IntoIterator<Item = &'a f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &x) in v.into_iter().enumerate() {
        if x > best_v {
            best_v = x;
            best = i;
        }
    }
    best
}

/// Equal-tailed 95% interval of a discrete distribution over indices,
/// widened if needed so that it contains `mode`.
pub(crate) fn discrete_interval(probs: &[f64], mode: usize) -> (usize, usize) {
    let mut cum = 0.0;
    let mut lo = None;
    let mut hi = probs.len() - 1;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if lo.is_none() && cum > 0.025 {
            lo = Some(i);
        }
        if cum >= 0.975 - 1e-12 {
            hi = i;
            break;
        }
    }
    let lo = lo.unwrap_or(0);
    (lo.min(mode), hi.max(mode))
}

pub fn peak_distribution(fit: &GamFit, n_sim: usize, seed: u64) -> Result<PeakDistribution> {
    if n_sim < MIN_N_SIM {
        return Err(GamError::invalid(format!(
            "n_sim = {n_sim} is below the minimum of {MIN_N_SIM}"
        )));
    }
    let xt = trend_matrix(fit)?;
    let draws = draw_coefficients(fit, n_sim, seed)?;
    // n x n_sim trend curves on the link scale.
    let curves = &xt * draws.samples.transpose();
    let n = xt.nrows();
    let mut counts = vec![0usize; n];
    for s in 0..n_sim {
        counts[argmax_first(curves.column(s).iter())] += 1;
    }
    let day_probabilities: Vec<f64> = counts.iter().map(|&c| c as f64 / n_sim as f64).collect();
    let mode_day = counts
        .iter()
        .enumerate()
        .fold((0, 0), |(bi, bc), (i, &c)| if c > bc { (i, c) } else { (bi, bc) })
        .0;
    let interval_95 = discrete_interval(&day_probabilities, mode_day);

    let eta_hat = &xt * &fit.beta_hat;
    let mut lo95 = Vec::with_capacity(n);
    let mut hi95 = Vec::with_capacity(n);
    let mut row = vec![0.0; n_sim];
    for i in 0..n {
        for (s, v) in row.iter_mut().enumerate() {
            *v = curves[(i, s)];
        }
        row.sort_by(f64::total_cmp);
        lo95.push(quantile_sorted(&row, 0.025).exp());
        hi95.push(quantile_sorted(&row, 0.975).exp());
    }
    Ok(PeakDistribution {
        day_probabilities,
        mode_day,
        interval_95,
        trend: TrendBand {
            mode: eta_hat.iter().map(|e| e.exp()).collect(),
            lo95,
            hi95,
        },
        n_sim,
        seed,
    })
}
