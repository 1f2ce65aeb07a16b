//! Deconvolution of daily deaths into a fatal-infection profile.
//!
//! Expected deaths on observed day `k` are `h_k = sum_j B_kj f_j`, with `B` the
//! discretized onset-to-death delay, `log f = X_v beta_v` a penalized spline
//! over the extended (lead-in + observed) day axis, and cyclic reporting terms
//! added on `log h`. The posterior is explored with blockwise random-walk
//! Metropolis for the coefficients, Metropolis for `log theta` and a
//! conjugate gamma draw for each smoothing parameter.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma as GammaDist, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma};

use crate::error::{GamError, Result};
use crate::family::Family;
use crate::ingest::{covariates_for_range, DailySeries};
use crate::linalg;
use crate::posterior::argmax_first;
use crate::splines::{apply_centering, spline_basis, BasisBlock, SmoothKind, SmoothSpec, Term};
use crate::stats::quantile_sorted;

pub const DEFAULT_LEAD_IN: usize = 15;
pub const DEFAULT_DELAY_MEAN: f64 = 17.8;
pub const DEFAULT_DELAY_VARIANCE: f64 = 71.2;
pub const DEFAULT_HORIZON: usize = 100;
pub const MIN_KEPT_DRAWS: usize = 100;
const TARGET_ACCEPT: f64 = 0.23;
const GAMMA_PRIOR: f64 = 1e-3;
const LOG_THETA_PRIOR_SD: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretizedDelay {
    pub mean: f64,
    pub variance: f64,
    pub shape: f64,
    pub rate: f64,
    /// `gamma_weights[t - 1]` is the probability of a delay in `(t - 1, t]` days.
    pub gamma_weights: Vec<f64>,
    pub horizon: usize,
}

impl DiscretizedDelay {
    /// Every death happens on the day of infection onset.
    pub fn point_mass() -> Self {
        Self {
            mean: 0.0,
            variance: 0.0,
            shape: f64::INFINITY,
            rate: f64::INFINITY,
            gamma_weights: vec![1.0],
            horizon: 1,
        }
    }

    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(GamError::invalid("delay weights must be non-negative and non-empty"));
        }
        let total: f64 = weights.iter().sum();
        let mean = weights.iter().enumerate().map(|(i, w)| (i + 1) as f64 * w).sum::<f64>() / total;
        let variance = weights
            .iter()
            .enumerate()
            .map(|(i, w)| ((i + 1) as f64 - mean).powi(2) * w)
            .sum::<f64>()
            / total;
        Ok(Self {
            mean,
            variance,
            shape: f64::NAN,
            rate: f64::NAN,
            horizon: weights.len(),
            gamma_weights: weights,
        })
    }

    pub fn total_mass(&self) -> f64 {
        self.gamma_weights.iter().sum()
    }

    /// Mean of the discrete weights, `sum t * gamma(t)`.
    pub fn discrete_mean(&self) -> f64 {
        self.gamma_weights.iter().enumerate().map(|(i, w)| (i + 1) as f64 * w).sum()
    }
}

/// Gamma delay with the given moments, binned into whole days.
pub fn delay_density(mean: f64, variance: f64, horizon: usize) -> Result<DiscretizedDelay> {
    if !(mean > 0.0 && mean.is_finite()) || !(variance > 0.0 && variance.is_finite()) {
        return Err(GamError::invalid("delay mean and variance must be positive"));
    }
    if horizon == 0 {
        return Err(GamError::invalid("delay horizon must be at least 1"));
    }
    let shape = mean * mean / variance;
    let rate = mean / variance;
    let g = Gamma::new(shape, rate).map_err(|e| GamError::invalid(e.to_string()))?;
    let gamma_weights = (1..=horizon).map(|t| (g.cdf(t as f64) - g.cdf((t - 1) as f64)).max(0.0)).collect();
    Ok(DiscretizedDelay {
        mean,
        variance,
        shape,
        rate,
        gamma_weights,
        horizon,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayOperator {
    /// Lower-triangular Toeplitz matrix over the extended axis.
    pub b: DMatrix<f64>,
    pub lead_in: usize,
}

impl DelayOperator {
    pub fn dim(&self) -> usize {
        self.b.nrows()
    }
}

/// `B_ij = gamma(i - j + 1)` for `i >= j` over `n + lead_in` days.
pub fn build_delay_matrix(n: usize, delay: &DiscretizedDelay, lead_in: usize) -> DelayOperator {
    let m = n + lead_in;
    let b = DMatrix::from_fn(m, m, |i, j| {
        if i >= j {
            delay.gamma_weights.get(i - j).copied().unwrap_or(0.0)
        } else {
            0.0
        }
    });
    DelayOperator { b, lead_in }
}

/// Convolves `f` (extended axis) with the delay; returns `h` for rows `from..`.
fn convolve(weights: &[f64], f: &[f64], from: usize, out: &mut [f64]) {
    for (k, o) in out.iter_mut().enumerate() {
        let i = from + k;
        let upto = weights.len().min(i + 1);
        *o = (0..upto).map(|t| weights[t] * f[i - t]).sum();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub iterations: usize,
    pub thin: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub ridge: f64,
    /// Death likelihood; the negative binomial theta is only a starting value.
    pub family: Family,
    pub lead_in: usize,
    pub anchor: NaiveDate,
    /// Hold the log smoothing parameters fixed instead of sampling them.
    pub fixed_log_lambda: Option<Vec<f64>>,
}

impl McmcConfig {
    pub fn desk(seed: u64) -> Self {
        Self::with_length(100_000, 30, seed)
    }

    pub fn long(seed: u64) -> Self {
        Self::with_length(1_000_000, 300, seed)
    }

    /// Burn-in defaults to a fifth of the run.
    pub fn with_length(iterations: usize, thin: usize, seed: u64) -> Self {
        Self {
            iterations,
            thin,
            burn_in: iterations / 5,
            seed,
            ridge: 1e-6,
            family: Family::NegBin { theta: 10.0 },
            lead_in: DEFAULT_LEAD_IN,
            anchor: NaiveDate::from_ymd_opt(2020, 3, 17).expect("valid date"),
            fixed_log_lambda: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thin < 1 || self.iterations < self.thin {
            return Err(GamError::invalid("need iterations >= thin >= 1"));
        }
        if self.burn_in >= self.iterations {
            return Err(GamError::invalid("burn_in must be below iterations"));
        }
        if !(self.ridge > 0.0) {
            return Err(GamError::invalid("ridge must be positive"));
        }
        Ok(())
    }

    pub fn n_kept(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }
}

/// Bases of the deconvolution model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeconvDesign {
    /// Days relative to the first observation, `-lead_in..n`.
    pub days: Vec<i64>,
    /// Dates of the extended axis.
    pub dates: Vec<NaiveDate>,
    /// Infection-scale design: intercept plus centered trend blocks.
    pub xv: DMatrix<f64>,
    /// Cyclic reporting design over the observed days.
    pub xc: DMatrix<f64>,
    pub blocks: Vec<BasisBlock>,
    /// Column range of each block in the full coefficient vector.
    pub ranges: Vec<(usize, usize)>,
    pub lead_in: usize,
}

impl DeconvDesign {
    pub fn pv(&self) -> usize {
        self.xv.ncols()
    }

    pub fn n_coef(&self) -> usize {
        self.xv.ncols() + self.xc.ncols()
    }

    pub fn n_obs(&self) -> usize {
        self.xc.nrows()
    }
}

/// Default deconvolution smooths: the trend spans the extended axis, cyclic
/// terms use their usual ranks.
pub fn deconv_specs(series: &DailySeries, terms: &[Term], lead_in: usize, anchor: NaiveDate) -> Result<Vec<SmoothSpec>> {
    let cov = covariates_for_range(series.first_date(), -(lead_in as i64), series.len() + lead_in, anchor);
    terms.iter().map(|t| t.default_spec(&cov)).collect()
}

pub fn deconv_design(series: &DailySeries, specs: &[SmoothSpec], config: &McmcConfig) -> Result<DeconvDesign> {
    if !specs.iter().any(|s| s.kind == SmoothKind::Cubic) {
        return Err(GamError::invalid("deconvolution needs a trend smooth"));
    }
    let n = series.len();
    let lead = config.lead_in;
    let cov = covariates_for_range(series.first_date(), -(lead as i64), n + lead, config.anchor);
    let mut v_blocks = Vec::new();
    let mut c_blocks = Vec::new();
    for spec in specs {
        let x = cov
            .values(&spec.covariate)
            .ok_or_else(|| GamError::invalid(format!("unknown covariate {:?}", spec.covariate)))?;
        match spec.kind {
            SmoothKind::Cubic => v_blocks.push(apply_centering(&spline_basis(&x, spec)?)?),
            SmoothKind::Cyclic => c_blocks.push(apply_centering(&spline_basis(&x[lead..], spec)?)?),
        }
    }
    let pv = 1 + v_blocks.iter().map(|b| b.width()).sum::<usize>();
    let pc: usize = c_blocks.iter().map(|b| b.width()).sum();
    let mut xv = DMatrix::zeros(n + lead, pv);
    xv.column_mut(0).fill(1.0);
    let mut xc = DMatrix::zeros(n, pc);
    let mut ranges = Vec::new();
    let mut off = 1;
    for b in &v_blocks {
        xv.view_mut((0, off), (n + lead, b.width())).copy_from(&b.design);
        ranges.push((off, off + b.width()));
        off += b.width();
    }
    let mut coff = 0;
    for b in &c_blocks {
        xc.view_mut((0, coff), (n, b.width())).copy_from(&b.design);
        ranges.push((pv + coff, pv + coff + b.width()));
        coff += b.width();
    }
    let first = series.first_date();
    Ok(DeconvDesign {
        days: (-(lead as i64)..n as i64).collect(),
        dates: (-(lead as i64)..n as i64).map(|k| first + chrono::Duration::days(k)).collect(),
        xv,
        xc,
        blocks: v_blocks.into_iter().chain(c_blocks).collect(),
        ranges,
        lead_in: lead,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcSamples {
    /// Kept coefficient draws, one per row.
    pub b: DMatrix<f64>,
    pub theta: Vec<f64>,
    /// Kept log smoothing parameter draws, one inner vector per draw.
    pub rho: Vec<Vec<f64>>,
    /// Post-adaptation acceptance per proposal block (coefficient blocks, then theta).
    pub acceptance_rate: Vec<f64>,
    pub block_names: Vec<String>,
    /// Set when some acceptance rate falls outside (0.05, 0.6).
    pub acceptance_warning: bool,
    pub seed: u64,
    pub chain: u64,
}

impl McmcSamples {
    pub fn n_kept(&self) -> usize {
        self.b.nrows()
    }

    /// Concatenates chains in order.
    pub fn merge(chains: &[McmcSamples]) -> Result<McmcSamples> {
        let first = chains.first().ok_or_else(|| GamError::invalid("no chains to merge"))?;
        let p = first.b.ncols();
        let rows: usize = chains.iter().map(|c| c.n_kept()).sum();
        let mut b = DMatrix::zeros(rows, p);
        let mut r = 0;
        for c in chains {
            if c.b.ncols() != p {
                return Err(GamError::dims("chains have different coefficient counts"));
            }
            b.rows_mut(r, c.n_kept()).copy_from(&c.b);
            r += c.n_kept();
        }
        let k = chains.len() as f64;
        Ok(McmcSamples {
            b,
            theta: chains.iter().flat_map(|c| c.theta.iter().copied()).collect(),
            rho: chains.iter().flat_map(|c| c.rho.iter().cloned()).collect(),
            acceptance_rate: (0..first.acceptance_rate.len())
                .map(|i| chains.iter().map(|c| c.acceptance_rate[i]).sum::<f64>() / k)
                .collect(),
            block_names: first.block_names.clone(),
            acceptance_warning: chains.iter().any(|c| c.acceptance_warning),
            seed: first.seed,
            chain: first.chain,
        })
    }
}

/// Prior and likelihood pieces shared by the mode search and the sampler.
struct Model<'a> {
    design: &'a DeconvDesign,
    y: Vec<f64>,
    weights: Vec<f64>,
    penalties: Vec<DMatrix<f64>>,
    null_proj: Vec<DMatrix<f64>>,
    ranks: Vec<usize>,
    ridge: f64,
}

/// Cached state of the log-mean for one coefficient vector.
#[derive(Clone)]
struct State {
    beta: DVector<f64>,
    f: Vec<f64>,
    log_h: Vec<f64>,
    cyc: Vec<f64>,
}

impl<'a> Model<'a> {
    fn new(design: &'a DeconvDesign, y: Vec<f64>, delay: &DiscretizedDelay, ridge: f64) -> Self {
        let mut penalties = Vec::new();
        let mut null_proj = Vec::new();
        let mut ranks = Vec::new();
        for b in &design.blocks {
            let eig = b.penalty.clone().symmetric_eigen();
            let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
            let w = b.width();
            let mut proj = DMatrix::zeros(w, w);
            let mut rank = 0;
            for (k, &ev) in eig.eigenvalues.iter().enumerate() {
                if ev > 1e-10 * max {
                    rank += 1;
                } else {
                    let u = eig.eigenvectors.column(k);
                    proj += u * u.transpose();
                }
            }
            penalties.push(b.penalty.clone());
            null_proj.push(proj);
            ranks.push(rank);
        }
        Self {
            design,
            y,
            weights: delay.gamma_weights.clone(),
            penalties,
            null_proj,
            ranks,
            ridge,
        }
    }

    fn state(&self, beta: DVector<f64>) -> State {
        let d = self.design;
        let eta = &d.xv * beta.rows(0, d.pv());
        let f: Vec<f64> = eta.iter().map(|e| e.clamp(-700.0, 700.0).exp()).collect();
        let mut h = vec![0.0; d.n_obs()];
        convolve(&self.weights, &f, d.lead_in, &mut h);
        let cyc = if d.xc.ncols() > 0 {
            (&d.xc * beta.rows(d.pv(), d.xc.ncols())).iter().copied().collect()
        } else {
            vec![0.0; d.n_obs()]
        };
        State {
            beta,
            f,
            log_h: h.iter().map(|v| v.max(1e-300).ln()).collect(),
            cyc,
        }
    }

    fn mu(&self, s: &State, k: usize) -> f64 {
        (s.log_h[k] + s.cyc[k]).exp()
    }

    /// Log-likelihood up to terms free of mu.
    fn loglik_kernel(&self, s: &State, fam: &Family) -> f64 {
        let mut ll = 0.0;
        for k in 0..self.y.len() {
            let y = self.y[k];
            let log_mu = s.log_h[k] + s.cyc[k];
            let mu = log_mu.exp();
            ll += match *fam {
                Family::Poisson => y * log_mu - mu,
                Family::NegBin { theta } => y * log_mu - (y + theta) * (mu + theta).ln(),
            };
        }
        ll
    }

    fn loglik_full(&self, s: &State, fam: &Family) -> f64 {
        (0..self.y.len()).map(|k| fam.log_density(self.y[k], self.mu(s, k))).sum()
    }

    fn block_prior(&self, j: usize, beta: &DVector<f64>, lambda: f64) -> f64 {
        let (a, b) = self.design.ranges[j];
        let bj = beta.rows(a, b - a);
        lambda * bj.dot(&(&self.penalties[j] * bj)) + self.ridge * bj.dot(&(&self.null_proj[j] * bj))
    }

    /// `-log prior` up to a constant (times 2).
    fn neg2_log_prior(&self, beta: &DVector<f64>, lambdas: &[f64]) -> f64 {
        self.ridge * beta[0] * beta[0]
            + (0..self.design.blocks.len())
                .map(|j| self.block_prior(j, beta, lambdas[j]))
                .sum::<f64>()
    }

    fn prior_precision(&self, lambdas: &[f64]) -> DMatrix<f64> {
        let p = self.design.n_coef();
        let mut q = DMatrix::zeros(p, p);
        q[(0, 0)] = self.ridge;
        for (j, &(a, b)) in self.design.ranges.iter().enumerate() {
            let w = b - a;
            let block = &self.penalties[j] * lambdas[j] + &self.null_proj[j] * self.ridge;
            q.view_mut((a, a), (w, w)).copy_from(&block);
        }
        q
    }

    /// Score and Fisher information of the likelihood in beta.
    fn score_info(&self, s: &State, fam: &Family) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.design;
        let n = d.n_obs();
        let pv = d.pv();
        let p = d.n_coef();
        // Row k of J: d log mu_k / d beta.
        let mut j = DMatrix::zeros(n, p);
        let fx = DMatrix::from_fn(d.xv.nrows(), pv, |v, c| s.f[v] * d.xv[(v, c)]);
        for k in 0..n {
            let i = d.lead_in + k;
            let inv_h = (-s.log_h[k]).exp();
            let upto = self.weights.len().min(i + 1);
            for t in 0..upto {
                let w = self.weights[t] * inv_h;
                if w != 0.0 {
                    for c in 0..pv {
                        j[(k, c)] += w * fx[(i - t, c)];
                    }
                }
            }
            for c in 0..d.xc.ncols() {
                j[(k, pv + c)] = d.xc[(k, c)];
            }
        }
        let mut score_eta = Vec::with_capacity(n);
        let mut w = Vec::with_capacity(n);
        for k in 0..n {
            let mu = self.mu(s, k);
            score_eta.push(fam.score_eta(self.y[k], mu));
            w.push(match *fam {
                Family::Poisson => mu,
                Family::NegBin { theta } => mu * theta / (mu + theta),
            });
        }
        let score = j.tr_mul(&DVector::from_vec(score_eta));
        (score, linalg::xtwx(&j, &w))
    }

    /// Posterior mode in beta for fixed hyperparameters (Fisher scoring with
    /// step halving) and the precision at the mode.
    fn mode(&self, start: DVector<f64>, fam: &Family, lambdas: &[f64]) -> Result<(State, DMatrix<f64>)> {
        let q = self.prior_precision(lambdas);
        let objective = |s: &State| self.loglik_kernel(s, fam) - 0.5 * s.beta.dot(&(&q * &s.beta));
        let mut s = self.state(start);
        let mut obj = objective(&s);
        for _ in 0..200 {
            let (score, info) = self.score_info(&s, fam);
            let prec = &info + &q;
            let grad = score - &q * &s.beta;
            let chol = linalg::cholesky(&prec, "deconvolution posterior precision")?;
            let mut step = chol.solve(&grad);
            let mut improved = false;
            for _ in 0..30 {
                let cand = self.state(&s.beta + &step);
                let o = objective(&cand);
                if o.is_finite() && o >= obj - 1e-10 * obj.abs() {
                    let gain = o - obj;
                    s = cand;
                    obj = o;
                    improved = gain > 1e-9 * (1.0 + obj.abs());
                    break;
                }
                step *= 0.5;
            }
            if !improved {
                break;
            }
        }
        if !obj.is_finite() {
            return Err(GamError::numerical("deconvolution log posterior is not finite"));
        }
        let (_, info) = self.score_info(&s, fam);
        Ok((s, info + q))
    }
}

fn initial_lambdas(model: &Model, ybar: f64) -> Vec<f64> {
    model
        .design
        .ranges
        .iter()
        .enumerate()
        .map(|(j, &(a, b))| {
            let x = if a < model.design.pv() {
                model.design.xv.columns(a, b - a).into_owned()
            } else {
                model.design.xc.columns(a - model.design.pv(), b - a).into_owned()
            };
            let info = x.iter().map(|v| v * v).sum::<f64>() * ybar.max(0.1);
            (info / model.penalties[j].trace().max(1e-300)).clamp(1e-6, 1e6)
        })
        .collect()
}

/// Starting point shared by all chains: posterior mode with smoothing
/// parameters refined by a few empirical-Bayes style updates.
struct Start {
    beta: DVector<f64>,
    lambdas: Vec<f64>,
    theta: Option<f64>,
    precision: DMatrix<f64>,
}

fn find_start(model: &Model, config: &McmcConfig) -> Result<Start> {
    let y = &model.y;
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    let mass: f64 = model.weights.iter().sum();
    let mut beta = DVector::zeros(model.design.n_coef());
    beta[0] = (ybar.max(0.5) / mass.max(1e-12)).ln();
    let mut lambdas = match &config.fixed_log_lambda {
        Some(r) => {
            if r.len() != model.design.blocks.len() {
                return Err(GamError::dims(format!(
                    "{} fixed smoothing parameters for {} smooths",
                    r.len(),
                    model.design.blocks.len()
                )));
            }
            r.iter().map(|v| v.exp()).collect()
        }
        None => initial_lambdas(model, ybar),
    };
    let mut fam = config.family;
    for _ in 0..6 {
        let (s, _) = model.mode(beta.clone(), &fam, &lambdas)?;
        beta = s.beta.clone();
        if config.fixed_log_lambda.is_none() {
            for (j, l) in lambdas.iter_mut().enumerate() {
                let (a, b) = model.design.ranges[j];
                let bj = beta.rows(a, b - a);
                let q = bj.dot(&(&model.penalties[j] * bj));
                *l = (model.ranks[j] as f64 / q.max(1e-12)).clamp(1e-8, 1e8);
            }
        }
        if let Family::NegBin { theta } = fam {
            // Moment update of theta from the Pearson-type residual spread.
            let excess: f64 = (0..y.len())
                .map(|k| {
                    let mu = model.mu(&s, k);
                    ((y[k] - mu).powi(2) - mu) / (mu * mu)
                })
                .sum::<f64>()
                / y.len() as f64;
            let t = if excess > 0.0 { 1.0 / excess } else { 1e4 };
            fam = Family::NegBin {
                theta: (0.5 * theta + 0.5 * t).clamp(0.1, 1e4),
            };
        }
    }
    let (s, prec) = model.mode(beta, &fam, &lambdas)?;
    Ok(Start {
        beta: s.beta,
        lambdas,
        theta: fam.theta(),
        precision: prec,
    })
}

fn block_proposals(model: &Model, precision: &DMatrix<f64>) -> Result<Vec<(usize, usize, DMatrix<f64>)>> {
    // The intercept rides with the first trend block.
    let mut blocks = Vec::new();
    for (j, &(a, b)) in model.design.ranges.iter().enumerate() {
        let a = if j == 0 { 0 } else { a };
        let w = b - a;
        let pbb = precision.view((a, a), (w, w)).into_owned();
        let chol = linalg::cholesky(&pbb, "proposal precision block")?;
        let cov = chol.inverse();
        let l = linalg::cholesky(&cov, "proposal covariance block")?.l();
        blocks.push((a, b, l));
    }
    Ok(blocks)
}

fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

fn run_chain(model: &Model, config: &McmcConfig, start: &Start, chain: u64) -> Result<McmcSamples> {
    let mut rng = chain_rng(config.seed, chain);
    let proposals = block_proposals(model, &start.precision)?;
    let p = model.design.n_coef();
    let m = model.design.blocks.len();

    // Dispersed start drawn from the Laplace approximation.
    let full_cov = linalg::cholesky(&start.precision, "posterior precision")?.inverse();
    let l_full = linalg::cholesky(&full_cov, "posterior covariance")?.l();
    let z = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
    let mut state = model.state(&start.beta + &l_full * z);

    let mut lambdas = start.lambdas.clone();
    let mut fam = match (config.family, start.theta) {
        (Family::NegBin { .. }, Some(t)) => Family::NegBin { theta: t },
        (f, _) => f,
    };
    let has_theta = matches!(fam, Family::NegBin { .. });
    let n_blocks = proposals.len() + usize::from(has_theta);
    let mut log_scale: Vec<f64> = proposals.iter().map(|(a, b, _)| (2.38 / ((b - a) as f64).sqrt()).ln()).collect();
    let mut log_theta_scale = 0.1f64.ln();
    let mut accepted = vec![0usize; n_blocks];
    let mut attempts = 0usize;

    let n_kept = config.n_kept();
    let mut kept_b = DMatrix::zeros(n_kept, p);
    let mut kept_theta = Vec::with_capacity(n_kept);
    let mut kept_rho = Vec::with_capacity(n_kept);

    let mut ll = model.loglik_kernel(&state, &fam);
    if !ll.is_finite() {
        return Err(GamError::numerical("non-finite likelihood at the chain start"));
    }
    for it in 0..config.iterations {
        let adapting = it < config.burn_in;
        let gain = ((it + 1) as f64).powf(-0.6);
        if !adapting {
            attempts += 1;
        }

        for (bi, (a, b, l)) in proposals.iter().enumerate() {
            let w = b - a;
            let z = DVector::from_fn(w, |_, _| StandardNormal.sample(&mut rng));
            let step = l * z * log_scale[bi].exp();
            let mut beta = state.beta.clone();
            let mut seg = beta.rows_mut(*a, w);
            seg += &step;
            let cand = model.state(beta);
            let ll_c = model.loglik_kernel(&cand, &fam);
            let lp_old = -0.5 * model.neg2_log_prior(&state.beta, &lambdas);
            let lp_new = -0.5 * model.neg2_log_prior(&cand.beta, &lambdas);
            let log_ratio = ll_c + lp_new - ll - lp_old;
            let alpha = if log_ratio.is_nan() { 0.0 } else { log_ratio.min(0.0).exp() };
            let u: f64 = rng.random();
            if u < alpha {
                state = cand;
                ll = ll_c;
                if !adapting {
                    accepted[bi] += 1;
                }
            }
            if adapting {
                log_scale[bi] += gain * (alpha - TARGET_ACCEPT);
            }
        }

        if let Family::NegBin { theta } = fam {
            let lt = theta.ln();
            let z: f64 = StandardNormal.sample(&mut rng);
            let lt_c = lt + log_theta_scale.exp() * z;
            let alpha = if (-15.0..=15.0).contains(&lt_c) {
                let fam_c = Family::NegBin { theta: lt_c.exp() };
                let prior = |x: f64| -0.5 * (x / LOG_THETA_PRIOR_SD).powi(2);
                let log_ratio = model.loglik_full(&state, &fam_c) + prior(lt_c) - model.loglik_full(&state, &fam) - prior(lt);
                if log_ratio.is_nan() {
                    0.0
                } else {
                    log_ratio.min(0.0).exp()
                }
            } else {
                0.0
            };
            let u: f64 = rng.random();
            if u < alpha {
                fam = Family::NegBin { theta: lt_c.exp() };
                ll = model.loglik_kernel(&state, &fam);
                if !adapting {
                    accepted[n_blocks - 1] += 1;
                }
            }
            if adapting {
                log_theta_scale += gain * (alpha - TARGET_ACCEPT);
            }
        }

        if config.fixed_log_lambda.is_none() {
            for j in 0..m {
                let (a, b) = model.design.ranges[j];
                let bj = state.beta.rows(a, b - a);
                let q = bj.dot(&(&model.penalties[j] * bj));
                let shape = GAMMA_PRIOR + model.ranks[j] as f64 / 2.0;
                let rate = GAMMA_PRIOR + q / 2.0;
                let g = GammaDist::new(shape, 1.0 / rate).map_err(|e| GamError::numerical(e.to_string()))?;
                lambdas[j] = g.sample(&mut rng).max(1e-300);
            }
        }

        if !ll.is_finite() {
            return Err(GamError::numerical("non-finite likelihood during sampling"));
        }
        if it >= config.burn_in && (it - config.burn_in + 1) % config.thin == 0 {
            let r = kept_theta.len();
            if r < n_kept {
                kept_b.row_mut(r).copy_from(&state.beta.transpose());
                kept_theta.push(fam.theta().unwrap_or(f64::INFINITY));
                kept_rho.push(lambdas.iter().map(|l| l.ln()).collect());
            }
        }
    }

    let acceptance_rate: Vec<f64> = accepted
        .iter()
        .map(|&a| if attempts > 0 { a as f64 / attempts as f64 } else { 0.0 })
        .collect();
    let acceptance_warning = acceptance_rate.iter().any(|&r| !(r > 0.05 && r < 0.6));
    let mut block_names: Vec<String> = model.design.blocks.iter().map(|b| b.name().to_string()).collect();
    if has_theta {
        block_names.push("theta".into());
    }
    Ok(McmcSamples {
        b: kept_b,
        theta: kept_theta,
        rho: kept_rho,
        acceptance_rate,
        block_names,
        acceptance_warning,
        seed: config.seed,
        chain,
    })
}

fn prepare<'a>(
    series: &DailySeries,
    design: &'a DeconvDesign,
    delay: &DiscretizedDelay,
    config: &McmcConfig,
) -> Result<Model<'a>> {
    config.validate()?;
    if design.n_obs() != series.len() {
        return Err(GamError::dims("design does not match the series length"));
    }
    Ok(Model::new(design, series.counts_f64(), delay, config.ridge))
}

/// One chain (stream 0 of the configured seed).
pub fn run_mcmc(
    series: &DailySeries,
    specs: &[SmoothSpec],
    delay: &DiscretizedDelay,
    config: &McmcConfig,
) -> Result<(DeconvDesign, McmcSamples)> {
    let design = deconv_design(series, specs, config)?;
    let samples = {
        let model = prepare(series, &design, delay, config)?;
        let start = find_start(&model, config)?;
        run_chain(&model, config, &start, 0)?
    };
    Ok((design, samples))
}

/// Independent chains on streams `0..n_chains`, run on separate threads.
pub fn run_chains(
    series: &DailySeries,
    specs: &[SmoothSpec],
    delay: &DiscretizedDelay,
    config: &McmcConfig,
    n_chains: usize,
) -> Result<(DeconvDesign, Vec<McmcSamples>)> {
    if n_chains == 0 {
        return Err(GamError::invalid("need at least one chain"));
    }
    let design = deconv_design(series, specs, config)?;
    let chains = {
        let model = prepare(series, &design, delay, config)?;
        let start = find_start(&model, config)?;
        let (model, start) = (&model, &start);
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..n_chains as u64)
                .map(|c| scope.spawn(move || run_chain(model, config, start, c)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(GamError::numerical("sampler thread panicked"))))
                .collect::<Result<Vec<_>>>()
        })?
    };
    Ok((design, chains))
}

/// Split-chain potential scale reduction factor.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0) / 2;
    if n < 2 {
        return Err(GamError::invalid("chains too short for split R-hat"));
    }
    let mut seqs: Vec<&[f64]> = Vec::new();
    for c in chains {
        let c = &c[c.len() - 2 * n..];
        seqs.push(&c[..n]);
        seqs.push(&c[n..]);
    }
    let m = seqs.len() as f64;
    let nf = n as f64;
    let means: Vec<f64> = seqs.iter().map(|s| s.iter().sum::<f64>() / nf).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = nf / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = seqs
        .iter()
        .zip(&means)
        .map(|(s, mu)| s.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m;
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    Ok((var_plus / w).sqrt())
}

/// Draws of `log f` at the given extended-axis rows, one inner vector per row.
pub fn log_profile_draws(samples: &McmcSamples, design: &DeconvDesign, rows: &[usize]) -> Vec<Vec<f64>> {
    let pv = design.pv();
    rows.iter()
        .map(|&r| {
            let x = design.xv.row(r);
            (0..samples.n_kept())
                .map(|s| x.iter().zip(samples.b.row(s).iter().take(pv)).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub days: Vec<i64>,
    pub dates: Vec<NaiveDate>,
    pub median: Vec<f64>,
    pub band80: (Vec<f64>, Vec<f64>),
    pub band95: (Vec<f64>, Vec<f64>),
    pub peak_probs: Vec<f64>,
    /// `(second difference of log median)^2`; undefined at both ends.
    pub curvature: Vec<Option<f64>>,
    /// `|first difference of median|`; undefined on the first day.
    pub gradient: Vec<Option<f64>>,
}

pub fn infection_profile(samples: &McmcSamples, design: &DeconvDesign) -> Result<ProfileSummary> {
    let s = samples.n_kept();
    if s < MIN_KEPT_DRAWS {
        return Err(GamError::invalid(format!(
            "{s} kept draws; at least {MIN_KEPT_DRAWS} are needed"
        )));
    }
    let pv = design.pv();
    if samples.b.ncols() < pv {
        return Err(GamError::dims("draws do not match the deconvolution design"));
    }
    let bv = samples.b.columns(0, pv);
    let f = (&design.xv * bv.transpose()).map(|e| e.exp());
    let n = f.nrows();
    let mut counts = vec![0usize; n];
    for c in 0..s {
        counts[argmax_first(f.column(c).iter())] += 1;
    }
    let mut median = Vec::with_capacity(n);
    let (mut lo80, mut hi80, mut lo95, mut hi95) = (vec![], vec![], vec![], vec![]);
    let mut row = vec![0.0; s];
    for i in 0..n {
        for (c, v) in row.iter_mut().enumerate() {
            *v = f[(i, c)];
        }
        row.sort_by(f64::total_cmp);
        lo95.push(quantile_sorted(&row, 0.025));
        lo80.push(quantile_sorted(&row, 0.10));
        median.push(quantile_sorted(&row, 0.5));
        hi80.push(quantile_sorted(&row, 0.90));
        hi95.push(quantile_sorted(&row, 0.975));
    }
    let (curvature, gradient) = profile_shape(&median);
    Ok(ProfileSummary {
        days: design.days.clone(),
        dates: design.dates.clone(),
        median,
        band80: (lo80, hi80),
        band95: (lo95, hi95),
        peak_probs: counts.iter().map(|&c| c as f64 / s as f64).collect(),
        curvature,
        gradient,
    })
}

/// Squared second difference of the log profile and absolute first difference.
pub fn profile_shape(median: &[f64]) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
    let n = median.len();
    let curvature = (0..n)
        .map(|i| {
            (i > 0 && i + 1 < n).then(|| (median[i + 1].ln() - 2.0 * median[i].ln() + median[i - 1].ln()).powi(2))
        })
        .collect();
    let gradient = (0..n).map(|i| (i > 0).then(|| (median[i] - median[i - 1]).abs())).collect();
    (curvature, gradient)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_delay_moments() {
        let d = delay_density(17.8, 71.2, 100).unwrap();
        assert!((d.shape - 4.45).abs() < 1e-12);
        assert!((d.rate - 0.25).abs() < 1e-12);
        assert!(d.total_mass() >= 0.9999);
        assert!((d.discrete_mean() - 17.8).abs() < 0.5);
    }

    #[test]
    fn delay_rejects_bad_parameters() {
        assert!(delay_density(0.0, 1.0, 10).is_err());
        assert!(delay_density(1.0, -1.0, 10).is_err());
        assert!(delay_density(1.0, 1.0, 0).is_err());
        assert!(DiscretizedDelay::from_weights(vec![]).is_err());
        assert!(DiscretizedDelay::from_weights(vec![0.5, -0.1]).is_err());
    }

    #[test]
    fn small_delay_matrix() {
        let d = DiscretizedDelay::from_weights(vec![0.5, 0.3, 0.2]).unwrap();
        let op = build_delay_matrix(3, &d, 0);
        let want = DMatrix::from_row_slice(3, 3, &[0.5, 0.0, 0.0, 0.3, 0.5, 0.0, 0.2, 0.3, 0.5]);
        assert_eq!(op.b, want);
        let id = build_delay_matrix(4, &DiscretizedDelay::point_mass(), 2);
        assert_eq!(id.b, DMatrix::identity(6, 6));
    }

    #[test]
    fn convolution_matches_matrix() {
        let d = delay_density(5.0, 4.0, 12).unwrap();
        let op = build_delay_matrix(20, &d, 5);
        let f: Vec<f64> = (0..25).map(|i| 1.0 + (i as f64 * 0.3).sin().abs()).collect();
        let dense = &op.b * DVector::from_vec(f.clone());
        let mut h = vec![0.0; 20];
        convolve(&d.gamma_weights, &f, 5, &mut h);
        for k in 0..20 {
            assert!((h[k] - dense[5 + k]).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_and_loglinear_profiles() {
        let (c, g) = profile_shape(&[3.0; 5]);
        assert_eq!(c[0], None);
        assert_eq!(c[4], None);
        assert!(c[1..4].iter().all(|v| *v == Some(0.0)));
        assert_eq!(g[0], None);
        assert!(g[1..].iter().all(|v| *v == Some(0.0)));
        let m: Vec<f64> = (0..6).map(|i| (0.2 * i as f64).exp()).collect();
        let (c, g) = profile_shape(&m);
        assert!(c[1..5].iter().all(|v| v.unwrap() < 1e-24));
        for i in 1..6 {
            let ratio = g[i].unwrap() / m[i];
            assert!((ratio - (1.0 - (-0.2f64).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn rhat_of_identical_chains_near_one() {
        let a: Vec<f64> = (0..200).map(|i| ((i * 37) % 17) as f64).collect();
        let r = split_rhat(&[a.clone(), a]).unwrap();
        assert!(r < 1.05, "{r}");
        let shifted: Vec<f64> = (0..200).map(|i| 100.0 + i as f64).collect();
        let base: Vec<f64> = (0..200).map(|i| i as f64 * 0.01).collect();
        assert!(split_rhat(&[base, shifted]).unwrap() > 1.5);
        assert!(split_rhat(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn config_checks() {
        let mut c = McmcConfig::desk(1);
        assert_eq!(c.n_kept(), 80_000 / 30);
        assert_eq!(McmcConfig::long(1).thin, 300);
        c.burn_in = c.iterations;
        assert!(c.validate().is_err());
        c = McmcConfig::with_length(10, 20, 1);
        assert!(c.validate().is_err());
    }
}
