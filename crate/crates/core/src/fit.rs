//! Penalized GAM fitting.
//!
//! The inner loop (`pirls`) maximizes the penalized log-likelihood
//! `l(beta) - beta' S_lambda beta / 2` by full Newton iterations (observed
//! information, which is positive for Poisson and negative binomial under a
//! log link) with step halving. The outer loop (`optimize`) maximizes the
//! Laplace approximate marginal likelihood
//!
//! ```text
//! l(b) - b'S b/2 + log|S|_+/2 - log|H + S|/2 + M_p log(2 pi)/2
//! ```
//!
//! over the log smoothing parameters and, for the negative binomial, log theta,
//! using projected BFGS. The log lambda gradient is analytic; the log theta
//! component uses central differences.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{GamError, Result};
use crate::family::{self, Family};
use crate::ingest::CovariateTable;
use crate::linalg;
use crate::splines::{apply_centering, spline_basis, BasisBlock, SmoothSpec};

/// Bounds on every log hyperparameter during optimization.
pub const LOG_BOUND: f64 = 15.0;
pub const PIRLS_MAX_ITER: usize = 200;
pub const PIRLS_TOL: f64 = 1e-8;
pub const OUTER_MAX_ITER: usize = 100;
const THETA_FD_STEP: f64 = 1e-4;
const PENALTY_RANK_TOL: f64 = 1e-10;

/// Full model matrix: intercept column followed by the centered smooth blocks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub blocks: Vec<BasisBlock>,
    /// First column of each block in `x`.
    pub offsets: Vec<usize>,
    /// Each block penalty embedded in a P x P zero matrix.
    pub penalties: Vec<DMatrix<f64>>,
    pub formula: Vec<String>,
    penalty_ranks: Vec<usize>,
    penalty_logdets: Vec<f64>,
}

impl Design {
    /// Assembles a design from already evaluated (usually centered) blocks.
    pub fn from_blocks(blocks: Vec<BasisBlock>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(GamError::invalid("design needs at least one smooth"));
        }
        let n = blocks[0].design.nrows();
        if blocks.iter().any(|b| b.design.nrows() != n) {
            return Err(GamError::dims("blocks have different row counts"));
        }
        let p = 1 + blocks.iter().map(|b| b.width()).sum::<usize>();
        let mut x = DMatrix::zeros(n, p);
        x.column_mut(0).fill(1.0);
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut penalties = Vec::with_capacity(blocks.len());
        let mut penalty_ranks = Vec::with_capacity(blocks.len());
        let mut penalty_logdets = Vec::with_capacity(blocks.len());
        let mut off = 1;
        for b in &blocks {
            let w = b.width();
            x.view_mut((0, off), (n, w)).copy_from(&b.design);
            let mut s = DMatrix::zeros(p, p);
            s.view_mut((off, off), (w, w)).copy_from(&b.penalty);
            penalties.push(s);
            let (rank, logdet) = linalg::rank_logdet_psd(&b.penalty, PENALTY_RANK_TOL);
            penalty_ranks.push(rank);
            penalty_logdets.push(logdet);
            offsets.push(off);
            off += w;
        }
        for c in 0..p {
            if x.column(c).iter().all(|v| *v == 0.0) {
                return Err(GamError::invalid(format!("design column {c} is all zero")));
            }
        }
        let formula = blocks.iter().map(|b| b.name().to_string()).collect();
        Ok(Self {
            x,
            blocks,
            offsets,
            penalties,
            formula,
            penalty_ranks,
            penalty_logdets,
        })
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_smooths(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_range(&self, j: usize) -> Range<usize> {
        self.offsets[j]..self.offsets[j] + self.blocks[j].width()
    }

    pub fn term_index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name() == name)
    }

    pub fn penalty_ranks(&self) -> &[usize] {
        &self.penalty_ranks
    }

    /// `S_lambda = sum_j lambda_j S_j`.
    pub fn s_lambda(&self, lambdas: &[f64]) -> DMatrix<f64> {
        let p = self.ncols();
        let mut s = DMatrix::zeros(p, p);
        for (j, &l) in lambdas.iter().enumerate() {
            let r = self.block_range(j);
            let w = r.len();
            let mut v = s.view_mut((r.start, r.start), (w, w));
            v += &self.blocks[j].penalty * l;
        }
        s
    }

    /// Model matrix at new covariates using the stored bases and constraints.
    pub fn model_matrix(&self, cov: &CovariateTable) -> Result<DMatrix<f64>> {
        let n = cov.len();
        let mut x = DMatrix::zeros(n, self.ncols());
        x.column_mut(0).fill(1.0);
        for (j, b) in self.blocks.iter().enumerate() {
            let vals = cov
                .values(&b.spec.covariate)
                .ok_or_else(|| GamError::invalid(format!("unknown covariate {:?}", b.spec.covariate)))?;
            let m = b.evaluate(&vals)?;
            x.view_mut((0, self.offsets[j]), (n, b.width())).copy_from(&m);
        }
        Ok(x)
    }
}

/// Intercept plus centered smooth blocks, in spec order.
pub fn assemble_design(cov: &CovariateTable, specs: &[SmoothSpec]) -> Result<Design> {
    if specs.is_empty() {
        return Err(GamError::invalid("formula has no smooth terms"));
    }
    let mut seen: Vec<&str> = Vec::new();
    let mut blocks = Vec::with_capacity(specs.len());
    for spec in specs {
        if seen.contains(&spec.covariate.as_str()) {
            return Err(GamError::invalid(format!(
                "duplicate smooth on covariate {:?}",
                spec.covariate
            )));
        }
        seen.push(&spec.covariate);
        let x = cov
            .values(&spec.covariate)
            .ok_or_else(|| GamError::invalid(format!("unknown covariate {:?}", spec.covariate)))?;
        blocks.push(apply_centering(&spline_basis(&x, spec)?)?);
    }
    Design::from_blocks(blocks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub log_lambda: Vec<f64>,
    /// Negative binomial only; `None` keeps the family's own theta.
    pub log_theta: Option<f64>,
    /// Drop the penalty entirely (lambda = 0 exactly).
    #[serde(default)]
    pub unpenalized: bool,
}

impl HyperParams {
    pub fn new(log_lambda: Vec<f64>, log_theta: Option<f64>) -> Self {
        Self {
            log_lambda,
            log_theta,
            unpenalized: false,
        }
    }

    pub fn unpenalized(n_smooths: usize) -> Self {
        Self {
            log_lambda: vec![-LOG_BOUND; n_smooths],
            log_theta: None,
            unpenalized: true,
        }
    }

    /// Starting values scaling each penalty to the size of its block's
    /// information, with theta from a moment estimate.
    pub fn initial(design: &Design, y: &[f64], family: &Family) -> Self {
        let ybar = (y.iter().sum::<f64>() / y.len() as f64).max(0.1);
        let log_lambda = (0..design.n_smooths())
            .map(|j| {
                let r = design.block_range(j);
                let xj = design.x.columns(r.start, r.len());
                let info = xj.iter().map(|v| v * v).sum::<f64>() * ybar;
                let tr = design.blocks[j].penalty.trace().max(1e-300);
                (info / tr).ln().clamp(-LOG_BOUND + 1.0, LOG_BOUND - 1.0)
            })
            .collect();
        let log_theta = match family {
            Family::Poisson => None,
            Family::NegBin { .. } => {
                let var = crate::stats::sample_variance(y);
                let theta = if var > ybar { ybar * ybar / (var - ybar) } else { 100.0 };
                Some(theta.clamp(0.1, 1e4).ln())
            }
        };
        Self::new(log_lambda, log_theta)
    }

    pub fn lambdas(&self) -> Vec<f64> {
        if self.unpenalized {
            vec![0.0; self.log_lambda.len()]
        } else {
            self.log_lambda.iter().map(|r| r.exp()).collect()
        }
    }

    fn check(&self, design: &Design) -> Result<()> {
        if self.log_lambda.len() != design.n_smooths() {
            return Err(GamError::dims(format!(
                "{} smoothing parameters for {} smooths",
                self.log_lambda.len(),
                design.n_smooths()
            )));
        }
        if self.log_lambda.iter().chain(self.log_theta.iter()).any(|v| !v.is_finite()) {
            return Err(GamError::invalid("hyperparameters must be finite"));
        }
        Ok(())
    }
}

fn effective_family(family: &Family, hyper: &HyperParams) -> Family {
    match (family, hyper.log_theta) {
        (Family::NegBin { .. }, Some(lt)) => family.with_theta(lt.exp()),
        _ => *family,
    }
}

/// Result of the inner penalized IRLS loop.
#[derive(Debug, Clone)]
pub struct PirlsFit {
    pub beta: DVector<f64>,
    pub eta: DVector<f64>,
    pub mu: DVector<f64>,
    /// Negative Hessian of the log-likelihood, `X' W X`.
    pub h: DMatrix<f64>,
    pub deviance: f64,
    pub penalized_deviance: f64,
    pub converged: bool,
    pub iterations: usize,
    pub family: Family,
}

fn check_y(design: &Design, y: &[f64]) -> Result<()> {
    if y.len() != design.nrows() {
        return Err(GamError::dims(format!(
            "{} responses for {} design rows",
            y.len(),
            design.nrows()
        )));
    }
    if design.nrows() < 2 {
        return Err(GamError::invalid("need at least 2 observations"));
    }
    if y.iter().any(|v| !(*v >= 0.0) || v.fract() != 0.0) {
        return Err(GamError::invalid("responses must be non-negative integers"));
    }
    Ok(())
}

pub fn pirls(design: &Design, y: &[f64], family: &Family, hyper: &HyperParams) -> Result<PirlsFit> {
    check_y(design, y)?;
    hyper.check(design)?;
    let fam = effective_family(family, hyper);
    let s = design.s_lambda(&hyper.lambdas());
    pirls_inner(&design.x, y, &fam, &s, None)
}

fn linear_predictor(x: &DMatrix<f64>, beta: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let eta = x * beta;
    let mu = eta.map(|e| e.clamp(-700.0, 700.0).exp());
    (eta, mu)
}

fn penalized_deviance(fam: &Family, y: &[f64], mu: &DVector<f64>, s: &DMatrix<f64>, beta: &DVector<f64>) -> (f64, f64) {
    let dev: f64 = y.iter().zip(mu.iter()).map(|(&y, &m)| fam.unit_deviance(y, m)).sum();
    (dev, dev + beta.dot(&(s * beta)))
}

pub(crate) fn pirls_inner(
    x: &DMatrix<f64>,
    y: &[f64],
    fam: &Family,
    s: &DMatrix<f64>,
    start: Option<&DVector<f64>>,
) -> Result<PirlsFit> {
    let p = x.ncols();
    let mut beta = match start {
        Some(b) => b.clone(),
        None => {
            let mut b = DVector::zeros(p);
            b[0] = (y.iter().sum::<f64>() / y.len() as f64).max(0.1).ln();
            b
        }
    };
    let (mut eta, mut mu) = linear_predictor(x, &beta);
    let (mut dev, mut pdev) = penalized_deviance(fam, y, &mu, s, &beta);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < PIRLS_MAX_ITER {
        iterations += 1;
        let w: Vec<f64> = y.iter().zip(mu.iter()).map(|(&y, &m)| fam.neg_hess_eta(y, m)).collect();
        let z: Vec<f64> = (0..y.len())
            .map(|i| eta[i] + fam.score_eta(y[i], mu[i]) / w[i])
            .collect();
        let lhs = linalg::xtwx(x, &w) + s;
        let rhs = linalg::xtwz(x, &w, &z);
        let chol = linalg::cholesky(&lhs, "penalized weighted normal matrix")?;
        let target = chol.solve(&rhs);

        let mut step = &target - &beta;
        let mut accepted = false;
        let (mut new_eta, mut new_mu, mut new_dev, mut new_pdev) = (eta.clone(), mu.clone(), dev, pdev);
        for _ in 0..40 {
            let cand = &beta + &step;
            let (e, m) = linear_predictor(x, &cand);
            let (d, pd) = penalized_deviance(fam, y, &m, s, &cand);
            if pd.is_finite() && pd <= pdev + 1e-12 * pdev.abs().max(1.0) {
                new_eta = e;
                new_mu = m;
                new_dev = d;
                new_pdev = pd;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No descent possible along the Newton direction: at the optimum to
            // working precision.
            converged = true;
            break;
        }
        beta += &step;
        let change = (pdev - new_pdev).abs() / (new_pdev.abs() + 0.1);
        let step_size = step.amax() / (1.0 + beta.amax());
        eta = new_eta;
        mu = new_mu;
        dev = new_dev;
        pdev = new_pdev;
        if change < PIRLS_TOL && step_size < 1e-7 {
            converged = true;
            break;
        }
    }
    let w: Vec<f64> = y.iter().zip(mu.iter()).map(|(&y, &m)| fam.neg_hess_eta(y, m)).collect();
    let h = linalg::xtwx(x, &w);
    Ok(PirlsFit {
        beta,
        eta,
        mu,
        h,
        deviance: dev,
        penalized_deviance: pdev,
        converged,
        iterations,
        family: *fam,
    })
}

/// One evaluation of the marginal likelihood criterion.
#[derive(Debug, Clone)]
pub struct LamlEval {
    pub value: f64,
    /// Analytic derivative with respect to each log lambda.
    pub grad_log_lambda: Vec<f64>,
    pub fit: PirlsFit,
    /// `(H + S_lambda)^{-1}`.
    pub v: DMatrix<f64>,
}

/// Laplace approximate log marginal likelihood at `hyper`.
pub fn laml(design: &Design, y: &[f64], family: &Family, hyper: &HyperParams) -> Result<f64> {
    Ok(laml_eval(design, y, family, hyper, None)?.value)
}

/// Analytic gradient of `laml` with respect to each log lambda.
pub fn laml_gradient(design: &Design, y: &[f64], family: &Family, hyper: &HyperParams) -> Result<Vec<f64>> {
    Ok(laml_eval(design, y, family, hyper, None)?.grad_log_lambda)
}

pub fn laml_eval(
    design: &Design,
    y: &[f64],
    family: &Family,
    hyper: &HyperParams,
    start: Option<&DVector<f64>>,
) -> Result<LamlEval> {
    check_y(design, y)?;
    hyper.check(design)?;
    if hyper.unpenalized {
        return Err(GamError::invalid("marginal likelihood needs a penalized model"));
    }
    let fam = effective_family(family, hyper);
    let lambdas = hyper.lambdas();
    let s = design.s_lambda(&lambdas);
    let fit = pirls_inner(&design.x, y, &fam, &s, start)?;
    if !fit.converged {
        return Err(GamError::NotConverged(format!(
            "inner fit did not converge in {PIRLS_MAX_ITER} iterations"
        )));
    }
    let hs = &fit.h + &s;
    let chol = linalg::cholesky(&hs, "H + S_lambda")?;
    let v = chol.inverse();
    let loglik: f64 = y.iter().zip(fit.mu.iter()).map(|(&y, &m)| fam.log_density(y, m)).sum();
    let pen = fit.beta.dot(&(&s * &fit.beta));
    let total_rank: usize = design.penalty_ranks.iter().sum();
    let log_s_plus: f64 = (0..design.n_smooths())
        .map(|j| design.penalty_ranks[j] as f64 * hyper.log_lambda[j] + design.penalty_logdets[j])
        .sum();
    let null_dim = (design.ncols() - total_rank) as f64;
    let value = loglik - 0.5 * pen + 0.5 * log_s_plus - 0.5 * linalg::chol_logdet(&chol)
        + 0.5 * null_dim * (2.0 * std::f64::consts::PI).ln();
    if !value.is_finite() {
        return Err(GamError::numerical("marginal likelihood is not finite"));
    }

    // d/d rho_j: -lambda_j b'S_j b/2 + rank_j/2 - tr(V dH/drho_j)/2 - lambda_j tr(V S_j)/2,
    // with dH/drho_j = X' diag(w'(eta) * X db_j) X and db_j = -V lambda_j S_j b.
    let leverage = linalg::row_quadratic_forms(&design.x, &v);
    let dw: Vec<f64> = y.iter().zip(fit.mu.iter()).map(|(&y, &m)| fam.d_neg_hess_eta(y, m)).collect();
    let mut grad = Vec::with_capacity(design.n_smooths());
    for j in 0..design.n_smooths() {
        let r = design.block_range(j);
        let sj = &design.blocks[j].penalty;
        let bj = fit.beta.rows(r.start, r.len());
        let sjb = sj * bj;
        let quad = bj.dot(&sjb) * lambdas[j];
        let mut sjb_full = DVector::zeros(design.ncols());
        sjb_full.rows_mut(r.start, r.len()).copy_from(&(sjb * lambdas[j]));
        let db = -(&v * sjb_full);
        let deta = &design.x * db;
        let tr_dh: f64 = (0..y.len()).map(|i| dw[i] * deta[i] * leverage[i]).sum();
        let vjj = v.view((r.start, r.start), (r.len(), r.len()));
        let tr_vs = lambdas[j] * vjj.component_mul(sj).sum();
        grad.push(-0.5 * quad + 0.5 * design.penalty_ranks[j] as f64 - 0.5 * tr_dh - 0.5 * tr_vs);
    }
    Ok(LamlEval {
        value,
        grad_log_lambda: grad,
        fit,
        v,
    })
}

/// Per-smooth Wald test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermTest {
    pub name: String,
    pub edf: f64,
    pub df: usize,
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GamFit {
    pub design: Design,
    pub family: Family,
    pub y: Vec<f64>,
    pub beta_hat: DVector<f64>,
    /// Negative Hessian of the log-likelihood at `beta_hat`.
    pub h: DMatrix<f64>,
    /// Posterior covariance `(H + S_lambda)^{-1}`.
    pub v: DMatrix<f64>,
    pub hyper: HyperParams,
    /// Effective degrees of freedom per smooth, in formula order.
    pub edf: Vec<f64>,
    pub edf_total: f64,
    pub deviance: f64,
    pub null_deviance: f64,
    pub dev_explained: f64,
    pub r_sq_adj: f64,
    pub term_tests: Vec<TermTest>,
    pub fitted: Vec<f64>,
    pub eta: Vec<f64>,
    pub laml: f64,
    pub outer_iterations: usize,
}

impl GamFit {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn theta(&self) -> Option<f64> {
        self.family.theta()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.hyper.lambdas()
    }

    /// Assembles the fitted-model statistics from a converged evaluation.
    pub fn from_eval(design: Design, y: &[f64], hyper: HyperParams, eval: LamlEval, outer_iterations: usize) -> Result<Self> {
        let fam = eval.fit.family;
        let n = y.len() as f64;
        let f = &eval.v * &eval.fit.h;
        let edf: Vec<f64> = (0..design.n_smooths())
            .map(|j| design.block_range(j).map(|i| f[(i, i)]).sum())
            .collect();
        let edf_total = f.trace();
        let ybar = y.iter().sum::<f64>() / n;
        let null_mu = vec![ybar.max(1e-300); y.len()];
        let null_deviance = family::deviance(&fam, y, &null_mu)?;
        let deviance = eval.fit.deviance;
        let ratio = if null_deviance > 0.0 { deviance / null_deviance } else { 0.0 };
        let dev_explained = (1.0 - ratio).clamp(0.0, 1.0);
        let r_sq_adj = 1.0 - (n - 1.0) / (n - edf_total) * ratio;

        let mut term_tests = Vec::with_capacity(design.n_smooths());
        for (j, &e) in edf.iter().enumerate() {
            let r = design.block_range(j);
            let bj = eval.fit.beta.rows(r.start, r.len()).into_owned();
            let vjj = eval.v.view((r.start, r.start), (r.len(), r.len())).into_owned();
            let df = (e.round() as usize).clamp(1, r.len());
            let vinv = linalg::pinv_truncated(&vjj, df);
            let statistic = bj.dot(&(vinv * &bj));
            let p_value = ChiSquared::new(df as f64)
                .map(|c| c.sf(statistic))
                .map_err(|e| GamError::numerical(e.to_string()))?;
            term_tests.push(TermTest {
                name: design.blocks[j].name().to_string(),
                edf: e,
                df,
                statistic,
                p_value,
            });
        }

        Ok(Self {
            family: fam,
            y: y.to_vec(),
            beta_hat: eval.fit.beta.clone(),
            h: eval.fit.h.clone(),
            v: eval.v.clone(),
            hyper,
            edf,
            edf_total,
            deviance,
            null_deviance,
            dev_explained,
            r_sq_adj,
            term_tests,
            fitted: eval.fit.mu.iter().copied().collect(),
            eta: eval.fit.eta.iter().copied().collect(),
            laml: eval.value,
            outer_iterations,
            design,
        })
    }
}

fn pack(hyper: &HyperParams) -> Vec<f64> {
    let mut u = hyper.log_lambda.clone();
    if let Some(t) = hyper.log_theta {
        u.push(t);
    }
    u
}

fn unpack(u: &[f64], m: usize, has_theta: bool) -> HyperParams {
    HyperParams::new(u[..m].to_vec(), has_theta.then(|| u[m]))
}

struct Objective<'a> {
    design: &'a Design,
    y: &'a [f64],
    family: &'a Family,
    m: usize,
    has_theta: bool,
    warm: Option<DVector<f64>>,
}

impl Objective<'_> {
    fn eval(&mut self, u: &[f64]) -> Result<LamlEval> {
        let hyper = unpack(u, self.m, self.has_theta);
        let start = self.warm.clone();
        let e = laml_eval(self.design, self.y, self.family, &hyper, start.as_ref())
            .or_else(|_| laml_eval(self.design, self.y, self.family, &hyper, None))?;
        self.warm = Some(e.fit.beta.clone());
        Ok(e)
    }

    /// Negated criterion and gradient (the optimizer minimizes).
    fn value_grad(&mut self, u: &[f64]) -> Result<(f64, Vec<f64>, LamlEval)> {
        let e = self.eval(u)?;
        let mut g: Vec<f64> = e.grad_log_lambda.iter().map(|v| -v).collect();
        if self.has_theta {
            let k = self.m;
            let h = THETA_FD_STEP;
            let mut up = u.to_vec();
            let mut dn = u.to_vec();
            up[k] += h;
            dn[k] -= h;
            let start = Some(e.fit.beta.clone());
            let f_up = laml_eval(self.design, self.y, self.family, &unpack(&up, self.m, true), start.as_ref())?.value;
            let f_dn = laml_eval(self.design, self.y, self.family, &unpack(&dn, self.m, true), start.as_ref())?.value;
            g.push(-(f_up - f_dn) / (2.0 * h));
        }
        Ok((-e.value, g, e))
    }
}

fn project(u: &mut [f64]) {
    for v in u.iter_mut() {
        *v = v.clamp(-LOG_BOUND, LOG_BOUND);
    }
}

/// Gradient with components zeroed where a bound is active and the descent
/// direction points outward.
fn projected_gradient(u: &[f64], g: &[f64]) -> Vec<f64> {
    u.iter()
        .zip(g)
        .map(|(&x, &gi)| {
            if (x <= -LOG_BOUND && gi > 0.0) || (x >= LOG_BOUND && gi < 0.0) {
                0.0
            } else {
                gi
            }
        })
        .collect()
}

/// Maximizes the marginal likelihood over log lambda (and log theta for the
/// negative binomial) and returns the complete fit.
pub fn optimize(design: &Design, y: &[f64], family: &Family, init: &HyperParams) -> Result<GamFit> {
    check_y(design, y)?;
    init.check(design)?;
    let m = design.n_smooths();
    let has_theta = matches!(family, Family::NegBin { .. });
    let mut init = init.clone();
    if has_theta && init.log_theta.is_none() {
        init.log_theta = Some(family.theta().unwrap_or(1.0).ln());
    }
    if !has_theta {
        init.log_theta = None;
    }
    let mut obj = Objective {
        design,
        y,
        family,
        m,
        has_theta,
        warm: None,
    };
    let mut u = pack(&init);
    project(&mut u);
    let k = u.len();
    let (mut f, mut g, mut best) = obj.value_grad(&u)?;
    let mut hinv = DMatrix::<f64>::identity(k, k);
    let mut converged = false;
    let mut iter = 0;
    let mut small_steps = 0;
    while iter < OUTER_MAX_ITER {
        iter += 1;
        let pg = projected_gradient(&u, &g);
        let gmax = pg.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if gmax < 1e-6 * (1.0 + f.abs()) || gmax < 1e-8 {
            converged = true;
            break;
        }
        // Free variables only: active bounds are frozen for this step.
        let free: Vec<bool> = u
            .iter()
            .zip(&g)
            .map(|(&x, &gi)| !((x <= -LOG_BOUND && gi > 0.0) || (x >= LOG_BOUND && gi < 0.0)))
            .collect();
        let gv = DVector::from_iterator(k, pg.iter().copied());
        let mut d = -(&hinv * &gv);
        for i in 0..k {
            if !free[i] {
                d[i] = 0.0;
            }
        }
        if d.dot(&gv) >= 0.0 {
            hinv = DMatrix::identity(k, k);
            d = -gv.clone();
        }
        let dmax = d.amax();
        if dmax > 5.0 {
            d *= 5.0 / dmax;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let mut cand: Vec<f64> = u.iter().zip(d.iter()).map(|(a, b)| a + alpha * b).collect();
            project(&mut cand);
            let actual: f64 = cand.iter().zip(&u).zip(&g).map(|((c, x), gi)| (c - x) * gi).sum();
            if let Ok((fc, gc, ec)) = obj.value_grad(&cand) {
                if fc <= f + 1e-4 * actual.min(0.0) {
                    accepted = Some((cand, fc, gc, ec));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((cand, fc, gc, ec)) = accepted else {
            // Line search stalled: the current point is optimal to working precision.
            converged = true;
            break;
        };
        let s = DVector::from_iterator(k, cand.iter().zip(&u).map(|(a, b)| a - b));
        let yv = DVector::from_iterator(k, gc.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&yv);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let id = DMatrix::<f64>::identity(k, k);
            let a = &id - (&s * yv.transpose()) * rho;
            let b = &id - (&yv * s.transpose()) * rho;
            hinv = &a * &hinv * &b + (&s * s.transpose()) * rho;
        }
        let rel = (f - fc).abs() / (1.0 + fc.abs());
        u = cand;
        f = fc;
        g = gc;
        best = ec;
        if rel < 1e-12 && s.amax() < 1e-6 {
            small_steps += 1;
            if small_steps >= 2 {
                converged = true;
                break;
            }
        } else {
            small_steps = 0;
        }
    }
    if !converged {
        return Err(GamError::NotConverged(format!(
            "smoothing parameter search did not converge in {OUTER_MAX_ITER} iterations"
        )));
    }
    let hyper = unpack(&u, m, has_theta);
    GamFit::from_eval(design.clone(), y, hyper, best, iter)
}

/// Fits at fixed hyperparameters without any outer search.
pub fn fit_fixed(design: &Design, y: &[f64], family: &Family, hyper: &HyperParams) -> Result<GamFit> {
    let eval = laml_eval(design, y, family, hyper, None)?;
    GamFit::from_eval(design.clone(), y, hyper.clone(), eval, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Link,
    Response,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
}

pub fn predict(fit: &GamFit, cov: &CovariateTable, scale: Scale) -> Result<Prediction> {
    let x = fit.design.model_matrix(cov)?;
    Ok(predict_matrix(fit, &x, scale))
}

pub(crate) fn predict_matrix(fit: &GamFit, x: &DMatrix<f64>, scale: Scale) -> Prediction {
    let eta = x * &fit.beta_hat;
    let var = linalg::row_quadratic_forms(x, &fit.v);
    let se_eta: Vec<f64> = var.iter().map(|v| v.max(0.0).sqrt()).collect();
    match scale {
        Scale::Link => Prediction {
            mean: eta.iter().copied().collect(),
            se: se_eta,
        },
        Scale::Response => {
            let mu: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
            Prediction {
                se: mu.iter().zip(&se_eta).map(|(m, s)| m * s).collect(),
                mean: mu,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::covariates_for_range;
    use crate::splines::Term;
    use chrono::NaiveDate;

    fn cov(n: usize) -> CovariateTable {
        let start = NaiveDate::from_ymd_opt(2020, 3, 1).unwrap();
        covariates_for_range(start, 0, n, start)
    }

    fn toy_counts(n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let t = i as f64 / n as f64;
                (8.0 * (-(t - 0.5).powi(2) * 8.0).exp() + 1.0 + ((i * 7919) % 5) as f64).round()
            })
            .collect()
    }

    #[test]
    fn design_dimensions() {
        let c = cov(146);
        let specs = vec![Term::Trend.default_spec(&c).unwrap(), Term::Weekly.default_spec(&c).unwrap()];
        let d = assemble_design(&c, &specs).unwrap();
        assert_eq!(d.ncols(), 25);
        assert_eq!(d.offsets, vec![1, 20]);
        for (j, s) in d.penalties.iter().enumerate() {
            let r = d.block_range(j);
            for a in 0..25 {
                for b in 0..25 {
                    if !(r.contains(&a) && r.contains(&b)) {
                        assert_eq!(s[(a, b)], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn design_errors() {
        let c = cov(60);
        assert!(assemble_design(&c, &[]).is_err());
        let w = Term::Weekly.default_spec(&c).unwrap();
        assert!(assemble_design(&c, &[w.clone(), w.clone()]).is_err());
        let mut bad = w;
        bad.covariate = "hour".into();
        assert!(assemble_design(&c, &[bad]).is_err());
    }

    #[test]
    fn intercept_only_poisson_mle() {
        // A zero-width smooth is not allowed, so use a huge penalty on a linear-free cyclic term.
        let c = cov(40);
        let d = assemble_design(&c, &[Term::Weekly.default_spec(&c).unwrap()]).unwrap();
        let y = toy_counts(40);
        let intercept_only = DMatrix::from_element(40, 1, 1.0);
        let fit = pirls_inner(&intercept_only, &y, &Family::Poisson, &DMatrix::zeros(1, 1), None).unwrap();
        let ybar = y.iter().sum::<f64>() / 40.0;
        assert!((fit.beta[0] - ybar.ln()).abs() < 1e-8);
        assert!(fit.converged);
        // The cyclic smooth is fully penalized away at lambda = e^15 (no null space).
        let big = pirls(&d, &y, &Family::Poisson, &HyperParams::new(vec![15.0], None)).unwrap();
        assert!((big.beta[0] - ybar.ln()).abs() < 1e-3);
    }

    #[test]
    fn huge_lambda_shrinks_trend_to_null_space() {
        let c = cov(80);
        let spec = Term::Trend.default_spec(&c).unwrap();
        let d = assemble_design(&c, &[spec]).unwrap();
        let y = toy_counts(80);
        let f = pirls(&d, &y, &Family::Poisson, &HyperParams::new(vec![15.0], None)).unwrap();
        let r = d.block_range(0);
        let b = f.beta.rows(r.start, r.len());
        let q = b.dot(&(&d.blocks[0].penalty * b));
        assert!(q < 1e-4, "q = {q}");
    }

    #[test]
    fn penalized_deviance_is_reported_consistently() {
        let c = cov(60);
        let d = assemble_design(&c, &[Term::Trend.default_spec(&c).unwrap()]).unwrap();
        let y = toy_counts(60);
        let hyper = HyperParams::new(vec![2.0], Some(1.0));
        let fam = Family::negbin(1.0).unwrap();
        let f = pirls(&d, &y, &fam, &hyper).unwrap();
        let s = d.s_lambda(&hyper.lambdas());
        let dev = family::deviance(&f.family, &y, f.mu.as_slice()).unwrap();
        assert!((dev - f.deviance).abs() < 1e-10);
        assert!((f.penalized_deviance - dev - f.beta.dot(&(&s * &f.beta))).abs() < 1e-9);
        assert_eq!(f.family.theta(), Some(1f64.exp()));
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let c = cov(30);
        let d = assemble_design(&c, &[Term::Weekly.default_spec(&c).unwrap()]).unwrap();
        let y = toy_counts(30);
        assert!(pirls(&d, &y[..29], &Family::Poisson, &HyperParams::new(vec![0.0], None)).is_err());
        assert!(pirls(&d, &y, &Family::Poisson, &HyperParams::new(vec![0.0, 1.0], None)).is_err());
        assert!(pirls(&d, &y, &Family::Poisson, &HyperParams::new(vec![f64::NAN], None)).is_err());
        assert!(laml(&d, &y, &Family::Poisson, &HyperParams::unpenalized(1)).is_err());
    }

    fn simulated(n: usize, fam: &Family, seed: u64) -> (CovariateTable, Vec<f64>) {
        use rand::SeedableRng;
        let c = cov(n);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let y = (0..n)
            .map(|i| {
                let t = i as f64 / n as f64;
                let dow = c.dow[i] as f64;
                let mu = (1.0 + 3.0 * (-(t - 0.55).powi(2) * 12.0).exp() + 0.3 * (dow * 0.9).sin()).exp();
                fam.sample(mu, &mut rng)
            })
            .collect();
        (c, y)
    }

    #[test]
    fn laml_gradient_matches_finite_differences() {
        let fam = Family::negbin(5.0).unwrap();
        let (c, y) = simulated(120, &fam, 3);
        let specs = vec![Term::Trend.default_spec(&c).unwrap(), Term::Weekly.default_spec(&c).unwrap()];
        let d = assemble_design(&c, &specs).unwrap();
        for rho in [[0.0, 2.0], [3.0, -1.0], [-2.0, 5.0]] {
            let hyper = HyperParams::new(rho.to_vec(), Some(5f64.ln()));
            let g = laml_gradient(&d, &y, &fam, &hyper).unwrap();
            for j in 0..2 {
                let h = 1e-5;
                let mut up = hyper.clone();
                let mut dn = hyper.clone();
                up.log_lambda[j] += h;
                dn.log_lambda[j] -= h;
                let fd = (laml(&d, &y, &fam, &up).unwrap() - laml(&d, &y, &fam, &dn).unwrap()) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-4 * (1.0 + fd.abs()), "rho {rho:?} j {j}: {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn optimize_recovers_a_stationary_point() {
        let fam = Family::negbin(5.0).unwrap();
        let (c, y) = simulated(140, &fam, 9);
        let specs = vec![Term::Trend.default_spec(&c).unwrap(), Term::Weekly.default_spec(&c).unwrap()];
        let d = assemble_design(&c, &specs).unwrap();
        let init = HyperParams::initial(&d, &y, &fam);
        let fit = optimize(&d, &y, &fam, &init).unwrap();
        assert!(fit.r_sq_adj > 0.3, "{}", fit.r_sq_adj);
        assert!(fit.edf_total > 2.0 && fit.edf_total < d.ncols() as f64);
        let theta = fit.theta().unwrap();
        assert!(theta > 1.0 && theta < 50.0, "theta {theta}");
        for (j, g) in laml_gradient(&d, &y, &fam, &fit.hyper).unwrap().iter().enumerate() {
            let at_bound = fit.hyper.log_lambda[j].abs() >= LOG_BOUND - 1e-9;
            assert!(at_bound || g.abs() < 1e-2, "gradient {g}");
        }
        let pred = predict(&fit, &c, Scale::Response).unwrap();
        for (a, b) in pred.mean.iter().zip(&fit.fitted) {
            assert!((a - b).abs() < 1e-9 * b.max(1.0));
        }
    }
}
