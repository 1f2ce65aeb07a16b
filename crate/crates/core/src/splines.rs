//! Penalized cubic regression splines and cyclic cubic splines.
//!
//! Both bases are parameterized by the function values at the knots, so a
//! coefficient vector is literally the spline's knot ordinates. The second
//! derivatives at the knots follow from continuity of the first derivative,
//! `gamma = F beta`, and the wiggliness penalty is the exact integral
//! `int f''(x)^2 dx = beta' S beta` with `S = D' B^{-1} D`.
//!
//! The natural cubic basis has zero second derivative at the boundary knots;
//! the cyclic basis wraps so that value, slope and curvature match at `0`
//! and `period`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GamError, Result};
use crate::ingest::CovariateTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmoothKind {
    Cubic,
    Cyclic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothSpec {
    /// Term label, e.g. `trend` or `weekly`.
    pub name: String,
    pub kind: SmoothKind,
    /// Number of basis functions before any identifiability constraint.
    pub rank: usize,
    pub period: Option<f64>,
    pub covariate: String,
    /// Cubic: `rank` knots. Cyclic: `rank + 1` knots from 0 to `period`.
    pub knots: Vec<f64>,
}

impl SmoothSpec {
    /// Natural cubic regression spline with `rank` evenly spaced knots on `[lo, hi]`.
    pub fn cubic(name: &str, covariate: &str, rank: usize, lo: f64, hi: f64) -> Result<Self> {
        if rank < 3 {
            return Err(GamError::invalid(format!("cubic rank {rank} < 3")));
        }
        if !(hi > lo) {
            return Err(GamError::invalid(format!("empty knot range [{lo}, {hi}]")));
        }
        let knots = (0..rank)
            .map(|i| lo + (hi - lo) * i as f64 / (rank - 1) as f64)
            .collect();
        let spec = Self {
            name: name.to_string(),
            kind: SmoothKind::Cubic,
            rank,
            period: None,
            covariate: covariate.to_string(),
            knots,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Cyclic cubic spline with `rank` evenly spaced knots around `[0, period)`.
    pub fn cyclic(name: &str, covariate: &str, rank: usize, period: f64) -> Result<Self> {
        if rank < 4 {
            return Err(GamError::invalid(format!("cyclic rank {rank} < 4")));
        }
        if !(period > 0.0) {
            return Err(GamError::invalid(format!("period {period} must be positive")));
        }
        let knots = (0..=rank).map(|i| period * i as f64 / rank as f64).collect();
        let spec = Self {
            name: name.to_string(),
            kind: SmoothKind::Cyclic,
            rank,
            period: Some(period),
            covariate: covariate.to_string(),
            knots,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(GamError::invalid("knots must be strictly increasing"));
        }
        match self.kind {
            SmoothKind::Cubic => {
                if self.rank < 3 {
                    return Err(GamError::invalid(format!("cubic rank {} < 3", self.rank)));
                }
                if self.knots.len() != self.rank {
                    return Err(GamError::invalid("cubic spline needs `rank` knots"));
                }
            }
            SmoothKind::Cyclic => {
                if self.rank < 4 {
                    return Err(GamError::invalid(format!("cyclic rank {} < 4", self.rank)));
                }
                let period = self
                    .period
                    .filter(|p| *p > 0.0)
                    .ok_or_else(|| GamError::invalid("cyclic spline needs a positive period"))?;
                if self.knots.len() != self.rank + 1 {
                    return Err(GamError::invalid("cyclic spline needs `rank + 1` knots"));
                }
                let first = self.knots[0];
                let last = self.knots[self.rank];
                if first.abs() > 1e-12 * period || (last - period).abs() > 1e-12 * period {
                    return Err(GamError::invalid("cyclic knots must span exactly [0, period]"));
                }
            }
        }
        Ok(())
    }
}

/// Named smooth terms of the death-rate model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Term {
    Trend,
    Weekly,
    Biweekly,
    Monthly,
}

impl Term {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "trend" | "day" => Ok(Term::Trend),
            "weekly" | "dow" => Ok(Term::Weekly),
            "biweekly" | "biweek" => Ok(Term::Biweekly),
            "monthly" | "dom" => Ok(Term::Monthly),
            other => Err(GamError::invalid(format!("unknown smooth term {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Term::Trend => "trend",
            Term::Weekly => "weekly",
            Term::Biweekly => "biweekly",
            Term::Monthly => "monthly",
        }
    }

    pub fn covariate(self) -> &'static str {
        match self {
            Term::Trend => "day",
            Term::Weekly => "dow",
            Term::Biweekly => "biweek",
            Term::Monthly => "dom",
        }
    }

    /// Default spec for this term over the given covariates: trend rank
    /// `min(20, n/4)` over the observed day range; cyclic ranks 6, 8 and 10.
    pub fn default_spec(self, cov: &CovariateTable) -> Result<SmoothSpec> {
        match self {
            Term::Trend => {
                let lo = *cov.day.iter().min().ok_or_else(|| GamError::invalid("no rows"))? as f64;
                let hi = *cov.day.iter().max().unwrap() as f64;
                let rank = (cov.len() / 4).min(20);
                SmoothSpec::cubic(self.name(), self.covariate(), rank, lo, hi)
            }
            Term::Weekly => SmoothSpec::cyclic(self.name(), self.covariate(), 6, 7.0),
            Term::Biweekly => SmoothSpec::cyclic(self.name(), self.covariate(), 8, 14.0),
            Term::Monthly => SmoothSpec::cyclic(self.name(), self.covariate(), 10, 30.0),
        }
    }
}

/// Regional model formulas: canada and ontario use trend, weekly and monthly
/// terms; quebec trend and weekly; alberta trend and biweekly.
pub fn preset(region: &str) -> Result<Vec<Term>> {
    use Term::*;
    match region.trim().to_ascii_lowercase().as_str() {
        "canada" | "ontario" => Ok(vec![Trend, Weekly, Monthly]),
        "quebec" => Ok(vec![Trend, Weekly]),
        "alberta" => Ok(vec![Trend, Biweekly]),
        other => Err(GamError::invalid(format!("no preset for region {other:?}"))),
    }
}

/// Specs for a list of terms over the given covariates.
pub fn specs_for(terms: &[Term], cov: &CovariateTable) -> Result<Vec<SmoothSpec>> {
    terms.iter().map(|t| t.default_spec(cov)).collect()
}

/// Precomputed spline machinery for one spec: `F` (knot second derivatives
/// from knot values) and the penalty.
#[derive(Debug, Clone)]
struct SplineCore {
    kind: SmoothKind,
    knots: Vec<f64>,
    /// Rows give second derivatives at each knot position (cyclic: `rank` rows).
    f: DMatrix<f64>,
    penalty: DMatrix<f64>,
}

impl SplineCore {
    fn new(spec: &SmoothSpec) -> Result<Self> {
        spec.validate()?;
        let (f, penalty) = match spec.kind {
            SmoothKind::Cubic => natural_matrices(&spec.knots)?,
            SmoothKind::Cyclic => cyclic_matrices(&spec.knots)?,
        };
        Ok(Self {
            kind: spec.kind,
            knots: spec.knots.clone(),
            f,
            penalty,
        })
    }

    fn dim(&self) -> usize {
        self.f.ncols()
    }

    /// Row of basis values, or their derivatives of order `deriv` (0..=3), at `x`.
    fn row(&self, x: f64, deriv: u8) -> Vec<f64> {
        let p = self.dim();
        let k = &self.knots;
        let last = k.len() - 1;
        let x = match self.kind {
            SmoothKind::Cubic => x,
            SmoothKind::Cyclic => {
                let period = k[last];
                if (0.0..=period).contains(&x) {
                    x
                } else {
                    x - period * (x / period).floor()
                }
            }
        };
        // Segment j covers [k[j], k[j+1]]; the right end belongs to the last segment.
        let j = match k.partition_point(|&kn| kn <= x) {
            0 => 0,
            i => (i - 1).min(last - 1),
        };
        let h = k[j + 1] - k[j];
        let am = k[j + 1] - x;
        let ap = x - k[j];
        let (a_m, a_p, c_m, c_p) = match deriv {
            0 => (
                am / h,
                ap / h,
                (am * am * am / h - h * am) / 6.0,
                (ap * ap * ap / h - h * ap) / 6.0,
            ),
            1 => (
                -1.0 / h,
                1.0 / h,
                (-3.0 * am * am / h + h) / 6.0,
                (3.0 * ap * ap / h - h) / 6.0,
            ),
            2 => (0.0, 0.0, am / h, ap / h),
            _ => (0.0, 0.0, -1.0 / h, 1.0 / h),
        };
        let (jl, jr) = match self.kind {
            SmoothKind::Cubic => (j, j + 1),
            SmoothKind::Cyclic => (j % p, (j + 1) % p),
        };
        let mut row = vec![0.0; p];
        row[jl] += a_m;
        row[jr] += a_p;
        for (c, r) in row.iter_mut().enumerate() {
            *r += c_m * self.f[(jl, c)] + c_p * self.f[(jr, c)];
        }
        row
    }

    fn design(&self, x: &[f64], deriv: u8) -> DMatrix<f64> {
        let p = self.dim();
        let mut m = DMatrix::zeros(x.len(), p);
        for (i, &xi) in x.iter().enumerate() {
            for (c, v) in self.row(xi, deriv).into_iter().enumerate() {
                m[(i, c)] = v;
            }
        }
        m
    }
}

/// Natural cubic spline: `F` is k x k with zero boundary rows.
fn natural_matrices(knots: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = knots.len();
    let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    let m = k - 2;
    let mut b = DMatrix::zeros(m, m);
    let mut d = DMatrix::zeros(m, k);
    for i in 0..m {
        d[(i, i)] = 1.0 / h[i];
        d[(i, i + 1)] = -1.0 / h[i] - 1.0 / h[i + 1];
        d[(i, i + 2)] = 1.0 / h[i + 1];
        b[(i, i)] = (h[i] + h[i + 1]) / 3.0;
        if i + 1 < m {
            b[(i, i + 1)] = h[i + 1] / 6.0;
            b[(i + 1, i)] = h[i + 1] / 6.0;
        }
    }
    let chol = b
        .cholesky()
        .ok_or_else(|| GamError::numerical("spline band matrix not positive definite"))?;
    let binv_d = chol.solve(&d);
    let penalty = symmetrize(&(d.transpose() * &binv_d));
    let mut f = DMatrix::zeros(k, k);
    f.view_mut((1, 0), (m, k)).copy_from(&binv_d);
    Ok((f, penalty))
}

/// Cyclic cubic spline over `rank + 1` knots (last = period): circulant
/// tridiagonal `B` and `D` of order `rank`.
fn cyclic_matrices(knots: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let r = knots.len() - 1;
    let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    let mut b = DMatrix::zeros(r, r);
    let mut d = DMatrix::zeros(r, r);
    for i in 0..r {
        let prev = (i + r - 1) % r;
        let next = (i + 1) % r;
        let hp = h[prev];
        let hi = h[i];
        b[(i, prev)] += hp / 6.0;
        b[(i, i)] += (hp + hi) / 3.0;
        b[(i, next)] += hi / 6.0;
        d[(i, prev)] += 1.0 / hp;
        d[(i, i)] += -1.0 / hp - 1.0 / hi;
        d[(i, next)] += 1.0 / hi;
    }
    let chol = b
        .cholesky()
        .ok_or_else(|| GamError::numerical("cyclic band matrix not positive definite"))?;
    let binv_d = chol.solve(&d);
    let penalty = symmetrize(&(d.transpose() * &binv_d));
    Ok((binv_d, penalty))
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Evaluated basis columns for one smooth term together with its penalty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasisBlock {
    pub spec: SmoothSpec,
    pub design: DMatrix<f64>,
    pub penalty: DMatrix<f64>,
    pub centered: bool,
    /// Column means of the raw design used for the sum-to-zero constraint.
    pub constraint: Option<Vec<f64>>,
    /// Maps constrained coefficients to raw spline coefficients (p x (p-1)).
    pub transform: Option<DMatrix<f64>>,
}

impl BasisBlock {
    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn width(&self) -> usize {
        self.design.ncols()
    }

    /// Evaluates this block's basis (including any centering transform) at new
    /// covariate values. Cubic blocks reject values outside the knot range.
    pub fn evaluate(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.evaluate_deriv(x, 0)
    }

    /// Derivative of order `deriv` (0 to 3) of every basis function.
    pub fn evaluate_deriv(&self, x: &[f64], deriv: u8) -> Result<DMatrix<f64>> {
        let core = SplineCore::new(&self.spec)?;
        if self.spec.kind == SmoothKind::Cubic {
            check_range(x, &self.spec.knots)?;
        }
        let raw = core.design(x, deriv);
        Ok(match &self.transform {
            Some(z) => raw * z,
            None => raw,
        })
    }

    /// Rank of the penalty (dimension of its range space).
    pub fn penalty_rank(&self) -> usize {
        let eig = self.penalty.clone().symmetric_eigen();
        let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        eig.eigenvalues.iter().filter(|&&v| v > 1e-10 * max).count()
    }
}

fn check_range(x: &[f64], knots: &[f64]) -> Result<()> {
    let lo = knots[0];
    let hi = knots[knots.len() - 1];
    let tol = 1e-9 * (hi - lo).abs().max(1.0);
    if let Some(bad) = x.iter().find(|&&v| !(v >= lo - tol && v <= hi + tol)) {
        return Err(GamError::invalid(format!("x = {bad} outside knot range [{lo}, {hi}]")));
    }
    Ok(())
}

pub fn cubic_spline_basis(x: &[f64], spec: &SmoothSpec) -> Result<BasisBlock> {
    if spec.kind != SmoothKind::Cubic {
        return Err(GamError::invalid("cubic_spline_basis needs a cubic spec"));
    }
    spec.validate()?;
    check_range(x, &spec.knots)?;
    let mut distinct = x.to_vec();
    distinct.sort_by(|a, b| a.total_cmp(b));
    distinct.dedup();
    if distinct.len() < spec.rank {
        return Err(GamError::invalid(format!(
            "{} distinct x values for a rank-{} basis",
            distinct.len(),
            spec.rank
        )));
    }
    let core = SplineCore::new(spec)?;
    Ok(BasisBlock {
        spec: spec.clone(),
        design: core.design(x, 0),
        penalty: core.penalty,
        centered: false,
        constraint: None,
        transform: None,
    })
}

pub fn cyclic_spline_basis(x: &[f64], spec: &SmoothSpec) -> Result<BasisBlock> {
    if spec.kind != SmoothKind::Cyclic {
        return Err(GamError::invalid("cyclic_spline_basis needs a cyclic spec"));
    }
    let core = SplineCore::new(spec)?;
    Ok(BasisBlock {
        spec: spec.clone(),
        design: core.design(x, 0),
        penalty: core.penalty,
        centered: false,
        constraint: None,
        transform: None,
    })
}

/// Dispatches on the spec kind.
pub fn spline_basis(x: &[f64], spec: &SmoothSpec) -> Result<BasisBlock> {
    match spec.kind {
        SmoothKind::Cubic => cubic_spline_basis(x, spec),
        SmoothKind::Cyclic => cyclic_spline_basis(x, spec),
    }
}

/// Reparameterizes the block so every smooth in its span sums to zero over
/// the observed x. Uses the Householder null-space basis of the column-sum
/// constraint; the block loses one column.
pub fn apply_centering(block: &BasisBlock) -> Result<BasisBlock> {
    if block.centered {
        return Err(GamError::invalid(format!("block {} is already centered", block.name())));
    }
    let n = block.design.nrows();
    let p = block.design.ncols();
    for c in 0..p {
        if block.design.column(c).iter().all(|v| *v == 0.0) {
            return Err(GamError::invalid(format!(
                "column {c} of block {} is identically zero",
                block.name()
            )));
        }
    }
    let sums: DVector<f64> = DVector::from_iterator(p, (0..p).map(|c| block.design.column(c).sum()));
    let norm = sums.norm();
    if norm == 0.0 {
        return Err(GamError::invalid("constraint vector is zero"));
    }
    let sign = if sums[0] >= 0.0 { 1.0 } else { -1.0 };
    let mut v = sums.clone();
    v[0] += sign * norm;
    let vv = v.dot(&v);
    let h = DMatrix::<f64>::identity(p, p) - (&v * v.transpose()) * (2.0 / vv);
    let z = h.columns(1, p - 1).into_owned();
    let design = &block.design * &z;
    let penalty = symmetrize(&(z.transpose() * &block.penalty * &z));
    Ok(BasisBlock {
        spec: block.spec.clone(),
        design,
        penalty,
        centered: true,
        constraint: Some(sums.iter().map(|s| s / n as f64).collect()),
        transform: Some(z),
    })
}

/// `beta' S beta` for the block's penalty.
pub fn penalty_quadratic(block: &BasisBlock, beta: &[f64]) -> Result<f64> {
    let p = block.penalty.nrows();
    if beta.len() != p {
        return Err(GamError::dims(format!(
            "beta has length {} but penalty is {p} x {p}",
            beta.len()
        )));
    }
    let b = DVector::from_column_slice(beta);
    Ok(b.dot(&(&block.penalty * &b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn linear_function_has_zero_penalty() {
        let spec = SmoothSpec::cubic("t", "day", 10, -3.0, 12.0).unwrap();
        let block = cubic_spline_basis(&unit_grid(50, -3.0, 12.0), &spec).unwrap();
        let beta: Vec<f64> = spec.knots.iter().map(|k| 2.0 - 0.7 * k).collect();
        assert!(penalty_quadratic(&block, &beta).unwrap().abs() < 1e-10);
        // And the basis reproduces that line.
        let fitted = &block.design * DVector::from_vec(beta);
        for (x, f) in unit_grid(50, -3.0, 12.0).iter().zip(fitted.iter()) {
            assert!((f - (2.0 - 0.7 * x)).abs() < 1e-10);
        }
    }

    #[test]
    fn quadratic_penalty_approaches_four() {
        let spec = SmoothSpec::cubic("t", "x", 20, 0.0, 1.0).unwrap();
        let block = cubic_spline_basis(&unit_grid(40, 0.0, 1.0), &spec).unwrap();
        let beta: Vec<f64> = spec.knots.iter().map(|k| k * k).collect();
        let q = penalty_quadratic(&block, &beta).unwrap();
        // The interpolant minimizes curvature among interpolants, so it sits just under 4.
        assert!(q <= 4.0 + 1e-9 && q > 3.8, "q = {q}");
    }

    #[test]
    fn cyclic_constant_has_zero_penalty() {
        let spec = SmoothSpec::cyclic("w", "dow", 6, 7.0).unwrap();
        let block = cyclic_spline_basis(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0], &spec).unwrap();
        assert!(penalty_quadratic(&block, &[3.5; 6]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn cyclic_x_is_taken_modulo_period() {
        let spec = SmoothSpec::cyclic("w", "dow", 6, 7.0).unwrap();
        let a = cyclic_spline_basis(&[1.5, 8.5, -5.5], &spec).unwrap();
        for c in 0..6 {
            assert!((a.design[(0, c)] - a.design[(1, c)]).abs() < 1e-12);
            assert!((a.design[(0, c)] - a.design[(2, c)]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_specs_and_inputs() {
        assert!(SmoothSpec::cyclic("w", "dow", 3, 7.0).is_err());
        assert!(SmoothSpec::cyclic("w", "dow", 6, 0.0).is_err());
        assert!(SmoothSpec::cubic("t", "day", 2, 0.0, 1.0).is_err());
        let spec = SmoothSpec::cubic("t", "day", 5, 0.0, 1.0).unwrap();
        assert!(cubic_spline_basis(&[0.0, 0.5, 1.2], &spec).is_err());
        assert!(cubic_spline_basis(&[0.0, 0.5, 1.0, 0.5], &spec).is_err());
        let mut bad = spec.clone();
        bad.knots[2] = bad.knots[1];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn centering_zeroes_column_sums_and_refuses_twice() {
        let x = unit_grid(30, 0.0, 29.0);
        let spec = SmoothSpec::cubic("t", "day", 8, 0.0, 29.0).unwrap();
        let block = cubic_spline_basis(&x, &spec).unwrap();
        let c = apply_centering(&block).unwrap();
        assert_eq!(c.width(), 7);
        for j in 0..7 {
            assert!(c.design.column(j).sum().abs() < 1e-10 * 30.0);
        }
        assert!(apply_centering(&c).is_err());
        // New-data evaluation applies the same transform.
        let again = c.evaluate(&x).unwrap();
        assert!((again - &c.design).abs().max() < 1e-12);
    }

    #[test]
    fn zero_column_is_rejected() {
        let spec = SmoothSpec::cubic("t", "day", 5, 0.0, 10.0).unwrap();
        let mut block = cubic_spline_basis(&unit_grid(20, 0.0, 10.0), &spec).unwrap();
        block.design.column_mut(2).fill(0.0);
        assert!(apply_centering(&block).is_err());
    }

    #[test]
    fn penalty_dimension_mismatch() {
        let spec = SmoothSpec::cyclic("w", "dow", 6, 7.0).unwrap();
        let block = cyclic_spline_basis(&[1.0, 2.0], &spec).unwrap();
        assert!(penalty_quadratic(&block, &[1.0; 5]).is_err());
        assert_eq!(penalty_quadratic(&block, &[0.0; 6]).unwrap(), 0.0);
    }

    #[test]
    fn default_ranks() {
        let cov = crate::ingest::covariates_for_range(
            chrono::NaiveDate::from_ymd_opt(2020, 1, 31).unwrap(),
            0,
            146,
            chrono::NaiveDate::from_ymd_opt(2020, 3, 17).unwrap(),
        );
        assert_eq!(Term::Trend.default_spec(&cov).unwrap().rank, 20);
        assert_eq!(Term::Weekly.default_spec(&cov).unwrap().rank, 6);
        assert_eq!(Term::Biweekly.default_spec(&cov).unwrap().rank, 8);
        assert_eq!(Term::Monthly.default_spec(&cov).unwrap().rank, 10);
        assert_eq!(Term::parse("Weekly").unwrap(), Term::Weekly);
        assert!(Term::parse("yearly").is_err());
    }

    #[test]
    fn presets() {
        assert_eq!(preset("Canada").unwrap(), vec![Term::Trend, Term::Weekly, Term::Monthly]);
        assert_eq!(preset("alberta").unwrap(), vec![Term::Trend, Term::Biweekly]);
        assert!(preset("yukon").is_err());
    }
}
