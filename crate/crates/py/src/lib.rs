use engine::deconv::{deconv_specs, delay_density, infection_profile, run_chains, McmcConfig, McmcSamples};
use engine::fit::{optimize, GamFit, HyperParams};
use engine::posterior::peak_distribution;
use engine::{assemble_design, derive_covariates, load_series, preset, specs_for, DailySeries, Family, GamError, Term};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(gamcast, GamcastError, PyException);

fn to_py(e: GamError) -> PyErr {
    match e {
        GamError::InvalidArgument(m) => PyValueError::new_err(m),
        other => GamcastError::new_err(other.to_string()),
    }
}

fn parse_date(s: &str) -> PyResult<chrono::NaiveDate> {
    chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| PyValueError::new_err(format!("bad date {s:?}: {e}")))
}

fn parse_terms(formula: Option<Vec<String>>, region: &str) -> PyResult<Vec<Term>> {
    match formula {
        Some(f) => f.iter().map(|s| Term::parse(s)).collect::<Result<_, _>>().map_err(to_py),
        None => preset(region).map_err(to_py),
    }
}

fn parse_family(name: &str, theta: f64) -> PyResult<Family> {
    match name {
        "poisson" => Ok(Family::Poisson),
        "negbin" => Family::negbin(theta).map_err(to_py),
        other => Err(PyValueError::new_err(format!("unknown family {other:?}"))),
    }
}

/// Daily death counts for one region.
#[pyclass(frozen)]
struct Series {
    inner: DailySeries,
}

#[pymethods]
impl Series {
    #[new]
    fn new(region: &str, start: &str, deaths: Vec<u64>) -> PyResult<Self> {
        let inner = DailySeries::from_counts(region, parse_date(start)?, deaths).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn region(&self) -> &str {
        self.inner.region()
    }

    #[getter]
    fn dates(&self) -> Vec<String> {
        self.inner.dates().iter().map(|d| d.to_string()).collect()
    }

    #[getter]
    fn deaths(&self) -> Vec<u64> {
        self.inner.deaths().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Series(region={:?}, n={}, {}..{})",
            self.inner.region(),
            self.inner.len(),
            self.inner.first_date(),
            self.inner.last_date()
        )
    }
}

/// A fitted GAM.
#[pyclass(frozen)]
struct Fit {
    inner: GamFit,
}

#[pymethods]
impl Fit {
    #[getter]
    fn formula(&self) -> Vec<String> {
        self.inner.design.formula.clone()
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.inner.family.name()
    }

    #[getter]
    fn theta(&self) -> Option<f64> {
        self.inner.theta()
    }

    #[getter]
    fn coefficients(&self) -> Vec<f64> {
        self.inner.beta_hat.iter().copied().collect()
    }

    #[getter]
    fn log_lambda(&self) -> Vec<f64> {
        self.inner.hyper.log_lambda.clone()
    }

    #[getter]
    fn edf(&self) -> Vec<f64> {
        self.inner.edf.clone()
    }

    #[getter]
    fn fitted(&self) -> Vec<f64> {
        self.inner.fitted.clone()
    }

    #[getter]
    fn deviance(&self) -> f64 {
        self.inner.deviance
    }

    #[getter]
    fn dev_explained(&self) -> f64 {
        self.inner.dev_explained
    }

    #[getter]
    fn r_sq_adj(&self) -> f64 {
        self.inner.r_sq_adj
    }

    #[getter]
    fn laml(&self) -> f64 {
        self.inner.laml
    }

    /// `(name, edf, statistic, p_value)` per smooth.
    #[getter]
    fn term_tests(&self) -> Vec<(String, f64, f64, f64)> {
        self.inner
            .term_tests
            .iter()
            .map(|t| (t.name.clone(), t.edf, t.statistic, t.p_value))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Fit(formula={:?}, family={}, r_sq_adj={:.4})",
            self.inner.design.formula,
            self.inner.family.name(),
            self.inner.r_sq_adj
        )
    }
}

/// Reads `date,deaths[,region]` rows; `region` filters a region column.
#[pyfunction]
#[pyo3(signature = (path, region = ""))]
fn load(path: &str, region: &str) -> PyResult<Series> {
    let inner = load_series(path, region).map_err(to_py)?;
    Ok(Series { inner })
}

#[pyfunction]
#[pyo3(signature = (series, formula = None, family = "negbin", theta = 10.0, anchor = None))]
fn fit(
    py: Python<'_>,
    series: &Series,
    formula: Option<Vec<String>>,
    family: &str,
    theta: f64,
    anchor: Option<&str>,
) -> PyResult<Fit> {
    let s = &series.inner;
    let terms = parse_terms(formula, s.region())?;
    let fam = parse_family(family, theta)?;
    let anchor = anchor.map(parse_date).transpose()?.unwrap_or(s.first_date());
    let inner = py
        .detach(|| {
            let cov = derive_covariates(s, anchor);
            let design = assemble_design(&cov, &specs_for(&terms, &cov)?)?;
            let y = s.counts_f64();
            optimize(&design, &y, &fam, &HyperParams::initial(&design, &y, &fam))
        })
        .map_err(to_py)?;
    Ok(Fit { inner })
}

/// Posterior distribution of the trend's peak day (0-based row index).
#[pyfunction]
#[pyo3(signature = (fit, seed, n_sim = 10_000))]
fn peak<'py>(py: Python<'py>, fit: &Fit, seed: u64, n_sim: usize) -> PyResult<Bound<'py, PyDict>> {
    let pk = py.detach(|| peak_distribution(&fit.inner, n_sim, seed)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("day_probabilities", pk.day_probabilities)?;
    d.set_item("mode_day", pk.mode_day)?;
    d.set_item("interval_95", pk.interval_95)?;
    d.set_item("trend_mode", pk.trend.mode)?;
    d.set_item("trend_lo95", pk.trend.lo95)?;
    d.set_item("trend_hi95", pk.trend.hi95)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (
    series, seed, formula = None, iterations = 100_000, thin = 30, chains = 1,
    delay_mean = 17.8, delay_variance = 71.2, horizon = 100, lead_in = 15, anchor = None
))]
#[allow(clippy::too_many_arguments)]
fn deconvolve<'py>(
    py: Python<'py>,
    series: &Series,
    seed: u64,
    formula: Option<Vec<String>>,
    iterations: usize,
    thin: usize,
    chains: usize,
    delay_mean: f64,
    delay_variance: f64,
    horizon: usize,
    lead_in: usize,
    anchor: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let s = &series.inner;
    let terms = parse_terms(formula, s.region())?;
    let mut config = McmcConfig::with_length(iterations, thin, seed);
    config.lead_in = lead_in;
    config.anchor = anchor.map(parse_date).transpose()?.unwrap_or(s.first_date());
    let profile = py
        .detach(|| {
            let delay = delay_density(delay_mean, delay_variance, horizon)?;
            let specs = deconv_specs(s, &terms, lead_in, config.anchor)?;
            let (design, draws) = run_chains(s, &specs, &delay, &config, chains)?;
            infection_profile(&McmcSamples::merge(&draws)?, &design)
        })
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("dates", profile.dates.iter().map(|x| x.to_string()).collect::<Vec<_>>())?;
    d.set_item("median", profile.median)?;
    d.set_item("lo80", profile.band80.0)?;
    d.set_item("hi80", profile.band80.1)?;
    d.set_item("lo95", profile.band95.0)?;
    d.set_item("hi95", profile.band95.1)?;
    d.set_item("peak_probs", profile.peak_probs)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "gamcast")]
fn gamcast_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GamcastError", m.py().get_type::<GamcastError>())?;
    m.add_class::<Series>()?;
    m.add_class::<Fit>()?;
    m.add_function(wrap_pyfunction!(load, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(peak, m)?)?;
    m.add_function(wrap_pyfunction!(deconvolve, m)?)?;
    Ok(())
}
