//! Loading daily count series and deriving the calendar covariates used by the
//! smooth terms, plus the exploratory summaries (dispersion, outliers,
//! histogram/density, classical decomposition).
//!
//! Calendar phase convention: `dow` is the ISO weekday (Monday = 1). `biweek`
//! and `dom` are free-running 14- and 30-day cycles whose position 1 is the
//! first row of the series. `dom` is *not* the calendar day of month.

use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{GamError, Result};
use crate::stats;

pub const DATE_FORMAT: &str = "%Y-%m-%d";

/// Consecutive daily, non-negative counts for one region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DailySeries {
    region: String,
    dates: Vec<NaiveDate>,
    deaths: Vec<u64>,
}

impl DailySeries {
    /// Validates that dates advance by exactly one day and the series is non-empty.
    pub fn new(region: impl Into<String>, dates: Vec<NaiveDate>, deaths: Vec<u64>) -> Result<Self> {
        if dates.is_empty() {
            return Err(GamError::data("series is empty"));
        }
        if dates.len() != deaths.len() {
            return Err(GamError::dims(format!(
                "{} dates but {} counts",
                dates.len(),
                deaths.len()
            )));
        }
        for w in dates.windows(2) {
            let step = (w[1] - w[0]).num_days();
            if step == 0 {
                return Err(GamError::data(format!("duplicate date {}", w[1])));
            }
            if step != 1 {
                return Err(GamError::data(format!(
                    "date gap between {} and {} ({} days)",
                    w[0], w[1], step
                )));
            }
        }
        Ok(Self {
            region: region.into(),
            dates,
            deaths,
        })
    }

    /// Builds a series from a start date and consecutive counts.
    pub fn from_counts(region: impl Into<String>, start: NaiveDate, deaths: Vec<u64>) -> Result<Self> {
        let dates = (0..deaths.len())
            .map(|i| start + chrono::Duration::days(i as i64))
            .collect();
        Self::new(region, dates, deaths)
    }

    pub fn region(&self) -> &str {
        &self.region
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn deaths(&self) -> &[u64] {
        &self.deaths
    }

    pub fn len(&self) -> usize {
        self.deaths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deaths.is_empty()
    }

    pub fn first_date(&self) -> NaiveDate {
        self.dates[0]
    }

    pub fn last_date(&self) -> NaiveDate {
        self.dates[self.dates.len() - 1]
    }

    pub fn counts_f64(&self) -> Vec<f64> {
        self.deaths.iter().map(|&d| d as f64).collect()
    }

    /// Writes the series in the canonical `date,deaths,region` layout.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        w.write_record(["date", "deaths", "region"])?;
        for (d, y) in self.dates.iter().zip(&self.deaths) {
            w.write_record([d.format(DATE_FORMAT).to_string(), y.to_string(), self.region.clone()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a `date,deaths[,region]` CSV file.
pub fn load_series(path: impl AsRef<Path>, region: &str) -> Result<DailySeries> {
    let file = std::fs::File::open(path.as_ref())?;
    read_series(file, region)
}

/// Parses a series from any reader. When a `region` column is present only rows
/// matching `region` (case-insensitive) are kept.
pub fn read_series<R: Read>(reader: R, region: &str) -> Result<DailySeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let date_col = col("date").ok_or_else(|| GamError::data("missing `date` column"))?;
    let deaths_col = col("deaths").ok_or_else(|| GamError::data("missing `deaths` column"))?;
    let region_col = col("region");

    let mut rows: Vec<(NaiveDate, u64)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if let Some(rc) = region_col {
            let r = rec.get(rc).unwrap_or("");
            if !region.is_empty() && !r.eq_ignore_ascii_case(region) {
                continue;
            }
        }
        let raw_date = rec.get(date_col).unwrap_or("");
        let date = NaiveDate::parse_from_str(raw_date, DATE_FORMAT)
            .map_err(|e| GamError::data(format!("line {line}: bad date {raw_date:?}: {e}")))?;
        let raw_count = rec.get(deaths_col).unwrap_or("");
        let count = parse_count(raw_count).map_err(|m| GamError::data(format!("line {line}: {m}")))?;
        rows.push((date, count));
    }
    if rows.is_empty() {
        return Err(GamError::data(if region_col.is_some() && !region.is_empty() {
            format!("no rows for region {region:?}")
        } else {
            "empty file".to_string()
        }));
    }
    rows.sort_by_key(|r| r.0);
    let (dates, deaths) = rows.into_iter().unzip();
    DailySeries::new(region, dates, deaths)
}

fn parse_count(raw: &str) -> std::result::Result<u64, String> {
    if raw.is_empty() {
        return Err("missing count".into());
    }
    if let Some(rest) = raw.strip_prefix('-') {
        if rest.chars().all(|c| c.is_ascii_digit()) && !rest.is_empty() {
            return Err(format!("negative count {raw}"));
        }
    }
    if !raw.chars().all(|c| c.is_ascii_digit()) {
        return Err(format!("count {raw:?} is not a non-negative integer"));
    }
    raw.parse::<u64>().map_err(|e| format!("count {raw:?}: {e}"))
}

/// Per-row calendar covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateTable {
    pub anchor: NaiveDate,
    /// Days since the anchor (negative before it).
    pub day: Vec<i64>,
    /// ISO weekday, Monday = 1.
    pub dow: Vec<u8>,
    pub biweek: Vec<u8>,
    /// Position in a free-running 30-day cycle.
    pub dom: Vec<u8>,
}

pub const COVARIATE_NAMES: [&str; 4] = ["day", "dow", "biweek", "dom"];

impl CovariateTable {
    pub fn len(&self) -> usize {
        self.day.len()
    }

    pub fn is_empty(&self) -> bool {
        self.day.is_empty()
    }

    /// Column by name as reals; `None` for unknown names.
    pub fn values(&self, name: &str) -> Option<Vec<f64>> {
        match name {
            "day" => Some(self.day.iter().map(|&v| v as f64).collect()),
            "dow" => Some(self.dow.iter().map(|&v| v as f64).collect()),
            "biweek" => Some(self.biweek.iter().map(|&v| v as f64).collect()),
            "dom" => Some(self.dom.iter().map(|&v| v as f64).collect()),
            _ => None,
        }
    }
}

pub fn derive_covariates(series: &DailySeries, anchor: NaiveDate) -> CovariateTable {
    covariates_for_range(series.first_date(), 0, series.len(), anchor)
}

/// Covariates for `len` consecutive days starting `offset` days from
/// `origin`, the date that carries biweek/dom position 1. A negative offset
/// extends the calendar backwards (used for deconvolution lead-in days).
pub fn covariates_for_range(origin: NaiveDate, offset: i64, len: usize, anchor: NaiveDate) -> CovariateTable {
    let mut t = CovariateTable {
        anchor,
        day: Vec::with_capacity(len),
        dow: Vec::with_capacity(len),
        biweek: Vec::with_capacity(len),
        dom: Vec::with_capacity(len),
    };
    for i in 0..len as i64 {
        let k = offset + i;
        let date = origin + chrono::Duration::days(k);
        t.day.push((date - anchor).num_days());
        t.dow.push(date.weekday().number_from_monday() as u8);
        t.biweek.push((k.rem_euclid(14) + 1) as u8);
        t.dom.push((k.rem_euclid(30) + 1) as u8);
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outlier {
    pub date: NaiveDate,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Density {
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdaSummary {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    /// variance / mean; absent when the mean is zero.
    pub dispersion_index: Option<f64>,
    pub quartiles: Quartiles,
    pub fences: (f64, f64),
    pub outliers: Vec<Outlier>,
    pub histogram: Histogram,
    /// Gaussian KDE with Silverman bandwidth; absent for constant data.
    pub density: Option<Density>,
}

const DENSITY_GRID: usize = 512;

pub fn summary_stats(series: &DailySeries) -> Result<EdaSummary> {
    let n = series.len();
    if n < 2 {
        return Err(GamError::invalid("summary statistics need at least 2 observations"));
    }
    let y = series.counts_f64();
    let mean = stats::mean(&y);
    let variance = stats::sample_variance(&y);
    let dispersion_index = (mean > 0.0).then(|| variance / mean);

    let mut sorted = y.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let q1 = stats::quantile_sorted(&sorted, 0.25);
    let median = stats::quantile_sorted(&sorted, 0.5);
    let q3 = stats::quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let fences = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let outliers = series
        .dates()
        .iter()
        .zip(series.deaths())
        .filter(|(_, &c)| (c as f64) < fences.0 || (c as f64) > fences.1)
        .map(|(&date, &count)| Outlier { date, count })
        .collect();

    let (edges, counts) = stats::histogram(&y, stats::sturges_bins(n));

    let sd = variance.sqrt();
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let bandwidth = 0.9 * spread * (n as f64).powf(-0.2);
    let density = (bandwidth > 0.0).then(|| kde(&y, bandwidth));

    Ok(EdaSummary {
        n,
        mean,
        variance,
        dispersion_index,
        quartiles: Quartiles { q1, median, q3 },
        fences,
        outliers,
        histogram: Histogram { edges, counts },
        density,
    })
}

fn kde(y: &[f64], bw: f64) -> Density {
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * bw;
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * bw;
    let step = (hi - lo) / (DENSITY_GRID - 1) as f64;
    let norm = 1.0 / (y.len() as f64 * bw * (2.0 * std::f64::consts::PI).sqrt());
    let grid: Vec<f64> = (0..DENSITY_GRID).map(|i| lo + step * i as f64).collect();
    let values = grid
        .iter()
        .map(|&g| {
            norm * y
                .iter()
                .map(|&v| {
                    let u = (g - v) / bw;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
        })
        .collect();
    Density { bandwidth: bw, grid, values }
}

/// Additive trend + seasonal + random decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub period: usize,
    /// Centered moving average; `None` within half a period of either edge.
    pub trend: Vec<Option<f64>>,
    pub seasonal: Vec<f64>,
    pub random: Vec<Option<f64>>,
    /// One period of the seasonal pattern (zero mean).
    pub figure: Vec<f64>,
}

pub fn classical_decompose(series: &DailySeries, period: usize) -> Result<Decomposition> {
    decompose_values(&series.counts_f64(), period)
}

pub fn decompose_values(x: &[f64], period: usize) -> Result<Decomposition> {
    if period == 0 {
        return Err(GamError::invalid("period must be positive"));
    }
    let n = x.len();
    if n < 2 * period {
        return Err(GamError::invalid(format!(
            "series of length {n} is shorter than two periods ({period})"
        )));
    }
    // Moving-average weights; even periods use half weights at both ends.
    let weights: Vec<f64> = if period % 2 == 1 {
        vec![1.0 / period as f64; period]
    } else {
        let mut w = vec![1.0 / period as f64; period + 1];
        w[0] *= 0.5;
        w[period] *= 0.5;
        w
    };
    let half = weights.len() / 2;
    let mut trend = vec![None; n];
    for (i, t) in trend.iter_mut().enumerate().take(n - half).skip(half) {
        *t = Some(weights.iter().enumerate().map(|(j, w)| w * x[i + j - half]).sum());
    }

    let mut sums = vec![0.0; period];
    let mut counts = vec![0usize; period];
    for i in 0..n {
        if let Some(t) = trend[i] {
            sums[i % period] += x[i] - t;
            counts[i % period] += 1;
        }
    }
    let raw: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let centre = stats::mean(&raw);
    let figure: Vec<f64> = raw.iter().map(|v| v - centre).collect();
    let seasonal: Vec<f64> = (0..n).map(|i| figure[i % period]).collect();
    let random = (0..n).map(|i| trend[i].map(|t| x[i] - t - seasonal[i])).collect();

    Ok(Decomposition {
        period,
        trend,
        seasonal,
        random,
        figure,
    })
}
