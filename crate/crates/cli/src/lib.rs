//! `gamcast` command line: exploratory summaries, GAM fits, residual
//! diagnostics, peak-day inference and infection-profile deconvolution.

mod output;

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use gamcast::deconv::{
    deconv_specs, delay_density, infection_profile, run_chains, split_rhat, McmcConfig, McmcSamples,
    DEFAULT_DELAY_MEAN, DEFAULT_DELAY_VARIANCE, DEFAULT_HORIZON, DEFAULT_LEAD_IN,
};
use gamcast::diagnostics::{acf, check_bundle, default_max_lag};
use gamcast::fit::{optimize, predict, GamFit, HyperParams, Scale, TermTest};
use gamcast::ingest::{classical_decompose, summary_stats};
use gamcast::posterior::{peak_distribution, smooth_interval, DEFAULT_N_SIM};
use gamcast::splines::SmoothKind;
use gamcast::{assemble_design, derive_covariates, load_series, preset, specs_for, DailySeries, Family, GamError, Term};
use serde::Serialize;

pub use output::{fmt_g, svg_chart, Mark, Series};
use output::{fmt_opt, write_csv, write_json, write_svg};

#[derive(Parser, Debug)]
#[command(name = "gamcast", version, about = "Penalized-spline models for daily death counts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Summary statistics, histogram and seasonal decomposition.
    Eda(EdaArgs),
    /// Fit a GAM and write coefficients, statistics and fitted curves.
    Fit(FitArgs),
    /// Residual checks for a fitted model.
    Diagnose(DiagnoseArgs),
    /// Posterior distribution of the peak day of the trend.
    Peak(PeakArgs),
    /// Reconstruct the fatal-infection profile through the onset-to-death delay.
    Deconvolve(DeconvolveArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Input CSV with columns date,deaths[,region].
    #[arg(long)]
    input: PathBuf,
    /// Region label; defaults to the file stem.
    #[arg(long)]
    region: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Output formats, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "csv,json")]
    format: Vec<Format>,
    /// Day 0 of the time covariate; defaults to the first date.
    #[arg(long)]
    anchor: Option<NaiveDate>,
    #[arg(long, value_enum, default_value = "text")]
    errors: ErrorFormat,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Smooth terms, comma separated (trend, weekly, biweekly, monthly).
    #[arg(long, value_delimiter = ',')]
    formula: Vec<String>,
    /// Regional formula preset (canada, quebec, ontario, alberta).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_enum, default_value = "negbin")]
    family: FamilyArg,
    /// Starting dispersion for the negative binomial.
    #[arg(long, default_value_t = 10.0)]
    theta: f64,
}

#[derive(Args, Debug)]
struct EdaArgs {
    #[command(flatten)]
    common: Common,
    /// Seasonal period of the decomposition.
    #[arg(long, default_value_t = 7)]
    period: usize,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    /// Also write the evaluated basis blocks to design.json.
    #[arg(long)]
    dump_design: bool,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, env = "GAMCAST_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    max_lag: Option<usize>,
}

#[derive(Args, Debug)]
struct PeakArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, env = "GAMCAST_SEED")]
    seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_N_SIM)]
    n_sim: usize,
}

#[derive(Args, Debug)]
struct DeconvolveArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, env = "GAMCAST_SEED")]
    seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_DELAY_MEAN)]
    delay_mean: f64,
    #[arg(long, default_value_t = DEFAULT_DELAY_VARIANCE)]
    delay_variance: f64,
    #[arg(long, default_value_t = DEFAULT_HORIZON)]
    horizon: usize,
    #[arg(long, default_value_t = DEFAULT_LEAD_IN)]
    lead_in: usize,
    #[arg(long, default_value_t = 100_000)]
    iterations: usize,
    #[arg(long, default_value_t = 30)]
    thin: usize,
    /// Defaults to a fifth of the iterations.
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long, default_value_t = 1)]
    chains: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Csv,
    Json,
    Svg,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum FamilyArg {
    Poisson,
    Negbin,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum ErrorFormat {
    Text,
    Json,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code: 0 ok, 1 usage, 2 data, 3 numerical failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let json_errors = wants_json_errors(&argv);
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return 0;
            }
            if json_errors {
                report_json("usage", &e.kind().to_string(), &e.render().to_string(), 1);
            } else {
                let _ = e.print();
            }
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            if json_errors {
                report_json(error_kind(&e), &e.to_string(), "", code);
            } else {
                eprintln!("error: {e}");
            }
            code
        }
    }
}

fn wants_json_errors(argv: &[std::ffi::OsString]) -> bool {
    argv.iter()
        .zip(argv.iter().skip(1).map(Some).chain([None]))
        .any(|(a, next)| a == "--errors=json" || (a == "--errors" && next.is_some_and(|n| n == "json")))
}

fn report_json(kind: &str, message: &str, usage: &str, code: i32) {
    let mut v = serde_json::json!({ "error": kind, "message": message, "exit_code": code });
    if !usage.is_empty() {
        v["usage"] = serde_json::Value::String(usage.to_string());
    }
    eprintln!("{v}");
}

pub fn exit_code(e: &GamError) -> i32 {
    match e {
        GamError::InvalidArgument(_) => 1,
        GamError::Io(_) | GamError::Csv(_) | GamError::Data(_) => 2,
        GamError::DimensionMismatch(_)
        | GamError::Singular { .. }
        | GamError::Numerical(_)
        | GamError::NotConverged(_) => 3,
    }
}

fn error_kind(e: &GamError) -> &'static str {
    match e {
        GamError::Io(_) => "io",
        GamError::Csv(_) => "csv",
        GamError::Data(_) => "data",
        GamError::InvalidArgument(_) => "invalid_argument",
        GamError::DimensionMismatch(_) => "dimension_mismatch",
        GamError::Singular { .. } => "singular",
        GamError::Numerical(_) => "numerical",
        GamError::NotConverged(_) => "not_converged",
    }
}

fn dispatch(cmd: Command) -> gamcast::Result<()> {
    match cmd {
        Command::Eda(a) => eda(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Peak(a) => peak(a),
        Command::Deconvolve(a) => deconvolve(a),
    }
}

struct Context {
    series: DailySeries,
    anchor: NaiveDate,
    out: PathBuf,
    formats: Vec<Format>,
}

impl Context {
    fn new(c: &Common) -> gamcast::Result<Self> {
        // Without --region every row is read and the file stem becomes the label.
        let series = match &c.region {
            Some(r) => load_series(&c.input, r)?,
            None => {
                let s = load_series(&c.input, "")?;
                let stem = c.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                DailySeries::new(stem, s.dates().to_vec(), s.deaths().to_vec())?
            }
        };
        std::fs::create_dir_all(&c.out)?;
        Ok(Self {
            anchor: c.anchor.unwrap_or(series.first_date()),
            series,
            out: c.out.clone(),
            formats: c.format.clone(),
        })
    }

    fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Day index of each observation relative to the anchor.
    fn days(&self) -> Vec<f64> {
        let first = (self.series.first_date() - self.anchor).num_days();
        (0..self.series.len()).map(|i| (first + i as i64) as f64).collect()
    }
}

fn require_seed(seed: Option<u64>) -> gamcast::Result<u64> {
    seed.ok_or_else(|| GamError::InvalidArgument("a seed is required (--seed or GAMCAST_SEED)".into()))
}

fn terms(m: &ModelArgs, region: &str) -> gamcast::Result<Vec<Term>> {
    if !m.formula.is_empty() {
        return m.formula.iter().map(|s| Term::parse(s)).collect();
    }
    match &m.preset {
        Some(p) => preset(p),
        None => preset(region).map_err(|_| {
            GamError::InvalidArgument(format!("no --formula given and no preset for region {region:?}"))
        }),
    }
}

fn family(m: &ModelArgs) -> gamcast::Result<Family> {
    match m.family {
        FamilyArg::Poisson => Ok(Family::Poisson),
        FamilyArg::Negbin => Family::negbin(m.theta),
    }
}

fn fit_model(ctx: &Context, m: &ModelArgs) -> gamcast::Result<GamFit> {
    let terms = terms(m, ctx.series.region())?;
    let cov = derive_covariates(&ctx.series, ctx.anchor);
    let specs = specs_for(&terms, &cov)?;
    let design = assemble_design(&cov, &specs)?;
    let y = ctx.series.counts_f64();
    let fam = family(m)?;
    optimize(&design, &y, &fam, &HyperParams::initial(&design, &y, &fam))
}

fn eda(a: EdaArgs) -> gamcast::Result<()> {
    let ctx = Context::new(&a.common)?;
    let summary = summary_stats(&ctx.series)?;
    let dec = classical_decompose(&ctx.series, a.period)?;
    let y = ctx.series.counts_f64();
    if ctx.wants(Format::Json) {
        write_json(&ctx.path("summary.json"), &summary)?;
        write_json(&ctx.path("decomposition.json"), &dec)?;
    }
    if ctx.wants(Format::Csv) {
        let h = &summary.histogram;
        write_csv(
            &ctx.path("histogram.csv"),
            &["lo", "hi", "count"],
            h.counts.iter().enumerate().map(|(i, c)| vec![fmt_g(h.edges[i]), fmt_g(h.edges[i + 1]), c.to_string()]),
        )?;
        write_csv(
            &ctx.path("decomposition.csv"),
            &["date", "observed", "trend", "seasonal", "random"],
            (0..y.len()).map(|i| {
                vec![
                    ctx.series.dates()[i].to_string(),
                    fmt_g(y[i]),
                    fmt_opt(dec.trend[i]),
                    fmt_g(dec.seasonal[i]),
                    fmt_opt(dec.random[i]),
                ]
            }),
        )?;
    }
    if ctx.wants(Format::Svg) {
        let days = ctx.days();
        let svg = svg_chart(
            &format!("Daily deaths, {}", ctx.series.region()),
            "day",
            "deaths",
            &[Series { x: &days, y: &y, mark: Mark::Bars, color: "steelblue" }],
        );
        write_svg(&ctx.path("series.svg"), &svg)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TermSummary<'a> {
    name: &'a str,
    kind: &'static str,
    rank: usize,
    log_lambda: f64,
    edf: f64,
    test: &'a TermTest,
}

#[derive(Serialize)]
struct FitSummary<'a> {
    region: &'a str,
    n: usize,
    anchor: NaiveDate,
    family: Family,
    formula: &'a [String],
    coefficients: Vec<f64>,
    log_theta: Option<f64>,
    edf_total: f64,
    deviance: f64,
    null_deviance: f64,
    dev_explained: f64,
    r_sq_adj: f64,
    laml: f64,
    outer_iterations: usize,
    terms: Vec<TermSummary<'a>>,
}

fn fit_summary<'a>(ctx: &'a Context, fit: &'a GamFit) -> FitSummary<'a> {
    let terms = fit
        .design
        .blocks
        .iter()
        .enumerate()
        .map(|(j, b)| TermSummary {
            name: b.name(),
            kind: match b.spec.kind {
                SmoothKind::Cubic => "cubic",
                SmoothKind::Cyclic => "cyclic",
            },
            rank: b.spec.rank,
            log_lambda: fit.hyper.log_lambda[j],
            edf: fit.edf[j],
            test: &fit.term_tests[j],
        })
        .collect();
    FitSummary {
        region: ctx.series.region(),
        n: fit.n(),
        anchor: ctx.anchor,
        family: fit.family,
        formula: &fit.design.formula,
        coefficients: fit.beta_hat.iter().copied().collect(),
        log_theta: fit.hyper.log_theta,
        edf_total: fit.edf_total,
        deviance: fit.deviance,
        null_deviance: fit.null_deviance,
        dev_explained: fit.dev_explained,
        r_sq_adj: fit.r_sq_adj,
        laml: fit.laml,
        outer_iterations: fit.outer_iterations,
        terms,
    }
}

fn smooth_grid(fit: &GamFit, j: usize, days: &[f64]) -> Vec<f64> {
    let spec = &fit.design.blocks[j].spec;
    match spec.kind {
        SmoothKind::Cyclic => {
            let p = spec.period.unwrap_or(1.0);
            (0..=100).map(|i| p * i as f64 / 100.0).collect()
        }
        SmoothKind::Cubic => days.to_vec(),
    }
}

fn fit_cmd(a: FitArgs) -> gamcast::Result<()> {
    let ctx = Context::new(&a.common)?;
    let fit = fit_model(&ctx, &a.model)?;
    if ctx.wants(Format::Json) {
        write_json(&ctx.path("fit.json"), &fit_summary(&ctx, &fit))?;
    }
    if a.dump_design {
        write_json(&ctx.path("design.json"), &fit.design.blocks)?;
    }
    let cov = derive_covariates(&ctx.series, ctx.anchor);
    let link = predict(&fit, &cov, Scale::Link)?;
    let days = ctx.days();
    let lo: Vec<f64> = link.mean.iter().zip(&link.se).map(|(m, s)| (m - 1.959964 * s).exp()).collect();
    let hi: Vec<f64> = link.mean.iter().zip(&link.se).map(|(m, s)| (m + 1.959964 * s).exp()).collect();
    if ctx.wants(Format::Csv) {
        write_csv(
            &ctx.path("curves.csv"),
            &["date", "day", "observed", "fitted", "lo95", "hi95"],
            (0..fit.n()).map(|i| {
                vec![
                    ctx.series.dates()[i].to_string(),
                    fmt_g(days[i]),
                    fmt_g(fit.y[i]),
                    fmt_g(fit.fitted[i]),
                    fmt_g(lo[i]),
                    fmt_g(hi[i]),
                ]
            }),
        )?;
        for j in 0..fit.design.n_smooths() {
            let name = fit.design.blocks[j].name().to_string();
            let band = smooth_interval(&fit, &name, &smooth_grid(&fit, j, &days))?;
            write_csv(
                &ctx.path(&format!("smooth_{name}.csv")),
                &["x", "mode", "lo95", "hi95"],
                (0..band.x.len()).map(|i| {
                    vec![fmt_g(band.x[i]), fmt_g(band.mode[i]), fmt_g(band.lo95[i]), fmt_g(band.hi95[i])]
                }),
            )?;
        }
    }
    if ctx.wants(Format::Svg) {
        let svg = svg_chart(
            &format!("Fitted deaths, {}", ctx.series.region()),
            "day",
            "deaths",
            &[
                Series { x: &days, y: &fit.y, mark: Mark::Points, color: "black" },
                Series { x: &days, y: &fit.fitted, mark: Mark::Line, color: "firebrick" },
                Series { x: &days, y: &lo, mark: Mark::Line, color: "gray" },
                Series { x: &days, y: &hi, mark: Mark::Line, color: "gray" },
            ],
        );
        write_svg(&ctx.path("curves.svg"), &svg)?;
    }
    Ok(())
}

fn pairs_csv(path: &Path, header: [&str; 2], pairs: &[(f64, f64)]) -> gamcast::Result<()> {
    write_csv(path, &header, pairs.iter().map(|(a, b)| vec![fmt_g(*a), fmt_g(*b)]))
}

fn diagnose(a: DiagnoseArgs) -> gamcast::Result<()> {
    let seed = require_seed(a.seed)?;
    let ctx = Context::new(&a.common)?;
    let fit = fit_model(&ctx, &a.model)?;
    let bundle = check_bundle(&fit, &fit.y, seed)?;
    let r = acf(&bundle.residuals, a.max_lag.unwrap_or_else(|| default_max_lag(fit.n())))?;
    if ctx.wants(Format::Csv) {
        pairs_csv(&ctx.path("qq.csv"), ["theoretical", "observed"], &bundle.qq)?;
        pairs_csv(&ctx.path("resid_vs_eta.csv"), ["eta", "residual"], &bundle.resid_vs_eta)?;
        pairs_csv(&ctx.path("response_vs_fitted.csv"), ["fitted", "response"], &bundle.response_vs_fitted)?;
        let h = &bundle.hist;
        write_csv(
            &ctx.path("hist.csv"),
            &["lo", "hi", "count"],
            h.counts.iter().enumerate().map(|(i, c)| vec![fmt_g(h.edges[i]), fmt_g(h.edges[i + 1]), c.to_string()]),
        )?;
        write_csv(
            &ctx.path("acf.csv"),
            &["lag", "acf", "band"],
            r.lags.iter().zip(&r.values).map(|(l, v)| vec![l.to_string(), fmt_g(*v), fmt_g(r.band)]),
        )?;
    }
    if ctx.wants(Format::Json) {
        write_json(
            &ctx.path("diagnostics.json"),
            &serde_json::json!({ "seed": seed, "significant_lags": r.significant_lags(), "acf": r }),
        )?;
    }
    if ctx.wants(Format::Svg) {
        let (tx, ox): (Vec<f64>, Vec<f64>) = bundle.qq.iter().copied().unzip();
        let svg = svg_chart(
            "Deviance residual Q-Q",
            "theoretical",
            "observed",
            &[
                Series { x: &tx, y: &ox, mark: Mark::Points, color: "black" },
                Series { x: &tx, y: &tx, mark: Mark::Line, color: "firebrick" },
            ],
        );
        write_svg(&ctx.path("qq.svg"), &svg)?;
        let lags: Vec<f64> = r.lags.iter().map(|&l| l as f64).collect();
        let svg = svg_chart(
            "Residual autocorrelation",
            "lag",
            "acf",
            &[Series { x: &lags, y: &r.values, mark: Mark::Bars, color: "steelblue" }],
        );
        write_svg(&ctx.path("acf.svg"), &svg)?;
    }
    Ok(())
}

fn peak(a: PeakArgs) -> gamcast::Result<()> {
    let seed = require_seed(a.seed)?;
    let ctx = Context::new(&a.common)?;
    let fit = fit_model(&ctx, &a.model)?;
    let pk = peak_distribution(&fit, a.n_sim, seed)?;
    let days = ctx.days();
    if ctx.wants(Format::Csv) {
        write_csv(
            &ctx.path("peak.csv"),
            &["day", "probability"],
            days.iter().zip(&pk.day_probabilities).map(|(d, p)| vec![fmt_g(*d), fmt_g(*p)]),
        )?;
        let t = &pk.trend;
        write_csv(
            &ctx.path("trend.csv"),
            &["day", "mode", "lo95", "hi95"],
            (0..days.len()).map(|i| vec![fmt_g(days[i]), fmt_g(t.mode[i]), fmt_g(t.lo95[i]), fmt_g(t.hi95[i])]),
        )?;
    }
    if ctx.wants(Format::Json) {
        let date = |i: usize| ctx.series.dates()[i];
        write_json(
            &ctx.path("peak.json"),
            &serde_json::json!({
                "seed": seed,
                "n_sim": pk.n_sim,
                "anchor": ctx.anchor,
                "mode_day": days[pk.mode_day],
                "mode_date": date(pk.mode_day),
                "interval_95": [days[pk.interval_95.0], days[pk.interval_95.1]],
                "interval_95_dates": [date(pk.interval_95.0), date(pk.interval_95.1)],
            }),
        )?;
    }
    if ctx.wants(Format::Svg) {
        let svg = svg_chart(
            "Posterior peak day",
            "day",
            "probability",
            &[Series { x: &days, y: &pk.day_probabilities, mark: Mark::Bars, color: "steelblue" }],
        );
        write_svg(&ctx.path("peak.svg"), &svg)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct DeconvReport<'a> {
    seed: u64,
    chains: usize,
    kept_draws: usize,
    delay_mean: f64,
    delay_variance: f64,
    horizon: usize,
    lead_in: usize,
    iterations: usize,
    thin: usize,
    burn_in: usize,
    formula: Vec<&'static str>,
    acceptance_rate: Vec<Vec<f64>>,
    acceptance_warning: bool,
    block_names: &'a [String],
    max_rhat: Option<f64>,
    theta_median: Option<f64>,
    peak_date: NaiveDate,
    peak_probability: f64,
}

fn deconvolve(a: DeconvolveArgs) -> gamcast::Result<()> {
    let seed = require_seed(a.seed)?;
    let ctx = Context::new(&a.common)?;
    let terms = terms(&a.model, ctx.series.region())?;
    let mut config = McmcConfig::with_length(a.iterations, a.thin, seed);
    if let Some(b) = a.burn_in {
        config.burn_in = b;
    }
    config.lead_in = a.lead_in;
    config.anchor = ctx.anchor;
    config.family = family(&a.model)?;
    let delay = delay_density(a.delay_mean, a.delay_variance, a.horizon)?;
    let specs = deconv_specs(&ctx.series, &terms, config.lead_in, config.anchor)?;
    let (design, chains) = run_chains(&ctx.series, &specs, &delay, &config, a.chains)?;
    let merged = McmcSamples::merge(&chains)?;
    let profile = infection_profile(&merged, &design)?;
    let max_rhat = if chains.len() > 1 {
        let mut worst = 0.0f64;
        for j in 0..design.pv() {
            let per: Vec<Vec<f64>> = chains.iter().map(|c| c.b.column(j).iter().copied().collect()).collect();
            worst = worst.max(split_rhat(&per)?);
        }
        Some(worst)
    } else {
        None
    };
    let peak_idx = profile
        .peak_probs
        .iter()
        .enumerate()
        .fold(0, |b, (i, p)| if *p > profile.peak_probs[b] { i } else { b });
    let days: Vec<f64> = profile
        .dates
        .iter()
        .map(|d| (*d - ctx.anchor).num_days() as f64)
        .collect();
    if ctx.wants(Format::Csv) {
        write_csv(
            &ctx.path("profile.csv"),
            &["day", "median", "lo80", "hi80", "lo95", "hi95", "peak_prob", "curvature", "gradient"],
            (0..days.len()).map(|i| {
                vec![
                    fmt_g(days[i]),
                    fmt_g(profile.median[i]),
                    fmt_g(profile.band80.0[i]),
                    fmt_g(profile.band80.1[i]),
                    fmt_g(profile.band95.0[i]),
                    fmt_g(profile.band95.1[i]),
                    fmt_g(profile.peak_probs[i]),
                    fmt_opt(profile.curvature[i]),
                    fmt_opt(profile.gradient[i]),
                ]
            }),
        )?;
    }
    if ctx.wants(Format::Json) {
        let mut theta = merged.theta.clone();
        theta.sort_by(f64::total_cmp);
        let report = DeconvReport {
            seed,
            chains: chains.len(),
            kept_draws: merged.n_kept(),
            delay_mean: a.delay_mean,
            delay_variance: a.delay_variance,
            horizon: a.horizon,
            lead_in: config.lead_in,
            iterations: config.iterations,
            thin: config.thin,
            burn_in: config.burn_in,
            formula: terms.iter().map(|t| t.name()).collect(),
            acceptance_rate: chains.iter().map(|c| c.acceptance_rate.clone()).collect(),
            acceptance_warning: chains.iter().any(|c| c.acceptance_warning),
            block_names: &chains[0].block_names,
            max_rhat,
            theta_median: (!theta.is_empty() && config.family.theta().is_some())
                .then(|| gamcast::stats::quantile_sorted(&theta, 0.5)),
            peak_date: profile.dates[peak_idx],
            peak_probability: profile.peak_probs[peak_idx],
        };
        write_json(&ctx.path("deconv.json"), &report)?;
    }
    if ctx.wants(Format::Svg) {
        let svg = svg_chart(
            "Fatal infections",
            "day",
            "infections",
            &[
                Series { x: &days, y: &profile.median, mark: Mark::Line, color: "firebrick" },
                Series { x: &days, y: &profile.band95.0, mark: Mark::Line, color: "gray" },
                Series { x: &days, y: &profile.band95.1, mark: Mark::Line, color: "gray" },
            ],
        );
        write_svg(&ctx.path("profile.svg"), &svg)?;
    }
    Ok(())
}
