//! Penalized GAM engine for overdispersed daily count series, with peak
//! timing, model checking and delay deconvolution.

pub mod deconv;
pub mod diagnostics;
pub mod error;
pub mod family;
pub mod fit;
pub mod ingest;
pub mod linalg;
pub mod posterior;
pub mod splines;
pub mod stats;

pub use error::{GamError, Result};
pub use family::Family;
pub use fit::{assemble_design, optimize, pirls, predict, Design, GamFit, HyperParams, Scale};
pub use ingest::{derive_covariates, load_series, CovariateTable, DailySeries};
pub use splines::{apply_centering, preset, specs_for, spline_basis, BasisBlock, SmoothKind, SmoothSpec, Term};
pub use posterior::{peak_distribution, rmvn, smooth_interval, PeakDistribution, PosteriorDraws};
