//! Forecasting and staffing toolkit for call-center arrival data.
//!
//! The crate covers the path from raw half-hourly (or other fixed-width)
//! arrival counts to staffing levels:
//!
//! * [`data`]: typed containers and CSV formats for arrival counts, service
//!   summaries, and the operating calendar, on a six-day Sunday-to-Friday
//!   week.
//! * [`design`]: fixed-effect design matrices (weekday levels, within-day
//!   profiles, exogenous event fields) with automatic aliasing drops, and the
//!   AR(1)/ARMA(1,1) covariance kernels.
//! * [`lmm`]: the variance-stabilizing count transform and Gaussian mixed
//!   models fitted by (restricted) maximum likelihood, with structured
//!   solvers sized for long data sets.
//! * [`forecast`]: the two-stage forecasting pipeline, benchmark models, and
//!   count-scale prediction intervals.
//! * [`screening`]: Poisson regression for screening candidate effects before
//!   they enter the Gaussian model.
//! * [`service`]: mean service-time regressions on the log scale and nested
//!   model comparison.
//! * [`staffing`]: offered load, square-root staffing, and exact
//!   abandonment-aware performance measures.
//! * [`backtest`]: rolling-origin evaluation with lead-time and resolution
//!   sweeps.
//! * [`synth`]: synthetic data generators and a discrete-event simulator for
//!   validating the staffing formulas.

pub mod backtest;
pub mod data;
pub mod design;
pub mod forecast;
pub mod lmm;
pub mod optim;
pub mod screening;
pub mod service;
pub mod staffing;
pub mod stats;
pub mod synth;
