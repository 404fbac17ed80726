//! Forecasting pipelines: the two-stage mixed model, two regression
//! benchmarks, and the same-weekday averaging model.
//!
//! Every pipeline consumes a learning window of `learn_window_days` calendar
//! days that ends `lead_time_days` before the forecast origin, and produces
//! per-(date, period) arrival forecasts for `horizon_days` calendar days
//! starting at the origin. Outlier days are dropped at fit time; calendar
//! gaps inside the window stay gaps.
//!
//! The two-stage model works on the transformed scale. Stage 1 fits daily
//! means with a day-level AR(1) random effect over true date gaps plus an
//! aggregate noise variance `u`; within-day profile columns average to
//! weekday constants there, so the day-level design carries only weekday and
//! exogenous columns. Stage 2 freezes the day kernel at its stage-1 estimate
//! and fits the within-day covariance on the full grid. Prediction is the
//! Gaussian conditional mean given the window, with fixed-effect estimation
//! variance included, and count-scale intervals obtained by mapping the
//! transformed-scale endpoints through the inverse transform.

use crate::data::{CalendarDay, CalendarTable, DataError, PeriodSeries};
use crate::design::{
    ar1_intra_kernel, ar1_kernel, arma11_kernel, build_design, cross_gap_matrix, day_gap_matrix,
    design_rows, ColumnDef, CovarianceSpec, DesignError, FixedEffectsSpec, InterDayKind,
    IntraKind, PatternSpec, Sigma2Mode,
};
use crate::lmm::{
    fit_stage1, fit_stage2, inverse_transform, root_transform, BlupInputs, LayeredXHints,
    LmmError, Objective, ParamName, ProfileCol,
};
use crate::screening::daily_design;
use crate::stats::norm_interval_z;
use chrono::{Datelike, NaiveDate, Weekday};
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Errors from pipeline runs.
#[derive(Debug, thiserror::Error)]
pub enum ForecastError {
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] LmmError),
    #[error("window has {found} usable day(s), need at least {needed}")]
    InsufficientHistory { found: usize, needed: usize },
    #[error("no day in the window shares weekday {weekday} with a forecast target")]
    UnseenWeekday { weekday: u8 },
    #[error("no same-weekday history for weekday {weekday}")]
    NoComparableDays { weekday: u8 },
    #[error("interval level {level} is outside (0, 1)")]
    LevelOutOfRange { level: f64 },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
}

/// Which forecasting pipeline to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    TwoStageMixed,
    Benchmark1,
    Benchmark2,
    Industry,
}

/// Full specification of a forecasting run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub fx: FixedEffectsSpec,
    pub cov: CovarianceSpec,
    pub pipeline: Pipeline,
    /// Length of the learning window in calendar days.
    pub learn_window_days: u32,
    /// Calendar days between the window's last day and the origin.
    pub lead_time_days: u32,
    /// Calendar days forecast, starting at the origin.
    pub horizon_days: u32,
    /// Two-sided interval coverage level.
    pub level: f64,
    pub exclude_outliers: bool,
}

impl ModelSpec {
    /// A spec with the standard experiment shape: six-week window, one-week
    /// lead, one-week horizon, 95% intervals.
    pub fn new(pipeline: Pipeline, fx: FixedEffectsSpec) -> Self {
        ModelSpec {
            fx,
            cov: CovarianceSpec::default(),
            pipeline,
            learn_window_days: 42,
            lead_time_days: 7,
            horizon_days: 7,
            level: 0.95,
            exclude_outliers: true,
        }
    }

    pub fn validate(&self) -> Result<(), ForecastError> {
        if self.learn_window_days < 14 {
            return Err(ForecastError::InvalidSpec(format!(
                "learn_window_days = {} (minimum 14)",
                self.learn_window_days
            )));
        }
        if self.lead_time_days < 1 {
            return Err(ForecastError::InvalidSpec(
                "lead_time_days must be at least 1".into(),
            ));
        }
        if self.horizon_days < 1 {
            return Err(ForecastError::InvalidSpec(
                "horizon_days must be at least 1".into(),
            ));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(ForecastError::LevelOutOfRange { level: self.level });
        }
        Ok(())
    }
}

/// One forecast cell. Interval fields are absent for pipelines that do not
/// model uncertainty (the averaging model).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastRow {
    pub date: NaiveDate,
    /// 1-based period index.
    pub period: usize,
    pub point_count: f64,
    pub lower_count: Option<f64>,
    pub upper_count: Option<f64>,
    pub point_transformed: f64,
    pub sd_transformed: Option<f64>,
}

/// A pipeline's output for one origin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastSet {
    pub origin: NaiveDate,
    pub lead_time_days: u32,
    pub k: usize,
    pub rows: Vec<ForecastRow>,
}

impl ForecastSet {
    /// Write rows as `date,period,point,lower,upper` CSV.
    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| DataError::ParseError {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        w.write_record(["date", "period", "point", "lower", "upper"])
            .ok();
        for r in &self.rows {
            w.write_record([
                r.date.to_string(),
                r.period.to_string(),
                format!("{:.4}", r.point_count),
                r.lower_count.map(|v| format!("{v:.4}")).unwrap_or_default(),
                r.upper_count.map(|v| format!("{v:.4}")).unwrap_or_default(),
            ])
            .ok();
        }
        w.flush().map_err(|e| DataError::ParseError {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })
    }
}

/// A fitted two-stage mixed model, carrying everything prediction needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedMixedModel {
    pub beta: Vec<f64>,
    pub beta_cov: DMatrix<f64>,
    pub columns: Vec<ColumnDef>,
    pub column_names: Vec<String>,
    pub dropped: Vec<String>,
    /// Named covariance estimates: sigma_G2, rho_G, u (when stage 1 ran),
    /// sigma_R2, rho_R, delta (ARMA only), sigma2.
    pub params: Vec<(String, f64)>,
    pub fx: FixedEffectsSpec,
    pub cov: CovarianceSpec,
    pub k: usize,
    pub train_days: Vec<CalendarDay>,
    /// Transformed observations for the training days, day-major.
    pub y_transformed: Vec<f64>,
    pub loglik_stage1: Option<f64>,
    pub loglik_stage2: f64,
    pub converged: bool,
    /// A correlation estimate sits within 1e-3 of an endpoint.
    pub boundary: bool,
    pub n_iter_stage1: usize,
    pub n_iter_stage2: usize,
}

impl FittedMixedModel {
    pub fn param(&self, name: &str) -> Option<f64> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }

    fn required(&self, name: &str) -> f64 {
        self.param(name)
            .unwrap_or_else(|| panic!("fitted model is missing parameter {name}"))
    }
}

/// Minimum usable days in a learning window (two six-day weeks).
pub const MIN_WINDOW_DAYS: usize = 12;

fn transformed_grid(series: &PeriodSeries) -> DVector<f64> {
    let d = series.n_days();
    let k = series.k;
    DVector::from_fn(d * k, |i, _| {
        root_transform(series.count(i / k, i % k) as f64)
    })
}

/// Build fast-path hints for a design whose columns all come from
/// [`candidate_columns`](crate::design::candidate_columns) ordering.
fn layered_hints(
    columns: &[ColumnDef],
    pattern: PatternSpec,
    days: &[CalendarDay],
) -> Option<LayeredXHints> {
    let groups = pattern.groups();
    let mut day_cols = Vec::new();
    let mut profile_cols = Vec::new();
    for (j, col) in columns.iter().enumerate() {
        match col {
            ColumnDef::Weekday { .. } | ColumnDef::Exogenous { .. } => day_cols.push(j),
            ColumnDef::Profile { weekdays, period } => {
                let group = groups.iter().position(|g| g == weekdays)?;
                profile_cols.push(ProfileCol {
                    col: j,
                    group,
                    period: period - 1,
                });
            }
        }
    }
    let day_group: Vec<usize> = days
        .iter()
        .map(|d| {
            groups
                .iter()
                .position(|g| g.contains(&d.weekday))
                .unwrap_or(usize::MAX)
        })
        .collect();
    Some(LayeredXHints {
        day_cols,
        profile_cols,
        day_group,
        n_groups: groups.len(),
    })
}

/// Fit the two-stage mixed model on a learning window.
pub fn fit_two_stage(
    window: &PeriodSeries,
    fx: &FixedEffectsSpec,
    cov: &CovarianceSpec,
) -> Result<FittedMixedModel, ForecastError> {
    let d = window.n_days();
    let k = window.k;
    if d < MIN_WINDOW_DAYS {
        return Err(ForecastError::InsufficientHistory {
            found: d,
            needed: MIN_WINDOW_DAYS,
        });
    }
    let days = window.days.clone();
    let y = transformed_grid(window);
    let gaps = day_gap_matrix(&days);

    // Stage 1: daily means against the day-level design.
    let mut params: Vec<(String, f64)> = Vec::new();
    let (g_hat, stage1) = match cov.inter {
        InterDayKind::Ar1 => {
            let ybar = DVector::from_fn(d, |di, _| {
                (0..k).map(|p| y[di * k + p]).sum::<f64>() / k as f64
            });
            let (_, x_day, _) = daily_design(&days, &fx.exogenous);
            let s1 = fit_stage1(&ybar, &x_day, &gaps, Objective::Reml)?;
            let sigma_g2 = s1.theta[0];
            let rho_g = s1.theta[1];
            let u = s1.theta[2];
            params.push((ParamName::SigmaG2.to_string(), sigma_g2));
            params.push((ParamName::RhoG.to_string(), rho_g));
            params.push((ParamName::U.to_string(), u));
            let g_hat = ar1_kernel(sigma_g2, rho_g, &gaps)?;
            (g_hat, Some(s1))
        }
        InterDayKind::None => {
            params.push((ParamName::SigmaG2.to_string(), 0.0));
            params.push((ParamName::RhoG.to_string(), 0.0));
            (DMatrix::zeros(d, d), None)
        }
    };

    // Stage 2: within-day covariance with the day kernel frozen.
    let bundle = build_design(&days, k, fx)?;
    let hints = layered_hints(&bundle.columns, fx.pattern, &days);
    let s2 = fit_stage2(
        &y,
        &bundle.x,
        &g_hat,
        k,
        cov.intra,
        cov.sigma2,
        hints,
        Objective::Reml,
    )?;
    for (name, value) in &s2.params {
        params.push((name.to_string(), *value));
    }
    if let Sigma2Mode::Fixed(v) = cov.sigma2 {
        params.push((ParamName::Sigma2.to_string(), v));
    }

    let column_names = bundle.column_names();
    Ok(FittedMixedModel {
        beta: s2.beta.iter().copied().collect(),
        beta_cov: s2.beta_cov.clone(),
        columns: bundle.columns,
        column_names,
        dropped: bundle.dropped,
        params,
        fx: fx.clone(),
        cov: *cov,
        k,
        train_days: days,
        y_transformed: y.iter().copied().collect(),
        loglik_stage1: stage1.as_ref().map(|s| s.loglik),
        loglik_stage2: s2.loglik,
        converged: stage1.as_ref().map_or(true, |s| s.converged) && s2.converged,
        boundary: stage1.as_ref().is_some_and(|s| s.boundary) || s2.boundary,
        n_iter_stage1: stage1.as_ref().map_or(0, |s| s.n_iter),
        n_iter_stage2: s2.n_iter,
    })
}

fn intra_kernel_of(fit: &FittedMixedModel) -> Result<DMatrix<f64>, ForecastError> {
    let sigma_r2 = fit.required("sigma_R2");
    let rho_r = fit.required("rho_R");
    let r = match fit.cov.intra {
        IntraKind::Ar1 => ar1_intra_kernel(sigma_r2, rho_r, fit.k)?,
        IntraKind::Arma11 => arma11_kernel(sigma_r2, fit.required("delta"), rho_r, fit.k)?,
    };
    Ok(r)
}

/// Predict future cells from a fitted two-stage model.
pub fn predict_two_stage(
    fit: &FittedMixedModel,
    future: &[CalendarDay],
    level: f64,
) -> Result<Vec<ForecastRow>, ForecastError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(ForecastError::LevelOutOfRange { level });
    }
    if future.is_empty() {
        return Ok(Vec::new());
    }
    for day in future {
        if !fit.train_days.iter().any(|t| t.weekday == day.weekday) {
            return Err(ForecastError::UnseenWeekday {
                weekday: day.weekday,
            });
        }
    }
    let k = fit.k;
    let sigma_g2 = fit.required("sigma_G2");
    let rho_g = fit.required("rho_G");
    let sigma2 = fit.required("sigma2");

    let gaps_pp = day_gap_matrix(&fit.train_days);
    let g_pp = ar1_kernel(sigma_g2, rho_g, &gaps_pp)?;
    let gaps_fp = cross_gap_matrix(future, &fit.train_days);
    let g_fp = ar1_kernel(sigma_g2, rho_g, &gaps_fp)?;
    let g_ff_diag = DVector::repeat(future.len(), sigma_g2);

    let mut r_star = intra_kernel_of(fit)?;
    for i in 0..k {
        r_star[(i, i)] += sigma2;
    }

    let x_past = design_rows(&fit.train_days, k, &fit.columns);
    let x_future = design_rows(future, k, &fit.columns);
    let y_past = DVector::from_column_slice(&fit.y_transformed);
    let beta = DVector::from_column_slice(&fit.beta);

    let pred = crate::lmm::predict_blup(&BlupInputs {
        y_past: &y_past,
        x_past: &x_past,
        x_future: &x_future,
        g_pp: &g_pp,
        g_fp: &g_fp,
        g_ff_diag: &g_ff_diag,
        r_star: &r_star,
        k,
        beta: &beta,
        beta_cov: &fit.beta_cov,
    })?;

    let z = norm_interval_z(level);
    let mut rows = Vec::with_capacity(future.len() * k);
    for (df, day) in future.iter().enumerate() {
        for p in 0..k {
            let i = df * k + p;
            let point_t = pred.mean[i];
            let sd = pred.sd[i];
            rows.push(ForecastRow {
                date: day.date,
                period: p + 1,
                point_count: inverse_transform(point_t.max(0.0)),
                lower_count: Some(inverse_transform((point_t - z * sd).max(0.0))),
                upper_count: Some(inverse_transform((point_t + z * sd).max(0.0))),
                point_transformed: point_t,
                sd_transformed: Some(sd),
            });
        }
    }
    Ok(rows)
}

/// Same-weekday average of raw counts: the averaging model's point forecast
/// for one (date, period) cell. `period` is 1-based.
pub fn forecast_industry(
    history: &PeriodSeries,
    date: NaiveDate,
    period: usize,
) -> Result<f64, ForecastError> {
    let weekday = crate::data::weekday_index(date)?;
    let p = period - 1;
    let mut total = 0.0;
    let mut n = 0usize;
    for (di, day) in history.days.iter().enumerate() {
        if day.weekday == weekday && day.date < date {
            total += history.count(di, p) as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(ForecastError::NoComparableDays { weekday });
    }
    Ok(total / n as f64)
}

fn industry_rows(
    history: &PeriodSeries,
    targets: &[CalendarDay],
) -> Result<Vec<ForecastRow>, ForecastError> {
    let k = history.k;
    let mut rows = Vec::with_capacity(targets.len() * k);
    for day in targets {
        for p in 1..=k {
            let point = forecast_industry(history, day.date, p)?;
            rows.push(ForecastRow {
                date: day.date,
                period: p,
                point_count: point,
                lower_count: None,
                upper_count: None,
                point_transformed: root_transform(point),
                sd_transformed: None,
            });
        }
    }
    Ok(rows)
}

/// Ordinary-least-squares benchmark forecasts on the transformed scale.
///
/// Benchmark 1 uses weekday and profile columns only; Benchmark 2 adds the
/// spec's exogenous indicators. Both use the homoscedastic new-observation
/// variance `s2 * (1 + x0' (X'X)^-1 x0)`.
pub fn forecast_benchmark(
    which: u8,
    window: &PeriodSeries,
    fx: &FixedEffectsSpec,
    targets: &[CalendarDay],
    level: f64,
) -> Result<Vec<ForecastRow>, ForecastError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(ForecastError::LevelOutOfRange { level });
    }
    let fx_used = match which {
        1 => FixedEffectsSpec {
            pattern: fx.pattern,
            exogenous: vec![],
        },
        2 => fx.clone(),
        other => {
            return Err(ForecastError::InvalidSpec(format!(
                "benchmark id must be 1 or 2, got {other}"
            )))
        }
    };
    for day in targets {
        if !window.days.iter().any(|t| t.weekday == day.weekday) {
            return Err(ForecastError::UnseenWeekday {
                weekday: day.weekday,
            });
        }
    }
    let k = window.k;
    let bundle = build_design(&window.days, k, &fx_used)?;
    let y = transformed_grid(window);
    let n = y.len();
    let p = bundle.x.ncols();
    if p >= n {
        return Err(ForecastError::InsufficientHistory {
            found: window.n_days(),
            needed: MIN_WINDOW_DAYS,
        });
    }
    let xtx = bundle.x.tr_mul(&bundle.x);
    let chol = Cholesky::new(xtx).ok_or(ForecastError::Design(DesignError::EmptyDesign))?;
    let beta = chol.solve(&bundle.x.tr_mul(&y));
    let resid = &y - &bundle.x * &beta;
    let s2 = resid.norm_squared() / (n - p) as f64;
    let xtx_inv = chol.solve(&DMatrix::identity(p, p));

    let x_f = bundle.rows_for(targets);
    let z = norm_interval_z(level);
    let mut rows = Vec::with_capacity(targets.len() * k);
    for (df, day) in targets.iter().enumerate() {
        for per in 0..k {
            let row = x_f.row(df * k + per);
            let point_t = row.dot(&beta.transpose());
            let h = (row * &xtx_inv).dot(&row);
            let sd = (s2 * (1.0 + h)).sqrt();
            rows.push(ForecastRow {
                date: day.date,
                period: per + 1,
                point_count: inverse_transform(point_t.max(0.0)),
                lower_count: Some(inverse_transform((point_t - z * sd).max(0.0))),
                upper_count: Some(inverse_transform((point_t + z * sd).max(0.0))),
                point_transformed: point_t,
                sd_transformed: Some(sd),
            });
        }
    }
    Ok(rows)
}

/// The learning window for an origin: indices into `series` of usable days in
/// `[origin - lead - learn + 1, origin - lead]`.
pub fn learning_window(
    series: &PeriodSeries,
    origin: NaiveDate,
    spec: &ModelSpec,
) -> Result<Vec<usize>, ForecastError> {
    let end = origin - chrono::Days::new(spec.lead_time_days as u64);
    let start = end - chrono::Days::new(spec.learn_window_days as u64 - 1);
    let idx = series.day_indices_in(start, end, spec.exclude_outliers);
    if idx.len() < MIN_WINDOW_DAYS {
        return Err(ForecastError::InsufficientHistory {
            found: idx.len(),
            needed: MIN_WINDOW_DAYS,
        });
    }
    Ok(idx)
}

/// Forecast target days: operating days in `[origin, origin + horizon - 1]`,
/// with exogenous flags filled from the calendar table.
pub fn target_days(
    origin: NaiveDate,
    horizon_days: u32,
    calendar: &CalendarTable,
) -> Result<Vec<CalendarDay>, ForecastError> {
    let mut targets = Vec::new();
    for h in 0..horizon_days {
        let date = origin + chrono::Days::new(h as u64);
        if date.weekday() == Weekday::Sat {
            continue;
        }
        let day = calendar
            .days
            .get(&date)
            .copied()
            .map_or_else(|| CalendarDay::regular(date), Ok)?;
        targets.push(day);
    }
    if targets.is_empty() {
        return Err(ForecastError::InvalidSpec(
            "horizon contains no operating days".into(),
        ));
    }
    Ok(targets)
}

/// Run one pipeline for one origin.
pub fn run_pipeline(
    spec: &ModelSpec,
    series: &PeriodSeries,
    calendar: &CalendarTable,
    origin: NaiveDate,
) -> Result<ForecastSet, ForecastError> {
    spec.validate()?;
    let mut series = series.clone();
    series.attach_calendar(calendar);
    let idx = learning_window(&series, origin, spec)?;
    let window = series.select_days(&idx)?;
    let targets = target_days(origin, spec.horizon_days, calendar)?;
    for day in &targets {
        if !window.days.iter().any(|t| t.weekday == day.weekday) {
            return Err(ForecastError::UnseenWeekday {
                weekday: day.weekday,
            });
        }
    }

    let rows = match spec.pipeline {
        Pipeline::TwoStageMixed => {
            let fit = fit_two_stage(&window, &spec.fx, &spec.cov)?;
            predict_two_stage(&fit, &targets, spec.level)?
        }
        Pipeline::Benchmark1 => forecast_benchmark(1, &window, &spec.fx, &targets, spec.level)?,
        Pipeline::Benchmark2 => forecast_benchmark(2, &window, &spec.fx, &targets, spec.level)?,
        Pipeline::Industry => industry_rows(&window, &targets)?,
    };
    Ok(ForecastSet {
        origin,
        lead_time_days: spec.lead_time_days,
        k: window.k,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    /// Deterministic six-day-week series: `weeks` weeks from a Sunday start,
    /// cell counts supplied by `f(week, weekday, period0)`.
    fn series_weeks<F: Fn(usize, u8, usize) -> u64>(weeks: usize, k: usize, f: F) -> PeriodSeries {
        let start = date("2024-03-03"); // Sunday
        let mut days = Vec::new();
        let mut counts = Vec::new();
        for w in 0..weeks {
            for wd in 0..6u64 {
                let d = CalendarDay::regular(start + chrono::Days::new(w as u64 * 7 + wd)).unwrap();
                for p in 0..k {
                    counts.push(f(w, d.weekday, p));
                }
                days.push(d);
            }
        }
        PeriodSeries::new(days, k, 30.0, counts).unwrap()
    }

    #[test]
    fn industry_averages_same_weekday_history() {
        let s = series_weeks(3, 2, |w, wd, p| {
            if wd == 1 && p == 0 {
                100 + 10 * w as u64
            } else {
                50
            }
        });
        // Next Sunday after the 3 weeks.
        let target = date("2024-03-24");
        assert_abs_diff_eq!(forecast_industry(&s, target, 1).unwrap(), 110.0);
        // Counts before the second Sunday: only week 0.
        assert_abs_diff_eq!(forecast_industry(&s, date("2024-03-10"), 1).unwrap(), 100.0);
        // 2024-03-30 is a Saturday: weekday_index fails upstream.
        assert!(forecast_industry(&s, date("2024-03-30"), 1).is_err());
    }

    #[test]
    fn benchmark1_fits_transformed_cell_means() {
        let s = series_weeks(4, 3, |w, wd, p| 40 + 7 * wd as u64 + 3 * p as u64 + w as u64);
        let fx = FixedEffectsSpec::new(PatternSpec::MultiPattern, vec![]);
        let target = CalendarDay::regular(date("2024-03-31")).unwrap(); // Sunday
        let rows = forecast_benchmark(1, &s, &fx, &[target], 0.95).unwrap();
        for (p, row) in rows.iter().enumerate() {
            // Transformed-scale cell mean over the window's Sundays.
            let mut mean_t = 0.0;
            let mut n = 0;
            for (di, day) in s.days.iter().enumerate() {
                if day.weekday == 1 {
                    mean_t += root_transform(s.count(di, p) as f64);
                    n += 1;
                }
            }
            mean_t /= n as f64;
            assert_abs_diff_eq!(row.point_transformed, mean_t, epsilon = 1e-10);
            assert_abs_diff_eq!(row.point_count, inverse_transform(mean_t), epsilon = 1e-10);
        }
    }

    #[test]
    fn benchmark1_width_is_constant_across_periods() {
        let s = series_weeks(4, 4, |w, wd, p| 30 + 5 * wd as u64 + 2 * p as u64 + (w % 2) as u64);
        let fx = FixedEffectsSpec::new(PatternSpec::MultiPattern, vec![]);
        let target = CalendarDay::regular(date("2024-03-31")).unwrap();
        let rows = forecast_benchmark(1, &s, &fx, &[target], 0.95).unwrap();
        let w0 = rows[0].sd_transformed.unwrap();
        for r in &rows {
            assert_abs_diff_eq!(r.sd_transformed.unwrap(), w0, epsilon = 1e-10);
        }
    }

    #[test]
    fn benchmark2_without_active_exogenous_equals_benchmark1() {
        use crate::design::ExogenousField;
        let s = series_weeks(4, 3, |w, wd, p| 25 + 4 * wd as u64 + p as u64 + w as u64);
        // No day in the synthetic window carries flags, and neither does the
        // target, so the exogenous column is aliased to zero and dropped.
        let fx = FixedEffectsSpec::new(
            PatternSpec::MultiPattern,
            vec![ExogenousField::Billing(14)],
        );
        let target = CalendarDay::regular(date("2024-03-31")).unwrap();
        let b1 = forecast_benchmark(1, &s, &fx, &[target], 0.95).unwrap();
        let b2 = forecast_benchmark(2, &s, &fx, &[target], 0.95).unwrap();
        for (a, b) in b1.iter().zip(&b2) {
            assert_abs_diff_eq!(a.point_count, b.point_count, epsilon = 1e-9);
            assert_abs_diff_eq!(
                a.sd_transformed.unwrap(),
                b.sd_transformed.unwrap(),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn collapsed_two_stage_prediction_equals_benchmark() {
        // With the day kernel at zero and no within-day correlation, the
        // conditional mean is the fixed-effect fit and the prediction
        // variance is the homoscedastic formula, so the two paths agree.
        let s = series_weeks(4, 3, |w, wd, p| 35 + 6 * wd as u64 + 2 * p as u64 + w as u64);
        let fx = FixedEffectsSpec::new(PatternSpec::MultiPattern, vec![]);
        let bundle = build_design(&s.days, s.k, &fx).unwrap();
        let y = transformed_grid(&s);
        let n = y.len();
        let p = bundle.x.ncols();
        let chol = Cholesky::new(bundle.x.tr_mul(&bundle.x)).unwrap();
        let beta = chol.solve(&bundle.x.tr_mul(&y));
        let resid = &y - &bundle.x * &beta;
        let s2 = resid.norm_squared() / (n - p) as f64;
        let beta_cov = chol.solve(&DMatrix::identity(p, p)) * s2;

        let fit = FittedMixedModel {
            beta: beta.iter().copied().collect(),
            beta_cov,
            column_names: bundle.column_names(),
            columns: bundle.columns.clone(),
            dropped: vec![],
            params: vec![
                ("sigma_G2".into(), 0.0),
                ("rho_G".into(), 0.0),
                ("sigma_R2".into(），s2 - 0.25),
                ("rho_R".into(), 0.0),
                ("sigma2".into(), 0.25),
            ],
            fx: fx.clone(),
            cov: CovarianceSpec::default(),
            k: s.k,
            train_days: s.days.clone(),
            y_transformed: y.iter().copied().collect(),
            loglik_stage1: None,
            loglik_stage2: 0.0,
            converged: true,
            boundary: false,
            n_iter_stage1: 0,
            n_iter_stage2: 0,
        };
        let target = CalendarDay::regular(date("2024-03-31")).unwrap();
        let two_stage = predict_two_stage(&fit, &[target], 0.95).unwrap();
        let bench = forecast_benchmark(1, &s, &fx, &[target], 0.95).unwrap();
        for (a, b) in two_stage.iter().zip(&bench) {
            assert_abs_diff_eq!(a.point_count, b.point_count, epsilon = 1e-8);
            assert_abs_diff_eq!(
                a.sd_transformed.unwrap(),
                b.sd_transformed.unwrap(),
                epsilon = 1e-8
            );
        }
    }

    #[test]
    fn pipeline_runs_end_to_end_and_respects_the_six_day_week() {
        let s = series_weeks(10, 3, |w, wd, p| {
            60 + 9 * wd as u64 + 4 * p as u64 + (w % 3) as u64
        });
        let fx = FixedEffectsSpec::new(PatternSpec::ThreePattern, vec![]);
        let spec = ModelSpec::new(Pipeline::TwoStageMixed, fx);
        // Origin: Sunday of week 9; window = 42 days ending 7 days earlier.
        let origin = date("2024-05-05");
        let out = run_pipeline(&spec, &s, &CalendarTable::default(), origin).unwrap();
        // Horizon of 7 calendar days from a Sunday = 6 operating days.
        assert_eq!(out.rows.len(), 6 * 3);
        assert!(out.rows.iter().all(|r| {
            r.lower_count.unwrap() <= r.point_count + 1e-12
                && r.point_count <= r.upper_count.unwrap() + 1e-12
        }));
        assert!(out
            .rows
            .iter()
            .all(|r| r.date.weekday() != Weekday::Sat));

        // Widening the level widens every interval.
        let mut wide_spec = spec.clone();
        wide_spec.level = 0.99;
        let wide = run_pipeline(&wide_spec, &s, &CalendarTable::default(), origin).unwrap();
        for (a, b) in out.rows.iter().zip(&wide.rows) {
            let wa = a.upper_count.unwrap() - a.lower_count.unwrap();
            let wb = b.upper_count.unwrap() - b.lower_count.unwrap();
            assert!(wb >= wa - 1e-12, "wide {wb} < narrow {wa}");
        }
    }

    #[test]
    fn pipeline_rejects_bad_specs_and_thin_windows() {
        let s = series_weeks(2, 2, |_, wd, p| 20 + wd as u64 + p as u64);
        let fx = FixedEffectsSpec::new(PatternSpec::ThreePattern, vec![]);
        let mut spec = ModelSpec::new(Pipeline::Industry, fx);
        spec.learn_window_days = 7;
        assert!(matches!(
            run_pipeline(&spec, &s, &CalendarTable::default(), date("2024-03-24")),
            Err(ForecastError::InvalidSpec(_))
        ));
        let mut spec2 = ModelSpec::new(Pipeline::Industry, FixedEffectsSpec::new(PatternSpec::ThreePattern, vec![]));
        spec2.learn_window_days = 42;
        // Origin far past the data: the window is empty.
        assert!(matches!(
            run_pipeline(&spec2, &s, &CalendarTable::default(), date("2025-01-05")),
            Err(ForecastError::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn forecast_csv_round_trips_through_the_writer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forecast.csv");
        let set = ForecastSet {
            origin: date("2024-03-24"),
            lead_time_days: 7,
            k: 2,
            rows: vec![ForecastRow {
                date: date("2024-03-24"),
                period: 1,
                point_count: 101.25,
                lower_count: Some(80.5),
                upper_count: Some(125.0),
                point_transformed: 10.07,
                sd_transformed: Some(0.5),
            }],
        };
        set.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("date,period,point,lower,upper"));
        assert!(text.contains("2024-03-24,1,101.2500,80.5000,125.0000"));
    }
}
