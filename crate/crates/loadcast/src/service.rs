//! Mean service-time regressions on the weekday-by-period grid.
//!
//! Three ordinary-least-squares models of the per-cell mean handling time
//! (minutes), all with a linear day trend:
//!
//! * Model 1: weekday levels, shared quadratic and linear period terms, and
//!   weekday-specific quadratic and linear interactions.
//! * Model 2: full weekday-by-period cell means (the saturated pattern).
//! * Model 3: Model 1 without the weekday-specific quadratic interactions.
//!
//! Model 3 is nested in Model 1 is nested in Model 2; fits are compared by
//! the difference of error sums of squares referred to a chi-square with the
//! parameter-count difference as degrees of freedom. Parameter counts follow
//! the regression-output convention `rank(design) - 1`.

use crate::data::{weekday_index, DataError, ServiceSeries};
use crate::design::greedy_independent_columns;
use crate::stats::chi2_sf;
use chrono::{Datelike, NaiveDate, Weekday};
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Errors from service-time fitting and prediction.
#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("design is rank deficient even after aliasing drops")]
    RankDeficient,
    #[error("models are not nested: {context}")]
    NotNested { context: String },
    #[error("weekday {weekday} was not in the training window")]
    UnseenWeekday { weekday: u8 },
    #[error("period {period} is outside 1..={k}")]
    PeriodOutOfRange { period: usize, k: usize },
    #[error("training window spans {found} weekday(s); at least 2 required")]
    TooFewWeekdays { found: usize },
}

/// One design column of a service-time model. Periods enter as their 1-based
/// index `k` (and `k^2`); the trend is the day's ordinal position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ServiceColumn {
    Weekday { weekday: u8 },
    PeriodSq,
    Period,
    WeekdayPeriodSq { weekday: u8 },
    WeekdayPeriod { weekday: u8 },
    Cell { weekday: u8, period: usize },
    Trend,
}

impl ServiceColumn {
    fn value(&self, weekday: u8, period1: usize, ordinal: f64) -> f64 {
        let kf = period1 as f64;
        match self {
            ServiceColumn::Weekday { weekday: w } => f64::from(weekday == *w),
            ServiceColumn::PeriodSq => kf * kf,
            ServiceColumn::Period => kf,
            ServiceColumn::WeekdayPeriodSq { weekday: w } => {
                f64::from(weekday == *w) * kf * kf
            }
            ServiceColumn::WeekdayPeriod { weekday: w } => f64::from(weekday == *w) * kf,
            ServiceColumn::Cell {
                weekday: w,
                period: p,
            } => f64::from(weekday == *w && period1 == *p),
            ServiceColumn::Trend => ordinal,
        }
    }

    fn name(&self) -> String {
        const WD: [&str; 7] = ["", "sun", "mon", "tue", "wed", "thu", "fri"];
        match self {
            ServiceColumn::Weekday { weekday } => format!("svc_{}", WD[*weekday as usize]),
            ServiceColumn::PeriodSq => "svc_k2".into(),
            ServiceColumn::Period => "svc_k".into(),
            ServiceColumn::WeekdayPeriodSq { weekday } => {
                format!("svc_{}_k2", WD[*weekday as usize])
            }
            ServiceColumn::WeekdayPeriod { weekday } => {
                format!("svc_{}_k", WD[*weekday as usize])
            }
            ServiceColumn::Cell { weekday, period } => {
                format!("svc_{}_p{:02}", WD[*weekday as usize], period)
            }
            ServiceColumn::Trend => "svc_trend".into(),
        }
    }
}

fn candidate_columns(model_id: u8, k: usize) -> Vec<ServiceColumn> {
    let mut defs = Vec::new();
    match model_id {
        1 | 3 => {
            for w in 1..=6 {
                defs.push(ServiceColumn::Weekday { weekday: w });
            }
            defs.push(ServiceColumn::PeriodSq);
            defs.push(ServiceColumn::Period);
            if model_id == 1 {
                for w in 1..=6 {
                    defs.push(ServiceColumn::WeekdayPeriodSq { weekday: w });
                }
            }
            for w in 1..=6 {
                defs.push(ServiceColumn::WeekdayPeriod { weekday: w });
            }
            defs.push(ServiceColumn::Trend);
        }
        2 => {
            for w in 1..=6 {
                for p in 1..=k {
                    defs.push(ServiceColumn::Cell {
                        weekday: w,
                        period: p,
                    });
                }
            }
            defs.push(ServiceColumn::Trend);
        }
        other => panic!("model_id must be 1, 2, or 3, got {other}"),
    }
    defs
}

/// A fitted service-time regression.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceModelFit {
    pub model_id: u8,
    pub columns: Vec<ServiceColumn>,
    pub beta: Vec<f64>,
    pub error_ss: f64,
    /// Parameter count in the `rank - 1` reporting convention.
    pub n_params: usize,
    pub n_cells: usize,
    pub k: usize,
    /// Residual variance `error_ss / (n - rank)`.
    pub residual_var: f64,
    /// Training dates in order; the trend ordinal of training day `i` is `i`.
    pub train_dates: Vec<NaiveDate>,
    pub weekdays_seen: Vec<u8>,
    pub dropped: Vec<String>,
}

/// Options for [`fit_service_model`].
#[derive(Debug, Clone, Default)]
pub struct ServiceFitOptions {
    /// Weight each cell by its call count instead of fitting unweighted OLS.
    pub weight_by_calls: bool,
}

/// Fit one of the three service-time models by (optionally weighted) OLS.
pub fn fit_service_model(
    model_id: u8,
    series: &ServiceSeries,
    opts: &ServiceFitOptions,
) -> Result<ServiceModelFit, ServiceError> {
    let d = series.n_days();
    let k = series.k;
    let n = d * k;
    let mut weekdays_seen: Vec<u8> = series.days.iter().map(|day| day.weekday).collect();
    weekdays_seen.sort_unstable();
    weekdays_seen.dedup();
    if weekdays_seen.len() < 2 {
        return Err(ServiceError::TooFewWeekdays {
            found: weekdays_seen.len(),
        });
    }

    let defs = candidate_columns(model_id, k);
    let mut full = DMatrix::zeros(n, defs.len());
    let mut y = DVector::zeros(n);
    let mut w = DVector::repeat(n, 1.0);
    for (di, day) in series.days.iter().enumerate() {
        for p in 0..k {
            let row = di * k + p;
            y[row] = series.mean_minutes(di, p);
            if opts.weight_by_calls {
                w[row] = series.n_calls(di, p) as f64;
            }
            for (j, def) in defs.iter().enumerate() {
                full[(row, j)] = def.value(day.weekday, p + 1, di as f64);
            }
        }
    }

    let (kept, dropped_idx) = greedy_independent_columns(&full, 1e-8);
    if kept.is_empty() || kept.len() >= n {
        return Err(ServiceError::RankDeficient);
    }
    let x = full.select_columns(&kept);
    let columns: Vec<ServiceColumn> = kept.iter().map(|&j| defs[j]).collect();
    let dropped: Vec<String> = dropped_idx.iter().map(|&j| defs[j].name()).collect();

    // Weighted normal equations; weights are all one in the default fit.
    let p = x.ncols();
    let mut xtwx = DMatrix::zeros(p, p);
    let mut xtwy = DVector::zeros(p);
    for i in 0..n {
        let wi = w[i];
        let row = x.row(i);
        for a in 0..p {
            let xa = row[a];
            if xa == 0.0 {
                continue;
            }
            xtwy[a] += wi * xa * y[i];
            for b in a..p {
                xtwx[(a, b)] += wi * xa * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtwx[(a, b)] = xtwx[(b, a)];
        }
    }
    let chol = Cholesky::new(xtwx).ok_or(ServiceError::RankDeficient)?;
    let beta = chol.solve(&xtwy);
    let resid = &y - &x * &beta;
    let error_ss: f64 = resid
        .iter()
        .zip(w.iter())
        .map(|(r, wi)| wi * r * r)
        .sum();
    let rank = p;
    let residual_var = if n > rank {
        error_ss / (n - rank) as f64
    } else {
        0.0
    };

    Ok(ServiceModelFit {
        model_id,
        columns,
        beta: beta.iter().copied().collect(),
        error_ss,
        n_params: rank - 1,
        n_cells: n,
        k,
        residual_var,
        train_dates: series.days.iter().map(|day| day.date).collect(),
        weekdays_seen,
        dropped,
    })
}

impl ServiceModelFit {
    /// Trend ordinal of a date: its training position, or the training length
    /// extended by the number of operating (non-Saturday) days past the last
    /// training date.
    pub fn ordinal_of(&self, date: NaiveDate) -> f64 {
        if let Ok(i) = self.train_dates.binary_search(&date) {
            return i as f64;
        }
        let last = *self.train_dates.last().expect("training is nonempty");
        if date > last {
            let mut ord = (self.train_dates.len() - 1) as f64;
            let mut d = last;
            while d < date {
                d = d.succ_opt().expect("date in range");
                if d.weekday() != Weekday::Sat {
                    ord += 1.0;
                }
            }
            return ord;
        }
        let first = self.train_dates[0];
        let mut ord = 0.0;
        let mut d = first;
        while d > date {
            d = d.pred_opt().expect("date in range");
            if d.weekday() != Weekday::Sat {
                ord -= 1.0;
            }
        }
        ord
    }
}

/// A prediction target: date plus 1-based period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceTarget {
    pub date: NaiveDate,
    pub period: usize,
}

/// Default lower clamp for predicted mean service times, minutes.
pub const SERVICE_FLOOR_MINUTES: f64 = 0.1;

/// Predict mean service times (minutes) for the given targets, clamping
/// below at `floor`.
pub fn predict_service(
    fit: &ServiceModelFit,
    targets: &[ServiceTarget],
    floor: f64,
) -> Result<Vec<f64>, ServiceError> {
    let mut out = Vec::with_capacity(targets.len());
    for t in targets {
        let weekday = weekday_index(t.date)?;
        if !fit.weekdays_seen.contains(&weekday) {
            return Err(ServiceError::UnseenWeekday { weekday });
        }
        if t.period == 0 || t.period > fit.k {
            return Err(ServiceError::PeriodOutOfRange {
                period: t.period,
                k: fit.k,
            });
        }
        let ordinal = fit.ordinal_of(t.date);
        let mut pred = 0.0;
        for (col, b) in fit.columns.iter().zip(&fit.beta) {
            pred += b * col.value(weekday, t.period, ordinal);
        }
        out.push(pred.max(floor));
    }
    Ok(out)
}

/// Chi-square comparison of two nested service-model fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceComparison {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Compare a smaller model `a` against a larger model `b` fitted on the same
/// training cells: statistic = difference of error sums of squares, degrees
/// of freedom = parameter-count difference.
pub fn compare_service_models(
    a: &ServiceModelFit,
    b: &ServiceModelFit,
) -> Result<ServiceComparison, ServiceError> {
    if a.n_cells != b.n_cells || a.k != b.k || a.train_dates != b.train_dates {
        return Err(ServiceError::NotNested {
            context: "fits use different training cells".into(),
        });
    }
    let nested = a.model_id == b.model_id
        || matches!((a.model_id, b.model_id), (3, 1) | (3, 2) | (1, 2));
    if !nested {
        return Err(ServiceError::NotNested {
            context: format!(
                "model {} is not nested in model {}",
                a.model_id, b.model_id
            ),
        });
    }
    let statistic = (a.error_ss - b.error_ss).max(0.0);
    let df = b.n_params - a.n_params;
    let p_value = if df == 0 {
        1.0
    } else {
        chi2_sf(statistic, df as f64)
    };
    Ok(ServiceComparison {
        statistic,
        df,
        p_value,
    })
}

/// Mean absolute percentage error of a fit's predictions over a series, in
/// percent. Cells are weighted equally.
pub fn service_ape(fit: &ServiceModelFit, series: &ServiceSeries) -> Result<f64, ServiceError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (di, day) in series.days.iter().enumerate() {
        for p in 0..series.k {
            let target = ServiceTarget {
                date: day.date,
                period: p + 1,
            };
            let pred = predict_service(fit, &[target], SERVICE_FLOOR_MINUTES)?[0];
            let obs = series.mean_minutes(di, p);
            total += ((pred - obs) / obs).abs();
            count += 1;
        }
    }
    Ok(100.0 * total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CalendarDay;
    use approx::assert_abs_diff_eq;

    fn grid_series<F: Fn(u8, usize, usize) -> f64>(
        weeks: usize,
        k: usize,
        value: F,
    ) -> ServiceSeries {
        let start = NaiveDate::from_ymd_opt(2024, 3, 3).unwrap(); // Sunday
        let mut days = Vec::new();
        let mut means = Vec::new();
        let mut calls = Vec::new();
        let mut ordinal = 0usize;
        for w in 0..weeks {
            for wd in 0..6u64 {
                let date = start + chrono::Days::new(w as u64 * 7 + wd);
                let day = CalendarDay::regular(date).unwrap();
                for p in 1..=k {
                    means.push(value(day.weekday, p, ordinal));
                    calls.push(25);
                }
                days.push(day);
                ordinal += 1;
            }
        }
        ServiceSeries::new(days, k, means, calls).unwrap()
    }

    #[test]
    fn parameter_counts_match_the_reporting_convention() {
        let s = grid_series(4, 24, |w, p, d| {
            3.0 + 0.1 * w as f64 + 0.02 * p as f64 + 0.001 * d as f64
        });
        let opts = ServiceFitOptions::default();
        let m1 = fit_service_model(1, &s, &opts).unwrap();
        let m2 = fit_service_model(2, &s, &opts).unwrap();
        let m3 = fit_service_model(3, &s, &opts).unwrap();
        assert_eq!(m1.n_params, 18);
        assert_eq!(m2.n_params, 144);
        assert_eq!(m3.n_params, 13);
    }

    #[test]
    fn noiseless_quadratic_data_is_interpolated_by_all_models() {
        // Data generated from Model 3 structure: weekday level + shared
        // quadratic + weekday-specific linear + trend.
        let s = grid_series(3, 8, |w, p, d| {
            let pf = p as f64;
            4.0 + 0.3 * w as f64 - 0.05 * pf * pf + (0.2 + 0.01 * w as f64) * pf
                + 0.002 * d as f64
        });
        let opts = ServiceFitOptions::default();
        let m3 = fit_service_model(3, &s, &opts).unwrap();
        let m1 = fit_service_model(1, &s, &opts).unwrap();
        let m2 = fit_service_model(2, &s, &opts).unwrap();
        assert!(m3.error_ss < 1e-14 * m3.n_cells as f64, "ss = {}", m3.error_ss);
        assert!(m1.error_ss <= m3.error_ss + 1e-9);
        assert!(m2.error_ss <= m1.error_ss + 1e-9);
    }

    #[test]
    fn error_ss_is_monotone_along_the_nesting_chain() {
        // Deterministic rough data that none of the models interpolates.
        let s = grid_series(4, 6, |w, p, d| {
            5.0 + (w as f64 * 1.7 + p as f64 * 2.3 + d as f64 * 0.9).sin().abs() + 0.5
        });
        let opts = ServiceFitOptions::default();
        let m1 = fit_service_model(1, &s, &opts).unwrap();
        let m2 = fit_service_model(2, &s, &opts).unwrap();
        let m3 = fit_service_model(3, &s, &opts).unwrap();
        assert!(m2.error_ss <= m1.error_ss + 1e-9);
        assert!(m1.error_ss <= m3.error_ss + 1e-9);

        let c = compare_service_models(&m3, &m2).unwrap();
        assert_eq!(c.df, m2.n_params - m3.n_params);
        assert_abs_diff_eq!(c.statistic, m3.error_ss - m2.error_ss, epsilon = 1e-9);
        assert!(c.p_value >= 0.0 && c.p_value <= 1.0);

        // Wrong direction and self-comparison.
        assert!(compare_service_models(&m2, &m3).is_err());
        let self_cmp = compare_service_models(&m1, &m1).unwrap();
        assert_eq!(self_cmp.df, 0);
        assert_abs_diff_eq!(self_cmp.statistic, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(self_cmp.p_value, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn saturated_model_reproduces_cell_means_when_data_has_no_trend() {
        let s = grid_series(4, 5, |w, p, _| 2.0 + 0.5 * w as f64 + 0.25 * p as f64);
        let m2 = fit_service_model(2, &s, &ServiceFitOptions::default()).unwrap();
        assert!(m2.error_ss < 1e-16 * m2.n_cells as f64);
        let target = ServiceTarget {
            date: s.days[7].date,
            period: 3,
        };
        let pred = predict_service(&m2, &[target], SERVICE_FLOOR_MINUTES).unwrap()[0];
        assert_abs_diff_eq!(pred, s.mean_minutes(7, 2), epsilon = 1e-8);
    }

    #[test]
    fn pure_quadratic_predictions_are_symmetric_about_the_vertex() {
        // Identical across weekdays, vertex at k = 8, no trend.
        let s = grid_series(3, 15, |_, p, _| {
            let x = p as f64 - 8.0;
            10.0 + 0.1 * x * x
        });
        let m3 = fit_service_model(3, &s, &ServiceFitOptions::default()).unwrap();
        let date = s.days[0].date;
        let preds = predict_service(
            &m3,
            &[
                ServiceTarget { date, period: 5 },
                ServiceTarget { date, period: 11 },
            ],
            SERVICE_FLOOR_MINUTES,
        )
        .unwrap();
        assert_abs_diff_eq!(preds[0], preds[1], epsilon = 1e-7);
    }

    #[test]
    fn unseen_weekday_and_bad_period_are_rejected() {
        let s = grid_series(2, 4, |w, p, _| 3.0 + w as f64 + p as f64);
        // Keep only Sundays and Mondays.
        let idx: Vec<usize> = s
            .days
            .iter()
            .enumerate()
            .filter(|(_, d)| d.weekday <= 2)
            .map(|(i, _)| i)
            .collect();
        let days: Vec<CalendarDay> = idx.iter().map(|&i| s.days[i]).collect();
        let mut means = Vec::new();
        let mut calls = Vec::new();
        for &i in &idx {
            for p in 0..s.k {
                means.push(s.mean_minutes(i, p));
                calls.push(s.n_calls(i, p));
            }
        }
        let sub = ServiceSeries::new(days, s.k, means, calls).unwrap();
        let fit = fit_service_model(3, &sub, &ServiceFitOptions::default()).unwrap();
        // 2024-03-08 is a Friday.
        let friday = NaiveDate::from_ymd_opt(2024, 3, 8).unwrap();
        assert!(matches!(
            predict_service(&fit, &[ServiceTarget { date: friday, period: 1 }], 0.1),
            Err(ServiceError::UnseenWeekday { weekday: 6 })
        ));
        let sunday = NaiveDate::from_ymd_opt(2024, 3, 3).unwrap();
        assert!(matches!(
            predict_service(&fit, &[ServiceTarget { date: sunday, period: 9 }], 0.1),
            Err(ServiceError::PeriodOutOfRange { .. })
        ));
    }

    #[test]
    fn trend_ordinal_extends_past_training_by_operating_days() {
        let s = grid_series(2, 3, |w, p, d| 1.0 + w as f64 + p as f64 + d as f64);
        let fit = fit_service_model(3, &s, &ServiceFitOptions::default()).unwrap();
        // Training runs 12 days (Sun..Fri twice): ordinals 0..=11. The next
        // Sunday is two calendar days after the last Friday but only one
        // operating day later.
        let last = *fit.train_dates.last().unwrap();
        let next_sunday = last + chrono::Days::new(2);
        assert_abs_diff_eq!(fit.ordinal_of(last), 11.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.ordinal_of(next_sunday), 12.0, epsilon = 1e-12);
    }

    #[test]
    fn ape_is_zero_for_an_interpolating_fit() {
        let s = grid_series(3, 4, |w, p, _| 2.0 + w as f64 * 0.4 + p as f64 * 0.3);
        let m2 = fit_service_model(2, &s, &ServiceFitOptions::default()).unwrap();
        let ape = service_ape(&m2, &s).unwrap();
        assert!(ape < 1e-8, "ape = {ape}");
    }
}
