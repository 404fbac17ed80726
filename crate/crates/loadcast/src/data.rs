//! Period-by-day count and service-time series, their CSV formats, and
//! resolution changes.
//!
//! The operation runs a six-day week: Sunday (weekday index 1) through Friday
//! (index 6). Saturdays never appear in a series; gaps between adjacent rows
//! are real calendar gaps and are preserved, not reindexed away. Outlier days
//! (holidays, special events) stay in the files and are flagged in the
//! calendar; model fits filter them out at fit time.
//!
//! File formats (CSV with headers):
//!
//! * arrivals: `date,period,count` with `period` in `1..=K`
//! * calendar: `date,is_outlier,delivery_1,delivery_7,delivery_14,delivery_21,billing_1,billing_7,billing_14,billing_21`
//! * services: `date,period,mean_service_minutes,n_calls`

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Billing/delivery cycle tags, named for the day of month the bill goes out.
pub const CYCLES: [u8; 4] = [1, 7, 14, 21];

/// Errors raised while loading or reshaping series data.
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    /// The input file could not be opened.
    #[error("cannot open {path}: {source}")]
    MissingFile {
        path: String,
        source: std::io::Error,
    },
    /// A required column is absent from the header row.
    #[error("{path}: missing column '{column}'")]
    SchemaError { path: String, column: String },
    /// A cell could not be parsed; the line number is 1-based including the header.
    #[error("{path}:{line}: {message}")]
    ParseError {
        path: String,
        line: u64,
        message: String,
    },
    /// A date fell on a Saturday, which the six-day week excludes.
    #[error("{date} is a Saturday; the series runs a six-day week")]
    SaturdayPresent { date: NaiveDate },
    /// The same (date, period) cell appeared twice.
    #[error("duplicate cell for {date} period {period}")]
    DuplicateCell { date: NaiveDate, period: usize },
    /// A day is missing some of the `1..=K` periods.
    #[error("day {date} has {got} of {expected} periods")]
    RaggedDay {
        date: NaiveDate,
        got: usize,
        expected: usize,
    },
    /// A service-time cell was zero, negative, or non-finite.
    #[error("non-positive mean service time at {date} period {period}")]
    NonPositiveService { date: NaiveDate, period: usize },
    /// The requested resolution factor does not divide the period count.
    #[error("factor {factor} does not divide K={k}")]
    IndivisibleFactor { k: usize, factor: usize },
    /// The series is empty where at least one day is required.
    #[error("series has no days")]
    Empty,
}

/// One calendar day's metadata: true date, six-day weekday index, outlier
/// flag, and the four delivery / four billing cycle indicators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalendarDay {
    pub date: NaiveDate,
    /// Sunday = 1 .. Friday = 6.
    pub weekday: u8,
    pub is_outlier: bool,
    /// Delivery-period indicators for cycles 1, 7, 14, 21 (in that order).
    pub delivery: [bool; 4],
    /// Billing-day indicators for cycles 1, 7, 14, 21 (in that order).
    pub billing: [bool; 4],
}

impl CalendarDay {
    /// A regular (non-outlier, flag-free) day. Fails on Saturdays.
    pub fn regular(date: NaiveDate) -> Result<Self, DataError> {
        Ok(CalendarDay {
            date,
            weekday: weekday_index(date)?,
            is_outlier: false,
            delivery: [false; 4],
            billing: [false; 4],
        })
    }

    /// True if any of the four delivery flags is set.
    pub fn any_delivery(&self) -> bool {
        self.delivery.iter().any(|&b| b)
    }
}

/// Six-day weekday index of a date: Sunday = 1 .. Friday = 6.
pub fn weekday_index(date: NaiveDate) -> Result<u8, DataError> {
    match date.weekday() {
        Weekday::Sun => Ok(1),
        Weekday::Mon => Ok(2),
        Weekday::Tue => Ok(3),
        Weekday::Wed => Ok(4),
        Weekday::Thu => Ok(5),
        Weekday::Fri => Ok(6),
        Weekday::Sat => Err(DataError::SaturdayPresent { date }),
    }
}

/// Absolute calendar gap between two dates, in days.
///
/// This is the distance the inter-day covariance kernel runs on; weekends and
/// missing days count, so adjacent Sundays are 7 apart even though they are
/// neighbors in the stored series.
pub fn true_date_gap(a: NaiveDate, b: NaiveDate) -> i64 {
    (b - a).num_days().abs()
}

/// Arrival counts on a day-by-period grid.
///
/// Rows are days in strictly increasing date order; each day has exactly `k`
/// periods. Counts are stored day-major: cell `(d, p)` is `counts[d * k + p]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodSeries {
    pub days: Vec<CalendarDay>,
    pub k: usize,
    pub period_minutes: f64,
    counts: Vec<u64>,
}

impl PeriodSeries {
    /// Assemble a series from per-day metadata and a day-major count grid.
    pub fn new(
        days: Vec<CalendarDay>,
        k: usize,
        period_minutes: f64,
        counts: Vec<u64>,
    ) -> Result<Self, DataError> {
        if days.is_empty() {
            return Err(DataError::Empty);
        }
        assert_eq!(counts.len(), days.len() * k, "count grid shape mismatch");
        for d in &days {
            let w = weekday_index(d.date)?;
            assert_eq!(w, d.weekday, "weekday index inconsistent with date");
        }
        for pair in days.windows(2) {
            assert!(pair[0].date < pair[1].date, "days must be strictly increasing");
        }
        Ok(PeriodSeries {
            days,
            k,
            period_minutes,
            counts,
        })
    }

    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    /// Count in day `d` (0-based), period `p` (0-based).
    pub fn count(&self, d: usize, p: usize) -> u64 {
        self.counts[d * self.k + p]
    }

    /// The day-major count grid.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Day total.
    pub fn day_total(&self, d: usize) -> u64 {
        self.counts[d * self.k..(d + 1) * self.k].iter().sum()
    }

    /// Indices of days inside `[start, end]` (inclusive), optionally dropping
    /// outlier days. Calendar gaps inside the range are simply absent.
    pub fn day_indices_in(
        &self,
        start: NaiveDate,
        end: NaiveDate,
        exclude_outliers: bool,
    ) -> Vec<usize> {
        self.days
            .iter()
            .enumerate()
            .filter(|(_, d)| d.date >= start && d.date <= end)
            .filter(|(_, d)| !(exclude_outliers && d.is_outlier))
            .map(|(i, _)| i)
            .collect()
    }

    /// Sub-series restricted to the given day indices (must be increasing).
    pub fn select_days(&self, idx: &[usize]) -> Result<PeriodSeries, DataError> {
        let days: Vec<CalendarDay> = idx.iter().map(|&i| self.days[i]).collect();
        let mut counts = Vec::with_capacity(idx.len() * self.k);
        for &i in idx {
            counts.extend_from_slice(&self.counts[i * self.k..(i + 1) * self.k]);
        }
        PeriodSeries::new(days, self.k, self.period_minutes, counts)
    }

    /// Attach outlier flags and exogenous indicators from a calendar table.
    /// Days missing from the table keep default (all-false) flags.
    pub fn attach_calendar(&mut self, cal: &CalendarTable) {
        for d in &mut self.days {
            if let Some(meta) = cal.days.get(&d.date) {
                d.is_outlier = meta.is_outlier;
                d.delivery = meta.delivery;
                d.billing = meta.billing;
            }
        }
    }

    /// Sum counts within consecutive blocks of `factor` periods, producing a
    /// coarser series with `k / factor` periods of `factor * period_minutes`
    /// each. Day totals are preserved exactly.
    pub fn aggregate_resolution(&self, factor: usize) -> Result<PeriodSeries, DataError> {
        if factor == 0 || self.k % factor != 0 {
            return Err(DataError::IndivisibleFactor {
                k: self.k,
                factor,
            });
        }
        let k_new = self.k / factor;
        let mut counts = Vec::with_capacity(self.days.len() * k_new);
        for d in 0..self.days.len() {
            for p in 0..k_new {
                let base = d * self.k + p * factor;
                counts.push(self.counts[base..base + factor].iter().sum());
            }
        }
        PeriodSeries::new(
            self.days.clone(),
            k_new,
            self.period_minutes * factor as f64,
            counts,
        )
    }
}

/// Mean service times on the same day-by-period grid as [`PeriodSeries`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceSeries {
    pub days: Vec<CalendarDay>,
    pub k: usize,
    /// Mean handling time per call, minutes, day-major.
    mean_minutes: Vec<f64>,
    /// Number of calls behind each cell mean, day-major.
    n_calls: Vec<u64>,
}

impl ServiceSeries {
    pub fn new(
        days: Vec<CalendarDay>,
        k: usize,
        mean_minutes: Vec<f64>,
        n_calls: Vec<u64>,
    ) -> Result<Self, DataError> {
        if days.is_empty() {
            return Err(DataError::Empty);
        }
        assert_eq!(mean_minutes.len(), days.len() * k);
        assert_eq!(n_calls.len(), days.len() * k);
        for (i, &m) in mean_minutes.iter().enumerate() {
            if !(m.is_finite() && m > 0.0) {
                let d = days[i / k].date;
                return Err(DataError::NonPositiveService {
                    date: d,
                    period: i % k + 1,
                });
            }
        }
        Ok(ServiceSeries {
            days,
            k,
            mean_minutes,
            n_calls,
        })
    }

    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    pub fn mean_minutes(&self, d: usize, p: usize) -> f64 {
        self.mean_minutes[d * self.k + p]
    }

    pub fn n_calls(&self, d: usize, p: usize) -> u64 {
        self.n_calls[d * self.k + p]
    }

    pub fn day_indices_in(
        &self,
        start: NaiveDate,
        end: NaiveDate,
        exclude_outliers: bool,
    ) -> Vec<usize> {
        self.days
            .iter()
            .enumerate()
            .filter(|(_, d)| d.date >= start && d.date <= end)
            .filter(|(_, d)| !(exclude_outliers && d.is_outlier))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn attach_calendar(&mut self, cal: &CalendarTable) {
        for d in &mut self.days {
            if let Some(meta) = cal.days.get(&d.date) {
                d.is_outlier = meta.is_outlier;
                d.delivery = meta.delivery;
                d.billing = meta.billing;
            }
        }
    }
}

/// Calendar metadata keyed by date, as loaded from `calendar.csv`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CalendarTable {
    pub days: BTreeMap<NaiveDate, CalendarDay>,
}

/// Column-name mapping for the arrivals CSV, with the period length the file
/// is gridded at. Defaults match the documented format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub date_column: String,
    pub period_column: String,
    pub count_column: String,
    pub period_minutes: f64,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            date_column: "date".into(),
            period_column: "period".into(),
            count_column: "count".into(),
            period_minutes: 30.0,
        }
    }
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::MissingFile {
        path: path.display().to_string(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn column_index(
    headers: &csv::StringRecord,
    name: &str,
    path: &Path,
) -> Result<usize, DataError> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| DataError::SchemaError {
            path: path.display().to_string(),
            column: name.to_string(),
        })
}

fn parse_cell<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    what: &str,
    path: &Path,
    line: u64,
) -> Result<T, DataError> {
    let raw = record.get(idx).unwrap_or("");
    raw.parse::<T>().map_err(|_| DataError::ParseError {
        path: path.display().to_string(),
        line,
        message: format!("cannot parse {what} from '{raw}'"),
    })
}

fn parse_date(
    record: &csv::StringRecord,
    idx: usize,
    path: &Path,
    line: u64,
) -> Result<NaiveDate, DataError> {
    let raw = record.get(idx).unwrap_or("");
    NaiveDate::parse_from_str(raw, "%Y-%m-%d").map_err(|_| DataError::ParseError {
        path: path.display().to_string(),
        line,
        message: format!("cannot parse date from '{raw}' (expected YYYY-MM-DD)"),
    })
}

fn parse_flag(
    record: &csv::StringRecord,
    idx: usize,
    path: &Path,
    line: u64,
) -> Result<bool, DataError> {
    let raw = record.get(idx).unwrap_or("");
    match raw {
        "0" | "false" | "FALSE" | "False" => Ok(false),
        "1" | "true" | "TRUE" | "True" => Ok(true),
        _ => Err(DataError::ParseError {
            path: path.display().to_string(),
            line,
            message: format!("cannot parse flag from '{raw}' (expected 0/1 or true/false)"),
        }),
    }
}

/// Load an arrivals CSV into a [`PeriodSeries`].
///
/// `K` is inferred as the largest period index in the file; every day must
/// then cover `1..=K` exactly once. Weekday indices come from the dates.
pub fn load_period_series(path: &Path, schema: &CsvSchema) -> Result<PeriodSeries, DataError> {
    let mut reader = open_reader(path)?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::ParseError {
            path: path.display().to_string(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let ci_date = column_index(&headers, &schema.date_column, path)?;
    let ci_period = column_index(&headers, &schema.period_column, path)?;
    let ci_count = column_index(&headers, &schema.count_column, path)?;

    let mut cells: BTreeMap<NaiveDate, BTreeMap<usize, u64>> = BTreeMap::new();
    let mut k = 0usize;
    for (i, record) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let record = record.map_err(|e| DataError::ParseError {
            path: path.display().to_string(),
            line,
            message: e.to_string(),
        })?;
        let date = parse_date(&record, ci_date, path, line)?;
        let period: usize = parse_cell(&record, ci_period, "period", path, line)?;
        let count: u64 = parse_cell(&record, ci_count, "count", path, line)?;
        if period == 0 {
            return Err(DataError::ParseError {
                path: path.display().to_string(),
                line,
                message: "period indices are 1-based".into(),
            });
        }
        k = k.max(period);
        if cells.entry(date).or_default().insert(period, count).is_some() {
            return Err(DataError::DuplicateCell { date, period });
        }
    }
    if cells.is_empty() {
        return Err(DataError::Empty);
    }

    let mut days = Vec::with_capacity(cells.len());
    let mut counts = Vec::with_capacity(cells.len() * k);
    for (date, m) in &cells {
        if m.len() != k {
            return Err(DataError::RaggedDay {
                date: *date,
                got: m.len(),
                expected: k,
            });
        }
        for p in 1..=k {
            match m.get(&p) {
                Some(&c) => counts.push(c),
                None => {
                    return Err(DataError::RaggedDay {
                        date: *date,
                        got: m.len(),
                        expected: k,
                    })
                }
            }
        }
        days.push(CalendarDay::regular(*date)?);
    }
    PeriodSeries::new(days, k, schema.period_minutes, counts)
}

/// Load a calendar CSV into a [`CalendarTable`].
pub fn load_calendar(path: &Path) -> Result<CalendarTable, DataError> {
    let mut reader = open_reader(path)?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::ParseError {
            path: path.display().to_string(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let ci_date = column_index(&headers, "date", path)?;
    let ci_outlier = column_index(&headers, "is_outlier", path)?;
    let mut ci_delivery = [0usize; 4];
    let mut ci_billing = [0usize; 4];
    for (j, c) in CYCLES.iter().enumerate() {
        ci_delivery[j] = column_index(&headers, &format!("delivery_{c}"), path)?;
        ci_billing[j] = column_index(&headers, &format!("billing_{c}"), path)?;
    }

    let mut table = CalendarTable::default();
    for (i, record) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let record = record.map_err(|e| DataError::ParseError {
            path: path.display().to_string(),
            line,
            message: e.to_string(),
        })?;
        let date = parse_date(&record, ci_date, path, line)?;
        let mut day = CalendarDay::regular(date)?;
        day.is_outlier = parse_flag(&record, ci_outlier, path, line)?;
        for j in 0..4 {
            day.delivery[j] = parse_flag(&record, ci_delivery[j], path, line)?;
            day.billing[j] = parse_flag(&record, ci_billing[j], path, line)?;
        }
        table.days.insert(date, day);
    }
    Ok(table)
}

/// Load a services CSV into a [`ServiceSeries`]. Grid rules match
/// [`load_period_series`].
pub fn load_service_series(path: &Path) -> Result<ServiceSeries, DataError> {
    let mut reader = open_reader(path)?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::ParseError {
            path: path.display().to_string(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let ci_date = column_index(&headers, "date", path)?;
    let ci_period = column_index(&headers, "period", path)?;
    let ci_mean = column_index(&headers, "mean_service_minutes", path)?;
    let ci_n = column_index(&headers, "n_calls", path)?;

    let mut cells: BTreeMap<NaiveDate, BTreeMap<usize, (f64, u64)>> = BTreeMap::new();
    let mut k = 0usize;
    for (i, record) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let record = record.map_err(|e| DataError::ParseError {
            path: path.display().to_string(),
            line,
            message: e.to_string(),
        })?;
        let date = parse_date(&record, ci_date, path, line)?;
        let period: usize = parse_cell(&record, ci_period, "period", path, line)?;
        let mean: f64 = parse_cell(&record, ci_mean, "mean_service_minutes", path, line)?;
        let n: u64 = parse_cell(&record, ci_n, "n_calls", path, line)?;
        if period == 0 {
            return Err(DataError::ParseError {
                path: path.display().to_string(),
                line,
                message: "period indices are 1-based".into(),
            });
        }
        k = k.max(period);
        if cells
            .entry(date)
            .or_default()
            .insert(period, (mean, n))
            .is_some()
        {
            return Err(DataError::DuplicateCell { date, period });
        }
    }
    if cells.is_empty() {
        return Err(DataError::Empty);
    }

    let mut days = Vec::with_capacity(cells.len());
    let mut means = Vec::with_capacity(cells.len() * k);
    let mut calls = Vec::with_capacity(cells.len() * k);
    for (date, m) in &cells {
        if m.len() != k {
            return Err(DataError::RaggedDay {
                date: *date,
                got: m.len(),
                expected: k,
            });
        }
        for p in 1..=k {
            match m.get(&p) {
                Some(&(mean, n)) => {
                    means.push(mean);
                    calls.push(n);
                }
                None => {
                    return Err(DataError::RaggedDay {
                        date: *date,
                        got: m.len(),
                        expected: k,
                    })
                }
            }
        }
        days.push(CalendarDay::regular(*date)?);
    }
    ServiceSeries::new(days, k, means, calls)
}

/// Write a [`PeriodSeries`] to the arrivals CSV format.
pub fn write_period_series(path: &Path, series: &PeriodSeries) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DataError::ParseError {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    w.write_record(["date", "period", "count"]).ok();
    for (d, day) in series.days.iter().enumerate() {
        for p in 0..series.k {
            w.write_record([
                day.date.to_string(),
                (p + 1).to_string(),
                series.count(d, p).to_string(),
            ])
            .ok();
        }
    }
    w.flush().map_err(|e| DataError::ParseError {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })
}

/// Write a [`CalendarTable`] to the calendar CSV format.
pub fn write_calendar(path: &Path, cal: &CalendarTable) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DataError::ParseError {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut header = vec!["date".to_string(), "is_outlier".to_string()];
    for c in CYCLES {
        header.push(format!("delivery_{c}"));
    }
    for c in CYCLES {
        header.push(format!("billing_{c}"));
    }
    w.write_record(&header).ok();
    for day in cal.days.values() {
        let mut rec = vec![day.date.to_string(), u8::from(day.is_outlier).to_string()];
        for j in 0..4 {
            rec.push(u8::from(day.delivery[j]).to_string());
        }
        for j in 0..4 {
            rec.push(u8::from(day.billing[j]).to_string());
        }
        w.write_record(&rec).ok();
    }
    w.flush().map_err(|e| DataError::ParseError {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })
}

/// Write a [`ServiceSeries`] to the services CSV format.
pub fn write_service_series(path: &Path, series: &ServiceSeries) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DataError::ParseError {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    w.write_record(["date", "period", "mean_service_minutes", "n_calls"])
        .ok();
    for (d, day) in series.days.iter().enumerate() {
        for p in 0..series.k {
            w.write_record([
                day.date.to_string(),
                (p + 1).to_string(),
                format!("{}", series.mean_minutes(d, p)),
                series.n_calls(d, p).to_string(),
            ])
            .ok();
        }
    }
    w.flush().map_err(|e| DataError::ParseError {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    #[test]
    fn weekday_indices_run_sunday_to_friday() {
        assert_eq!(weekday_index(date("2004-04-11")).unwrap(), 1); // Sunday
        assert_eq!(weekday_index(date("2004-04-16")).unwrap(), 6); // Friday
        assert!(matches!(
            weekday_index(date("2004-04-17")),
            Err(DataError::SaturdayPresent { .. })
        ));
    }

    #[test]
    fn gap_counts_true_calendar_days() {
        // Adjacent Sundays are series neighbors but 7 calendar days apart.
        assert_eq!(true_date_gap(date("2004-04-11"), date("2004-04-18")), 7);
        // Friday to the following Sunday: neighbors across the dead Saturday.
        assert_eq!(true_date_gap(date("2004-04-16"), date("2004-04-18")), 2);
        assert_eq!(true_date_gap(date("2004-04-18"), date("2004-04-16")), 2);
    }

    fn toy_series() -> PeriodSeries {
        let days = vec![
            CalendarDay::regular(date("2026-01-04")).unwrap(),
            CalendarDay::regular(date("2026-01-05")).unwrap(),
        ];
        PeriodSeries::new(days, 4, 30.0, vec![1, 2, 3, 4, 10, 20, 30, 40]).unwrap()
    }

    #[test]
    fn aggregation_sums_blocks_and_preserves_day_totals() {
        let s = toy_series();
        let a = s.aggregate_resolution(2).unwrap();
        assert_eq!(a.k, 2);
        assert_eq!(a.period_minutes, 60.0);
        assert_eq!(a.count(0, 0), 3);
        assert_eq!(a.count(0, 1), 7);
        assert_eq!(a.count(1, 0), 30);
        assert_eq!(a.count(1, 1), 70);
        assert_eq!(a.day_total(0), s.day_total(0));
        assert_eq!(a.day_total(1), s.day_total(1));
        assert!(matches!(
            s.aggregate_resolution(3),
            Err(DataError::IndivisibleFactor { .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("arrivals.csv");
        let s = toy_series();
        write_period_series(&p, &s).unwrap();
        let loaded = load_period_series(&p, &CsvSchema::default()).unwrap();
        assert_eq!(loaded, s);
    }

    #[test]
    fn loader_rejects_ragged_and_duplicate_grids() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "date,period,count\n2026-01-04,1,5\n2026-01-04,2,6\n2026-01-05,1,7\n").unwrap();
        assert!(matches!(
            load_period_series(&p, &CsvSchema::default()),
            Err(DataError::RaggedDay { .. })
        ));
        std::fs::write(&p, "date,period,count\n2026-01-04,1,5\n2026-01-04,1,6\n").unwrap();
        assert!(matches!(
            load_period_series(&p, &CsvSchema::default()),
            Err(DataError::DuplicateCell { .. })
        ));
        std::fs::write(&p, "date,period,count\n2026-01-03,1,5\n").unwrap();
        assert!(matches!(
            load_period_series(&p, &CsvSchema::default()),
            Err(DataError::SaturdayPresent { .. })
        ));
    }

    #[test]
    fn calendar_attach_sets_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("calendar.csv");
        std::fs::write(
            &p,
            "date,is_outlier,delivery_1,delivery_7,delivery_14,delivery_21,billing_1,billing_7,billing_14,billing_21\n\
             2026-01-04,1,0,1,0,0,0,0,1,0\n",
        )
        .unwrap();
        let cal = load_calendar(&p).unwrap();
        let mut s = toy_series();
        s.attach_calendar(&cal);
        assert!(s.days[0].is_outlier);
        assert!(s.days[0].delivery[1]);
        assert!(s.days[0].billing[2]);
        assert!(!s.days[1].is_outlier);
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_calendar(Path::new("/nonexistent/cal.csv")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("/nonexistent/cal.csv"), "message was: {msg}");
    }
}
