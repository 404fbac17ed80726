//! Fixed-effect design matrices and covariance kernels for the day-by-period
//! grid.
//!
//! Observation order everywhere is day-major, period-minor: row `d * K + p`.
//! Day-level columns (weekday cell means, exogenous indicators) repeat across
//! a day's periods; profile columns interact a weekday group with a single
//! period. Aliased columns are detected and dropped deterministically, with
//! the drops recorded on the bundle.

use crate::data::{CalendarDay, CYCLES};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Errors from design construction and kernel assembly.
#[derive(Debug, thiserror::Error)]
pub enum DesignError {
    #[error("correlation parameter {value} outside (-1, 1)")]
    CorrelationOutOfRange { value: f64 },
    #[error("variance parameter {value} must be nonnegative")]
    NegativeVariance { value: f64 },
    #[error("unknown cycle {0}; valid cycles are 1, 7, 14, 21")]
    UnknownCycle(u8),
    #[error("design has no rows")]
    EmptyDesign,
}

/// Weekday-profile grouping for the period fixed effects.
///
/// `MultiPattern` gives every weekday its own within-day profile (the richest
/// structure); `ThreePattern` shares one profile across Monday..Thursday and
/// keeps Sunday and Friday separate, trading flexibility for fewer columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatternSpec {
    MultiPattern,
    ThreePattern,
}

impl PatternSpec {
    /// The weekday groups, as lists of weekday indices (Sunday = 1).
    pub fn groups(self) -> Vec<Vec<u8>> {
        match self {
            PatternSpec::MultiPattern => (1..=6).map(|w| vec![w]).collect(),
            PatternSpec::ThreePattern => vec![vec![1], vec![2, 3, 4, 5], vec![6]],
        }
    }
}

/// A day-level exogenous indicator column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ExogenousField {
    /// Delivery-period indicator for one billing cycle (1, 7, 14, or 21).
    Delivery(u8),
    /// Billing-day indicator for one billing cycle.
    Billing(u8),
    /// Union of the four delivery indicators.
    GlobalDelivery,
}

impl ExogenousField {
    fn cycle_slot(cycle: u8) -> Result<usize, DesignError> {
        CYCLES
            .iter()
            .position(|&c| c == cycle)
            .ok_or(DesignError::UnknownCycle(cycle))
    }

    /// Validate the cycle tag.
    pub fn validated(self) -> Result<Self, DesignError> {
        match self {
            ExogenousField::Delivery(c) | ExogenousField::Billing(c) => {
                Self::cycle_slot(c)?;
            }
            ExogenousField::GlobalDelivery => {}
        }
        Ok(self)
    }

    /// Indicator value on a given day.
    pub fn value(&self, day: &CalendarDay) -> f64 {
        let on = match self {
            ExogenousField::Delivery(c) => day.delivery[Self::cycle_slot(*c).expect("validated")],
            ExogenousField::Billing(c) => day.billing[Self::cycle_slot(*c).expect("validated")],
            ExogenousField::GlobalDelivery => day.any_delivery(),
        };
        if on {
            1.0
        } else {
            0.0
        }
    }
}

impl std::fmt::Display for ExogenousField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExogenousField::Delivery(c) => write!(f, "delivery_{c}"),
            ExogenousField::Billing(c) => write!(f, "billing_{c}"),
            ExogenousField::GlobalDelivery => write!(f, "global_delivery"),
        }
    }
}

impl std::str::FromStr for ExogenousField {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "global_delivery" {
            return Ok(ExogenousField::GlobalDelivery);
        }
        let parse_cycle = |rest: &str| -> Result<u8, String> {
            let c: u8 = rest
                .parse()
                .map_err(|_| format!("bad cycle in exogenous field '{s}'"))?;
            if CYCLES.contains(&c) {
                Ok(c)
            } else {
                Err(format!("unknown cycle {c}; valid cycles are 1, 7, 14, 21"))
            }
        };
        if let Some(rest) = s.strip_prefix("delivery_") {
            return Ok(ExogenousField::Delivery(parse_cycle(rest)?));
        }
        if let Some(rest) = s.strip_prefix("billing_") {
            return Ok(ExogenousField::Billing(parse_cycle(rest)?));
        }
        Err(format!(
            "unknown exogenous field '{s}' (expected delivery_C, billing_C, or global_delivery)"
        ))
    }
}

impl TryFrom<String> for ExogenousField {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<ExogenousField> for String {
    fn from(f: ExogenousField) -> String {
        f.to_string()
    }
}

/// Which fixed effects enter the model: the within-day profile pattern plus
/// any day-level exogenous indicators. Weekday cell means are always present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffectsSpec {
    pub pattern: PatternSpec,
    #[serde(default)]
    pub exogenous: Vec<ExogenousField>,
}

impl FixedEffectsSpec {
    pub fn new(pattern: PatternSpec, exogenous: Vec<ExogenousField>) -> Self {
        FixedEffectsSpec { pattern, exogenous }
    }
}

/// Inter-day (day random effect) covariance family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterDayKind {
    /// Stationary AR(1) over true calendar-day gaps.
    Ar1,
    /// No day random effect.
    None,
}

/// Intra-day (within-day residual) covariance family on the period grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntraKind {
    /// AR(1) in the period index.
    Ar1,
    /// ARMA(1,1): AR(1) decay away from the diagonal, scaled by a free
    /// lag-one factor.
    Arma11,
}

/// Treatment of the transform-induced sampling variance on the diagonal.
///
/// The root transform of a Poisson count has variance close to 1/4, so the
/// default fixes it there rather than spending data estimating it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Sigma2Mode {
    Fixed(f64),
    Estimated,
}

impl Default for Sigma2Mode {
    fn default() -> Self {
        Sigma2Mode::Fixed(0.25)
    }
}

/// Covariance side of a model: day effect, within-day structure, diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub inter: InterDayKind,
    pub intra: IntraKind,
    #[serde(default)]
    pub sigma2: Sigma2Mode,
}

impl Default for CovarianceSpec {
    fn default() -> Self {
        CovarianceSpec {
            inter: InterDayKind::Ar1,
            intra: IntraKind::Ar1,
            sigma2: Sigma2Mode::default(),
        }
    }
}

/// One column of the fixed-effects design, defined by what it indicates so
/// rows can be built for any day, not just the days the design was built on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnDef {
    /// Weekday cell mean: 1 on days of this weekday, constant over periods.
    Weekday { weekday: u8 },
    /// Day-level exogenous indicator, constant over periods.
    Exogenous { field: ExogenousField },
    /// Profile interaction: 1 when the day's weekday is in the group and the
    /// row's period equals `period` (1-based).
    Profile { weekdays: Vec<u8>, period: usize },
}

impl ColumnDef {
    /// Column value at (day, period) with `period` 0-based.
    pub fn value(&self, day: &CalendarDay, period: usize) -> f64 {
        match self {
            ColumnDef::Weekday { weekday } => {
                if day.weekday == *weekday {
                    1.0
                } else {
                    0.0
                }
            }
            ColumnDef::Exogenous { field } => field.value(day),
            ColumnDef::Profile { weekdays, period: p } => {
                if weekdays.contains(&day.weekday) && period + 1 == *p {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Short human-readable name, used in reports and drop records.
    pub fn name(&self) -> String {
        const WD: [&str; 7] = ["", "sun", "mon", "tue", "wed", "thu", "fri"];
        match self {
            ColumnDef::Weekday { weekday } => format!("wd_{}", WD[*weekday as usize]),
            ColumnDef::Exogenous { field } => field.to_string(),
            ColumnDef::Profile { weekdays, period } => {
                let g: Vec<&str> = weekdays.iter().map(|&w| WD[w as usize]).collect();
                format!("prof_{}_p{:02}", g.join(""), period)
            }
        }
    }
}

/// A built fixed-effects design: the kept column definitions, the rows for
/// the days it was built on, and a record of aliased columns that were
/// dropped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignBundle {
    pub k: usize,
    /// Kept columns, in listed order.
    pub columns: Vec<ColumnDef>,
    /// Names of columns dropped by the aliasing rule, in drop order.
    pub dropped: Vec<String>,
    /// Design rows (days x K by columns) for the build days.
    pub x: DMatrix<f64>,
}

impl DesignBundle {
    /// Number of kept columns.
    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    /// Column names in order.
    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name()).collect()
    }

    /// Build design rows for an arbitrary day list using the kept columns.
    pub fn rows_for(&self, days: &[CalendarDay]) -> DMatrix<f64> {
        build_rows(days, self.k, &self.columns)
    }
}

/// Design rows for arbitrary days from an explicit column list, period-minor
/// within each day.
pub fn design_rows(days: &[CalendarDay], k: usize, defs: &[ColumnDef]) -> DMatrix<f64> {
    build_rows(days, k, defs)
}

fn build_rows(days: &[CalendarDay], k: usize, defs: &[ColumnDef]) -> DMatrix<f64> {
    let n = days.len() * k;
    let mut x = DMatrix::zeros(n, defs.len());
    for (j, def) in defs.iter().enumerate() {
        for (d, day) in days.iter().enumerate() {
            for p in 0..k {
                x[(d * k + p, j)] = def.value(day, p);
            }
        }
    }
    x
}

/// All candidate columns for a fixed-effects spec, in listed order: weekday
/// cell means, then exogenous indicators, then profile interactions
/// (group-major, period-minor).
pub fn candidate_columns(fx: &FixedEffectsSpec, k: usize) -> Vec<ColumnDef> {
    let mut defs = Vec::new();
    for w in 1..=6 {
        defs.push(ColumnDef::Weekday { weekday: w });
    }
    for field in &fx.exogenous {
        defs.push(ColumnDef::Exogenous { field: *field });
    }
    for group in fx.pattern.groups() {
        for p in 1..=k {
            defs.push(ColumnDef::Profile {
                weekdays: group.clone(),
                period: p,
            });
        }
    }
    defs
}

/// Build the fixed-effects design for a window of days, dropping aliased
/// columns deterministically (a later-listed column aliased with earlier
/// ones is the one dropped).
pub fn build_design(
    days: &[CalendarDay],
    k: usize,
    fx: &FixedEffectsSpec,
) -> Result<DesignBundle, DesignError> {
    if days.is_empty() || k == 0 {
        return Err(DesignError::EmptyDesign);
    }
    let defs = candidate_columns(fx, k);
    let full = build_rows(days, k, &defs);
    let (kept, dropped) = greedy_independent_columns(&full, 1e-8);
    let columns: Vec<ColumnDef> = kept.iter().map(|&j| defs[j].clone()).collect();
    let dropped_names: Vec<String> = dropped.iter().map(|&j| defs[j].name()).collect();
    let x = full.select_columns(&kept);
    Ok(DesignBundle {
        k,
        columns,
        dropped: dropped_names,
        x,
    })
}

/// Greedy rank filter: walk columns in order, keep a column when it is not
/// (numerically) in the span of the columns kept so far.
///
/// Returns (kept, dropped) column indices. The tolerance is relative to the
/// column's own norm, so indicator designs behave the same at any row count.
pub fn greedy_independent_columns(x: &DMatrix<f64>, tol: f64) -> (Vec<usize>, Vec<usize>) {
    let n = x.nrows();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..x.ncols() {
        let mut v = DVector::from_column_slice(x.column(j).as_slice());
        let norm0 = v.norm();
        if norm0 == 0.0 {
            dropped.push(j);
            continue;
        }
        // Two rounds of modified Gram-Schmidt for numerical stability.
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        if v.norm() > tol * norm0.max(1.0) {
            basis.push(v.normalize());
            kept.push(j);
        } else {
            dropped.push(j);
        }
    }
    debug_assert!(basis.len() <= n);
    (kept, dropped)
}

/// Matrix of true calendar gaps (days) between every pair of days.
pub fn day_gap_matrix(days: &[CalendarDay]) -> DMatrix<f64> {
    let d = days.len();
    DMatrix::from_fn(d, d, |i, j| {
        crate::data::true_date_gap(days[i].date, days[j].date) as f64
    })
}

/// Cross-gap matrix between two day lists (rows index `a`, columns index `b`).
pub fn cross_gap_matrix(a: &[CalendarDay], b: &[CalendarDay]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| {
        crate::data::true_date_gap(a[i].date, b[j].date) as f64
    })
}

/// Stationary AR(1) covariance over an explicit gap matrix:
/// `sigma2 * rho^gap`, with gaps in whole days.
///
/// Power decay over the true gap keeps the process stationary in calendar
/// time even though the stored series skips Saturdays and outliers.
pub fn ar1_kernel(
    sigma2: f64,
    rho: f64,
    gaps: &DMatrix<f64>,
) -> Result<DMatrix<f64>, DesignError> {
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(DesignError::NegativeVariance { value: sigma2 });
    }
    if !(rho.abs() < 1.0) {
        return Err(DesignError::CorrelationOutOfRange { value: rho });
    }
    Ok(gaps.map(|g| sigma2 * rho.powi(g.round() as i32)))
}

/// Intra-day AR(1) covariance on `K` unit-spaced periods:
/// `r_ij = sigma2 * rho^|i-j|`.
pub fn ar1_intra_kernel(sigma2: f64, rho: f64, k: usize) -> Result<DMatrix<f64>, DesignError> {
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(DesignError::NegativeVariance { value: sigma2 });
    }
    if !(rho.abs() < 1.0) {
        return Err(DesignError::CorrelationOutOfRange { value: rho });
    }
    Ok(DMatrix::from_fn(k, k, |i, j| {
        sigma2 * rho.powi((i as i32 - j as i32).abs())
    }))
}

/// Intra-day ARMA(1,1) covariance on `K` unit-spaced periods:
/// `r_ii = sigma2`, `r_ij = sigma2 * delta * rho^(|i-j| - 1)` off the
/// diagonal. Positive definiteness is not guaranteed for every (delta, rho)
/// pair; callers check it at factorization time.
pub fn arma11_kernel(
    sigma2: f64,
    delta: f64,
    rho: f64,
    k: usize,
) -> Result<DMatrix<f64>, DesignError> {
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(DesignError::NegativeVariance { value: sigma2 });
    }
    if !(rho.abs() < 1.0) {
        return Err(DesignError::CorrelationOutOfRange { value: rho });
    }
    if !(delta.abs() < 1.0) {
        return Err(DesignError::CorrelationOutOfRange { value: delta });
    }
    Ok(DMatrix::from_fn(k, k, |i, j| {
        let lag = (i as i32 - j as i32).abs();
        if lag == 0 {
            sigma2
        } else {
            sigma2 * delta * rho.powi(lag - 1)
        }
    }))
}

/// Assemble the full day-by-period covariance grid
/// `V = G (x) J_K + I_D (x) R + sigma2 * I` in day-major row order.
///
/// This is the dense reference form; the fitting path never materializes it
/// for real problem sizes, but tests and small examples do.
pub fn assemble_v(g: &DMatrix<f64>, r: &DMatrix<f64>, sigma2: f64) -> DMatrix<f64> {
    let d = g.nrows();
    let k = r.nrows();
    assert_eq!(g.ncols(), d, "G must be square");
    assert_eq!(r.ncols(), k, "R must be square");
    let n = d * k;
    DMatrix::from_fn(n, n, |row, col| {
        let (di, pi) = (row / k, row % k);
        let (dj, pj) = (col / k, col % k);
        let mut v = g[(di, dj)];
        if di == dj {
            v += r[(pi, pj)];
            if pi == pj {
                v += sigma2;
            }
        }
        v
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CalendarDay;
    use approx::assert_abs_diff_eq;
    use chrono::NaiveDate;

    fn day(s: &str) -> CalendarDay {
        CalendarDay::regular(NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()).unwrap()
    }

    // Sun 2026-01-04 .. Fri 2026-01-09, then Sun 2026-01-11.
    fn week_days() -> Vec<CalendarDay> {
        ["2026-01-04", "2026-01-05", "2026-01-06", "2026-01-07", "2026-01-08", "2026-01-09", "2026-01-11"]
            .iter()
            .map(|s| day(s))
            .collect()
    }

    #[test]
    fn ar1_kernel_matches_hand_value() {
        let gaps = DMatrix::from_row_slice(2, 2, &[0.0, 7.0, 7.0, 0.0]);
        let g = ar1_kernel(2.0, 0.9, &gaps).unwrap();
        assert_abs_diff_eq!(g[(0, 1)], 0.9565938, epsilon = 1e-7);
        assert_abs_diff_eq!(g[(0, 0)], 2.0, epsilon = 1e-12);
        assert!(ar1_kernel(2.0, 1.0, &gaps).is_err());
        assert!(ar1_kernel(-1.0, 0.5, &gaps).is_err());
    }

    #[test]
    fn arma11_kernel_matches_hand_values() {
        let r = arma11_kernel(2.0, 0.3, 0.5, 4).unwrap();
        assert_abs_diff_eq!(r[(0, 0)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r[(0, 1)], 0.6, epsilon = 1e-12); // lag 1: sigma2 * delta
        assert_abs_diff_eq!(r[(0, 2)], 0.3, epsilon = 1e-12); // lag 2: sigma2 * delta * rho
        assert_abs_diff_eq!(r[(0, 3)], 0.15, epsilon = 1e-12);
    }

    #[test]
    fn ar1_reduces_to_arma_with_delta_equal_rho() {
        let a = ar1_intra_kernel(1.7, 0.45, 6).unwrap();
        let b = arma11_kernel(1.7, 0.45, 0.45, 6).unwrap();
        assert_abs_diff_eq!((a - b).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn assemble_v_layout_is_day_major() {
        let gaps = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let g = ar1_kernel(1.5, 0.5, &gaps).unwrap();
        let r = ar1_intra_kernel(1.0, 0.3, 2).unwrap();
        let v = assemble_v(&g, &r, 0.25);
        // Same day, same period: G_dd + R_pp + sigma2.
        assert_abs_diff_eq!(v[(0, 0)], 1.5 + 1.0 + 0.25, epsilon = 1e-12);
        // Same day, different periods: G_dd + R_01.
        assert_abs_diff_eq!(v[(0, 1)], 1.5 + 0.3, epsilon = 1e-12);
        // Different days: G only, regardless of periods.
        assert_abs_diff_eq!(v[(0, 2)], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(v[(1, 3)], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!((v.clone() - v.transpose()).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn multipattern_drops_one_profile_column_per_weekday() {
        let days = week_days();
        let k = 3;
        let fx = FixedEffectsSpec::new(PatternSpec::MultiPattern, vec![]);
        let b = build_design(&days, k, &fx).unwrap();
        // 6 weekday + 6 groups x (K-1) profile columns survive.
        assert_eq!(b.n_columns(), 6 + 6 * (k - 1));
        assert_eq!(b.dropped.len(), 6);
        // The dropped column in each group is the last-listed period.
        for name in &b.dropped {
            assert!(name.ends_with("_p03"), "dropped column was {name}");
        }
        // Design rebuilt for the same days reproduces the stored rows.
        assert_abs_diff_eq!((b.rows_for(&days) - &b.x).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn threepattern_groups_sun_monthu_fri() {
        let days = week_days();
        let fx = FixedEffectsSpec::new(PatternSpec::ThreePattern, vec![]);
        let b = build_design(&days, 2, &fx).unwrap();
        assert_eq!(b.n_columns(), 6 + 3 * 1);
        assert_eq!(b.dropped.len(), 3);
        let names = b.column_names();
        assert!(names.iter().any(|n| n == "prof_montuewedthu_p01"));
    }

    #[test]
    fn all_zero_exogenous_column_is_dropped() {
        let days = week_days(); // no flags set anywhere
        let fx = FixedEffectsSpec::new(
            PatternSpec::ThreePattern,
            vec![ExogenousField::Billing(14)],
        );
        let b = build_design(&days, 2, &fx).unwrap();
        assert!(b.dropped.iter().any(|n| n == "billing_14"));
    }

    #[test]
    fn global_delivery_is_union_of_cycles() {
        let mut d = day("2026-01-05");
        assert_eq!(ExogenousField::GlobalDelivery.value(&d), 0.0);
        d.delivery[2] = true;
        assert_eq!(ExogenousField::GlobalDelivery.value(&d), 1.0);
        assert_eq!(ExogenousField::Delivery(14).value(&d), 1.0);
        assert_eq!(ExogenousField::Delivery(7).value(&d), 0.0);
    }

    #[test]
    fn exogenous_field_string_round_trip() {
        for s in ["delivery_1", "delivery_21", "billing_14", "global_delivery"] {
            let f: ExogenousField = s.parse().unwrap();
            assert_eq!(f.to_string(), s);
        }
        assert!("billing_3".parse::<ExogenousField>().is_err());
        assert!("holiday".parse::<ExogenousField>().is_err());
    }

    #[test]
    fn gap_matrices_use_true_dates() {
        let days = week_days();
        let g = day_gap_matrix(&days);
        assert_eq!(g[(0, 6)], 7.0); // Sunday to next Sunday
        assert_eq!(g[(5, 6)], 2.0); // Friday to next Sunday
        let cross = cross_gap_matrix(&days[..2], &days[5..]);
        assert_eq!(cross[(0, 0)], 5.0);
        assert_eq!(cross[(1, 1)], 6.0);
    }
}
