//! Progress proxies, monthly summaries and the maintenance step-down check.
//!
//! All values are recomputed from [`SessionRecord`]s, which are themselves
//! folded from the event log. Nothing here keeps state.

use crate::events::SessionRecord;
use crate::types::{day_index, SessionType};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Length of a program month in days. Months are counted from the day of
/// the first recorded session.
pub const MONTH_DAYS: i64 = 28;
pub const MIN_WINDOW_DAYS: u32 = 7;

#[derive(Debug, Error, PartialEq)]
pub enum ProgressError {
    #[error("no session records")]
    EmptyRecords,
    #[error("window of {0} days is shorter than {MIN_WINDOW_DAYS}")]
    WindowTooShort(u32),
    #[error("records are not in time order at index {0}")]
    NotTimeOrdered(usize),
    #[error("no records in month {0}")]
    EmptyMonth(u32),
    #[error("maintenance needs two months of history, found {0}")]
    InsufficientHistory(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub day: i64,
    pub opening_activation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub index: u32,
    /// First day of the window.
    pub start_day: i64,
    /// One past the last day of the window.
    pub end_day: i64,
    pub sessions: u32,
    pub practice_sessions: u32,
    pub mean_opening_activation: Option<f64>,
    /// Share of practice sessions reaching at least Layer 2.
    pub layer2_proportion: Option<f64>,
    /// Share of practice sessions reaching Layer 3.
    pub layer3_proportion: Option<f64>,
    pub median_latency_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyReport {
    pub window_days: u32,
    pub origin_day: i64,
    /// Opening activation of every practice session, oldest first.
    pub activation_trajectory: Vec<TrajectoryPoint>,
    /// Least-squares trend in activation points per week.
    pub slope_per_week: Option<f64>,
    pub windows: Vec<WindowStats>,
    pub first_window_mean: Option<f64>,
    pub last_window_mean: Option<f64>,
    /// Decline from the first to the last window mean, relative to the first.
    pub activation_reduction_pct: Option<f64>,
}

fn check_order(records: &[SessionRecord]) -> Result<(), ProgressError> {
    if records.is_empty() {
        return Err(ProgressError::EmptyRecords);
    }
    match records.windows(2).position(|w| w[1].opened_at < w[0].opened_at) {
        Some(i) => Err(ProgressError::NotTimeOrdered(i + 1)),
        None => Ok(()),
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 0 { (v[mid - 1] + v[mid]) / 2.0 } else { v[mid] })
}

/// Ordinary least-squares slope of `y` on `x`. `None` without spread in `x`.
pub fn least_squares_slope(points: &[(f64, f64)]) -> Option<f64> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

fn reduction_pct(first: f64, last: f64) -> Option<f64> {
    (first != 0.0).then(|| (first - last) / first * 100.0)
}

#[derive(Debug, Default)]
struct Tally {
    sessions: u32,
    openings: Vec<f64>,
    layer2: u32,
    layer3: u32,
    latencies: Vec<f64>,
}

impl Tally {
    fn add(&mut self, r: &SessionRecord) {
        self.sessions += 1;
        self.latencies.extend(r.latencies_ms.iter().map(|&l| l as f64));
        if r.session_type.is_practice() {
            self.openings.push(r.opening_activation);
            self.layer2 += u32::from(r.max_layer_reached >= 2);
            self.layer3 += u32::from(r.max_layer_reached == 3);
        }
    }

    fn practice(&self) -> u32 {
        self.openings.len() as u32
    }

    fn proportion(&self, hits: u32) -> Option<f64> {
        (self.practice() > 0).then(|| hits as f64 / self.practice() as f64)
    }
}

/// Computes the three proxies over consecutive `window_days` windows starting
/// at the first record's day. Real-world sessions count toward latency but
/// not toward the activation trajectory or the layer proportions, since they
/// open in an already activated state.
pub fn compute_proxies(records: &[SessionRecord], window_days: u32) -> Result<ProxyReport, ProgressError> {
    if window_days < MIN_WINDOW_DAYS {
        return Err(ProgressError::WindowTooShort(window_days));
    }
    check_order(records)?;
    let origin = day_index(records[0].opened_at);
    let last = day_index(records[records.len() - 1].opened_at);
    let w = i64::from(window_days);
    let count = ((last - origin) / w + 1) as usize;

    let mut tallies: Vec<Tally> = (0..count).map(|_| Tally::default()).collect();
    let mut trajectory = Vec::new();
    for r in records {
        let day = day_index(r.opened_at);
        tallies[((day - origin) / w) as usize].add(r);
        if r.session_type.is_practice() {
            trajectory.push(TrajectoryPoint {
                day,
                opening_activation: r.opening_activation,
            });
        }
    }

    let windows: Vec<WindowStats> = tallies
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let start = origin + i as i64 * w;
            WindowStats {
                index: i as u32,
                start_day: start,
                end_day: start + w,
                sessions: t.sessions,
                practice_sessions: t.practice(),
                mean_opening_activation: mean(&t.openings),
                layer2_proportion: t.proportion(t.layer2),
                layer3_proportion: t.proportion(t.layer3),
                median_latency_ms: median(&t.latencies),
            }
        })
        .collect();

    let points: Vec<(f64, f64)> = trajectory.iter().map(|p| (p.day as f64, p.opening_activation)).collect();
    let first_window_mean = windows.iter().find_map(|w| w.mean_opening_activation);
    let last_window_mean = windows.iter().rev().find_map(|w| w.mean_opening_activation);
    Ok(ProxyReport {
        window_days,
        origin_day: origin,
        slope_per_week: least_squares_slope(&points).map(|s| s * 7.0),
        activation_trajectory: trajectory,
        windows,
        first_window_mean,
        last_window_mean,
        activation_reduction_pct: first_window_mean.zip(last_window_mean).and_then(|(f, l)| reduction_pct(f, l)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaintenanceThresholds {
    /// Highest monthly mean opening activation treated as normal range.
    pub activation_normal_max: f64,
    pub layer3_min_proportion: f64,
    pub consecutive_months: u32,
    pub step_down_sessions_per_week: u32,
}

impl Default for MaintenanceThresholds {
    fn default() -> Self {
        Self {
            activation_normal_max: 4.0,
            layer3_min_proportion: 0.6,
            consecutive_months: 2,
            step_down_sessions_per_week: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SessionCounts {
    pub daily: u32,
    pub weekly_deep: u32,
    pub real_world: u32,
    pub total: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub first: f64,
    pub last: f64,
    pub mean: f64,
    /// `(first - last) / first * 100`; positive means activation fell.
    pub reduction_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryActivation {
    pub category: String,
    pub mean_opening_activation: f64,
    pub contact_events: u32,
}

/// Aggregate for one program month. Holds numbers and category labels only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthlySummary {
    pub month: u32,
    pub start_day: i64,
    pub end_day: i64,
    pub session_counts: SessionCounts,
    pub activation: Option<ActivationStats>,
    pub layer2_proportion: Option<f64>,
    pub layer3_proportion: Option<f64>,
    pub max_stimulus_level: u8,
    /// Most activating first.
    pub category_ranking: Vec<CategoryActivation>,
    pub top_activating_category: Option<String>,
    pub least_activating_category: Option<String>,
    pub median_latency_ms: Option<f64>,
    pub maintenance_thresholds: MaintenanceThresholds,
}

/// 1-based program month of `timestamp_ms`, counted from `origin_day`.
pub fn month_of(origin_day: i64, timestamp_ms: u64) -> u32 {
    ((day_index(timestamp_ms) - origin_day).max(0) / MONTH_DAYS) as u32 + 1
}

/// Number of program months spanned by the records.
pub fn months_covered(records: &[SessionRecord]) -> u32 {
    match (records.first(), records.last()) {
        (Some(f), Some(l)) => month_of(day_index(f.opened_at), l.opened_at),
        _ => 0,
    }
}

pub fn generate_monthly_summary(records: &[SessionRecord], month: u32) -> Result<MonthlySummary, ProgressError> {
    generate_monthly_summary_with(records, month, &MaintenanceThresholds::default())
}

pub fn generate_monthly_summary_with(
    records: &[SessionRecord],
    month: u32,
    thresholds: &MaintenanceThresholds,
) -> Result<MonthlySummary, ProgressError> {
    check_order(records)?;
    let origin = day_index(records[0].opened_at);
    let in_month: Vec<&SessionRecord> = records
        .iter()
        .filter(|r| month_of(origin, r.opened_at) == month)
        .collect();
    if month == 0 || in_month.is_empty() {
        return Err(ProgressError::EmptyMonth(month));
    }

    let mut counts = SessionCounts::default();
    let mut tally = Tally::default();
    let mut categories: BTreeMap<&str, (f64, u32)> = BTreeMap::new();
    let mut max_level = 0;
    for r in &in_month {
        match r.session_type {
            SessionType::Daily => counts.daily += 1,
            SessionType::WeeklyDeep => counts.weekly_deep += 1,
            SessionType::RealWorld => counts.real_world += 1,
        }
        counts.total += 1;
        tally.add(r);
        if r.session_type.is_practice() {
            max_level = max_level.max(r.stimulus_level);
            for c in &r.contacts {
                let slot = categories.entry(c.category.as_str()).or_default();
                slot.0 += r.opening_activation;
                slot.1 += 1;
            }
        }
    }

    let activation = match (tally.openings.first(), tally.openings.last(), mean(&tally.openings)) {
        (Some(&first), Some(&last), Some(mean)) => Some(ActivationStats {
            first,
            last,
            mean,
            reduction_pct: reduction_pct(first, last),
        }),
        _ => None,
    };

    let mut ranking: Vec<CategoryActivation> = categories
        .into_iter()
        .map(|(category, (sum, n))| CategoryActivation {
            category: category.to_string(),
            mean_opening_activation: sum / n as f64,
            contact_events: n,
        })
        .collect();
    ranking.sort_by(|a, b| {
        b.mean_opening_activation
            .total_cmp(&a.mean_opening_activation)
            .then_with(|| a.category.cmp(&b.category))
    });

    Ok(MonthlySummary {
        month,
        start_day: origin + (month as i64 - 1) * MONTH_DAYS,
        end_day: origin + month as i64 * MONTH_DAYS,
        session_counts: counts,
        activation,
        layer2_proportion: tally.proportion(tally.layer2),
        layer3_proportion: tally.proportion(tally.layer3),
        max_stimulus_level: max_level,
        top_activating_category: ranking.first().map(|c| c.category.clone()),
        least_activating_category: ranking.last().map(|c| c.category.clone()),
        category_ranking: ranking,
        median_latency_ms: median(&tally.latencies),
        maintenance_thresholds: *thresholds,
    })
}

/// Patient's own report of improved daily functioning for a program month.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctioningReport {
    pub month: u32,
    pub improved: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaintenanceCriteria {
    pub activation_in_normal_range: bool,
    pub layer3_consistent: bool,
    pub functioning_improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaintenanceDecision {
    pub step_down: bool,
    /// Each criterion holds in every one of the evaluated months.
    pub criteria: MaintenanceCriteria,
    pub months: Vec<u32>,
    pub current_level: u8,
    /// Practice target once stepped down.
    pub sessions_per_week_target: Option<u32>,
}

/// Checks the three step-down criteria over the last complete run of months.
///
/// Activation is compared at the current daily level only: the monthly mean
/// opening activation of practice sessions at that level.
pub fn evaluate_maintenance(
    records: &[SessionRecord],
    functioning: &[FunctioningReport],
    thresholds: &MaintenanceThresholds,
) -> Result<MaintenanceDecision, ProgressError> {
    check_order(records)?;
    let needed = thresholds.consecutive_months.max(1);
    let covered = months_covered(records);
    if covered < needed {
        return Err(ProgressError::InsufficientHistory(covered));
    }
    let origin = day_index(records[0].opened_at);
    let current_level = records
        .iter()
        .rev()
        .find(|r| r.session_type == SessionType::Daily)
        .or_else(|| records.last())
        .map_or(1, |r| r.stimulus_level);

    let months: Vec<u32> = (covered + 1 - needed..=covered).collect();
    let mut criteria = MaintenanceCriteria {
        activation_in_normal_range: true,
        layer3_consistent: true,
        functioning_improved: true,
    };
    for &m in &months {
        let practice: Vec<&SessionRecord> = records
            .iter()
            .filter(|r| r.session_type.is_practice() && month_of(origin, r.opened_at) == m)
            .collect();
        let at_level: Vec<f64> = practice
            .iter()
            .filter(|r| r.stimulus_level == current_level)
            .map(|r| r.opening_activation)
            .collect();
        let activation_ok = mean(&at_level).is_some_and(|a| a <= thresholds.activation_normal_max);
        let layer3 = practice.iter().filter(|r| r.max_layer_reached == 3).count();
        let layer3_ok = !practice.is_empty() && layer3 as f64 / practice.len() as f64 >= thresholds.layer3_min_proportion;
        let functioning_ok = functioning.iter().any(|f| f.month == m && f.improved);
        criteria.activation_in_normal_range &= activation_ok;
        criteria.layer3_consistent &= layer3_ok;
        criteria.functioning_improved &= functioning_ok;
    }
    let step_down = criteria.activation_in_normal_range && criteria.layer3_consistent && criteria.functioning_improved;
    Ok(MaintenanceDecision {
        step_down,
        criteria,
        months,
        current_level,
        sessions_per_week_target: step_down.then_some(thresholds.step_down_sessions_per_week),
    })
}
