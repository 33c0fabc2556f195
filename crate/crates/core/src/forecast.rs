//! Daily consumption rates and restock alerts.

use std::collections::BTreeMap;

use chrono::{DateTime, Days, NaiveDate, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inventory::{utc_day, ChemicalSummary, ConsumptionEntry};

pub const DEFAULT_ALPHA: f64 = 0.3;
const MS_PER_DAY: f64 = 86_400_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForecastError {
    #[error("alpha must be in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("daily total must be a non-negative number, got {0}")]
    NegativeDayTotal(f64),
    #[error("remaining quantity must be a non-negative number, got {0}")]
    NegativeRemaining(f64),
    #[error("day {day} is not after the last update {last}")]
    OutOfOrder { day: NaiveDate, last: NaiveDate },
}

pub fn check_alpha(alpha: f64) -> Result<(), ForecastError> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(ForecastError::InvalidAlpha(alpha))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub chemical_id: String,
    pub ewma_g_per_day: f64,
    pub alpha: f64,
    pub last_update_day: Option<NaiveDate>,
    pub days_observed: u32,
}

impl RateEstimate {
    pub fn new(chemical_id: impl Into<String>, alpha: f64) -> Result<Self, ForecastError> {
        check_alpha(alpha)?;
        Ok(RateEstimate {
            chemical_id: chemical_id.into(),
            ewma_g_per_day: 0.0,
            alpha,
            last_update_day: None,
            days_observed: 0,
        })
    }
}

/// Folds one day's consumption into the estimate. The first observation
/// initializes the average.
pub fn update_rate(
    est: &RateEstimate,
    day_total_g: f64,
    day: NaiveDate,
) -> Result<RateEstimate, ForecastError> {
    check_alpha(est.alpha)?;
    if !(day_total_g >= 0.0 && day_total_g.is_finite()) {
        return Err(ForecastError::NegativeDayTotal(day_total_g));
    }
    if let Some(last) = est.last_update_day {
        if day <= last {
            return Err(ForecastError::OutOfOrder { day, last });
        }
    }
    let ewma = if est.days_observed == 0 {
        day_total_g
    } else {
        est.alpha * day_total_g + (1.0 - est.alpha) * est.ewma_g_per_day
    };
    Ok(RateEstimate {
        ewma_g_per_day: ewma,
        last_update_day: Some(day),
        days_observed: est.days_observed + 1,
        ..est.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DaysToEmpty {
    Days(f64),
    NoDepletion,
}

impl DaysToEmpty {
    pub fn days(self) -> Option<f64> {
        match self {
            DaysToEmpty::Days(d) => Some(d),
            DaysToEmpty::NoDepletion => None,
        }
    }
}

/// An empty stock is empty now, whatever the rate.
pub fn days_to_empty(remaining_g: f64, est: &RateEstimate) -> Result<DaysToEmpty, ForecastError> {
    if !(remaining_g >= 0.0) {
        return Err(ForecastError::NegativeRemaining(remaining_g));
    }
    if remaining_g == 0.0 {
        return Ok(DaysToEmpty::Days(0.0));
    }
    if est.ewma_g_per_day > 0.0 {
        Ok(DaysToEmpty::Days(remaining_g / est.ewma_g_per_day))
    } else {
        Ok(DaysToEmpty::NoDepletion)
    }
}

/// Per-day consumption, refills excluded.
pub fn daily_consumption<'a>(
    entries: impl IntoIterator<Item = &'a ConsumptionEntry>,
) -> BTreeMap<NaiveDate, f64> {
    let mut days = BTreeMap::new();
    for e in entries.into_iter().filter(|e| !e.refill) {
        *days.entry(utc_day(e.t_in_ms)).or_insert(0.0) += e.amount_g;
    }
    days
}

/// Runs the average over every day from the first recorded one through
/// `through`, counting days without records as zero use.
pub fn estimate_from_daily(
    chemical_id: &str,
    daily: &BTreeMap<NaiveDate, f64>,
    through: NaiveDate,
    alpha: f64,
) -> Result<RateEstimate, ForecastError> {
    let mut est = RateEstimate::new(chemical_id, alpha)?;
    let Some(mut day) = daily.keys().next().copied() else {
        return Ok(est);
    };
    while day <= through {
        let total = daily.get(&day).copied().unwrap_or(0.0).max(0.0);
        est = update_rate(&est, total, day)?;
        day = match day.checked_add_days(Days::new(1)) {
            Some(d) => d,
            None => break,
        };
    }
    Ok(est)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestockAlert {
    pub chemical_id: String,
    pub name: String,
    pub remaining_g: f64,
    pub ewma_g_per_day: f64,
    pub days_to_empty: f64,
    pub reorder_lead_time_days: f64,
    /// UTC ISO-8601.
    pub projected_empty: String,
}

/// Chemicals that run out within their reorder lead time. Chemicals without
/// an estimate are treated as unused.
pub fn restock_alerts(
    index: &[ChemicalSummary],
    estimates: &BTreeMap<String, RateEstimate>,
    now_ms: i64,
) -> Vec<RestockAlert> {
    let mut alerts = Vec::new();
    for ch in index {
        let remaining = ch.total_g.max(0.0);
        let est = estimates.get(&ch.chemical_id).cloned().unwrap_or(RateEstimate {
            chemical_id: ch.chemical_id.clone(),
            ewma_g_per_day: 0.0,
            alpha: DEFAULT_ALPHA,
            last_update_day: None,
            days_observed: 0,
        });
        let Ok(DaysToEmpty::Days(days)) = days_to_empty(remaining, &est) else {
            continue;
        };
        if days <= ch.reorder_lead_time_days {
            let empty_ms = now_ms.saturating_add((days * MS_PER_DAY).round() as i64);
            alerts.push(RestockAlert {
                chemical_id: ch.chemical_id.clone(),
                name: ch.name.clone(),
                remaining_g: remaining,
                ewma_g_per_day: est.ewma_g_per_day,
                days_to_empty: days,
                reorder_lead_time_days: ch.reorder_lead_time_days,
                projected_empty: iso_utc(empty_ms),
            });
        }
    }
    alerts
}

pub fn iso_utc(ms: i64) -> String {
    DateTime::<Utc>::from_timestamp_millis(ms)
        .unwrap_or(DateTime::<Utc>::MAX_UTC)
        .to_rfc3339_opts(SecondsFormat::Millis, true)
}
