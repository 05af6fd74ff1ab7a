//! Calendar lookups for condition fields.

use chrono::{Datelike, NaiveDate};

use crate::error::{Error, Result};

/// Days in the given month.
pub fn month_length(year: i32, month: u32) -> Result<u32> {
    let first = NaiveDate::from_ymd_opt(year, month, 1)
        .ok_or_else(|| Error::invalid(format!("invalid year/month {year}-{month}")))?;
    let next = if month == 12 {
        NaiveDate::from_ymd_opt(year + 1, 1, 1)
    } else {
        NaiveDate::from_ymd_opt(year, month + 1, 1)
    }
    .ok_or_else(|| Error::invalid(format!("invalid year/month {year}-{month}")))?;
    Ok(next.signed_duration_since(first).num_days() as u32)
}

/// Weekday index (0 = Monday) of the first day of the month.
pub fn first_weekday_of_month(year: i32, month: u32) -> Result<u32> {
    let first = NaiveDate::from_ymd_opt(year, month, 1)
        .ok_or_else(|| Error::invalid(format!("invalid year/month {year}-{month}")))?;
    Ok(first.weekday().num_days_from_monday())
}
