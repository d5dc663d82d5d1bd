//! Hour-resolution UTC time. Timestamps are whole hours since the Unix epoch.

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, Timelike, Utc};

pub const HOURS_PER_YEAR: f64 = 24.0 * 365.25;

pub fn hour_from_ymd(year: i32, month: u32, day: u32) -> i64 {
    let d = NaiveDate::from_ymd_opt(year, month, day).expect("valid calendar date");
    d.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp() / 3600
}

/// Parses an ISO-8601 timestamp. Returns `Err` with a reason when the text is
/// malformed or does not fall exactly on the hour.
pub fn parse_hour(text: &str) -> Result<i64, String> {
    let text = text.trim();
    let dt: DateTime<Utc> = match DateTime::parse_from_rfc3339(text) {
        Ok(dt) => dt.with_timezone(&Utc),
        Err(_) => {
            let naive = NaiveDateTime::parse_from_str(text, "%Y-%m-%dT%H:%M:%S")
                .or_else(|_| NaiveDateTime::parse_from_str(text, "%Y-%m-%d %H:%M:%S"))
                .map_err(|e| format!("bad timestamp `{text}`: {e}"))?;
            naive.and_utc()
        }
    };
    let secs = dt.timestamp();
    if secs.rem_euclid(3600) != 0 {
        return Err(format!("timestamp `{text}` is not on the hour"));
    }
    Ok(secs / 3600)
}

pub fn format_hour(hour: i64) -> String {
    let dt = DateTime::<Utc>::from_timestamp(hour * 3600, 0).expect("in range");
    dt.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

pub fn hour_of_day(hour: i64) -> usize {
    hour.rem_euclid(24) as usize
}

/// Zero-based day of the year (0..=365).
pub fn day_of_year(hour: i64) -> usize {
    let dt = DateTime::<Utc>::from_timestamp(hour * 3600, 0).expect("in range");
    debug_assert_eq!(dt.hour() as i64, hour.rem_euclid(24));
    dt.ordinal0() as usize
}

/// First hour of the UTC day containing `hour`.
pub fn day_start(hour: i64) -> i64 {
    hour - hour.rem_euclid(24)
}
