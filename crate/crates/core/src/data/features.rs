use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};

use crate::error::{Error, Result};

/// Number of channels in a [`TimeFeatureVector`].
pub const TIME_FEATURE_DIM: usize = 7;

const SECONDS_PER_YEAR: f64 = 365.25 * 86_400.0;

fn reference_epoch() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2000, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
}

/// Seconds since 2000-01-01 00:00:00.
pub fn epoch_seconds(ts: NaiveDateTime) -> f64 {
    (ts - reference_epoch()).num_seconds() as f64
}

pub fn from_epoch_seconds(secs: f64) -> NaiveDateTime {
    reference_epoch() + chrono::Duration::milliseconds((secs * 1000.0).round() as i64)
}

/// Time and calendar covariates of one observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeFeatureVector {
    /// Position inside the window span, in `[0, 1]`.
    pub relative_time: f64,
    /// Centuries since 2000-01-01.
    pub absolute_time: f64,
    pub month: f64,
    pub day: f64,
    pub weekday: f64,
    pub hour: f64,
    pub minute: f64,
}

impl TimeFeatureVector {
    pub fn to_array(&self) -> [f64; TIME_FEATURE_DIM] {
        [
            self.relative_time,
            self.absolute_time,
            self.month,
            self.day,
            self.weekday,
            self.hour,
            self.minute,
        ]
    }

    /// Calendar channels with their names, for range checks.
    pub fn calendar_fields(&self) -> [(&'static str, f64); 5] {
        [
            ("month", self.month),
            ("day", self.day),
            ("weekday", self.weekday),
            ("hour", self.hour),
            ("minute", self.minute),
        ]
    }

    /// A vector carrying only a relative time; every other channel is zero.
    pub fn time_only(relative_time: f64) -> Self {
        Self {
            relative_time,
            absolute_time: 0.0,
            month: 0.0,
            day: 0.0,
            weekday: 0.0,
            hour: 0.0,
            minute: 0.0,
        }
    }
}

/// Time features of `timestamp` inside the span `[start, end]`.
///
/// Calendar fields follow the `(value - low) / (high - low) - 0.5` scaling, so
/// each lies in `[-0.5, 0.5]`.
pub fn time_features(
    timestamp: NaiveDateTime,
    span: (NaiveDateTime, NaiveDateTime),
) -> Result<TimeFeatureVector> {
    let (start, end) = span;
    if start >= end {
        return Err(Error::DegenerateSpan);
    }
    let t = epoch_seconds(timestamp);
    let (t0, t1) = (epoch_seconds(start), epoch_seconds(end));
    Ok(TimeFeatureVector {
        relative_time: (t - t0) / (t1 - t0),
        absolute_time: t / SECONDS_PER_YEAR / 100.0,
        month: (timestamp.month() as f64 - 1.0) / 11.0 - 0.5,
        day: (timestamp.day() as f64 - 1.0) / 30.0 - 0.5,
        weekday: timestamp.weekday().num_days_from_monday() as f64 / 6.0 - 0.5,
        hour: timestamp.hour() as f64 / 23.0 - 0.5,
        minute: timestamp.minute() as f64 / 59.0 - 0.5,
    })
}
