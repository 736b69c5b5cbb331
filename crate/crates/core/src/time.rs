//! Timestamps, periods and the injectable clock.
//!
//! Timestamps are whole UTC seconds. They are written in ISO 8601 form
//! (`2019-10-01T00:00:00Z`) and read in either that form or the colon
//! separated `2019-10-01:00:00:00` form used in access requests.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TimeError {
    #[error("malformed timestamp: {0:?}")]
    MalformedTimestamp(String),
    #[error("malformed period: {0:?}")]
    MalformedPeriod(String),
}

/// UTC seconds since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(i64);

impl Timestamp {
    pub const fn from_unix(secs: i64) -> Self {
        Self(secs)
    }

    pub const fn unix(self) -> i64 {
        self.0
    }

    pub fn plus(self, secs: i64) -> Self {
        Self(self.0.saturating_add(secs))
    }

    /// Seconds elapsed from `earlier` to `self` (negative if `earlier` is later).
    pub fn since(self, earlier: Timestamp) -> i64 {
        self.0.saturating_sub(earlier.0)
    }

    pub fn now() -> Self {
        Self(Utc::now().timestamp())
    }
}

const COLON_FORMAT: &str = "%Y-%m-%d:%H:%M:%S";
const ISO_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

/// Parses `YYYY-MM-DD:hh:mm:ss` or `YYYY-MM-DDThh:mm:ssZ`, both as UTC.
pub fn parse_timestamp(text: &str) -> Result<Timestamp, TimeError> {
    let malformed = || TimeError::MalformedTimestamp(text.to_owned());
    // Both accepted forms are fixed width; chrono alone would also take
    // unpadded fields.
    if text.len() != 19 && text.len() != 20 {
        return Err(malformed());
    }
    NaiveDateTime::parse_from_str(text, ISO_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(text, COLON_FORMAT))
        .map(|dt| Timestamp(dt.and_utc().timestamp()))
        .map_err(|_| malformed())
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match DateTime::<Utc>::from_timestamp(self.0, 0) {
            Some(dt) => write!(f, "{}", dt.format(ISO_FORMAT)),
            None => write!(f, "@{}", self.0),
        }
    }
}

impl FromStr for Timestamp {
    type Err = TimeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_timestamp(s)
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_timestamp(&s).map_err(de::Error::custom)
    }
}

/// A positive duration in whole seconds, written as `hh:mm:ss`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Period(u64);

impl Period {
    pub const fn from_secs(secs: u64) -> Self {
        Self(secs)
    }

    pub const fn secs(self) -> u64 {
        self.0
    }
}

/// Parses `hh:mm:ss` into seconds. Hours may exceed 24 and take more than
/// two digits; minutes and seconds are two digits below 60.
pub fn parse_period(text: &str) -> Result<Period, TimeError> {
    let malformed = || TimeError::MalformedPeriod(text.to_owned());
    let mut parts = text.split(':');
    let (Some(h), Some(m), Some(s), None) = (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(malformed());
    };
    let digits = |p: &str| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit());
    if !digits(h) || h.len() < 2 || !digits(m) || m.len() != 2 || !digits(s) || s.len() != 2 {
        return Err(malformed());
    }
    let hours: u64 = h.parse().map_err(|_| malformed())?;
    let minutes: u64 = m.parse().map_err(|_| malformed())?;
    let seconds: u64 = s.parse().map_err(|_| malformed())?;
    if minutes >= 60 || seconds >= 60 {
        return Err(malformed());
    }
    hours
        .checked_mul(3600)
        .and_then(|h| h.checked_add(minutes * 60 + seconds))
        .map(Period)
        .ok_or_else(malformed)
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.0;
        write!(f, "{:02}:{:02}:{:02}", s / 3600, (s / 60) % 60, s % 60)
    }
}

impl FromStr for Period {
    type Err = TimeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_period(s)
    }
}

impl Serialize for Period {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Period {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct PeriodVisitor;

        impl Visitor<'_> for PeriodVisitor {
            type Value = Period;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an hh:mm:ss string or a whole number of seconds")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Period, E> {
                parse_period(v).map_err(E::custom)
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Period, E> {
                Ok(Period(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Period, E> {
                u64::try_from(v)
                    .map(Period)
                    .map_err(|_| E::custom("negative period"))
            }
        }

        deserializer.deserialize_any(PeriodVisitor)
    }
}

/// Source of "now" for every time-dependent check.
pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp::now()
    }
}

/// A clock that only moves when told to. Clones share the same time.
#[derive(Debug, Clone)]
pub struct ManualClock(Arc<AtomicI64>);

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        Self(Arc::new(AtomicI64::new(start.0)))
    }

    pub fn set(&self, at: Timestamp) {
        self.0.store(at.0, Ordering::SeqCst);
    }

    pub fn advance(&self, secs: i64) -> Timestamp {
        Timestamp(self.0.fetch_add(secs, Ordering::SeqCst) + secs)
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.0.load(Ordering::SeqCst))
    }
}
