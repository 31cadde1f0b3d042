//! Hourly day-ahead market data: CSV ingestion, calendar validation and
//! trailing windows.
//!
//! A [`MarketDataset`] always holds whole days of exactly 24 hours with one
//! price series and two exogenous day-ahead forecast series. Dates are
//! contiguous, so a day is addressed by its offset from the first date.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{Datelike, Days, NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

pub const HOURS: usize = 24;
pub const N_EXOG: usize = 2;

pub const CSV_HEADER: &str = "timestamp,price,exog1,exog2";

const TIMESTAMP_FORMATS: [&str; 4] = [
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IngestError {
    #[error("input is empty")]
    Empty,
    #[error("bad header {found:?}, expected {CSV_HEADER:?}")]
    Header { found: String },
    #[error("line {line}: blank lines are not allowed")]
    BlankLine { line: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing hour {timestamp}")]
    MissingHour { timestamp: String },
    #[error("duplicate hour {timestamp}")]
    DuplicateHour { timestamp: String },
    #[error("non-finite {column} at {timestamp}")]
    NonFinite { timestamp: String, column: String },
    #[error("calendar gap: no data for {missing} (previous day {previous})")]
    GapInCalendar { missing: String, previous: String },
}

/// How ingestion treats days that do not have exactly one row per hour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DstPolicy {
    /// Reject short or duplicated days.
    #[default]
    Strict,
    /// Interpolate a single missing hour per day and average duplicated hours.
    Repair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayRecord {
    pub date: NaiveDate,
    pub prices: [f64; HOURS],
    pub exog: [[f64; HOURS]; N_EXOG],
}

impl DayRecord {
    fn is_finite(&self) -> bool {
        self.prices.iter().all(|v| v.is_finite())
            && self.exog.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketDataset {
    days: Vec<DayRecord>,
    series_names: [String; 1 + N_EXOG],
}

/// Ingestion statistics reported alongside a parsed dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub days: usize,
    pub hours: usize,
    pub interpolated_hours: usize,
    pub averaged_hours: usize,
    pub first_date: Option<NaiveDate>,
    pub last_date: Option<NaiveDate>,
}

impl IngestSummary {
    pub fn repairs(&self) -> usize {
        self.interpolated_hours + self.averaged_hours
    }
}

impl fmt::Display for IngestSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} days, {} hours, {} repairs",
            self.days,
            self.hours,
            self.repairs()
        )?;
        if let (Some(a), Some(b)) = (self.first_date, self.last_date) {
            write!(f, " ({a} .. {b})")?;
        }
        Ok(())
    }
}

fn stamp(date: NaiveDate, hour: usize) -> String {
    format!("{date}T{hour:02}:00")
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// Parses the strict hourly CSV format (`timestamp,price,exog1,exog2`).
pub fn parse_dataset(csv_text: &str) -> Result<MarketDataset> {
    parse_dataset_with(csv_text, DstPolicy::Strict).map(|(ds, _)| ds)
}

pub fn parse_dataset_with(
    csv_text: &str,
    policy: DstPolicy,
) -> Result<(MarketDataset, IngestSummary)> {
    let mut lines = csv_text.lines().enumerate();
    let (_, header) = lines.next().ok_or(IngestError::Empty)?;
    let header = header.trim_start_matches('\u{feff}').trim();
    if header != CSV_HEADER {
        return Err(IngestError::Header {
            found: header.to_string(),
        }
        .into());
    }

    // date -> hour -> observed rows (price, exog1, exog2)
    let mut grid: BTreeMap<NaiveDate, Vec<Vec<[f64; 3]>>> = BTreeMap::new();
    let mut rows = 0usize;
    for (idx, raw) in lines {
        let line = idx + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            return Err(IngestError::BlankLine { line }.into());
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(IngestError::Parse {
                line,
                message: format!("expected 4 fields, found {}", fields.len()),
            }
            .into());
        }
        let ts = parse_timestamp(fields[0]).ok_or_else(|| IngestError::Parse {
            line,
            message: format!("unparseable timestamp {:?}", fields[0]),
        })?;
        if ts.minute() != 0 || ts.second() != 0 {
            return Err(IngestError::Parse {
                line,
                message: format!("timestamp {} is not on the hour", fields[0]),
            }
            .into());
        }
        let mut values = [0.0; 3];
        for (k, column) in ["price", "exog1", "exog2"].iter().enumerate() {
            let v: f64 = fields[k + 1].parse().map_err(|_| IngestError::Parse {
                line,
                message: format!("unparseable {column} {:?}", fields[k + 1]),
            })?;
            if !v.is_finite() {
                return Err(IngestError::NonFinite {
                    timestamp: stamp(ts.date(), ts.hour() as usize),
                    column: column.to_string(),
                }
                .into());
            }
            values[k] = v;
        }
        let slots = grid
            .entry(ts.date())
            .or_insert_with(|| vec![Vec::new(); HOURS]);
        let hour = ts.hour() as usize;
        if !slots[hour].is_empty() && policy == DstPolicy::Strict {
            return Err(IngestError::DuplicateHour {
                timestamp: stamp(ts.date(), hour),
            }
            .into());
        }
        slots[hour].push(values);
        rows += 1;
    }
    if grid.is_empty() {
        return Err(IngestError::Empty.into());
    }

    let mut summary = IngestSummary::default();
    let mut days = Vec::with_capacity(grid.len());
    let mut previous: Option<NaiveDate> = None;
    for (date, slots) in grid {
        if let Some(prev) = previous {
            let expected = prev + Days::new(1);
            if date != expected {
                return Err(IngestError::GapInCalendar {
                    missing: expected.to_string(),
                    previous: prev.to_string(),
                }
                .into());
            }
        }
        previous = Some(date);
        days.push(assemble_day(date, slots, policy, &mut summary)?);
    }
    debug_assert!(policy == DstPolicy::Repair || rows == days.len() * HOURS);

    summary.days = days.len();
    summary.hours = days.len() * HOURS;
    summary.first_date = days.first().map(|d| d.date);
    summary.last_date = days.last().map(|d| d.date);
    let ds = MarketDataset::from_days(default_names(), days)?;
    Ok((ds, summary))
}

fn assemble_day(
    date: NaiveDate,
    slots: Vec<Vec<[f64; 3]>>,
    policy: DstPolicy,
    summary: &mut IngestSummary,
) -> Result<DayRecord> {
    let mut values: Vec<Option<[f64; 3]>> = Vec::with_capacity(HOURS);
    for obs in &slots {
        match obs.len() {
            0 => values.push(None),
            1 => values.push(Some(obs[0])),
            k => {
                // only reachable in repair mode
                summary.averaged_hours += 1;
                let mut mean = [0.0; 3];
                for row in obs {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v / k as f64;
                    }
                }
                values.push(Some(mean));
            }
        }
    }
    let missing: Vec<usize> = (0..HOURS).filter(|&h| values[h].is_none()).collect();
    match (missing.len(), policy) {
        (0, _) => {}
        (1, DstPolicy::Repair) => {
            let h = missing[0];
            let before = (0..h).rev().find_map(|k| values[k]);
            let after = (h + 1..HOURS).find_map(|k| values[k]);
            let filled = match (before, after) {
                (Some(a), Some(b)) => [
                    0.5 * (a[0] + b[0]),
                    0.5 * (a[1] + b[1]),
                    0.5 * (a[2] + b[2]),
                ],
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => unreachable!("a day with one missing hour has 23 others"),
            };
            values[h] = Some(filled);
            summary.interpolated_hours += 1;
        }
        _ => {
            return Err(IngestError::MissingHour {
                timestamp: stamp(date, missing[0]),
            }
            .into())
        }
    }
    let mut rec = DayRecord {
        date,
        prices: [0.0; HOURS],
        exog: [[0.0; HOURS]; N_EXOG],
    };
    for (h, v) in values.into_iter().enumerate() {
        let v = v.expect("all hours filled");
        rec.prices[h] = v[0];
        rec.exog[0][h] = v[1];
        rec.exog[1][h] = v[2];
    }
    Ok(rec)
}

fn default_names() -> [String; 1 + N_EXOG] {
    ["price".into(), "exog1".into(), "exog2".into()]
}

impl MarketDataset {
    /// Builds a dataset from day records, checking contiguity and finiteness.
    pub fn from_days(series_names: [String; 1 + N_EXOG], days: Vec<DayRecord>) -> Result<Self> {
        if days.is_empty() {
            return Err(IngestError::Empty.into());
        }
        for pair in days.windows(2) {
            let expected = pair[0].date + Days::new(1);
            if pair[1].date != expected {
                return Err(IngestError::GapInCalendar {
                    missing: expected.to_string(),
                    previous: pair[0].date.to_string(),
                }
                .into());
            }
        }
        if let Some(bad) = days.iter().find(|d| !d.is_finite()) {
            let h = (0..HOURS)
                .find(|&h| {
                    !bad.prices[h].is_finite() || bad.exog.iter().any(|x| !x[h].is_finite())
                })
                .unwrap_or(0);
            return Err(IngestError::NonFinite {
                timestamp: stamp(bad.date, h),
                column: "value".into(),
            }
            .into());
        }
        Ok(Self { days, series_names })
    }

    pub fn from_records(days: Vec<DayRecord>) -> Result<Self> {
        Self::from_days(default_names(), days)
    }

    pub fn series_names(&self) -> &[String; 1 + N_EXOG] {
        &self.series_names
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    pub fn first_date(&self) -> NaiveDate {
        self.days[0].date
    }

    pub fn last_date(&self) -> NaiveDate {
        self.days[self.days.len() - 1].date
    }

    pub fn records(&self) -> &[DayRecord] {
        &self.days
    }

    pub fn into_records(self) -> Vec<DayRecord> {
        self.days
    }

    /// Offset of `date` from the first day, if present.
    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        let offset = (date - self.first_date()).num_days();
        (offset >= 0 && (offset as usize) < self.days.len()).then_some(offset as usize)
    }

    pub fn day(&self, date: NaiveDate) -> Option<&DayRecord> {
        self.index_of(date).map(|i| &self.days[i])
    }

    /// The `n_days`-day slice ending at `last_day` inclusive. Nothing dated
    /// after `last_day` is carried over.
    pub fn window(&self, last_day: NaiveDate, n_days: usize) -> Result<MarketDataset> {
        let end = self
            .index_of(last_day)
            .filter(|&end| n_days >= 1 && end + 1 >= n_days)
            .ok_or(Error::OutOfRange { last_day, n_days })?;
        Ok(MarketDataset {
            days: self.days[end + 1 - n_days..=end].to_vec(),
            series_names: self.series_names.clone(),
        })
    }

    /// Every day up to and including `last_day`.
    pub fn history_through(&self, last_day: NaiveDate) -> Result<MarketDataset> {
        let end = self
            .index_of(last_day)
            .ok_or(Error::OutOfRange { last_day, n_days: 1 })?;
        self.window(last_day, end + 1)
    }

    /// Normalized CSV with one row per hour in calendar order.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.days.len() * HOURS * 48);
        out.push_str(CSV_HEADER);
        out.push('\n');
        for d in &self.days {
            for h in 0..HOURS {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    stamp(d.date, h),
                    d.prices[h],
                    d.exog[0][h],
                    d.exog[1][h]
                ));
            }
        }
        out
    }
}

/// Calibration / test split. The test window must be the final section of
/// the dataset and start strictly after the calibration period ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub calibration_end: NaiveDate,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
}

impl SplitSpec {
    /// Test period `[test_start, test_end]` with calibration ending the day before.
    pub fn ending_before(test_start: NaiveDate, test_end: NaiveDate) -> Self {
        Self {
            calibration_end: test_start.pred_opt().expect("date in range"),
            test_start,
            test_end,
        }
    }

    pub fn test_days(&self) -> impl Iterator<Item = NaiveDate> {
        self.test_start
            .iter_days()
            .take_while(|d| *d <= self.test_end)
            .collect::<Vec<_>>()
            .into_iter()
    }

    pub fn n_test_days(&self) -> usize {
        ((self.test_end - self.test_start).num_days() + 1).max(0) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitViolation {
    /// Calibration period reaches into the test window.
    Contamination,
    /// Test window does not end at the last day of the dataset.
    NotFinalSection,
    /// `test_start > test_end`.
    EmptyTest,
    /// A split date falls outside the dataset.
    OutsideDataset,
}

impl fmt::Display for SplitViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitViolation::Contamination => "contamination",
            SplitViolation::NotFinalSection => "not final section",
            SplitViolation::EmptyTest => "empty test window",
            SplitViolation::OutsideDataset => "outside dataset",
        })
    }
}

pub fn validate_split(
    dataset: &MarketDataset,
    split: &SplitSpec,
) -> std::result::Result<(), Vec<SplitViolation>> {
    let mut violations = Vec::new();
    if split.calibration_end >= split.test_start {
        violations.push(SplitViolation::Contamination);
    }
    if split.test_start > split.test_end {
        violations.push(SplitViolation::EmptyTest);
    }
    if split.test_end != dataset.last_date() {
        violations.push(SplitViolation::NotFinalSection);
    }
    if dataset.index_of(split.test_start).is_none()
        || dataset.index_of(split.calibration_end).is_none()
        || dataset.index_of(split.test_end).is_none()
    {
        violations.push(SplitViolation::OutsideDataset);
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Monday-first weekday index (Mon = 0 .. Sun = 6).
pub fn weekday_index(date: NaiveDate) -> usize {
    date.weekday().num_days_from_monday() as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_for(days: &[NaiveDate], skip: Option<(usize, usize)>, dup: Option<(usize, usize)>) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for (i, d) in days.iter().enumerate() {
            for h in 0..HOURS {
                if skip == Some((i, h)) {
                    continue;
                }
                let line = format!("{}T{:02}:00,{}.5,{},{}\n", d, h, 30 + h, 1000 + h, 50 + i);
                s.push_str(&line);
                if dup == Some((i, h)) {
                    s.push_str(&line);
                }
            }
        }
        s
    }

    fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    #[test]
    fn two_complete_days() {
        let text = csv_for(&[ymd(2017, 1, 1), ymd(2017, 1, 2)], None, None);
        let ds = parse_dataset(&text).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.records()[1].prices[3], 33.5);
        assert_eq!(ds.records()[1].exog[1][0], 51.0);
    }

    #[test]
    fn spring_dst_missing_hour_is_rejected() {
        let text = csv_for(&[ymd(2017, 3, 26)], Some((0, 2)), None);
        match parse_dataset(&text) {
            Err(Error::Ingest(IngestError::MissingHour { timestamp })) => {
                assert_eq!(timestamp, "2017-03-26T02:00")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_hour_names_timestamp() {
        let days = [ymd(2017, 10, 28), ymd(2017, 10, 29), ymd(2017, 10, 30)];
        let text = csv_for(&days, None, Some((1, 3)));
        match parse_dataset(&text) {
            Err(Error::Ingest(IngestError::DuplicateHour { timestamp })) => {
                assert_eq!(timestamp, "2017-10-29T03:00")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn repair_mode_interpolates_and_averages() {
        let mut text = csv_for(&[ymd(2017, 3, 26), ymd(2017, 3, 27)], Some((0, 2)), None);
        text.push_str("2017-03-27T05:00,99.5,0,0\n");
        let (ds, summary) = parse_dataset_with(&text, DstPolicy::Repair).unwrap();
        assert_eq!(summary.interpolated_hours, 1);
        assert_eq!(summary.averaged_hours, 1);
        assert_eq!(ds.records()[0].prices[2], 0.5 * (31.5 + 33.5));
        assert_eq!(ds.records()[1].prices[5], 0.5 * (35.5 + 99.5));
        assert_eq!(summary.to_string(), "2 days, 48 hours, 2 repairs (2017-03-26 .. 2017-03-27)");
    }

    #[test]
    fn non_finite_and_gap_and_header() {
        let mut text = csv_for(&[ymd(2017, 1, 1)], None, None);
        text = text.replace("2017-01-01T05:00,35.5", "2017-01-01T05:00,NaN");
        assert!(matches!(
            parse_dataset(&text),
            Err(Error::Ingest(IngestError::NonFinite { .. }))
        ));

        let text = csv_for(&[ymd(2017, 1, 1), ymd(2017, 1, 3)], None, None);
        match parse_dataset(&text) {
            Err(Error::Ingest(IngestError::GapInCalendar { missing, .. })) => {
                assert_eq!(missing, "2017-01-02")
            }
            other => panic!("unexpected {other:?}"),
        }

        let text = "timestamp,price,exog1,exog2,extra\n";
        assert!(matches!(
            parse_dataset(text),
            Err(Error::Ingest(IngestError::Header { .. }))
        ));

        let mut text = csv_for(&[ymd(2017, 1, 1)], None, None);
        text.push('\n');
        text.push_str("2017-01-02T00:00,1,1,1\n");
        assert!(matches!(
            parse_dataset(&text),
            Err(Error::Ingest(IngestError::BlankLine { .. }))
        ));
    }

    #[test]
    fn window_slices_and_rejects_out_of_range() {
        let days: Vec<_> = ymd(2017, 1, 1).iter_days().take(10).collect();
        let ds = parse_dataset(&csv_for(&days, None, None)).unwrap();
        let w = ds.window(ymd(2017, 1, 5), 3).unwrap();
        assert_eq!(w.first_date(), ymd(2017, 1, 3));
        assert_eq!(w.last_date(), ymd(2017, 1, 5));
        let single = ds.window(ymd(2017, 1, 5), 1).unwrap();
        assert_eq!(single.records(), &ds.records()[4..5]);
        assert!(matches!(ds.window(ymd(2017, 1, 5), 6), Err(Error::OutOfRange { .. })));
        assert!(matches!(ds.window(ymd(2017, 2, 5), 1), Err(Error::OutOfRange { .. })));
        assert!(matches!(ds.window(ymd(2017, 1, 5), 0), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn split_validation() {
        let days: Vec<_> = ymd(2017, 1, 1).iter_days().take(30).collect();
        let ds = parse_dataset(&csv_for(&days, None, None)).unwrap();
        let ok = SplitSpec::ending_before(ymd(2017, 1, 20), ymd(2017, 1, 30));
        assert_eq!(validate_split(&ds, &ok), Ok(()));

        let overlap = SplitSpec {
            calibration_end: ymd(2017, 1, 22),
            test_start: ymd(2017, 1, 20),
            test_end: ymd(2017, 1, 30),
        };
        let v = validate_split(&ds, &overlap).unwrap_err();
        assert_eq!(v, vec![SplitViolation::Contamination]);
        assert_eq!(v[0].to_string(), "contamination");

        let early = SplitSpec::ending_before(ymd(2017, 1, 10), ymd(2017, 1, 20));
        let v = validate_split(&ds, &early).unwrap_err();
        assert_eq!(v, vec![SplitViolation::NotFinalSection]);
        assert_eq!(v[0].to_string(), "not final section");
    }

    #[test]
    fn csv_round_trip_is_stable() {
        let days: Vec<_> = ymd(2016, 2, 27).iter_days().take(4).collect();
        let ds = parse_dataset(&csv_for(&days, None, None)).unwrap();
        let again = parse_dataset(&ds.to_csv()).unwrap();
        assert_eq!(ds, again);
        assert_eq!(ds.to_csv(), again.to_csv());
    }
}
