//! Stay records and their discretization into 168 stay-feature classes.
//!
//! A class is the triple (day type, 2-hour arrival bin, duration bin). The
//! flat index is laid out day-type major:
//!
//! ```text
//! index = day_type * 84 + arrival_bin * 7 + duration_bin
//! ```
//!
//! Duration bins are half-open minute ranges with edges
//! [`DURATION_EDGES`], so the seven bins tile `[0, inf)`.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of discretized stay classes.
pub const NUM_CLASSES: usize = 168;
pub const NUM_ARRIVAL_BINS: usize = 12;
pub const NUM_DURATION_BINS: usize = 7;
/// 30-minute arrival slots per day, used by the finer profile histogram.
pub const NUM_SLOTS: usize = 48;
/// Cells of the fine histogram: day type x 30-minute slot x duration bin.
pub const NUM_FINE_CELLS: usize = 2 * NUM_SLOTS * NUM_DURATION_BINS;

/// Lower edges (minutes) of duration bins 1..=6; bin 0 starts at 0.
pub const DURATION_EDGES: [u32; 6] = [30, 60, 120, 240, 360, 720];

const ARRIVAL_FORMAT: &str = "%Y-%m-%dT%H:%M";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DayType {
    Weekday = 0,
    WeekendOrHoliday = 1,
}

impl DayType {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(DayType::Weekday),
            1 => Some(DayType::WeekendOrHoliday),
            _ => None,
        }
    }
}

impl fmt::Display for DayType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DayType::Weekday => f.write_str("weekday"),
            DayType::WeekendOrHoliday => f.write_str("weekend_or_holiday"),
        }
    }
}

/// One dwell event. Arrival is local time with minute precision.
#[derive(Debug, Clone, PartialEq)]
pub struct StayRecord {
    pub user_id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub arrival: NaiveDateTime,
    pub duration_minutes: u32,
}

impl StayRecord {
    pub fn new(
        user_id: impl Into<String>,
        latitude: f64,
        longitude: f64,
        arrival: NaiveDateTime,
        duration_minutes: u32,
    ) -> Result<Self> {
        let stay = StayRecord {
            user_id: user_id.into(),
            latitude,
            longitude,
            arrival,
            duration_minutes,
        };
        stay.validate()?;
        Ok(stay)
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.latitude) || !(-180.0..=180.0).contains(&self.longitude)
        {
            return Err(Error::InvalidInput(format!(
                "stay of user {} has invalid coordinate ({}, {})",
                self.user_id, self.latitude, self.longitude
            )));
        }
        Ok(())
    }

    /// Minutes since midnight of the arrival.
    pub fn arrival_minute_of_day(&self) -> u32 {
        self.arrival.hour() * 60 + self.arrival.minute()
    }
}

/// A discretized stay-feature class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StayClass {
    pub day_type: DayType,
    pub arrival_bin: u8,
    pub duration_bin: u8,
}

impl StayClass {
    pub fn index(&self) -> usize {
        self.day_type.index() * NUM_ARRIVAL_BINS * NUM_DURATION_BINS
            + self.arrival_bin as usize * NUM_DURATION_BINS
            + self.duration_bin as usize
    }
}

/// Inverse of [`StayClass::index`].
pub fn class_label(index: usize) -> Result<StayClass> {
    if index >= NUM_CLASSES {
        return Err(Error::Range {
            index,
            len: NUM_CLASSES,
        });
    }
    let per_day = NUM_ARRIVAL_BINS * NUM_DURATION_BINS;
    Ok(StayClass {
        day_type: DayType::from_index(index / per_day).expect("index < 168"),
        arrival_bin: ((index % per_day) / NUM_DURATION_BINS) as u8,
        duration_bin: (index % NUM_DURATION_BINS) as u8,
    })
}

pub fn duration_bin(minutes: u32) -> u8 {
    DURATION_EDGES.iter().take_while(|&&edge| minutes >= edge).count() as u8
}

pub fn arrival_bin(minute_of_day: u32) -> u8 {
    (minute_of_day / 120) as u8
}

/// User-supplied holiday dates. Weekends are always weekend-or-holiday.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HolidayCalendar {
    holidays: BTreeSet<NaiveDate>,
}

impl HolidayCalendar {
    pub fn new(holidays: impl IntoIterator<Item = NaiveDate>) -> Self {
        HolidayCalendar {
            holidays: holidays.into_iter().collect(),
        }
    }

    pub fn is_holiday(&self, date: NaiveDate) -> bool {
        self.holidays.contains(&date)
    }

    pub fn day_type(&self, date: NaiveDate) -> DayType {
        match date.weekday() {
            Weekday::Sat | Weekday::Sun => DayType::WeekendOrHoliday,
            _ if self.is_holiday(date) => DayType::WeekendOrHoliday,
            _ => DayType::Weekday,
        }
    }

    pub fn len(&self) -> usize {
        self.holidays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.holidays.is_empty()
    }

    /// Parses one `YYYY-MM-DD` per line; blank lines and `#` comments are skipped.
    pub fn parse(reader: impl Read, origin: &Path) -> Result<Self> {
        let mut holidays = BTreeSet::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line = line.map_err(|e| Error::io(origin, e))?;
            let text = line.split('#').next().unwrap_or("").trim();
            if text.is_empty() {
                continue;
            }
            let date = NaiveDate::parse_from_str(text, "%Y-%m-%d")
                .map_err(|e| Error::parse(origin, i + 1, format!("bad date {text:?}: {e}")))?;
            holidays.insert(date);
        }
        Ok(HolidayCalendar { holidays })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(file, path)
    }
}

/// Classifies a stay by its arrival (start) time and its duration.
pub fn discretize(stay: &StayRecord, cal: &HolidayCalendar) -> StayClass {
    StayClass {
        day_type: cal.day_type(stay.arrival.date()),
        arrival_bin: arrival_bin(stay.arrival_minute_of_day()),
        duration_bin: duration_bin(stay.duration_minutes),
    }
}

/// Index into the fine `[day_type][30-min slot][duration_bin]` histogram.
pub fn fine_cell(day_type: DayType, minute_of_day: u32, duration_minutes: u32) -> usize {
    let slot = (minute_of_day / 30) as usize;
    (day_type.index() * NUM_SLOTS + slot) * NUM_DURATION_BINS + duration_bin(duration_minutes) as usize
}

pub fn fine_cell_of(stay: &StayRecord, cal: &HolidayCalendar) -> usize {
    fine_cell(
        cal.day_type(stay.arrival.date()),
        stay.arrival_minute_of_day(),
        stay.duration_minutes,
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct StayRow {
    user_id: String,
    latitude: f64,
    longitude: f64,
    arrival: String,
    duration_minutes: u32,
}

/// Reads the stay CSV (`user_id,latitude,longitude,arrival,duration_minutes`).
pub fn read_stays(path: &Path) -> Result<Vec<StayRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_stays(file, path)
}

pub fn parse_stays(reader: impl Read, origin: &Path) -> Result<Vec<StayRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["user_id", "latitude", "longitude", "arrival", "duration_minutes"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::parse(
            origin,
            1,
            format!("expected header {}", expected.join(",")),
        ));
    }
    let mut stays = Vec::new();
    for (i, row) in rdr.deserialize::<StayRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::parse(origin, line, e.to_string()))?;
        let arrival = NaiveDateTime::parse_from_str(&row.arrival, ARRIVAL_FORMAT)
            .map_err(|e| Error::parse(origin, line, format!("bad arrival {:?}: {e}", row.arrival)))?;
        let stay = StayRecord::new(row.user_id, row.latitude, row.longitude, arrival, row.duration_minutes)
            .map_err(|e| Error::parse(origin, line, e.to_string()))?;
        stays.push(stay);
    }
    Ok(stays)
}

pub fn write_stays(writer: impl Write, stays: &[StayRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for s in stays {
        wtr.serialize(StayRow {
            user_id: s.user_id.clone(),
            latitude: s.latitude,
            longitude: s.longitude,
            arrival: s.arrival.format(ARRIVAL_FORMAT).to_string(),
            duration_minutes: s.duration_minutes,
        })?;
    }
    wtr.flush().map_err(|e| Error::io("<stays>", e))?;
    Ok(())
}
