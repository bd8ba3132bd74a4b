//! Grid-square geocodes for 250m and 50m meshes.
//!
//! The first eight digits are the standard Japanese 1km grid-square code
//! (primary `lat*1.5`/`lon-100`, 8x8 secondary, 10x10 tertiary). Digits 9 and
//! 10 are quadrant digits (1=SW, 2=SE, 3=NW, 4=NE) splitting the 1km cell into
//! 500m and then 250m cells. Digits 11 and 12 give the row (from south) and
//! column (from west) of a 5x5 split of the 250m cell, yielding 50m cells.
//!
//! Internally every position is measured in 50m-cell units: 1.5 arc-seconds
//! of latitude and 2.25 arc-seconds of longitude. All of the digits above are
//! then integer divisions of those unit indices.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 50m units per degree of latitude (3600 / 1.5).
const LAT_UNITS_PER_DEG: f64 = 2400.0;
/// 50m units per degree of longitude (3600 / 2.25).
const LON_UNITS_PER_DEG: f64 = 1600.0;

// Cell sizes in 50m units. Latitude and longitude happen to coincide.
const PRIMARY: u64 = 1600;
const SECONDARY: u64 = 200;
const TERTIARY: u64 = 20;
const HALF_KM: u64 = 10;
const QUARTER_KM: u64 = 5;

pub const MIN_LAT: f64 = 0.0;
pub const MAX_LAT: f64 = 66.6;
pub const MIN_LON: f64 = 100.0;
pub const MAX_LON: f64 = 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MeshLevel {
    M250,
    M50,
}

impl MeshLevel {
    pub fn digits(self) -> usize {
        match self {
            MeshLevel::M250 => 10,
            MeshLevel::M50 => 12,
        }
    }

    /// Cell edge length in 50m units.
    fn units(self) -> u64 {
        match self {
            MeshLevel::M250 => QUARTER_KM,
            MeshLevel::M50 => 1,
        }
    }

    /// Cell height and width in degrees.
    pub fn cell_size_deg(self) -> (f64, f64) {
        let u = self.units() as f64;
        (u / LAT_UNITS_PER_DEG, u / LON_UNITS_PER_DEG)
    }
}

impl fmt::Display for MeshLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MeshLevel::M250 => f.write_str("250m"),
            MeshLevel::M50 => f.write_str("50m"),
        }
    }
}

impl FromStr for MeshLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "250m" => Ok(MeshLevel::M250),
            "50m" => Ok(MeshLevel::M50),
            other => Err(Error::Geocode(format!("unknown mesh level {other:?}"))),
        }
    }
}

/// A mesh identifier. Displayed zero-padded to its level's digit count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Geocode {
    level: MeshLevel,
    code: u64,
}

/// Geographic extent of a decoded cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub south: f64,
    pub west: f64,
    pub north: f64,
    pub east: f64,
}

impl Cell {
    pub fn center(&self) -> (f64, f64) {
        ((self.south + self.north) / 2.0, (self.west + self.east) / 2.0)
    }

    /// Closed ring of `(lon, lat)` corners: SW, SE, NE, NW, SW.
    pub fn ring(&self) -> [(f64, f64); 5] {
        [
            (self.west, self.south),
            (self.east, self.south),
            (self.east, self.north),
            (self.west, self.north),
            (self.west, self.south),
        ]
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        lat >= self.south && lat < self.north && lon >= self.west && lon < self.east
    }
}

/// `floor(x)`, except values within rounding noise of an integer snap to it so
/// that exact cell corners land in the cell to their north-east.
fn floor_snapped(x: f64) -> u64 {
    let r = x.round();
    if (x - r).abs() < 1e-6 {
        r as u64
    } else {
        x.floor() as u64
    }
}

fn quadrant(lat_bit: u64, lon_bit: u64) -> u64 {
    1 + lat_bit * 2 + lon_bit
}

impl Geocode {
    pub fn level(&self) -> MeshLevel {
        self.level
    }

    pub fn code(&self) -> u64 {
        self.code
    }

    /// Maps a point to the mesh cell containing it.
    pub fn encode(lat: f64, lon: f64, level: MeshLevel) -> Result<Geocode> {
        if !(MIN_LAT..MAX_LAT).contains(&lat) || !(MIN_LON..MAX_LON).contains(&lon) {
            return Err(Error::UnsupportedRegion { lat, lon });
        }
        let y = floor_snapped(lat * LAT_UNITS_PER_DEG);
        let x = floor_snapped((lon - MIN_LON) * LON_UNITS_PER_DEG);
        Ok(Self::from_units(y, x, level))
    }

    fn from_units(y: u64, x: u64, level: MeshLevel) -> Geocode {
        let p = y / PRIMARY;
        let u = x / PRIMARY;
        let q = (y % PRIMARY) / SECONDARY;
        let v = (x % PRIMARY) / SECONDARY;
        let r = (y % SECONDARY) / TERTIARY;
        let w = (x % SECONDARY) / TERTIARY;
        let half = quadrant((y % TERTIARY) / HALF_KM, (x % TERTIARY) / HALF_KM);
        let quarter = quadrant((y % HALF_KM) / QUARTER_KM, (x % HALF_KM) / QUARTER_KM);
        let mut code = ((((p * 100 + u) * 10 + q) * 10 + v) * 10 + r) * 10 + w;
        code = (code * 10 + half) * 10 + quarter;
        if level == MeshLevel::M50 {
            code = (code * 10 + y % QUARTER_KM) * 10 + x % QUARTER_KM;
        }
        Geocode { level, code }
    }

    /// South-west corner of the cell in 50m units.
    fn units(&self) -> (u64, u64) {
        let digits = format!("{:0width$}", self.code, width = self.level.digits());
        let d: Vec<u64> = digits.bytes().map(|b| (b - b'0') as u64).collect();
        let p = d[0] * 10 + d[1];
        let u = d[2] * 10 + d[3];
        let (half, quarter) = (d[8] - 1, d[9] - 1);
        let mut y = p * PRIMARY + d[4] * SECONDARY + d[6] * TERTIARY;
        let mut x = u * PRIMARY + d[5] * SECONDARY + d[7] * TERTIARY;
        y += (half / 2) * HALF_KM + (quarter / 2) * QUARTER_KM;
        x += (half % 2) * HALF_KM + (quarter % 2) * QUARTER_KM;
        if self.level == MeshLevel::M50 {
            y += d[10];
            x += d[11];
        }
        (y, x)
    }

    pub fn cell(&self) -> Cell {
        let (y, x) = self.units();
        let size = self.level.units();
        Cell {
            south: y as f64 / LAT_UNITS_PER_DEG,
            west: MIN_LON + x as f64 / LON_UNITS_PER_DEG,
            north: (y + size) as f64 / LAT_UNITS_PER_DEG,
            east: MIN_LON + (x + size) as f64 / LON_UNITS_PER_DEG,
        }
    }

    /// Cell center `(lat, lon)` and closed `(lon, lat)` boundary ring.
    pub fn decode(&self) -> ((f64, f64), [(f64, f64); 5]) {
        let cell = self.cell();
        (cell.center(), cell.ring())
    }

    /// The enclosing 250m cell; a 250m code is its own parent.
    pub fn parent_250m(&self) -> Geocode {
        match self.level {
            MeshLevel::M250 => *self,
            MeshLevel::M50 => Geocode {
                level: MeshLevel::M250,
                code: self.code / 100,
            },
        }
    }

    /// The 250m cell `rows` north and `cols` east of this one's 250m parent.
    pub fn offset_250m(&self, rows: u64, cols: u64) -> Geocode {
        let (y, x) = self.parent_250m().units();
        Self::from_units(y + rows * QUARTER_KM, x + cols * QUARTER_KM, MeshLevel::M250)
    }

    /// The 50m child at `row` (from south) and `col` (from west) of a 250m cell.
    pub fn child_50m(&self, row: u64, col: u64) -> Result<Geocode> {
        if self.level != MeshLevel::M250 || row >= 5 || col >= 5 {
            return Err(Error::Geocode(format!("no 50m child ({row},{col}) of {self}")));
        }
        Ok(Geocode {
            level: MeshLevel::M50,
            code: (self.code * 10 + row) * 10 + col,
        })
    }
}

impl fmt::Display for Geocode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:0width$}", self.code, width = self.level.digits())
    }
}

impl FromStr for Geocode {
    type Err = Error;

    /// Parses a 10- or 12-digit code, checking every digit's range.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Geocode(s.to_string());
        let level = match s.len() {
            10 => MeshLevel::M250,
            12 => MeshLevel::M50,
            _ => return Err(bad()),
        };
        if !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let d: Vec<u8> = s.bytes().map(|b| b - b'0').collect();
        let u = d[2] * 10 + d[3];
        let valid = u < 80
            && d[4] < 8
            && d[5] < 8
            && (1..=4).contains(&d[8])
            && (1..=4).contains(&d[9])
            && (level == MeshLevel::M250 || (d[10] < 5 && d[11] < 5));
        if !valid {
            return Err(bad());
        }
        let p = d[0] as f64 * 10.0 + d[1] as f64;
        if p / 1.5 >= MAX_LAT {
            return Err(bad());
        }
        Ok(Geocode {
            level,
            code: s.parse().map_err(|_| bad())?,
        })
    }
}

impl Serialize for Geocode {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Geocode {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook float formulation of the 1km grid-square code, kept separate
    /// from the unit arithmetic above.
    fn reference_1km_code(lat: f64, lon: f64) -> String {
        let lat_m = lat * 60.0;
        let p = (lat_m / 40.0).floor();
        let a = lat_m % 40.0;
        let q = (a / 5.0).floor();
        let b = a % 5.0;
        let r = (b * 60.0 / 30.0).floor();
        let u = (lon - 100.0).floor();
        let f = lon - lon.floor();
        let v = (f * 60.0 / 7.5).floor();
        let g = (f * 60.0) % 7.5;
        let w = (g * 60.0 / 45.0).floor();
        format!("{:02}{:02}{}{}{}{}", p, u, q, v, r, w)
    }

    #[test]
    fn tokyo_station_matches_standard_code() {
        let g = Geocode::encode(35.681236, 139.767125, MeshLevel::M250).unwrap();
        let s = g.to_string();
        assert_eq!(s.len(), 10);
        assert_eq!(&s[..8], "53394611");
        assert_eq!(&s[..8], reference_1km_code(35.681236, 139.767125));
    }

    #[test]
    fn cell_sizes() {
        let g = Geocode::encode(35.0, 135.0, MeshLevel::M250).unwrap();
        let c = g.cell();
        assert!(((c.north - c.south) * 3600.0 - 7.5).abs() < 1e-9);
        assert!(((c.east - c.west) * 3600.0 - 11.25).abs() < 1e-9);
        let g = Geocode::encode(35.0, 135.0, MeshLevel::M50).unwrap();
        let c = g.cell();
        assert!(((c.north - c.south) * 3600.0 - 1.5).abs() < 1e-9);
        assert!(((c.east - c.west) * 3600.0 - 2.25).abs() < 1e-9);
    }

    #[test]
    fn south_west_corner_belongs_to_cell() {
        for level in [MeshLevel::M250, MeshLevel::M50] {
            let g = Geocode::encode(35.6789, 139.7654, level).unwrap();
            let c = g.cell();
            assert_eq!(Geocode::encode(c.south, c.west, level).unwrap(), g);
            // The north-east corner is the next cell over.
            assert_ne!(Geocode::encode(c.north, c.east, level).unwrap(), g);
        }
    }

    #[test]
    fn out_of_band_rejected() {
        assert!(matches!(
            Geocode::encode(35.0, 99.9, MeshLevel::M250),
            Err(Error::UnsupportedRegion { .. })
        ));
        assert!(Geocode::encode(-1.0, 139.0, MeshLevel::M50).is_err());
        assert!(Geocode::encode(66.6, 139.0, MeshLevel::M50).is_err());
        assert!(Geocode::encode(35.0, 180.0, MeshLevel::M50).is_err());
    }

    #[test]
    fn parse_rejects_malformed_codes() {
        for s in ["533946111", "53394611x1", "5339461151", "5339861111", "533946111155", "5339461111000"] {
            assert!(s.parse::<Geocode>().is_err(), "{s}");
        }
        assert!("5339461111".parse::<Geocode>().is_ok());
        assert!("533946111144".parse::<Geocode>().is_ok());
    }

    #[test]
    fn quadrant_digits() {
        // SW 250m cell of the SW 500m cell of 1km square 53394611.
        let sw: Geocode = "5339461111".parse().unwrap();
        let c = sw.cell();
        let (h, w) = MeshLevel::M250.cell_size_deg();
        let code_at = |r: f64, col: f64| {
            Geocode::encode(c.south + (r + 0.5) * h, c.west + (col + 0.5) * w, MeshLevel::M250)
                .unwrap()
                .to_string()
        };
        assert_eq!(code_at(0.0, 0.0), "5339461111");
        assert_eq!(code_at(0.0, 1.0), "5339461112");
        assert_eq!(code_at(1.0, 0.0), "5339461113");
        assert_eq!(code_at(1.0, 1.0), "5339461114");
        assert_eq!(code_at(0.0, 2.0), "5339461121");
        assert_eq!(code_at(2.0, 0.0), "5339461131");
        assert_eq!(code_at(3.0, 3.0), "5339461144");
        assert_eq!(sw.offset_250m(3, 3).to_string(), "5339461144");
        assert_eq!(sw.child_50m(4, 2).unwrap().to_string(), "533946111142");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn encode_decode_consistency(lat in 0.0f64..66.59, lon in 100.0f64..179.999) {
            let g50 = Geocode::encode(lat, lon, MeshLevel::M50).unwrap();
            let g250 = Geocode::encode(lat, lon, MeshLevel::M250).unwrap();
            prop_assert!(g50.cell().contains(lat, lon));
            prop_assert!(g250.cell().contains(lat, lon));
            prop_assert_eq!(g50.parent_250m(), g250);
            prop_assert!(g50.to_string().starts_with(&g250.to_string()));
            prop_assert_eq!(&g250.to_string()[..8], reference_1km_code(lat, lon));
            let ((clat, clon), ring) = g50.decode();
            prop_assert_eq!(Geocode::encode(clat, clon, MeshLevel::M50).unwrap(), g50);
            prop_assert_eq!(ring[0], ring[4]);
            prop_assert_eq!(g50.to_string().parse::<Geocode>().unwrap(), g50);
            prop_assert_eq!(g250.to_string().parse::<Geocode>().unwrap(), g250);
        }
    }
}
