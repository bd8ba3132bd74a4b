//! Privacy-filtered aggregation of stays into mesh areas.
//!
//! 1. Assign every stay to its 50m mesh.
//! 2. Keep 50m meshes with more than [`MIN_EXCLUSIVE_USERS`] distinct users.
//! 3. Stays of dropped 50m meshes move to their 250m parent.
//! 4. Keep 250m meshes with more than [`MIN_EXCLUSIVE_USERS`] distinct users.
//!
//! Each kept mesh carries the 168-class histogram used for training and a
//! finer 672-cell histogram (30-minute arrival slots) used for profiles.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::{Geocode, MeshLevel};
use crate::stay::{discretize, fine_cell_of, HolidayCalendar, StayRecord, NUM_CLASSES, NUM_FINE_CELLS};

/// Meshes with this many distinct users or fewer are dropped.
pub const MIN_EXCLUSIVE_USERS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct AreaRow {
    pub counts: Vec<u64>,
    pub fine: Vec<u64>,
    pub unique_users: usize,
}

impl AreaRow {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Kept meshes keyed by geocode, in geocode order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AreaTable {
    pub rows: BTreeMap<Geocode, AreaRow>,
}

impl AreaTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, g: &Geocode) -> Option<&AreaRow> {
        self.rows.get(g)
    }

    pub fn total_stays(&self) -> u64 {
        self.rows.values().map(AreaRow::total).sum()
    }
}

/// Per-mesh accumulator. Merging two partials is commutative and associative.
#[derive(Debug, Clone)]
struct Partial {
    counts: Vec<u64>,
    fine: Vec<u64>,
    users: BTreeSet<String>,
    members: Vec<usize>,
}

impl Default for Partial {
    fn default() -> Self {
        Partial {
            counts: vec![0; NUM_CLASSES],
            fine: vec![0; NUM_FINE_CELLS],
            users: BTreeSet::new(),
            members: Vec::new(),
        }
    }
}

impl Partial {
    fn add(&mut self, idx: usize, stay: &StayRecord, cal: &HolidayCalendar) {
        self.counts[discretize(stay, cal).index()] += 1;
        self.fine[fine_cell_of(stay, cal)] += 1;
        if !self.users.contains(&stay.user_id) {
            self.users.insert(stay.user_id.clone());
        }
        self.members.push(idx);
    }

    fn into_row(self) -> AreaRow {
        AreaRow {
            counts: self.counts,
            fine: self.fine,
            unique_users: self.users.len(),
        }
    }
}

/// Result of aggregation together with the area each input stay landed in.
#[derive(Debug, Clone)]
pub struct Aggregation {
    pub table: AreaTable,
    /// For each input stay, the kept mesh that counts it, if any.
    pub assignment: Vec<Option<Geocode>>,
}

impl Aggregation {
    /// Input stay indices grouped by kept mesh.
    pub fn members(&self) -> BTreeMap<Geocode, Vec<usize>> {
        let mut out: BTreeMap<Geocode, Vec<usize>> = BTreeMap::new();
        for (i, g) in self.assignment.iter().enumerate() {
            if let Some(g) = g {
                out.entry(*g).or_default().push(i);
            }
        }
        out
    }
}

pub fn aggregate(stays: &[StayRecord], cal: &HolidayCalendar) -> Result<AreaTable> {
    Ok(aggregate_with_assignment(stays, cal)?.table)
}

pub fn aggregate_with_assignment(stays: &[StayRecord], cal: &HolidayCalendar) -> Result<Aggregation> {
    if stays.is_empty() {
        return Err(Error::Empty("no stays to aggregate".into()));
    }
    let mut fine_meshes: BTreeMap<Geocode, Partial> = BTreeMap::new();
    for (i, stay) in stays.iter().enumerate() {
        stay.validate()?;
        let g = Geocode::encode(stay.latitude, stay.longitude, MeshLevel::M50)?;
        fine_meshes.entry(g).or_default().add(i, stay, cal);
    }

    let mut table = AreaTable::default();
    let mut assignment = vec![None; stays.len()];
    let mut coarse: BTreeMap<Geocode, Partial> = BTreeMap::new();
    for (g, part) in fine_meshes {
        if part.users.len() > MIN_EXCLUSIVE_USERS {
            for &i in &part.members {
                assignment[i] = Some(g);
            }
            table.rows.insert(g, part.into_row());
        } else {
            let parent = coarse.entry(g.parent_250m()).or_default();
            for &i in &part.members {
                parent.add(i, &stays[i], cal);
            }
        }
    }
    for (g, part) in coarse {
        if part.users.len() > MIN_EXCLUSIVE_USERS {
            for &i in &part.members {
                assignment[i] = Some(g);
            }
            table.rows.insert(g, part.into_row());
        }
    }
    Ok(Aggregation { table, assignment })
}

fn count_header(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}{i}"))
}

/// Writes `geocode,level,unique_users,c0,...,c167`.
pub fn write_table(writer: impl Write, table: &AreaTable) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["geocode".to_string(), "level".into(), "unique_users".into()];
    header.extend(count_header("c", NUM_CLASSES));
    wtr.write_record(&header)?;
    for (g, row) in &table.rows {
        let mut rec = vec![g.to_string(), g.level().to_string(), row.unique_users.to_string()];
        rec.extend(row.counts.iter().map(u64::to_string));
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<table>", e))?;
    Ok(())
}

/// Writes the fine histogram sidecar `geocode,f0,...,f671`.
pub fn write_fine(writer: impl Write, table: &AreaTable) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["geocode".to_string()];
    header.extend(count_header("f", NUM_FINE_CELLS));
    wtr.write_record(&header)?;
    for (g, row) in &table.rows {
        let mut rec = vec![g.to_string()];
        rec.extend(row.fine.iter().map(u64::to_string));
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<fine>", e))?;
    Ok(())
}

fn parse_counts(fields: &[&str], origin: &Path, line: usize) -> Result<Vec<u64>> {
    fields
        .iter()
        .map(|f| {
            f.parse::<u64>()
                .map_err(|e| Error::parse(origin, line, format!("bad count {f:?}: {e}")))
        })
        .collect()
}

pub fn parse_table(reader: impl Read, origin: &Path) -> Result<AreaTable> {
    let mut rdr = csv::Reader::from_reader(reader);
    let width = 3 + NUM_CLASSES;
    if rdr.headers()?.len() != width || &rdr.headers()?[0] != "geocode" {
        return Err(Error::parse(origin, 1, "expected header geocode,level,unique_users,c0..c167"));
    }
    let mut table = AreaTable::default();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(origin, line, e.to_string()))?;
        if rec.len() != width {
            return Err(Error::parse(origin, line, format!("expected {width} fields, got {}", rec.len())));
        }
        let g: Geocode = rec[0].parse().map_err(|e: Error| Error::parse(origin, line, e.to_string()))?;
        let level: MeshLevel = rec[1].parse().map_err(|e: Error| Error::parse(origin, line, e.to_string()))?;
        if level != g.level() {
            return Err(Error::parse(origin, line, "level does not match geocode length"));
        }
        let unique_users = rec[2]
            .parse()
            .map_err(|e| Error::parse(origin, line, format!("bad unique_users: {e}")))?;
        let fields: Vec<&str> = rec.iter().skip(3).collect();
        let counts = parse_counts(&fields, origin, line)?;
        table.rows.insert(
            g,
            AreaRow {
                counts,
                fine: vec![0; NUM_FINE_CELLS],
                unique_users,
            },
        );
    }
    Ok(table)
}

pub fn read_table(path: &Path) -> Result<AreaTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_table(file, path)
}

/// Fills the fine histograms of `table` from a sidecar file.
pub fn parse_fine_into(reader: impl Read, origin: &Path, table: &mut AreaTable) -> Result<()> {
    let mut rdr = csv::Reader::from_reader(reader);
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(origin, line, e.to_string()))?;
        if rec.len() != 1 + NUM_FINE_CELLS {
            return Err(Error::parse(origin, line, "wrong number of fine histogram fields"));
        }
        let g: Geocode = rec[0].parse().map_err(|e: Error| Error::parse(origin, line, e.to_string()))?;
        let fields: Vec<&str> = rec.iter().skip(1).collect();
        let fine = parse_counts(&fields, origin, line)?;
        match table.rows.get_mut(&g) {
            Some(row) => row.fine = fine,
            None => return Err(Error::parse(origin, line, format!("geocode {g} not in table"))),
        }
    }
    Ok(())
}
