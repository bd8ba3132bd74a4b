//! File formats for embeddings, anchors and analysis outputs.
//!
//! Embedding CSV columns: `geocode,latitude,longitude,geometry,vector,
//! cluster5,cluster10,cluster20`, followed by any extra columns, which are
//! carried through untouched. `geometry` is the closed cell ring flattened to
//! `[lon,lat,lon,lat,...]` and `vector` is `[v0,...,v7]`; both are quoted
//! fields. Empty cells mean "unknown" (no mesh location, no clustering yet).

use std::io::{Read, Write};
use std::path::Path;

use serde_json::json;

use crate::analysis::{ClusterAssignment, ClusterProfile};
use crate::anchoring::{AnchorRecord, AnchorSet};
use crate::embedding::{EmbeddingTable, Vector, DIM};
use crate::error::{Error, Result};
use crate::mesh::Geocode;
use crate::stay::{DayType, NUM_DURATION_BINS, NUM_SLOTS};

pub const EMBEDDING_COLUMNS: [&str; 8] = [
    "geocode",
    "latitude",
    "longitude",
    "geometry",
    "vector",
    "cluster5",
    "cluster10",
    "cluster20",
];

/// The three cluster granularities with dedicated columns.
pub const NAMED_CLUSTER_KS: [usize; 3] = [5, 10, 20];

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    /// Area id; a mesh code for released tables.
    pub geocode: String,
    pub latitude: Option<f64>,
    pub longitude: Option<f64>,
    /// Flattened `(lon, lat)` ring; empty when the id is not a mesh code.
    pub geometry: Vec<f64>,
    pub vector: Vector,
    pub cluster5: Option<usize>,
    pub cluster10: Option<usize>,
    pub cluster20: Option<usize>,
    /// Values of the extra columns, in header order.
    pub extra: Vec<String>,
}

/// An embedding CSV: rows plus the names of any extra columns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingFile {
    pub extra_columns: Vec<String>,
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingFile {
    /// One row per table entry; location columns filled when the id is a mesh code.
    pub fn from_table(table: &EmbeddingTable) -> Self {
        let rows = table
            .vectors
            .iter()
            .map(|(id, v)| {
                let (latitude, longitude, geometry) = match id.parse::<Geocode>() {
                    Ok(g) => {
                        let ((lat, lon), ring) = g.decode();
                        (Some(lat), Some(lon), ring.iter().flat_map(|&(x, y)| [x, y]).collect())
                    }
                    Err(_) => (None, None, Vec::new()),
                };
                EmbeddingRow {
                    geocode: id.clone(),
                    latitude,
                    longitude,
                    geometry,
                    vector: *v,
                    cluster5: None,
                    cluster10: None,
                    cluster20: None,
                    extra: Vec::new(),
                }
            })
            .collect();
        EmbeddingFile {
            extra_columns: Vec::new(),
            rows,
        }
    }

    pub fn table(&self) -> Result<EmbeddingTable> {
        let mut t = EmbeddingTable::default();
        for r in &self.rows {
            if t.get(&r.geocode).is_some() {
                return Err(Error::InvalidInput(format!("duplicate area {}", r.geocode)));
            }
            t.insert(r.geocode.clone(), r.vector)?;
        }
        Ok(t)
    }

    /// Stores cluster labels: k = 5, 10, 20 fill their named columns, any
    /// other k goes to an extra `cluster<k>` column.
    pub fn set_clusters(&mut self, assign: &ClusterAssignment) -> Result<()> {
        for r in &self.rows {
            if !assign.labels.contains_key(&r.geocode) {
                return Err(Error::KeyMismatch(format!("area {} has no cluster label", r.geocode)));
            }
        }
        let k = assign.k;
        let extra_index = if NAMED_CLUSTER_KS.contains(&k) {
            None
        } else {
            let name = format!("cluster{k}");
            Some(match self.extra_columns.iter().position(|c| *c == name) {
                Some(i) => i,
                None => {
                    self.extra_columns.push(name);
                    self.rows.iter_mut().for_each(|r| r.extra.push(String::new()));
                    self.extra_columns.len() - 1
                }
            })
        };
        for r in &mut self.rows {
            let label = assign.labels[&r.geocode];
            match (k, extra_index) {
                (5, _) => r.cluster5 = Some(label),
                (10, _) => r.cluster10 = Some(label),
                (20, _) => r.cluster20 = Some(label),
                (_, Some(i)) => r.extra[i] = label.to_string(),
                _ => unreachable!(),
            }
        }
        Ok(())
    }

    /// Labels of the named column for `k`.
    pub fn clusters(&self, k: usize) -> Result<Vec<Option<usize>>> {
        match k {
            5 => Ok(self.rows.iter().map(|r| r.cluster5).collect()),
            10 => Ok(self.rows.iter().map(|r| r.cluster10).collect()),
            20 => Ok(self.rows.iter().map(|r| r.cluster20).collect()),
            _ => {
                let name = format!("cluster{k}");
                let i = self
                    .extra_columns
                    .iter()
                    .position(|c| *c == name)
                    .ok_or_else(|| Error::NotFound(format!("column {name}")))?;
                self.rows
                    .iter()
                    .map(|r| {
                        let v = &r.extra[i];
                        if v.is_empty() {
                            Ok(None)
                        } else {
                            v.parse()
                                .map(Some)
                                .map_err(|_| Error::InvalidInput(format!("bad label {v:?} in {name}")))
                        }
                    })
                    .collect()
            }
        }
    }
}

/// `[a,b,c]` with shortest round-trip decimals.
pub fn format_list(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(f64::to_string).collect();
    format!("[{}]", parts.join(","))
}

pub fn parse_list(text: &str) -> std::result::Result<Vec<f64>, String> {
    let inner = text
        .trim()
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| format!("expected a bracketed list, got {text:?}"))?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("bad number {t:?}: {e}")))
        .collect()
}

fn opt_to_string<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt<T: std::str::FromStr>(field: &str, what: &str) -> std::result::Result<Option<T>, String> {
    if field.is_empty() {
        Ok(None)
    } else {
        field.parse().map(Some).map_err(|_| format!("bad {what} {field:?}"))
    }
}

pub fn write_embeddings(writer: impl Write, file: &EmbeddingFile) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let header: Vec<&str> = EMBEDDING_COLUMNS
        .iter()
        .copied()
        .chain(file.extra_columns.iter().map(String::as_str))
        .collect();
    wtr.write_record(&header)?;
    for r in &file.rows {
        if r.extra.len() != file.extra_columns.len() {
            return Err(Error::InvalidInput(format!("row {} has the wrong number of extra values", r.geocode)));
        }
        let mut rec = vec![
            r.geocode.clone(),
            opt_to_string(r.latitude),
            opt_to_string(r.longitude),
            format_list(&r.geometry),
            format_list(&r.vector),
            opt_to_string(r.cluster5),
            opt_to_string(r.cluster10),
            opt_to_string(r.cluster20),
        ];
        rec.extend(r.extra.iter().cloned());
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<embeddings>", e))?;
    Ok(())
}

pub fn parse_embeddings(reader: impl Read, origin: &Path) -> Result<EmbeddingFile> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < EMBEDDING_COLUMNS.len() || headers.iter().zip(EMBEDDING_COLUMNS).any(|(a, b)| a != b) {
        return Err(Error::parse(
            origin,
            1,
            format!("expected header starting {}", EMBEDDING_COLUMNS.join(",")),
        ));
    }
    let extra_columns: Vec<String> = headers.iter().skip(EMBEDDING_COLUMNS.len()).map(String::from).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let err = |m: String| Error::parse(origin, line, m);
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(err(format!("expected {} fields, got {}", headers.len(), rec.len())));
        }
        let vector = parse_list(&rec[4]).map_err(&err)?;
        if vector.len() != DIM {
            return Err(err(format!("vector has {} elements, expected {DIM}", vector.len())));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(err("vector values must be finite".into()));
        }
        rows.push(EmbeddingRow {
            geocode: rec[0].to_string(),
            latitude: parse_opt(&rec[1], "latitude").map_err(&err)?,
            longitude: parse_opt(&rec[2], "longitude").map_err(&err)?,
            geometry: parse_list(&rec[3]).map_err(&err)?,
            vector: std::array::from_fn(|k| vector[k]),
            cluster5: parse_opt(&rec[5], "cluster5").map_err(&err)?,
            cluster10: parse_opt(&rec[6], "cluster10").map_err(&err)?,
            cluster20: parse_opt(&rec[7], "cluster20").map_err(&err)?,
            extra: rec.iter().skip(EMBEDDING_COLUMNS.len()).map(String::from).collect(),
        });
    }
    Ok(EmbeddingFile { extra_columns, rows })
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingFile> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(file, path)
}

/// Anchor records as `anchor_id,arrival_time,stay_time`.
pub fn write_anchor_data(writer: impl Write, anchors: &AnchorSet) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["anchor_id", "arrival_time", "stay_time"])?;
    for (i, records) in anchors.records.iter().enumerate() {
        for r in records {
            wtr.write_record([i.to_string(), r.arrival.to_string(), r.stay.to_string()])?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<anchor data>", e))?;
    Ok(())
}

/// Anchor ids must be `0..n` with every id present.
pub fn parse_anchor_data(reader: impl Read, origin: &Path) -> Result<Vec<Vec<AnchorRecord>>> {
    let mut rdr = csv::Reader::from_reader(reader);
    if rdr.headers()?.iter().collect::<Vec<_>>() != ["anchor_id", "arrival_time", "stay_time"] {
        return Err(Error::parse(origin, 1, "expected header anchor_id,arrival_time,stay_time"));
    }
    let mut records: Vec<Vec<AnchorRecord>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let err = |m: String| Error::parse(origin, line, m);
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() != 3 {
            return Err(err(format!("expected 3 fields, got {}", rec.len())));
        }
        let num = |k: usize| -> Result<u32> { rec[k].parse().map_err(|_| err(format!("bad number {:?}", &rec[k]))) };
        let id = num(0)? as usize;
        let r = AnchorRecord::new(num(1)?, num(2)?).map_err(|e| err(e.to_string()))?;
        if id >= records.len() {
            records.resize(id + 1, Vec::new());
        }
        records[id].push(r);
    }
    if let Some(missing) = records.iter().position(Vec::is_empty) {
        return Err(Error::parse(origin, 1, format!("anchor {missing} has no records")));
    }
    Ok(records)
}

/// Reference embeddings as `anchor_id,v0,...,v7`.
pub fn write_anchor_embeddings(writer: impl Write, refs: &[Vector]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["anchor_id".to_string()];
    header.extend((0..DIM).map(|k| format!("v{k}")));
    wtr.write_record(&header)?;
    for (i, v) in refs.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(v.iter().map(f64::to_string));
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<anchor embeddings>", e))?;
    Ok(())
}

/// A dimension other than 8 is a configuration error: the file belongs to a
/// different model shape.
pub fn parse_anchor_embeddings(reader: impl Read, origin: &Path) -> Result<Vec<Vector>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("anchor_id") {
        return Err(Error::parse(origin, 1, "expected header anchor_id,v0,...,v7"));
    }
    if headers.len() != 1 + DIM {
        return Err(Error::Config(format!(
            "{}: anchor embeddings have dimension {}, the model uses {DIM}",
            origin.display(),
            headers.len() - 1
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let err = |m: String| Error::parse(origin, line, m);
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() != 1 + DIM {
            return Err(Error::Config(format!(
                "{}:{line}: anchor embedding has dimension {}, the model uses {DIM}",
                origin.display(),
                rec.len().saturating_sub(1)
            )));
        }
        if rec[0].parse::<usize>().ok() != Some(i) {
            return Err(err(format!("expected anchor id {i}, got {:?}", &rec[0])));
        }
        let vals: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|t| t.parse::<f64>().map_err(|e| err(format!("bad number {t:?}: {e}"))))
            .collect::<Result<_>>()?;
        out.push(std::array::from_fn(|k| vals[k]));
    }
    Ok(out)
}

/// Loads an anchor set from its record and reference-embedding files.
pub fn read_anchor_set(data: &Path, embeddings: Option<&Path>) -> Result<AnchorSet> {
    let open = |p: &Path| std::fs::File::open(p).map_err(|e| Error::io(p, e));
    let records = parse_anchor_data(open(data)?, data)?;
    let reference_embeddings = match embeddings {
        Some(p) => {
            let refs = parse_anchor_embeddings(open(p)?, p)?;
            if refs.len() != records.len() {
                return Err(Error::Config(format!(
                    "{} anchor embeddings for {} anchors",
                    refs.len(),
                    records.len()
                )));
            }
            Some(refs)
        }
        None => None,
    };
    Ok(AnchorSet {
        records,
        reference_embeddings,
    })
}

/// `cluster,day_type,slot,duration_bin,mean_visits`, one line per cell.
pub fn write_profile(writer: impl Write, profile: &ClusterProfile) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["cluster", "day_type", "slot", "duration_bin", "mean_visits"])?;
    for (c, cells) in profile.cells.iter().enumerate() {
        for (i, v) in cells.iter().enumerate() {
            let bin = i % NUM_DURATION_BINS;
            let slot = (i / NUM_DURATION_BINS) % NUM_SLOTS;
            let day = DayType::from_index(i / (NUM_DURATION_BINS * NUM_SLOTS)).expect("two day types");
            wtr.write_record([c.to_string(), day.to_string(), slot.to_string(), bin.to_string(), v.to_string()])?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<profile>", e))?;
    Ok(())
}

pub fn write_similarity(writer: impl Write, hits: &[(String, f64)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["area_id", "similarity"])?;
    for (id, s) in hits {
        wtr.write_record([id.clone(), s.to_string()])?;
    }
    wtr.flush().map_err(|e| Error::io("<similarity>", e))?;
    Ok(())
}

/// FeatureCollection of mesh polygons carrying the `cluster` label for `k`.
pub fn embeddings_geojson(file: &EmbeddingFile, k: usize) -> Result<serde_json::Value> {
    let labels = file.clusters(k)?;
    let mut features = Vec::with_capacity(file.rows.len());
    for (r, label) in file.rows.iter().zip(labels) {
        let label = label.ok_or_else(|| Error::InvalidInput(format!("area {} has no cluster{k} label", r.geocode)))?;
        let g: Geocode = r
            .geocode
            .parse()
            .map_err(|_| Error::InvalidInput(format!("area id {} is not a mesh code", r.geocode)))?;
        let ring: Vec<[f64; 2]> = g.decode().1.iter().map(|&(lon, lat)| [lon, lat]).collect();
        features.push(json!({
            "type": "Feature",
            "geometry": { "type": "Polygon", "coordinates": [ring] },
            "properties": { "geocode": r.geocode, "cluster": label },
        }));
    }
    Ok(json!({ "type": "FeatureCollection", "features": features }))
}

const BIN_COLORS: [&str; NUM_DURATION_BINS] =
    ["#f7fbff", "#c6dbef", "#9ecae1", "#6baed6", "#4292c6", "#2171b5", "#08306b"];

/// Stacked bars of one cluster's profile: one bar per 30-minute slot, weekday
/// panel on top, weekend/holiday below, stacks colored by duration bin.
pub fn profile_svg(profile: &ClusterProfile, cluster: usize) -> Result<String> {
    let cells = profile
        .cells
        .get(cluster)
        .ok_or(Error::Range { index: cluster, len: profile.cells.len() })?;
    let (bar_w, panel_h, margin) = (10.0, 160.0, 30.0);
    let width = margin * 2.0 + bar_w * NUM_SLOTS as f64;
    let height = margin * 3.0 + panel_h * 2.0;
    let slot_total = |day: usize, slot: usize| -> f64 {
        let base = (day * NUM_SLOTS + slot) * NUM_DURATION_BINS;
        cells[base..base + NUM_DURATION_BINS].iter().sum()
    };
    let max = (0..2)
        .flat_map(|d| (0..NUM_SLOTS).map(move |s| (d, s)))
        .map(|(d, s)| slot_total(d, s))
        .fold(0.0, f64::max);
    let scale = if max > 0.0 { panel_h / max } else { 0.0 };

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    );
    for day in 0..2 {
        let label = DayType::from_index(day).expect("two day types");
        let bottom = margin + panel_h + day as f64 * (panel_h + margin);
        svg += &format!(
            "<text x=\"{margin}\" y=\"{}\" font-size=\"12\">cluster {cluster} {label}</text>\n",
            bottom - panel_h - 6.0
        );
        for slot in 0..NUM_SLOTS {
            let mut y = bottom;
            let x = margin + slot as f64 * bar_w;
            for (bin, color) in BIN_COLORS.iter().enumerate() {
                let h = cells[(day * NUM_SLOTS + slot) * NUM_DURATION_BINS + bin] * scale;
                if h <= 0.0 {
                    continue;
                }
                y -= h;
                svg += &format!(
                    "<rect x=\"{x:.2}\" y=\"{y:.4}\" width=\"{:.2}\" height=\"{h:.4}\" fill=\"{color}\" stroke=\"#555\" stroke-width=\"0.2\"/>\n",
                    bar_w - 1.0
                );
            }
        }
        svg += &format!(
            "<line x1=\"{margin}\" y1=\"{bottom}\" x2=\"{}\" y2=\"{bottom}\" stroke=\"black\"/>\n",
            width - margin
        );
    }
    svg += "</svg>\n";
    Ok(svg)
}
