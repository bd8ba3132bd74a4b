//! Deterministic synthetic stay data built from area archetypes.
//!
//! Each synthetic cell occupies the central 50m mesh of its own 250m mesh, so
//! a cell survives aggregation exactly when it has more than 10 users and
//! never merges with a neighbour. Every cell draws from a per-cell RNG derived
//! from the city seed, which makes the output independent of generation order.
//!
//! City config files are TOML with these keys:
//!
//! ```toml
//! origin_lat = 35.10
//! origin_lon = 136.90
//! start_date = "2021-04-05"
//! days = 28
//! variation = 1.0
//! rng_seed = 7
//!
//! [[archetypes]]
//! name = "office"
//! day_weights = { weekday = 0.95, weekend = 0.05 }
//! arrival = [{ mean = 525.0, std = 40.0, weight = 1.0 }]
//! duration = [{ mean = 540.0, std = 60.0, weight = 1.0 }]
//! users = 40
//! stays_per_user = 15
//!
//! [[cells]]
//! row = 0
//! col = 0
//! archetype = 0
//! users = 12      # optional override
//! ```

use chrono::{Datelike, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Geocode, MeshLevel};
use crate::stay::StayRecord;

/// One normal component of a mixture, in minutes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: f64,
    pub std: f64,
    pub weight: f64,
}

const fn comp(mean: f64, std: f64, weight: f64) -> Component {
    Component { mean, std, weight }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DayWeights {
    pub weekday: f64,
    pub weekend: f64,
}

impl DayWeights {
    pub fn weekend_probability(&self) -> f64 {
        self.weekend / (self.weekday + self.weekend)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeSpec {
    pub name: String,
    pub day_weights: DayWeights,
    /// Arrival minute-of-day mixture, truncated to `[0, 1440)`.
    pub arrival: Vec<Component>,
    /// Duration mixture in minutes, clamped to at least one minute.
    pub duration: Vec<Component>,
    pub users: u32,
    pub stays_per_user: u32,
}

impl ArchetypeSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("archetype {}: {msg}", self.name)));
        let dw = &self.day_weights;
        if dw.weekday < 0.0 || dw.weekend < 0.0 || dw.weekday + dw.weekend <= 0.0 {
            return bad("day weights must be non-negative and not both zero");
        }
        for (label, mix) in [("arrival", &self.arrival), ("duration", &self.duration)] {
            if mix.is_empty() {
                return bad(&format!("{label} mixture is empty"));
            }
            if mix.iter().any(|c| c.weight < 0.0 || c.std <= 0.0 || !c.mean.is_finite()) {
                return bad(&format!("{label} mixture needs weights >= 0 and std > 0"));
            }
            let total: f64 = mix.iter().map(|c| c.weight).sum();
            if (total - 1.0).abs() > 1e-6 {
                return bad(&format!("{label} mixture weights sum to {total}, not 1"));
            }
        }
        if self.stays_per_user == 0 {
            return bad("stays_per_user must be positive");
        }
        Ok(())
    }

    /// Mixture mean of the arrival distribution before truncation.
    pub fn mean_arrival(&self) -> f64 {
        self.arrival.iter().map(|c| c.weight * c.mean).sum()
    }

    /// Weekend short stays.
    pub fn entertainment() -> Self {
        ArchetypeSpec {
            name: "entertainment".into(),
            day_weights: DayWeights { weekday: 0.35, weekend: 0.65 },
            arrival: vec![comp(780.0, 120.0, 0.55), comp(1140.0, 90.0, 0.45)],
            duration: vec![comp(50.0, 30.0, 0.6), comp(150.0, 50.0, 0.4)],
            users: 40,
            stays_per_user: 15,
        }
    }

    /// Weekday stays longer than 360 minutes.
    pub fn office() -> Self {
        ArchetypeSpec {
            name: "office".into(),
            day_weights: DayWeights { weekday: 0.95, weekend: 0.05 },
            arrival: vec![comp(525.0, 40.0, 0.8), comp(780.0, 60.0, 0.2)],
            duration: vec![comp(540.0, 60.0, 0.75), comp(60.0, 30.0, 0.25)],
            users: 40,
            stays_per_user: 15,
        }
    }

    /// Weekday morning and evening stays under 30 minutes.
    pub fn station() -> Self {
        ArchetypeSpec {
            name: "station".into(),
            day_weights: DayWeights { weekday: 0.8, weekend: 0.2 },
            arrival: vec![comp(480.0, 45.0, 0.45), comp(1080.0, 60.0, 0.45), comp(750.0, 120.0, 0.1)],
            duration: vec![comp(12.0, 8.0, 0.85), comp(45.0, 20.0, 0.15)],
            users: 40,
            stays_per_user: 15,
        }
    }

    /// Night arrivals with stays longer than 720 minutes.
    pub fn residential() -> Self {
        ArchetypeSpec {
            name: "residential".into(),
            day_weights: DayWeights { weekday: 0.6, weekend: 0.4 },
            arrival: vec![comp(1290.0, 90.0, 0.75), comp(720.0, 180.0, 0.25)],
            duration: vec![comp(780.0, 120.0, 0.7), comp(300.0, 120.0, 0.3)],
            users: 40,
            stays_per_user: 15,
        }
    }

    pub fn defaults() -> Vec<Self> {
        vec![Self::entertainment(), Self::office(), Self::station(), Self::residential()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCell {
    /// 250m rows north of the origin.
    pub row: u32,
    /// 250m columns east of the origin.
    pub col: u32,
    pub archetype: usize,
    /// Overrides the archetype's user count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub users: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCity {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub start_date: NaiveDate,
    pub days: u32,
    /// Scale of per-cell perturbations of the archetype; 0 disables them.
    pub variation: f64,
    pub rng_seed: u64,
    pub archetypes: Vec<ArchetypeSpec>,
    pub cells: Vec<SyntheticCell>,
}

impl SyntheticCity {
    pub fn from_toml(text: &str) -> Result<Self> {
        let city: SyntheticCity =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad city config: {e}")))?;
        city.validate()?;
        Ok(city)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize city: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.days == 0 {
            return Err(Error::Config("city period must cover at least one day".into()));
        }
        if !(self.variation >= 0.0) {
            return Err(Error::Config("variation must be non-negative".into()));
        }
        for a in &self.archetypes {
            a.validate()?;
        }
        for (i, c) in self.cells.iter().enumerate() {
            if c.archetype >= self.archetypes.len() {
                return Err(Error::Config(format!("cell {i} names unknown archetype {}", c.archetype)));
            }
            self.cell_geocode(i)?;
        }
        Ok(())
    }

    fn origin(&self) -> Result<Geocode> {
        Geocode::encode(self.origin_lat, self.origin_lon, MeshLevel::M250).map_err(|_| {
            Error::Config(format!(
                "city origin ({}, {}) lies outside the mesh region",
                self.origin_lat, self.origin_lon
            ))
        })
    }

    /// The 50m mesh every stay of cell `i` falls into.
    pub fn cell_geocode(&self, i: usize) -> Result<Geocode> {
        let c = &self.cells[i];
        let g = self.origin()?.offset_250m(c.row as u64, c.col as u64).child_50m(2, 2)?;
        let cell = g.cell();
        Geocode::encode(cell.north, cell.east, MeshLevel::M50)
            .map_err(|_| Error::Config(format!("cell {i} lies outside the mesh region")))?;
        Ok(g)
    }

    pub fn cell_users(&self, i: usize) -> u32 {
        let c = &self.cells[i];
        c.users.unwrap_or(self.archetypes[c.archetype].users)
    }
}

fn cell_seed(city_seed: u64, cell: usize) -> u64 {
    // splitmix64 of the pair
    let mut z = city_seed ^ (cell as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn normal(rng: &mut impl Rng, mean: f64, std: f64) -> f64 {
    Normal::new(mean, std).expect("std > 0").sample(rng)
}

/// Randomly perturbed copy of an archetype for one cell.
fn perturb(spec: &ArchetypeSpec, variation: f64, rng: &mut impl Rng) -> ArchetypeSpec {
    if variation == 0.0 {
        return spec.clone();
    }
    let reweight = |mix: &[Component], rng: &mut ChaCha8Rng, shift: &dyn Fn(&Component, &mut ChaCha8Rng) -> f64| {
        let mut out: Vec<Component> = mix
            .iter()
            .map(|c| Component {
                mean: shift(c, rng),
                std: c.std,
                weight: c.weight * normal(rng, 0.0, 0.4 * variation).exp(),
            })
            .collect();
        let total: f64 = out.iter().map(|c| c.weight).sum();
        out.iter_mut().for_each(|c| c.weight /= total);
        out
    };
    let mut local = ChaCha8Rng::seed_from_u64(rng.random());
    let arrival = reweight(&spec.arrival, &mut local, &|c, r| c.mean + normal(r, 0.0, 40.0 * variation));
    let duration = reweight(&spec.duration, &mut local, &|c, r| c.mean * normal(r, 0.0, 0.2 * variation).exp());
    let p = spec.day_weights.weekend_probability().clamp(1e-3, 1.0 - 1e-3);
    let logit = (p / (1.0 - p)).ln() + normal(&mut local, 0.0, 0.5 * variation);
    let q = 1.0 / (1.0 + (-logit).exp());
    ArchetypeSpec {
        day_weights: DayWeights {
            weekday: 1.0 - q,
            weekend: q,
        },
        arrival,
        duration,
        ..spec.clone()
    }
}

fn pick(mix: &[Component], rng: &mut impl Rng) -> Component {
    let mut u: f64 = rng.random();
    for c in mix {
        if u < c.weight {
            return *c;
        }
        u -= c.weight;
    }
    *mix.last().expect("non-empty mixture")
}

/// Arrival minute of day from the mixture, resampled until inside the day.
fn sample_arrival(mix: &[Component], rng: &mut impl Rng) -> u32 {
    for _ in 0..1000 {
        let c = pick(mix, rng);
        let x = normal(rng, c.mean, c.std);
        if (0.0..1440.0).contains(&x) {
            return x as u32;
        }
    }
    rng.random_range(0..1440)
}

fn sample_duration(mix: &[Component], rng: &mut impl Rng) -> u32 {
    let c = pick(mix, rng);
    normal(rng, c.mean, c.std).round().max(1.0) as u32
}

/// Stay records for every cell of the city, cell by cell.
pub fn generate(city: &SyntheticCity) -> Result<Vec<StayRecord>> {
    city.validate()?;
    let dates: Vec<NaiveDate> = (0..city.days as i64)
        .map(|d| city.start_date + chrono::Duration::days(d))
        .collect();
    let is_weekend = |d: &NaiveDate| matches!(d.weekday(), Weekday::Sat | Weekday::Sun);
    let weekend: Vec<NaiveDate> = dates.iter().copied().filter(is_weekend).collect();
    let weekday: Vec<NaiveDate> = dates.iter().copied().filter(|d| !is_weekend(d)).collect();

    let mut stays = Vec::new();
    for (i, cell) in city.cells.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(city.rng_seed, i));
        let spec = perturb(&city.archetypes[cell.archetype], city.variation, &mut rng);
        let bounds = city.cell_geocode(i)?.cell();
        let p_weekend = spec.day_weights.weekend_probability();
        for u in 0..city.cell_users(i) {
            let user = format!("c{i}u{u}");
            for _ in 0..spec.stays_per_user {
                let want_weekend = rng.random::<f64>() < p_weekend;
                let pool = match (want_weekend, weekend.is_empty(), weekday.is_empty()) {
                    (true, false, _) | (false, _, true) => &weekend,
                    _ => &weekday,
                };
                let date = pool[rng.random_range(0..pool.len())];
                let minute = sample_arrival(&spec.arrival, &mut rng);
                let arrival = date.and_hms_opt(minute / 60, minute % 60, 0).expect("valid time");
                let lat = bounds.south + (bounds.north - bounds.south) * rng.random_range(0.01..0.99);
                let lon = bounds.west + (bounds.east - bounds.west) * rng.random_range(0.01..0.99);
                let duration = sample_duration(&spec.duration, &mut rng);
                stays.push(StayRecord::new(user.clone(), lat, lon, arrival, duration)?);
            }
        }
    }
    Ok(stays)
}

/// A city with `n_per_archetype` cells of each default archetype. Cell `i`
/// has archetype `i % 4`; the returned labels are that ground truth.
pub fn planted_city(n_per_archetype: usize, seed: u64) -> Result<(SyntheticCity, Vec<usize>)> {
    if n_per_archetype == 0 {
        return Err(Error::Config("need at least one cell per archetype".into()));
    }
    let archetypes = ArchetypeSpec::defaults();
    let n = n_per_archetype * archetypes.len();
    let width = (n as f64).sqrt().ceil() as u32;
    let cells: Vec<SyntheticCell> = (0..n)
        .map(|i| SyntheticCell {
            row: i as u32 / width,
            col: i as u32 % width,
            archetype: i % archetypes.len(),
            users: None,
        })
        .collect();
    let labels = cells.iter().map(|c| c.archetype).collect();
    let city = SyntheticCity {
        origin_lat: 35.10,
        origin_lon: 136.85,
        start_date: NaiveDate::from_ymd_opt(2021, 4, 5).expect("valid date"),
        days: 28,
        variation: 1.0,
        rng_seed: seed,
        archetypes,
        cells,
    };
    Ok((city, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::aggregate;
    use crate::stay::HolidayCalendar;

    fn tiny_city(users: &[u32]) -> SyntheticCity {
        let (mut city, _) = planted_city(1, 5).unwrap();
        city.cells = users
            .iter()
            .enumerate()
            .map(|(i, &u)| SyntheticCell {
                row: 0,
                col: i as u32,
                archetype: i % 4,
                users: Some(u),
            })
            .collect();
        city
    }

    #[test]
    fn planted_city_shape() {
        let (city, labels) = planted_city(25, 1).unwrap();
        assert_eq!(city.cells.len(), 100);
        for a in 0..4 {
            assert_eq!(labels.iter().filter(|&&l| l == a).count(), 25);
        }
        let (other, other_labels) = planted_city(25, 2).unwrap();
        assert_eq!(labels, other_labels);
        assert_eq!(city.cells, other.cells);
        assert_ne!(generate(&city).unwrap()[..50], generate(&other).unwrap()[..50]);
    }

    #[test]
    fn generation_is_deterministic() {
        let (city, _) = planted_city(2, 9).unwrap();
        assert_eq!(generate(&city).unwrap(), generate(&city).unwrap());
    }

    #[test]
    fn survival_follows_user_count() {
        let users = [10, 11, 3, 40, 10, 12];
        let city = tiny_city(&users);
        let stays = generate(&city).unwrap();
        let table = aggregate(&stays, &HolidayCalendar::default()).unwrap();
        for (i, &u) in users.iter().enumerate() {
            let g = city.cell_geocode(i).unwrap();
            assert_eq!(table.rows.contains_key(&g), u > 10, "cell {i} with {u} users");
            assert!(!table.rows.contains_key(&g.parent_250m()));
            if let Some(row) = table.get(&g) {
                assert_eq!(row.unique_users, u as usize);
            }
        }
    }

    #[test]
    fn arrival_means_match_spec() {
        for spec in ArchetypeSpec::defaults() {
            let city = SyntheticCity {
                variation: 0.0,
                archetypes: vec![ArchetypeSpec {
                    users: 100,
                    stays_per_user: 100,
                    ..spec.clone()
                }],
                cells: vec![SyntheticCell { row: 0, col: 0, archetype: 0, users: None }],
                ..planted_city(1, 3).unwrap().0
            };
            let stays = generate(&city).unwrap();
            assert!(stays.len() >= 10_000);
            let mean = stays.iter().map(|s| s.arrival_minute_of_day() as f64).sum::<f64>() / stays.len() as f64;
            assert!(
                (mean - spec.mean_arrival()).abs() < 30.0,
                "{}: {mean} vs {}",
                spec.name,
                spec.mean_arrival()
            );
            assert!(stays.iter().all(|s| s.duration_minutes >= 1));
        }
    }

    #[test]
    fn config_round_trip_and_validation() {
        let (city, _) = planted_city(1, 4).unwrap();
        let text = city.to_toml().unwrap();
        assert_eq!(SyntheticCity::from_toml(&text).unwrap(), city);

        let mut bad = city.clone();
        bad.archetypes[0].arrival[0].weight = 0.9;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));

        let mut outside = city;
        outside.origin_lon = 99.0;
        assert!(matches!(generate(&outside), Err(Error::Config(_))));
    }
}
