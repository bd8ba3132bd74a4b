//! Anchors that pin the embedding space across independently trained datasets.
//!
//! An anchor is a pseudo-area with a sample of quantized stay records and a
//! fixed reference embedding. Training a new dataset with the anchor rows
//! frozen forces the shared output matrix into the coordinate system the
//! reference embeddings define, so areas from different datasets become
//! directly comparable.
//!
//! The combined objective is `(1 - p) * L_data + p * L_anchor`, where the
//! anchoring power `p` decays per epoch from `beta` to `alpha`:
//!
//! ```text
//! p(t) = exp((t / T) * (ln alpha - ln beta) + ln beta)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregate::aggregate_with_assignment;
use crate::analysis::kmeans;
use crate::embedding::{
    approximation_loss, cosine, euclidean, fit, train, AreaCounts, EmbeddingModel, EmbeddingTable, TrainConfig,
    TrainingArea, Vector,
};
use crate::error::{Error, Result};
use crate::stay::{arrival_bin, duration_bin, DayType, HolidayCalendar, StayClass, StayRecord, NUM_CLASSES};

pub const DEFAULT_ALPHA: f64 = 0.3;
pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_ANCHORS: usize = 512;
pub const DEFAULT_RECORDS_PER_ANCHOR: usize = 20_000;
pub const QUANTUM_MINUTES: u32 = 15;
pub const MINUTES_PER_WEEK: u32 = 7 * 24 * 60;

/// Prefix of anchor pseudo-area ids inside a model.
pub const ANCHOR_ID_PREFIX: &str = "anchor:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    /// No anchor term.
    None,
    /// Anchors concatenated with the data, no weighting.
    Mixed,
    /// `p = alpha` throughout.
    Constant,
    /// `p` decays exponentially from `beta` to `alpha`.
    Exponential,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::None => "none",
            ScheduleKind::Mixed => "mixed",
            ScheduleKind::Constant => "constant",
            ScheduleKind::Exponential => "exponential",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ScheduleKind::None),
            "mixed" => Ok(ScheduleKind::Mixed),
            "constant" => Ok(ScheduleKind::Constant),
            "exponential" => Ok(ScheduleKind::Exponential),
            other => Err(Error::Config(format!("unknown schedule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorSchedule {
    pub kind: ScheduleKind,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for AnchorSchedule {
    fn default() -> Self {
        Self::exponential(DEFAULT_ALPHA, DEFAULT_BETA)
    }
}

impl AnchorSchedule {
    pub fn none() -> Self {
        AnchorSchedule {
            kind: ScheduleKind::None,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
        }
    }

    pub fn mixed() -> Self {
        AnchorSchedule {
            kind: ScheduleKind::Mixed,
            ..Self::none()
        }
    }

    pub fn constant(alpha: f64) -> Self {
        AnchorSchedule {
            kind: ScheduleKind::Constant,
            alpha,
            beta: alpha,
        }
    }

    pub fn exponential(alpha: f64, beta: f64) -> Self {
        AnchorSchedule {
            kind: ScheduleKind::Exponential,
            alpha,
            beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |x: f64| x > 0.0 && x <= 1.0;
        match self.kind {
            ScheduleKind::None | ScheduleKind::Mixed => Ok(()),
            ScheduleKind::Constant if in_range(self.alpha) => Ok(()),
            ScheduleKind::Exponential if in_range(self.alpha) && in_range(self.beta) && self.alpha <= self.beta => {
                Ok(())
            }
            _ => Err(Error::Config(format!(
                "invalid {} schedule: alpha = {}, beta = {} (need 0 < alpha <= beta <= 1)",
                self.kind, self.alpha, self.beta
            ))),
        }
    }

    /// Anchoring power for epoch `t` of `total`. Mixed and None carry no
    /// anchor weight and return 0.
    pub fn power(&self, t: usize, total: usize) -> Result<f64> {
        anchoring_power(t, total, self).map(|p| p.unwrap_or(0.0))
    }
}

/// `p` at epoch `t` of `total`; `None` for the unweighted Mixed schedule.
pub fn anchoring_power(t: usize, total: usize, sched: &AnchorSchedule) -> Result<Option<f64>> {
    if total == 0 || t > total {
        return Err(Error::Config(format!("epoch {t} outside 0..={total}")));
    }
    sched.validate()?;
    Ok(match sched.kind {
        ScheduleKind::None => Some(0.0),
        ScheduleKind::Mixed => None,
        ScheduleKind::Constant => Some(sched.alpha),
        ScheduleKind::Exponential => {
            let frac = t as f64 / total as f64;
            let (la, lb) = (sched.alpha.ln(), sched.beta.ln());
            Some((frac * (la - lb) + lb).exp())
        }
    })
}

/// One quantized anchor record: arrival as minutes since Monday 00:00 and
/// stay length, both floored to 15 minutes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AnchorRecord {
    pub arrival: u32,
    pub stay: u32,
}

impl AnchorRecord {
    pub fn new(arrival: u32, stay: u32) -> Result<Self> {
        if arrival % QUANTUM_MINUTES != 0 || stay % QUANTUM_MINUTES != 0 || arrival >= MINUTES_PER_WEEK {
            return Err(Error::InvalidInput(format!(
                "anchor record ({arrival}, {stay}) is not on the 15-minute grid of one week"
            )));
        }
        Ok(AnchorRecord { arrival, stay })
    }

    pub fn from_stay(stay: &StayRecord) -> Self {
        use chrono::Datelike;
        let day = stay.arrival.weekday().num_days_from_monday();
        let minute = day * 24 * 60 + stay.arrival_minute_of_day();
        AnchorRecord {
            arrival: minute - minute % QUANTUM_MINUTES,
            stay: stay.duration_minutes - stay.duration_minutes % QUANTUM_MINUTES,
        }
    }

    /// Saturday and Sunday positions are weekend; holidays are not representable.
    pub fn class(&self) -> StayClass {
        let day = self.arrival / (24 * 60);
        let minute = self.arrival % (24 * 60);
        StayClass {
            day_type: if day >= 5 { DayType::WeekendOrHoliday } else { DayType::Weekday },
            arrival_bin: arrival_bin(minute),
            duration_bin: duration_bin(self.stay),
        }
    }
}

/// Anchor pseudo-areas: sampled records and, once computed, reference embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub records: Vec<Vec<AnchorRecord>>,
    pub reference_embeddings: Option<Vec<Vector>>,
}

impl AnchorSet {
    pub fn empty() -> Self {
        AnchorSet {
            records: Vec::new(),
            reference_embeddings: Some(Vec::new()),
        }
    }

    pub fn n_anchors(&self) -> usize {
        self.records.len()
    }

    pub fn total_records(&self) -> usize {
        self.records.iter().map(Vec::len).sum()
    }

    pub fn model_id(anchor: usize) -> String {
        format!("{ANCHOR_ID_PREFIX}{anchor}")
    }

    pub fn counts(&self, anchor: usize) -> Vec<f64> {
        let mut c = vec![0.0; NUM_CLASSES];
        for r in &self.records[anchor] {
            c[r.class().index()] += 1.0;
        }
        c
    }

    /// Anchors as training areas with ids `anchor:<n>`.
    pub fn area_counts(&self) -> AreaCounts {
        let mut out = AreaCounts::default();
        for i in 0..self.n_anchors() {
            out.push(Self::model_id(i), self.counts(i), 0);
        }
        out
    }

    /// Reference embeddings keyed by model id.
    pub fn reference_table(&self) -> Result<BTreeMap<String, Vector>> {
        let refs = self
            .reference_embeddings
            .as_ref()
            .ok_or_else(|| Error::Config("anchor set has no reference embeddings".into()))?;
        if refs.len() != self.n_anchors() {
            return Err(Error::Config(format!(
                "{} reference embeddings for {} anchors",
                refs.len(),
                self.n_anchors()
            )));
        }
        Ok(refs.iter().enumerate().map(|(i, v)| (Self::model_id(i), *v)).collect())
    }
}

/// A combined source corpus: per-area training counts plus each area's
/// quantized stays to sample anchors from.
#[derive(Debug, Clone, Default)]
pub struct AnchorSource {
    pub counts: AreaCounts,
    pub pools: Vec<Vec<AnchorRecord>>,
}

impl AnchorSource {
    /// Aggregates one dataset; area ids get `prefix` so datasets stay distinct.
    pub fn from_stays(stays: &[StayRecord], cal: &HolidayCalendar, prefix: &str) -> Result<Self> {
        let agg = aggregate_with_assignment(stays, cal)?;
        let counts = AreaCounts::from_table(&agg.table, prefix);
        let members = agg.members();
        let pools = agg
            .table
            .rows
            .keys()
            .map(|g| members[g].iter().map(|&i| AnchorRecord::from_stay(&stays[i])).collect())
            .collect();
        Ok(AnchorSource { counts, pools })
    }

    pub fn concat(parts: Vec<AnchorSource>) -> Result<Self> {
        let counts = AreaCounts::concat(&parts.iter().map(|p| p.counts.clone()).collect::<Vec<_>>())?;
        let pools = parts.into_iter().flat_map(|p| p.pools).collect();
        Ok(AnchorSource { counts, pools })
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Everything produced while building an anchor set.
#[derive(Debug, Clone)]
pub struct AnchorBuild {
    pub anchors: AnchorSet,
    /// Unanchored embedding of the source corpus used for clustering.
    pub base: EmbeddingModel,
    /// Joint model of anchors plus source; its source rows are the reference space.
    pub joint: EmbeddingModel,
    /// Source area index of each cluster member, per anchor.
    pub clusters: Vec<Vec<usize>>,
}

impl AnchorBuild {
    /// The joint model's embeddings of the source areas.
    pub fn reference_space(&self) -> EmbeddingTable {
        let mut t = self.joint.embedding_table();
        t.vectors.retain(|id, _| !id.starts_with(ANCHOR_ID_PREFIX));
        t
    }
}

const EMPTY_CLUSTER_RETRIES: u64 = 10;

/// Clusters the source embedding and samples one anchor per cluster.
///
/// 1. Train the source corpus without anchors.
/// 2. k-means++ the embeddings into `n` clusters.
/// 3. Sample `records_per_anchor` records per cluster from its areas' stays,
///    with replacement only when the pool is smaller than the sample.
/// 4. Records are already on the 15-minute grid.
/// 5. Train anchors and source jointly; the anchor rows become the references.
pub fn generate_anchor_set(
    source: &AnchorSource,
    n: usize,
    records_per_anchor: usize,
    cfg: &TrainConfig,
) -> Result<AnchorBuild> {
    if n == 0 || n > source.len() {
        return Err(Error::Config(format!(
            "cannot build {n} anchors from {} areas",
            source.len()
        )));
    }
    if records_per_anchor == 0 {
        return Err(Error::Config("records per anchor must be positive".into()));
    }
    let plain = TrainConfig {
        schedule: AnchorSchedule::none(),
        ..cfg.clone()
    };
    let base = train(&source.counts, &plain)?;
    let points: Vec<Vector> = (0..source.len()).map(|i| *base.embedding(i)).collect();

    let mut clusters = Vec::new();
    for attempt in 0..EMPTY_CLUSTER_RETRIES {
        let km = kmeans(&points, n, cfg.rng_seed.wrapping_add(attempt))?;
        let mut members = vec![Vec::new(); n];
        for (i, &l) in km.labels.iter().enumerate() {
            members[l].push(i);
        }
        let full = members.iter().all(|m| !m.is_empty());
        clusters = members;
        if full {
            break;
        }
    }
    if clusters.iter().any(Vec::is_empty) {
        clusters.retain(|m| !m.is_empty());
        warn!(
            "k-means left empty clusters after {EMPTY_CLUSTER_RETRIES} attempts; using {} anchors instead of {n}",
            clusters.len()
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0xa9c4_0a11);
    let records: Vec<Vec<AnchorRecord>> = clusters
        .iter()
        .map(|members| {
            let pool: Vec<AnchorRecord> = members.iter().flat_map(|&i| source.pools[i].iter().copied()).collect();
            sample_records(&pool, records_per_anchor, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut anchors = AnchorSet {
        records,
        reference_embeddings: None,
    };

    let plus = AreaCounts::concat(&[anchors.area_counts(), source.counts.clone()])?;
    let joint = train(&plus, &plain)?;
    anchors.reference_embeddings = Some((0..anchors.n_anchors()).map(|i| *joint.embedding(i)).collect());
    Ok(AnchorBuild {
        anchors,
        base,
        joint,
        clusters,
    })
}

fn sample_records(pool: &[AnchorRecord], n: usize, rng: &mut impl Rng) -> Result<Vec<AnchorRecord>> {
    if pool.is_empty() {
        return Err(Error::InvalidInput("anchor cluster has no stay records".into()));
    }
    if pool.len() >= n {
        Ok(sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect())
    } else {
        Ok((0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect())
    }
}

/// Trains `counts` with the anchor rows frozen at their reference embeddings.
/// Data rows come first in the model, anchors after.
pub fn train_anchored_model(counts: &AreaCounts, anchors: &AnchorSet, cfg: &TrainConfig) -> Result<EmbeddingModel> {
    cfg.validate()?;
    let fixed = anchors.reference_table()?;
    let anchor_counts = anchors.area_counts();
    let ids: Vec<String> = counts.ids.iter().chain(&anchor_counts.ids).cloned().collect();
    let data_targets = counts.frequencies()?;
    let anchor_targets = anchor_counts.frequencies()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut model = EmbeddingModel::initialize(ids, &fixed, &mut rng)?;
    let mut data: Vec<TrainingArea> = data_targets
        .into_iter()
        .enumerate()
        .map(|(row, target)| TrainingArea { row, target })
        .collect();
    let offset = counts.len();
    let mut anchor_areas: Vec<TrainingArea> = anchor_targets
        .into_iter()
        .enumerate()
        .map(|(i, target)| TrainingArea { row: offset + i, target })
        .collect();
    if cfg.schedule.kind == ScheduleKind::Mixed {
        data.append(&mut anchor_areas);
    }
    fit(&mut model, &data, &anchor_areas, cfg)?;
    Ok(model)
}

/// Anchored training returning only the dataset's own embeddings.
pub fn train_anchored(counts: &AreaCounts, anchors: &AnchorSet, cfg: &TrainConfig) -> Result<EmbeddingTable> {
    Ok(train_anchored_model(counts, anchors, cfg)?.trainable_table())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistanceMetric {
    Euclidean,
    /// `1 - cosine similarity`.
    Cosine,
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(DistanceMetric::Euclidean),
            "cosine" => Ok(DistanceMetric::Cosine),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

/// Mean distance between the two embeddings of each shared area.
pub fn misalignment(e: &EmbeddingTable, reference: &EmbeddingTable, metric: DistanceMetric) -> Result<f64> {
    let a: BTreeSet<&String> = e.ids().collect();
    let b: BTreeSet<&String> = reference.ids().collect();
    if a != b {
        let only_a: Vec<&&String> = a.difference(&b).take(5).collect();
        let only_b: Vec<&&String> = b.difference(&a).take(5).collect();
        return Err(Error::KeyMismatch(format!(
            "area sets differ: only in first {only_a:?}, only in second {only_b:?}"
        )));
    }
    if a.is_empty() {
        return Err(Error::Empty("misalignment over zero areas".into()));
    }
    let total: f64 = e
        .vectors
        .iter()
        .map(|(id, v)| {
            let r = &reference.vectors[id];
            match metric {
                DistanceMetric::Euclidean => euclidean(v, r),
                // identical vectors are exactly 0 apart despite rounding in the cosine
                DistanceMetric::Cosine if v == r => 0.0,
                DistanceMetric::Cosine => (1.0 - cosine(v, r)).clamp(0.0, 2.0),
            }
        })
        .sum();
    Ok(total / a.len() as f64)
}

/// Misalignment and approximation loss for one seed pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRow {
    pub seed_a: u64,
    pub seed_b: u64,
    pub anchored_euclidean: f64,
    pub anchored_cosine: f64,
    pub unanchored_euclidean: f64,
    pub unanchored_cosine: f64,
    pub anchored_approx_loss: f64,
    pub unanchored_approx_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub rows: Vec<ValidationRow>,
}

impl ValidationReport {
    fn mean(&self, f: impl Fn(&ValidationRow) -> f64) -> f64 {
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_anchored_euclidean(&self) -> f64 {
        self.mean(|r| r.anchored_euclidean)
    }

    pub fn mean_unanchored_euclidean(&self) -> f64 {
        self.mean(|r| r.unanchored_euclidean)
    }

    pub fn mean_anchored_cosine(&self) -> f64 {
        self.mean(|r| r.anchored_cosine)
    }

    pub fn mean_unanchored_cosine(&self) -> f64 {
        self.mean(|r| r.unanchored_cosine)
    }

    pub fn mean_anchored_approx_loss(&self) -> f64 {
        self.mean(|r| r.anchored_approx_loss)
    }

    pub fn mean_unanchored_approx_loss(&self) -> f64 {
        self.mean(|r| r.unanchored_approx_loss)
    }

    pub fn write_csv(&self, writer: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "seed_a",
            "seed_b",
            "anchored_euclidean",
            "anchored_cosine",
            "unanchored_euclidean",
            "unanchored_cosine",
            "anchored_approx_loss",
            "unanchored_approx_loss",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.seed_a.to_string(),
                r.seed_b.to_string(),
                r.anchored_euclidean.to_string(),
                r.anchored_cosine.to_string(),
                r.unanchored_euclidean.to_string(),
                r.unanchored_cosine.to_string(),
                r.anchored_approx_loss.to_string(),
                r.unanchored_approx_loss.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<report>", e))?;
        Ok(())
    }
}

/// Trains `counts` once per seed with and without anchors and compares
/// every unordered seed pair.
pub fn run_validation_experiment(
    counts: &AreaCounts,
    anchors: &AnchorSet,
    seeds: &[u64],
    cfg: &TrainConfig,
) -> Result<ValidationReport> {
    if seeds.len() < 2 {
        return Err(Error::Config("validation needs at least two seeds".into()));
    }
    let plain = TrainConfig {
        schedule: AnchorSchedule::none(),
        ..cfg.clone()
    };
    let anchored_cfg = if cfg.schedule.kind == ScheduleKind::None {
        TrainConfig {
            schedule: AnchorSchedule::default(),
            ..cfg.clone()
        }
    } else {
        cfg.clone()
    };
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let anchored = train_anchored_model(counts, anchors, &anchored_cfg.with_seed(seed))?;
        let unanchored = train(counts, &plain.with_seed(seed))?;
        runs.push((
            anchored.trainable_table(),
            approximation_loss(&anchored, counts)?,
            unanchored.trainable_table(),
            approximation_loss(&unanchored, counts)?,
        ));
    }
    let mut rows = Vec::new();
    for i in 0..seeds.len() {
        for j in i + 1..seeds.len() {
            let (a, b) = (&runs[i], &runs[j]);
            rows.push(ValidationRow {
                seed_a: seeds[i],
                seed_b: seeds[j],
                anchored_euclidean: misalignment(&a.0, &b.0, DistanceMetric::Euclidean)?,
                anchored_cosine: misalignment(&a.0, &b.0, DistanceMetric::Cosine)?,
                unanchored_euclidean: misalignment(&a.2, &b.2, DistanceMetric::Euclidean)?,
                unanchored_cosine: misalignment(&a.2, &b.2, DistanceMetric::Cosine)?,
                anchored_approx_loss: (a.1 + b.1) / 2.0,
                unanchored_approx_loss: (a.3 + b.3) / 2.0,
            });
        }
    }
    Ok(ValidationReport { rows })
}

/// Grid for the anchor size, schedule and alpha studies.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub anchor_counts: Vec<usize>,
    pub record_counts: Vec<usize>,
    /// Anchor set shape used by the schedule and alpha studies.
    pub base_anchors: usize,
    pub base_records: usize,
    pub schedules: Vec<AnchorSchedule>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            anchor_counts: vec![16, 64, 256],
            record_counts: vec![1_000, 5_000, 20_000],
            base_anchors: 64,
            base_records: 5_000,
            schedules: vec![
                AnchorSchedule::mixed(),
                AnchorSchedule::constant(DEFAULT_ALPHA),
                AnchorSchedule::default(),
            ],
            alphas: vec![0.1, 0.3, 0.6],
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    AnchorSize,
    Schedule,
    Alpha,
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Study::AnchorSize => "anchor_size",
            Study::Schedule => "schedule",
            Study::Alpha => "alpha",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub study: Study,
    pub n_anchors: usize,
    pub records_per_anchor: usize,
    pub schedule: ScheduleKind,
    pub alpha: f64,
    pub seed: u64,
    pub euclidean: f64,
    pub cosine: f64,
    pub approx_loss: f64,
}

impl SweepRow {
    pub fn total_anchor_records(&self) -> usize {
        self.n_anchors * self.records_per_anchor
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn study(&self, study: Study) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(move |r| r.study == study)
    }

    pub fn write_csv(&self, writer: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "study",
            "n_anchors",
            "records_per_anchor",
            "schedule",
            "alpha",
            "seed",
            "euclidean",
            "cosine",
            "approx_loss",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.study.to_string(),
                r.n_anchors.to_string(),
                r.records_per_anchor.to_string(),
                r.schedule.to_string(),
                r.alpha.to_string(),
                r.seed.to_string(),
                r.euclidean.to_string(),
                r.cosine.to_string(),
                r.approx_loss.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<sweep>", e))?;
        Ok(())
    }
}

/// Re-embeds the source corpus with each anchor configuration and measures
/// misalignment against the joint reference space the anchors came from.
pub fn run_appendix_sweeps(source: &AnchorSource, grid: &SweepGrid, cfg: &TrainConfig) -> Result<SweepReport> {
    if grid.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let mut report = SweepReport::default();
    let mut evaluate = |study: Study, build: &AnchorBuild, sched: AnchorSchedule, records: usize, seed: u64| -> Result<()> {
        let run_cfg = TrainConfig {
            schedule: sched,
            ..cfg.with_seed(seed)
        };
        let model = train_anchored_model(&source.counts, &build.anchors, &run_cfg)?;
        let table = model.trainable_table();
        let reference = build.reference_space();
        report.rows.push(SweepRow {
            study,
            n_anchors: build.anchors.n_anchors(),
            records_per_anchor: records,
            schedule: sched.kind,
            alpha: sched.alpha,
            seed,
            euclidean: misalignment(&table, &reference, DistanceMetric::Euclidean)?,
            cosine: misalignment(&table, &reference, DistanceMetric::Cosine)?,
            approx_loss: approximation_loss(&model, &source.counts)?,
        });
        Ok(())
    };

    let base_sched = if cfg.schedule.kind == ScheduleKind::Exponential {
        cfg.schedule
    } else {
        AnchorSchedule::default()
    };
    for &n in &grid.anchor_counts {
        for &r in &grid.record_counts {
            // the anchor set itself is random, so each seed gets its own build
            for &seed in &grid.seeds {
                let build = generate_anchor_set(source, n, r, &cfg.with_seed(seed))?;
                evaluate(Study::AnchorSize, &build, base_sched, r, seed)?;
            }
        }
    }
    if grid.schedules.is_empty() && grid.alphas.is_empty() {
        return Ok(report);
    }
    let base: Vec<AnchorBuild> = grid
        .seeds
        .iter()
        .map(|&seed| generate_anchor_set(source, grid.base_anchors, grid.base_records, &cfg.with_seed(seed)))
        .collect::<Result<_>>()?;
    for sched in &grid.schedules {
        for (&seed, build) in grid.seeds.iter().zip(&base) {
            evaluate(Study::Schedule, build, *sched, grid.base_records, seed)?;
        }
    }
    for &alpha in &grid.alphas {
        let sched = AnchorSchedule::exponential(alpha, base_sched.beta.max(alpha));
        for (&seed, build) in grid.seeds.iter().zip(&base) {
            evaluate(Study::Alpha, build, sched, grid.base_records, seed)?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, planted_city};

    fn small_source(per_archetype: usize, seed: u64) -> AnchorSource {
        let (city, _) = planted_city(per_archetype, seed).unwrap();
        let stays = generate(&city).unwrap();
        AnchorSource::from_stays(&stays, &HolidayCalendar::default(), "").unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig { epochs: 40, batch_areas: 8, ..TrainConfig::default() }
    }

    fn unit(k: usize) -> Vector {
        let mut v = [0.0; 8];
        v[k] = 1.0;
        v
    }

    fn table(entries: &[(&str, Vector)]) -> EmbeddingTable {
        let mut t = EmbeddingTable::default();
        for (id, v) in entries {
            t.insert(*id, *v).unwrap();
        }
        t
    }

    #[test]
    fn exponential_power_endpoints_and_midpoint() {
        let s = AnchorSchedule::default();
        assert!((s.power(0, 200).unwrap() - 1.0).abs() < 1e-12);
        assert!((s.power(200, 200).unwrap() - 0.3).abs() < 1e-12);
        assert!((s.power(100, 200).unwrap() - 0.547722557505166).abs() < 1e-12);
        let s = AnchorSchedule::exponential(0.1, 0.8);
        assert!((s.power(0, 7).unwrap() - 0.8).abs() < 1e-12);
        assert!((s.power(7, 7).unwrap() - 0.1).abs() < 1e-12);
        for t in 0..50 {
            assert!(s.power(t + 1, 50).unwrap() < s.power(t, 50).unwrap());
        }
    }

    #[test]
    fn other_schedules() {
        assert_eq!(AnchorSchedule::constant(0.3).power(17, 20).unwrap(), 0.3);
        assert_eq!(AnchorSchedule::none().power(3, 20).unwrap(), 0.0);
        assert_eq!(anchoring_power(3, 20, &AnchorSchedule::mixed()).unwrap(), None);
        assert!(matches!(anchoring_power(21, 20, &AnchorSchedule::default()), Err(Error::Config(_))));
        assert!(matches!(anchoring_power(0, 0, &AnchorSchedule::default()), Err(Error::Config(_))));
        for bad in [
            AnchorSchedule::exponential(0.0, 1.0),
            AnchorSchedule::exponential(-0.3, 1.0),
            AnchorSchedule::exponential(0.5, 0.3),
            AnchorSchedule::exponential(0.3, 1.5),
            AnchorSchedule::constant(0.0),
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
        for kind in ["none", "mixed", "constant", "exponential"] {
            assert_eq!(kind.parse::<ScheduleKind>().unwrap().to_string(), kind);
        }
        assert!("linear".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn misalignment_examples() {
        let e = table(&[("m", unit(0))]);
        let r = table(&[("m", unit(1))]);
        assert!((misalignment(&e, &r, DistanceMetric::Euclidean).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert!((misalignment(&e, &r, DistanceMetric::Cosine).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(misalignment(&e, &e, DistanceMetric::Euclidean).unwrap(), 0.0);
        assert_eq!(misalignment(&e, &e, DistanceMetric::Cosine).unwrap(), 0.0);

        let v = [0.3, -1.2, 0.5, 0.0, 2.0, 0.1, -0.4, 0.9];
        let e = table(&[("m", v)]);
        let r = table(&[("m", v.map(|x| 2.0 * x))]);
        assert!(misalignment(&e, &r, DistanceMetric::Cosine).unwrap().abs() < 1e-12);
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((misalignment(&e, &r, DistanceMetric::Euclidean).unwrap() - len).abs() < 1e-12);

        let other = table(&[("n", v)]);
        assert!(matches!(misalignment(&e, &other, DistanceMetric::Euclidean), Err(Error::KeyMismatch(_))));
        let empty = EmbeddingTable::default();
        assert!(matches!(misalignment(&empty, &empty, DistanceMetric::Cosine), Err(Error::Empty(_))));
    }

    #[test]
    fn anchor_records_are_quantized() {
        assert!(AnchorRecord::new(15, 30).is_ok());
        assert!(AnchorRecord::new(16, 30).is_err());
        assert!(AnchorRecord::new(15, 31).is_err());
        assert!(AnchorRecord::new(MINUTES_PER_WEEK, 0).is_err());
        let friday_late = AnchorRecord::new(4 * 1440 + 23 * 60 + 45, 60).unwrap();
        let c = friday_late.class();
        assert_eq!(c.day_type, DayType::Weekday);
        assert_eq!(c.arrival_bin, 11);
        assert_eq!(c.duration_bin, 2);
        assert_eq!(AnchorRecord::new(5 * 1440, 0).unwrap().class().day_type, DayType::WeekendOrHoliday);

        let src = small_source(1, 3);
        let build = generate_anchor_set(&src, 2, 500, &quick()).unwrap();
        for r in build.anchors.records.iter().flatten() {
            assert_eq!(r.arrival % 15, 0);
            assert_eq!(r.stay % 15, 0);
            assert!(r.arrival < MINUTES_PER_WEEK);
        }
    }

    #[test]
    fn anchor_set_shape_and_degenerate_cases() {
        let src = small_source(2, 4);
        let build = generate_anchor_set(&src, 3, 700, &quick()).unwrap();
        assert_eq!(build.anchors.n_anchors(), 3);
        assert!(build.anchors.records.iter().all(|r| r.len() == 700));
        assert_eq!(build.anchors.reference_embeddings.as_ref().unwrap().len(), 3);
        assert_eq!(build.reference_space().len(), src.len());
        let members: usize = build.clusters.iter().map(Vec::len).sum();
        assert_eq!(members, src.len());

        // one anchor draws from every area
        let one = generate_anchor_set(&src, 1, 200, &quick()).unwrap();
        assert_eq!(one.clusters, vec![(0..src.len()).collect::<Vec<_>>()]);

        assert!(matches!(generate_anchor_set(&src, src.len() + 1, 10, &quick()), Err(Error::Config(_))));
        assert!(matches!(generate_anchor_set(&src, 0, 10, &quick()), Err(Error::Config(_))));

        // more records than the pool holds forces sampling with replacement
        let big = generate_anchor_set(&src, 2, 50_000, &quick()).unwrap();
        assert!(big.anchors.records.iter().all(|r| r.len() == 50_000));
    }

    #[test]
    fn no_anchors_reduces_to_plain_training() {
        let src = small_source(1, 5);
        let cfg = quick().with_seed(9);
        let plain = train(&src.counts, &cfg).unwrap();
        let anchored = train_anchored_model(&src.counts, &AnchorSet::empty(), &cfg).unwrap();
        assert_eq!(plain.embeddings(), anchored.embeddings());
        assert_eq!(plain.w_out(), anchored.w_out());
    }

    #[test]
    fn anchor_rows_keep_their_references() {
        let src = small_source(1, 6);
        let target = small_source(1, 7);
        let build = generate_anchor_set(&src, 3, 400, &quick()).unwrap();
        let refs = build.anchors.reference_embeddings.clone().unwrap();
        for sched in [AnchorSchedule::default(), AnchorSchedule::constant(0.5), AnchorSchedule::mixed()] {
            let cfg = TrainConfig { schedule: sched, ..quick() };
            let model = train_anchored_model(&target.counts, &build.anchors, &cfg).unwrap();
            for (i, r) in refs.iter().enumerate() {
                let row = model.row_of(&AnchorSet::model_id(i)).unwrap();
                assert_eq!(model.embedding(row).map(f64::to_bits), r.map(f64::to_bits));
            }
            let t = model.trainable_table();
            assert_eq!(t.len(), target.len());
            assert!(t.ids().all(|id| !id.starts_with(ANCHOR_ID_PREFIX)));
        }

        let mut broken = build.anchors.clone();
        broken.reference_embeddings = None;
        assert!(matches!(train_anchored(&target.counts, &broken, &quick()), Err(Error::Config(_))));
    }

    #[test]
    fn identical_seeds_give_zero_anchored_misalignment() {
        let src = small_source(1, 8);
        let build = generate_anchor_set(&src, 2, 300, &quick()).unwrap();
        let report = run_validation_experiment(&src.counts, &build.anchors, &[4, 4], &quick()).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].anchored_euclidean, 0.0);
        assert_eq!(report.rows[0].anchored_cosine, 0.0);
        let three = run_validation_experiment(&src.counts, &build.anchors, &[1, 2, 3], &quick()).unwrap();
        assert_eq!(three.rows.len(), 3);
        assert!(matches!(
            run_validation_experiment(&src.counts, &build.anchors, &[1], &quick()),
            Err(Error::Config(_))
        ));
        let mut out = Vec::new();
        three.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 4);
    }
}
