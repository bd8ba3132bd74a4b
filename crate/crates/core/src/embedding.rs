//! The area embedding model.
//!
//! Each area `m` owns a row `e_m` of the input matrix `W` (areas x 8). The
//! shared output matrix `W_out` (8 x 168) maps it to class logits, and
//! `softmax(e_m W_out)` approximates the area's stay-class frequency vector.
//! Training minimizes the count-weighted cross-entropy
//!
//! ```text
//! L_m = -sum_k f_mk * log softmax(e_m W_out)_k
//! ```
//!
//! averaged over a batch of areas. This is the same objective as averaging
//! one-hot cross-entropy over every individual stay of the area, so the
//! model is trained on the 168-column count matrix directly.
//!
//! Rows listed in `frozen` are never updated; they hold anchor embeddings.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregate::AreaTable;
use crate::anchoring::AnchorSchedule;
use crate::error::{Error, Result};
use crate::stay::NUM_CLASSES;

/// Embedding dimension.
pub const DIM: usize = 8;

pub type Vector = [f64; DIM];

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Numerically stable softmax (max-logit subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log softmax` computed as `z - max - log(sum(exp(z - max)))`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - max - lse).collect()
}

/// A normalized stay-class distribution over the 168 classes.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyVector(Vec<f64>);

impl FrequencyVector {
    pub fn from_counts(counts: &[f64]) -> Result<Self> {
        if counts.len() != NUM_CLASSES {
            return Err(Error::InvalidInput(format!(
                "frequency vector needs {NUM_CLASSES} entries, got {}",
                counts.len()
            )));
        }
        if counts.iter().any(|&c| !c.is_finite() || c < 0.0) {
            return Err(Error::InvalidInput("counts must be finite and non-negative".into()));
        }
        let total: f64 = counts.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidInput("all-zero count vector".into()));
        }
        Ok(FrequencyVector(counts.iter().map(|c| c / total).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Training input: one count vector per area id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AreaCounts {
    pub ids: Vec<String>,
    pub counts: Vec<Vec<f64>>,
    /// Distinct users per area where known (0 for pseudo-areas).
    pub users: Vec<usize>,
}

impl AreaCounts {
    /// Areas of `table`; ids are the geocode, optionally prefixed (e.g.
    /// `"nagoya2021:"`) so the same mesh from different datasets stays distinct.
    pub fn from_table(table: &AreaTable, prefix: &str) -> Self {
        let mut out = AreaCounts::default();
        for (g, row) in &table.rows {
            out.ids.push(format!("{prefix}{g}"));
            out.counts.push(row.counts.iter().map(|&c| c as f64).collect());
            out.users.push(row.unique_users);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: String, counts: Vec<f64>, users: usize) {
        self.ids.push(id);
        self.counts.push(counts);
        self.users.push(users);
    }

    /// Concatenates datasets, rejecting duplicate ids.
    pub fn concat(parts: &[AreaCounts]) -> Result<Self> {
        let mut out = AreaCounts::default();
        let mut seen = BTreeSet::new();
        for part in parts {
            for i in 0..part.len() {
                if !seen.insert(part.ids[i].clone()) {
                    return Err(Error::InvalidInput(format!("duplicate area id {}", part.ids[i])));
                }
                out.push(part.ids[i].clone(), part.counts[i].clone(), part.users[i]);
            }
        }
        Ok(out)
    }

    pub fn frequencies(&self) -> Result<Vec<FrequencyVector>> {
        self.ids
            .iter()
            .zip(&self.counts)
            .map(|(id, c)| {
                FrequencyVector::from_counts(c)
                    .map_err(|e| Error::InvalidInput(format!("area {id}: {e}")))
            })
            .collect()
    }
}

/// Area id -> 8-dimensional embedding, in id order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    pub vectors: BTreeMap<String, Vector>,
}

impl EmbeddingTable {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Vector> {
        self.vectors.get(id)
    }

    pub fn insert(&mut self, id: impl Into<String>, v: Vector) -> Result<()> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("embedding has non-finite entries".into()));
        }
        self.vectors.insert(id.into(), v);
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.vectors.keys()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    area_ids: Vec<String>,
    index: HashMap<String, usize>,
    w: Vec<Vector>,
    /// Row-major `DIM x NUM_CLASSES`.
    w_out: Vec<f64>,
    frozen: BTreeSet<usize>,
}

impl EmbeddingModel {
    /// Builds a model from explicit parameters.
    pub fn from_parts(area_ids: Vec<String>, w: Vec<Vector>, w_out: Vec<f64>, frozen: BTreeSet<usize>) -> Result<Self> {
        if area_ids.len() != w.len() {
            return Err(Error::InvalidInput("one embedding row per area id required".into()));
        }
        if w_out.len() != DIM * NUM_CLASSES {
            return Err(Error::InvalidInput(format!("output matrix must have {} entries", DIM * NUM_CLASSES)));
        }
        if let Some(&r) = frozen.iter().find(|&&r| r >= w.len()) {
            return Err(Error::Range { index: r, len: w.len() });
        }
        if w.iter().flatten().chain(&w_out).any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("model parameters must be finite".into()));
        }
        let mut index = HashMap::with_capacity(area_ids.len());
        for (i, id) in area_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate area id {id}")));
            }
        }
        Ok(EmbeddingModel {
            area_ids,
            index,
            w,
            w_out,
            frozen,
        })
    }

    /// Uniform `(-0.5/DIM, 0.5/DIM)` rows, zero output matrix. Rows named in
    /// `fixed` take the given vector and are frozen.
    pub fn initialize(area_ids: Vec<String>, fixed: &BTreeMap<String, Vector>, rng: &mut impl Rng) -> Result<Self> {
        let bound = 0.5 / DIM as f64;
        let mut frozen = BTreeSet::new();
        let w = area_ids
            .iter()
            .enumerate()
            .map(|(i, id)| match fixed.get(id) {
                Some(v) => {
                    frozen.insert(i);
                    *v
                }
                None => std::array::from_fn(|_| rng.random_range(-bound..bound)),
            })
            .collect();
        Self::from_parts(area_ids, w, vec![0.0; DIM * NUM_CLASSES], frozen)
    }

    pub fn num_areas(&self) -> usize {
        self.area_ids.len()
    }

    pub fn area_ids(&self) -> &[String] {
        &self.area_ids
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn embedding(&self, row: usize) -> &Vector {
        &self.w[row]
    }

    pub fn embeddings(&self) -> &[Vector] {
        &self.w
    }

    pub fn w_out(&self) -> &[f64] {
        &self.w_out
    }

    pub fn frozen_rows(&self) -> &BTreeSet<usize> {
        &self.frozen
    }

    pub fn is_frozen(&self, row: usize) -> bool {
        self.frozen.contains(&row)
    }

    pub fn freeze(&mut self, row: usize) -> Result<()> {
        if row >= self.w.len() {
            return Err(Error::Range { index: row, len: self.w.len() });
        }
        self.frozen.insert(row);
        Ok(())
    }

    pub fn set_embedding(&mut self, row: usize, v: Vector) {
        self.w[row] = v;
    }

    pub fn w_out_mut(&mut self) -> &mut [f64] {
        &mut self.w_out
    }

    pub fn logits(&self, row: usize) -> Vec<f64> {
        logits_of(&self.w[row], &self.w_out)
    }

    /// `softmax(e_m W_out)` for the area in `row`.
    pub fn predict_frequency(&self, row: usize) -> Result<FrequencyVector> {
        if row >= self.w.len() {
            return Err(Error::Range { index: row, len: self.w.len() });
        }
        Ok(FrequencyVector(softmax(&self.logits(row))))
    }

    /// Every row, frozen ones included.
    pub fn embedding_table(&self) -> EmbeddingTable {
        EmbeddingTable {
            vectors: self.area_ids.iter().cloned().zip(self.w.iter().copied()).collect(),
        }
    }

    /// Trainable rows only.
    pub fn trainable_table(&self) -> EmbeddingTable {
        EmbeddingTable {
            vectors: self
                .area_ids
                .iter()
                .zip(&self.w)
                .enumerate()
                .filter(|(i, _)| !self.frozen.contains(i))
                .map(|(_, (id, v))| (id.clone(), *v))
                .collect(),
        }
    }

    /// Text format: a `H=8 N=168 areas=<count>` header, one `id v0..v7` line
    /// per area, 8 lines of 168 output weights, then `frozen: id ...`.
    pub fn write(&self, mut out: impl Write) -> Result<()> {
        let io = |e| Error::io("<model>", e);
        writeln!(out, "H={DIM} N={NUM_CLASSES} areas={}", self.w.len()).map_err(io)?;
        for (id, v) in self.area_ids.iter().zip(&self.w) {
            if id.is_empty() || id.contains(char::is_whitespace) {
                return Err(Error::InvalidInput(format!("area id {id:?} cannot be written")));
            }
            let vals: Vec<String> = v.iter().map(f64::to_string).collect();
            writeln!(out, "{id} {}", vals.join(" ")).map_err(io)?;
        }
        for h in 0..DIM {
            let vals: Vec<String> = self.w_out[h * NUM_CLASSES..(h + 1) * NUM_CLASSES]
                .iter()
                .map(f64::to_string)
                .collect();
            writeln!(out, "{}", vals.join(" ")).map_err(io)?;
        }
        let frozen: Vec<&str> = self.frozen.iter().map(|&r| self.area_ids[r].as_str()).collect();
        if frozen.is_empty() {
            writeln!(out, "frozen:").map_err(io)?;
        } else {
            writeln!(out, "frozen: {}", frozen.join(" ")).map_err(io)?;
        }
        Ok(())
    }

    pub fn parse(reader: impl Read, origin: &Path) -> Result<Self> {
        let lines: Vec<String> = BufReader::new(reader)
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(origin, e))?;
        let err = |line: usize, msg: &str| Error::parse(origin, line, msg.to_string());
        let header = lines.first().ok_or_else(|| err(1, "empty model file"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 || fields[0] != format!("H={DIM}") || fields[1] != format!("N={NUM_CLASSES}") {
            return Err(err(1, "expected header `H=8 N=168 areas=<count>`"));
        }
        let n: usize = fields[2]
            .strip_prefix("areas=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(1, "bad area count"))?;
        if lines.len() < 1 + n + DIM + 1 {
            return Err(err(lines.len(), "model file is truncated"));
        }
        let parse_floats = |line: usize, text: &str, expect: usize| -> Result<Vec<f64>> {
            let vals: Vec<f64> = text
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| err(line, &format!("bad number: {e}")))?;
            if vals.len() != expect {
                return Err(err(line, &format!("expected {expect} values, got {}", vals.len())));
            }
            Ok(vals)
        };
        let mut ids = Vec::with_capacity(n);
        let mut w = Vec::with_capacity(n);
        for (i, line) in lines[1..1 + n].iter().enumerate() {
            let (id, rest) = line.split_once(' ').ok_or_else(|| err(i + 2, "missing vector"))?;
            let vals = parse_floats(i + 2, rest, DIM)?;
            ids.push(id.to_string());
            w.push(std::array::from_fn(|k| vals[k]));
        }
        let mut w_out = Vec::with_capacity(DIM * NUM_CLASSES);
        for h in 0..DIM {
            let line = 1 + n + h;
            w_out.extend(parse_floats(line + 1, &lines[line], NUM_CLASSES)?);
        }
        let frozen_line = 1 + n + DIM;
        let names = lines[frozen_line]
            .strip_prefix("frozen:")
            .ok_or_else(|| err(frozen_line + 1, "expected `frozen:` line"))?;
        let lookup: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut frozen = BTreeSet::new();
        for name in names.split_whitespace() {
            let r = lookup
                .get(name)
                .ok_or_else(|| err(frozen_line + 1, &format!("unknown frozen id {name}")))?;
            frozen.insert(*r);
        }
        Self::from_parts(ids, w, w_out, frozen).map_err(|e| err(1, &e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(file, path)
    }
}

fn logits_of(e: &Vector, w_out: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; NUM_CLASSES];
    for (h, &eh) in e.iter().enumerate() {
        if eh == 0.0 {
            continue;
        }
        let row = &w_out[h * NUM_CLASSES..(h + 1) * NUM_CLASSES];
        for (zk, wk) in z.iter_mut().zip(row) {
            *zk += eh * wk;
        }
    }
    z
}

/// Loss and gradients of a (possibly weighted) batch objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    /// Gradient for each embedding row touched by the batch, frozen rows
    /// included. Applying them is the optimizer's decision.
    pub rows: BTreeMap<usize, Vector>,
    /// Row-major `DIM x NUM_CLASSES`.
    pub w_out: Vec<f64>,
}

impl Gradients {
    fn zero() -> Self {
        Gradients {
            loss: 0.0,
            rows: BTreeMap::new(),
            w_out: vec![0.0; DIM * NUM_CLASSES],
        }
    }

    /// Adds `scale * (mean loss over batch)` and its gradients.
    fn accumulate(&mut self, model: &EmbeddingModel, batch: &[(usize, &FrequencyVector)], scale: f64) {
        if batch.is_empty() || scale == 0.0 {
            return;
        }
        let weight = scale / batch.len() as f64;
        for &(row, target) in batch {
            let e = &model.w[row];
            let z = logits_of(e, &model.w_out);
            let logp = log_softmax(&z);
            let f = target.as_slice();
            self.loss -= weight * dot(f, &logp);
            // d loss / d z_k = p_k - f_k (targets sum to one).
            let dz: Vec<f64> = logp.iter().zip(f).map(|(lp, fk)| weight * (lp.exp() - fk)).collect();
            let g_row = self.rows.entry(row).or_insert([0.0; DIM]);
            for h in 0..DIM {
                let w_row = &model.w_out[h * NUM_CLASSES..(h + 1) * NUM_CLASSES];
                g_row[h] += dot(w_row, &dz);
                let g_out = &mut self.w_out[h * NUM_CLASSES..(h + 1) * NUM_CLASSES];
                for (g, d) in g_out.iter_mut().zip(&dz) {
                    *g += e[h] * d;
                }
            }
        }
    }
}

/// Mean cross-entropy over `batch` and its analytic gradients.
pub fn loss_and_gradients(model: &EmbeddingModel, batch: &[(usize, &FrequencyVector)]) -> Result<Gradients> {
    anchored_loss_and_gradients(model, batch, &[], 0.0)
}

/// `(1 - p) * mean_loss(data) + p * mean_loss(anchors)` and its gradients.
pub fn anchored_loss_and_gradients(
    model: &EmbeddingModel,
    data: &[(usize, &FrequencyVector)],
    anchors: &[(usize, &FrequencyVector)],
    p: f64,
) -> Result<Gradients> {
    if data.is_empty() && anchors.is_empty() {
        return Err(Error::Empty("gradient batch".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("anchoring power {p} outside [0, 1]")));
    }
    for &(row, _) in data.iter().chain(anchors) {
        if row >= model.num_areas() {
            return Err(Error::Range { index: row, len: model.num_areas() });
        }
    }
    let mut g = Gradients::zero();
    g.accumulate(model, data, 1.0 - p);
    g.accumulate(model, anchors, p);
    Ok(g)
}

/// Mean over areas of `1 - cos(f_hat_m, f_m)`.
pub fn approximation_loss(model: &EmbeddingModel, counts: &AreaCounts) -> Result<f64> {
    let losses = approximation_losses(model, counts)?;
    if losses.is_empty() {
        return Err(Error::Empty("approximation loss over zero areas".into()));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Per-area `1 - cos(f_hat_m, f_m)`, in the order of `counts`.
pub fn approximation_losses(model: &EmbeddingModel, counts: &AreaCounts) -> Result<Vec<f64>> {
    counts
        .ids
        .iter()
        .zip(&counts.counts)
        .map(|(id, c)| {
            let row = model
                .row_of(id)
                .ok_or_else(|| Error::NotFound(format!("area {id} not in model")))?;
            let predicted = model.predict_frequency(row)?;
            Ok(1.0 - cosine(predicted.as_slice(), c))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    /// Plain stochastic gradient descent.
    Sgd,
    /// Adam with per-row moment estimates; rows absent from a batch are not touched.
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_areas: usize,
    pub rng_seed: u64,
    pub schedule: AnchorSchedule,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 0.05,
            batch_areas: 256,
            rng_seed: 0,
            schedule: AnchorSchedule::none(),
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_areas == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        self.schedule.validate()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        TrainConfig {
            rng_seed: seed,
            ..self.clone()
        }
    }
}

/// One training example: a model row and its target distribution.
#[derive(Debug, Clone)]
pub struct TrainingArea {
    pub row: usize,
    pub target: FrequencyVector,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean combined objective per epoch.
    pub epoch_loss: Vec<f64>,
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: Vec<u32>,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    fn new(blocks: usize, block_len: usize) -> Self {
        AdamState {
            m: vec![0.0; blocks * block_len],
            v: vec![0.0; blocks * block_len],
            steps: vec![0; blocks],
        }
    }

    fn step(&mut self, block: usize, params: &mut [f64], grad: &[f64], lr: f64) {
        let n = params.len();
        self.steps[block] += 1;
        let t = self.steps[block] as i32;
        let c1 = 1.0 - ADAM_B1.powi(t);
        let c2 = 1.0 - ADAM_B2.powi(t);
        let m = &mut self.m[block * n..(block + 1) * n];
        let v = &mut self.v[block * n..(block + 1) * n];
        for i in 0..n {
            m[i] = ADAM_B1 * m[i] + (1.0 - ADAM_B1) * grad[i];
            v[i] = ADAM_B2 * v[i] + (1.0 - ADAM_B2) * grad[i] * grad[i];
            params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Runs the training loop on an initialized model.
///
/// Each step takes one batch of `data` and, when the schedule weights
/// anchors, one batch of `anchors`, and descends on
/// `(1 - p) * L_data + p * L_anchor` with `p` fixed for the epoch. The
/// learning rate decays linearly to 10% of its initial value.
pub fn fit(
    model: &mut EmbeddingModel,
    data: &[TrainingArea],
    anchors: &[TrainingArea],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("no training areas".into()));
    }
    for a in data.iter().chain(anchors) {
        if a.row >= model.num_areas() {
            return Err(Error::Range { index: a.row, len: model.num_areas() });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x5eed_0f_a2ea);
    let batch = cfg.batch_areas.min(data.len());
    let steps_per_epoch = data.len().div_ceil(batch);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut row_state = AdamState::new(model.num_areas(), DIM);
    let mut out_state = AdamState::new(1, DIM * NUM_CLASSES);

    let mut data_order: Vec<usize> = (0..data.len()).collect();
    let mut anchor_order: Vec<usize> = (0..anchors.len()).collect();
    let anchor_batch = cfg.batch_areas.min(anchors.len());
    let mut report = TrainReport::default();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let p = if anchors.is_empty() {
            0.0
        } else {
            cfg.schedule.power(epoch, cfg.epochs)?
        };
        data_order.shuffle(&mut rng);
        anchor_order.shuffle(&mut rng);
        let mut anchor_cursor = 0usize;
        let mut epoch_loss = 0.0;
        for chunk in data_order.chunks(batch) {
            let lr = cfg.learning_rate * (1.0 - 0.9 * step as f64 / (total_steps - 1).max(1) as f64);
            step += 1;
            let data_batch: Vec<(usize, &FrequencyVector)> =
                chunk.iter().map(|&i| (data[i].row, &data[i].target)).collect();
            let mut anchor_rows = Vec::with_capacity(anchor_batch);
            if p > 0.0 {
                for _ in 0..anchor_batch {
                    let a = &anchors[anchor_order[anchor_cursor]];
                    anchor_rows.push((a.row, &a.target));
                    anchor_cursor = (anchor_cursor + 1) % anchors.len();
                }
            }
            let g = anchored_loss_and_gradients(model, &data_batch, &anchor_rows, p)?;
            if !g.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    learning_rate: cfg.learning_rate,
                });
            }
            epoch_loss += g.loss;
            apply(model, &g, cfg.optimizer, lr, &mut row_state, &mut out_state);
        }
        let mean = epoch_loss / steps_per_epoch as f64;
        if !mean.is_finite() || model.w.iter().flatten().chain(&model.w_out).any(|x| !x.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                learning_rate: cfg.learning_rate,
            });
        }
        report.epoch_loss.push(mean);
    }
    Ok(report)
}

fn apply(
    model: &mut EmbeddingModel,
    g: &Gradients,
    optimizer: Optimizer,
    lr: f64,
    row_state: &mut AdamState,
    out_state: &mut AdamState,
) {
    for (&row, grad) in &g.rows {
        if model.frozen.contains(&row) {
            continue;
        }
        match optimizer {
            Optimizer::Sgd => {
                for (w, d) in model.w[row].iter_mut().zip(grad) {
                    *w -= lr * d;
                }
            }
            Optimizer::Adam => row_state.step(row, &mut model.w[row], grad, lr),
        }
    }
    match optimizer {
        Optimizer::Sgd => {
            for (w, d) in model.w_out.iter_mut().zip(&g.w_out) {
                *w -= lr * d;
            }
        }
        Optimizer::Adam => out_state.step(0, &mut model.w_out, &g.w_out, lr),
    }
}

/// Trains a fresh model on `counts` without anchors.
pub fn train(counts: &AreaCounts, cfg: &TrainConfig) -> Result<EmbeddingModel> {
    Ok(train_with_report(counts, cfg)?.0)
}

pub fn train_with_report(counts: &AreaCounts, cfg: &TrainConfig) -> Result<(EmbeddingModel, TrainReport)> {
    cfg.validate()?;
    let targets = counts.frequencies()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut model = EmbeddingModel::initialize(counts.ids.clone(), &BTreeMap::new(), &mut rng)?;
    let data: Vec<TrainingArea> = targets
        .into_iter()
        .enumerate()
        .map(|(row, target)| TrainingArea { row, target })
        .collect();
    let report = fit(&mut model, &data, &[], cfg)?;
    Ok((model, report))
}
