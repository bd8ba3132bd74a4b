//! Clustering and lookups over trained embeddings.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregate::AreaTable;
use crate::embedding::{cosine, EmbeddingModel, EmbeddingTable, FrequencyVector, Vector, DIM};
use crate::error::{Error, Result};
use crate::mesh::{Geocode, MeshLevel};
use crate::stay::NUM_FINE_CELLS;

pub const MAX_LLOYD_ITERATIONS: usize = 300;
pub const CENTROID_TOLERANCE: f64 = 1e-8;
/// Independent k-means++ starts per clustering call.
pub const KMEANS_RESTARTS: usize = 10;

fn sq_dist(a: &Vector, b: &Vector) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Raw k-means output over a point slice.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vector>,
    /// Within-cluster sum of squares after each assignment step.
    pub objective_history: Vec<f64>,
}

impl KMeans {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    pub fn objective(&self) -> f64 {
        self.objective_history.last().copied().unwrap_or(0.0)
    }
}

/// Nearest centroid, lowest index on ties.
fn nearest(p: &Vector, centroids: &[Vector]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn seed_plus_plus(points: &[Vector], k: usize, rng: &mut impl Rng) -> Vec<Vector> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// An empty cluster is re-seeded at the point farthest from its current
/// centroid. Stops when no centroid moves more than [`CENTROID_TOLERANCE`]
/// or after [`MAX_LLOYD_ITERATIONS`]. Cluster ids are canonicalized by
/// descending size, then lexicographic centroid order.
///
/// Runs [`KMEANS_RESTARTS`] seedings from one seeded stream and keeps the
/// run with the lowest final objective (earliest on ties); its history is
/// the one reported.
pub fn kmeans(points: &[Vector], k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(Error::Config(format!("k = {k} must be in 1..={}", points.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = lloyd(points, k, &mut rng);
    for _ in 1..KMEANS_RESTARTS {
        let run = lloyd(points, k, &mut rng);
        if run.objective() < best.objective() {
            best = run;
        }
    }
    Ok(canonicalize(best))
}

fn lloyd(points: &[Vector], k: usize, rng: &mut impl Rng) -> KMeans {
    let mut centroids = seed_plus_plus(points, k, rng);
    let mut labels = vec![0usize; points.len()];
    let mut history = Vec::new();

    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            labels[i] = j;
            dists[i] = d;
        }
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            // Farthest point from its centroid that is not the last member of its cluster.
            let candidate = (0..points.len())
                .filter(|&i| counts[labels[i]] > 1 && dists[i] > 0.0)
                .max_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap_or(Ordering::Equal).then(b.cmp(&a)));
            if let Some(i) = candidate {
                counts[labels[i]] -= 1;
                labels[i] = j;
                counts[j] = 1;
                dists[i] = 0.0;
                centroids[j] = points[i];
            }
        }
        history.push(dists.iter().sum());

        let mut sums = vec![[0.0; DIM]; k];
        for (p, &l) in points.iter().zip(&labels) {
            for h in 0..DIM {
                sums[l][h] += p[h];
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let next: Vector = std::array::from_fn(|h| sums[j][h] / counts[j] as f64);
            shift = shift.max(sq_dist(&next, &centroids[j]).sqrt());
            centroids[j] = next;
        }
        if shift < CENTROID_TOLERANCE {
            break;
        }
    }
    // Final assignment against the converged centroids.
    let mut objective = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (j, d) = nearest(p, &centroids);
        labels[i] = j;
        objective += d;
    }
    history.push(objective);
    KMeans {
        labels,
        centroids,
        objective_history: history,
    }
}

fn canonicalize(km: KMeans) -> KMeans {
    let sizes = km.sizes();
    let mut order: Vec<usize> = (0..km.centroids.len()).collect();
    order.sort_by(|&a, &b| {
        sizes[b].cmp(&sizes[a]).then_with(|| {
            km.centroids[a]
                .partial_cmp(&km.centroids[b])
                .unwrap_or(Ordering::Equal)
        })
    });
    let mut rename = vec![0; order.len()];
    for (new, &old) in order.iter().enumerate() {
        rename[old] = new;
    }
    KMeans {
        labels: km.labels.iter().map(|&l| rename[l]).collect(),
        centroids: order.iter().map(|&o| km.centroids[o]).collect(),
        objective_history: km.objective_history,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub k: usize,
    pub labels: BTreeMap<String, usize>,
    pub centroids: Vec<Vector>,
    pub objective_history: Vec<f64>,
}

impl ClusterAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in self.labels.values() {
            sizes[l] += 1;
        }
        sizes
    }
}

pub fn kmeanspp_cluster(table: &EmbeddingTable, k: usize, seed: u64) -> Result<ClusterAssignment> {
    let ids: Vec<&String> = table.ids().collect();
    let points: Vec<Vector> = table.vectors.values().copied().collect();
    let km = kmeans(&points, k, seed)?;
    Ok(ClusterAssignment {
        k,
        labels: ids.into_iter().cloned().zip(km.labels).collect(),
        centroids: km.centroids,
        objective_history: km.objective_history,
    })
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must have equal length");
    let n = a.len() as f64;
    let comb2 = |x: f64| x * (x - 1.0) / 2.0;
    let mut table: HashMap<(usize, usize), f64> = HashMap::new();
    let mut rows: HashMap<usize, f64> = HashMap::new();
    let mut cols: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *rows.entry(x).or_default() += 1.0;
        *cols.entry(y).or_default() += 1.0;
    }
    let index: f64 = table.values().map(|&c| comb2(c)).sum();
    let sum_rows: f64 = rows.values().map(|&c| comb2(c)).sum();
    let sum_cols: f64 = cols.values().map(|&c| comb2(c)).sum();
    let expected = sum_rows * sum_cols / comb2(n);
    let max = (sum_rows + sum_cols) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Mean visits per area in each `[day_type][30-min slot][duration_bin]` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterProfile {
    /// `cells[cluster][fine_cell]`.
    pub cells: Vec<Vec<f64>>,
    pub area_count: Vec<usize>,
}

pub fn cluster_profile(assign: &ClusterAssignment, table: &AreaTable) -> Result<ClusterProfile> {
    let by_code: HashMap<String, &crate::aggregate::AreaRow> =
        table.rows.iter().map(|(g, r)| (g.to_string(), r)).collect();
    let mut cells = vec![vec![0.0; NUM_FINE_CELLS]; assign.k];
    let mut area_count = vec![0usize; assign.k];
    for (id, &label) in &assign.labels {
        let row = by_code
            .get(id.as_str())
            .ok_or_else(|| Error::KeyMismatch(format!("area {id} is not in the area table")))?;
        area_count[label] += 1;
        for (acc, &c) in cells[label].iter_mut().zip(&row.fine) {
            *acc += c as f64;
        }
    }
    for (cluster, &n) in cells.iter_mut().zip(&area_count) {
        if n > 0 {
            cluster.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    Ok(ClusterProfile { cells, area_count })
}

/// Areas whose cosine similarity to `query` is at least `threshold`, best
/// first, ties by ascending id. The query itself is excluded.
pub fn similar_areas(table: &EmbeddingTable, query: &str, threshold: f64) -> Result<Vec<(String, f64)>> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [-1, 1]")));
    }
    let q = table
        .get(query)
        .ok_or_else(|| Error::NotFound(format!("query area {query}")))?;
    let mut hits: Vec<(String, f64)> = table
        .vectors
        .iter()
        .filter(|(id, _)| id.as_str() != query)
        .map(|(id, v)| (id.clone(), cosine(q, v).clamp(-1.0, 1.0)))
        .filter(|(_, s)| *s >= threshold)
        .collect();
    hits.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
    Ok(hits)
}

/// The area's own vector, else (for a 50m code) its 250m parent's.
pub fn resolve_embedding(table: &EmbeddingTable, g: &Geocode) -> Result<Vector> {
    if let Some(v) = table.get(&g.to_string()) {
        return Ok(*v);
    }
    if g.level() == MeshLevel::M50 {
        if let Some(v) = table.get(&g.parent_250m().to_string()) {
            return Ok(*v);
        }
    }
    Err(Error::NotFound(format!("no embedding for {g} or its parent")))
}

/// Reconstructed stay-class distribution of an area.
pub fn approximate_trend(model: &EmbeddingModel, row: usize) -> Result<FrequencyVector> {
    model.predict_frequency(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::aggregate;
    use crate::stay::{HolidayCalendar, StayRecord};
    use chrono::NaiveDate;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn table_of(points: &[Vector]) -> EmbeddingTable {
        let mut t = EmbeddingTable::default();
        for (i, p) in points.iter().enumerate() {
            t.insert(format!("a{i:04}"), *p).unwrap();
        }
        t
    }

    fn blobs(seed: u64) -> (Vec<Vector>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let centers: [Vector; 3] = [[0.0; 8], [5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 5.0, 5.0, 0.0, 0.0, 0.0, 0.0]];
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..90 {
            let c = i % 3;
            pts.push(std::array::from_fn(|h| centers[c][h] + noise.sample(&mut rng)));
            labels.push(c);
        }
        (pts, labels)
    }

    #[test]
    fn single_cluster_centroid_is_mean() {
        let (pts, _) = blobs(1);
        let km = kmeans(&pts, 1, 7).unwrap();
        assert!(km.labels.iter().all(|&l| l == 0));
        for h in 0..DIM {
            let mean = pts.iter().map(|p| p[h]).sum::<f64>() / pts.len() as f64;
            assert!((km.centroids[0][h] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn separated_blobs_are_recovered() {
        for seed in 0..5 {
            let (pts, planted) = blobs(seed);
            let km = kmeans(&pts, 3, seed).unwrap();
            assert_eq!(adjusted_rand_index(&km.labels, &planted), 1.0);
        }
    }

    #[test]
    fn duplicates_share_labels() {
        let (pts, _) = blobs(3);
        let doubled: Vec<Vector> = pts.iter().flat_map(|p| [*p, *p]).collect();
        let km = kmeans(&doubled, 4, 11).unwrap();
        for pair in km.labels.chunks(2) {
            assert_eq!(pair[0], pair[1]);
        }
    }

    #[test]
    fn k_larger_than_points_is_config_error() {
        let (pts, _) = blobs(0);
        assert!(matches!(kmeans(&pts[..3], 4, 0), Err(Error::Config(_))));
        assert!(matches!(kmeans(&pts, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn empty_clusters_are_reseeded() {
        // Two distinct values and k = 2 with a duplicate-heavy set.
        let pts: Vec<Vector> = (0..10).map(|i| if i < 9 { [0.0; 8] } else { [1.0; 8] }).collect();
        let km = kmeans(&pts, 2, 0).unwrap();
        assert_eq!(km.sizes(), vec![9, 1]);
    }

    #[test]
    fn canonical_labels_order_by_size() {
        let mut pts: Vec<Vector> = (0..6).map(|_| [10.0; 8]).collect();
        pts.extend((0..2).map(|_| [0.0; 8]));
        let km = kmeans(&pts, 2, 3).unwrap();
        assert_eq!(km.labels[0], 0);
        assert_eq!(km.labels[7], 1);
    }

    #[test]
    fn ari_known_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 3, 3]), 1.0);
        let a = [0, 0, 0, 1, 1];
        let b = [0, 0, 1, 1, 1];
        let ari = adjusted_rand_index(&a, &b);
        // Brute force via pair agreement counts.
        let n = a.len();
        let (mut ss, mut sd, mut ds, mut dd) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                match (a[i] == a[j], b[i] == b[j]) {
                    (true, true) => ss += 1.0,
                    (true, false) => sd += 1.0,
                    (false, true) => ds += 1.0,
                    (false, false) => dd += 1.0,
                }
            }
        }
        let brute = 2.0 * (ss * dd - sd * ds) / ((ss + sd) * (sd + dd) + (ss + ds) * (ds + dd));
        assert!((ari - brute).abs() < 1e-12, "{ari} vs {brute}");
    }

    #[test]
    fn similarity_search_semantics() {
        let mut t = EmbeddingTable::default();
        t.insert("a", [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        t.insert("b", [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        t.insert("c", [0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        t.insert("d", [-1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let hits = similar_areas(&t, "a", 0.5).unwrap();
        assert_eq!(hits, vec![("b".to_string(), 1.0)]);
        let all = similar_areas(&t, "a", -1.0).unwrap();
        assert_eq!(all.iter().map(|h| h.0.as_str()).collect::<Vec<_>>(), ["b", "c", "d"]);
        assert!(matches!(similar_areas(&t, "a", 1.0 + 1e-9), Err(Error::Config(_))));
        assert!(matches!(similar_areas(&t, "zz", 0.0), Err(Error::NotFound(_))));
    }

    #[test]
    fn resolve_falls_back_to_parent() {
        let g250 = Geocode::encode(35.0001, 135.0001, MeshLevel::M250).unwrap();
        let g50 = g250.child_50m(1, 2).unwrap();
        let other50 = g250.child_50m(3, 3).unwrap();
        let mut t = EmbeddingTable::default();
        t.insert(g50.to_string(), [1.0; 8]).unwrap();
        t.insert(g250.to_string(), [2.0; 8]).unwrap();
        assert_eq!(resolve_embedding(&t, &g50).unwrap(), [1.0; 8]);
        assert_eq!(resolve_embedding(&t, &other50).unwrap(), [2.0; 8]);
        let far = g250.offset_250m(2, 2).child_50m(0, 0).unwrap();
        assert!(matches!(resolve_embedding(&t, &far), Err(Error::NotFound(_))));
    }

    fn one_area_table(users: usize, copies: u64) -> AreaTable {
        let g = Geocode::encode(35.0001, 135.0001, MeshLevel::M250).unwrap();
        let mut stays = Vec::new();
        for c in 0..copies {
            let (center, _) = g.offset_250m(0, c).child_50m(2, 2).unwrap().decode();
            let arrival = NaiveDate::from_ymd_opt(2021, 4, 6).unwrap().and_hms_opt(8, 13, 0).unwrap();
            for u in 0..users {
                stays.push(StayRecord::new(format!("u{u}"), center.0, center.1, arrival, 45).unwrap());
            }
        }
        aggregate(&stays, &HolidayCalendar::default()).unwrap()
    }

    #[test]
    fn profile_of_single_stay_pattern() {
        let table = one_area_table(12, 1);
        let id = table.rows.keys().next().unwrap().to_string();
        let assign = ClusterAssignment {
            k: 1,
            labels: [(id, 0)].into_iter().collect(),
            centroids: vec![[0.0; 8]],
            objective_history: vec![],
        };
        let prof = cluster_profile(&assign, &table).unwrap();
        let nonzero: Vec<(usize, f64)> = prof.cells[0].iter().copied().enumerate().filter(|(_, v)| *v > 0.0).collect();
        // Weekday, slot 16 (08:00-08:29), duration bin 1; 12 stays in one area.
        assert_eq!(nonzero, vec![(16 * 7 + 1, 12.0)]);
    }

    #[test]
    fn identical_areas_profile_equals_each() {
        let table = one_area_table(12, 2);
        assert_eq!(table.len(), 2);
        let labels = table.rows.keys().map(|g| (g.to_string(), 0)).collect();
        let assign = ClusterAssignment {
            k: 1,
            labels,
            centroids: vec![[0.0; 8]],
            objective_history: vec![],
        };
        let prof = cluster_profile(&assign, &table).unwrap();
        let first = table.rows.values().next().unwrap();
        let expect: Vec<f64> = first.fine.iter().map(|&c| c as f64).collect();
        assert_eq!(prof.cells[0], expect);
        assert_eq!(prof.area_count, vec![2]);

        let mut missing = assign.clone();
        missing.labels.insert("5339000000".into(), 0);
        assert!(matches!(cluster_profile(&missing, &table), Err(Error::KeyMismatch(_))));
    }

    proptest! {
        #[test]
        fn lloyd_objective_never_increases(seed in 0u64..500, k in 1usize..8, n in 8usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vector> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
            let km = kmeans(&pts, k, seed).unwrap();
            for w in km.objective_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0), "{:?}", km.objective_history);
            }
            let sizes = km.sizes();
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            prop_assert!(km.labels.iter().all(|&l| l < k));
        }

        #[test]
        fn similarity_is_symmetric(seed in 0u64..200, theta in -1.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vector> = (0..12).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
            let t = table_of(&pts);
            for a in t.ids() {
                for (b, _) in similar_areas(&t, a, theta).unwrap() {
                    let back = similar_areas(&t, &b, theta).unwrap();
                    prop_assert!(back.iter().any(|(id, _)| id == a));
                }
            }
        }
    }
}
