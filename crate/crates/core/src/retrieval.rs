//! Exact rotation-augmented retrieval and recall@N evaluation.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{footprint_iou, great_circle_km, Footprint, GeoPoint};
use crate::store::{EmbeddingStore, Kind, Rotation};

/// Bytes per stored vector component.
const F32_BYTES: u64 = 4;

/// Memory held by the vectors of an index over `n_base` images.
pub fn index_memory_bytes(n_base: u64, dim: u64, augmented: bool) -> u64 {
    n_base * dim * F32_BYTES * if augmented { 4 } else { 1 }
}

/// Immutable flat index over database embeddings.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    dim: usize,
    augmented: bool,
    /// Row-major unit vectors, one row per entry.
    vectors: Vec<f32>,
    /// Base slot of every entry.
    entry_base: Vec<usize>,
    base_ids: Vec<String>,
    base_footprints: Vec<Option<Footprint>>,
    base_centroids: Vec<Option<GeoPoint>>,
}

impl RetrievalIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn augmented(&self) -> bool {
        self.augmented
    }

    pub fn num_entries(&self) -> usize {
        self.entry_base.len()
    }

    pub fn num_bases(&self) -> usize {
        self.base_ids.len()
    }

    pub fn base_id(&self, base: usize) -> &str {
        &self.base_ids[base]
    }

    pub fn base_footprint(&self, base: usize) -> Option<&Footprint> {
        self.base_footprints[base].as_ref()
    }

    pub fn memory_bytes(&self) -> u64 {
        self.vectors.len() as u64 * F32_BYTES
    }

    fn entry(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

/// Builds the index from the database records of `store`.
///
/// With `augment`, every base image must come with its four rotation
/// variants and all of them are indexed; otherwise only the un-rotated
/// record of each base is.
pub fn build_index(store: &EmbeddingStore, augment: bool) -> Result<RetrievalIndex> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in store.db_indices() {
        groups.entry(store.get(i).base_id.as_str()).or_default().push(i);
    }
    let dim = store.dim();
    let mut index = RetrievalIndex {
        dim,
        augmented: augment,
        vectors: Vec::new(),
        entry_base: Vec::new(),
        base_ids: Vec::with_capacity(groups.len()),
        base_footprints: Vec::with_capacity(groups.len()),
        base_centroids: Vec::with_capacity(groups.len()),
    };
    for (base_id, mut members) in groups {
        members.sort_by_key(|&i| store.get(i).rotation);
        let rots: Vec<Rotation> = members.iter().map(|&i| store.get(i).rotation).collect();
        let chosen: Vec<usize> = if augment {
            if rots != Rotation::ALL {
                return Err(Error::MissingRotations(base_id.to_string()));
            }
            members.clone()
        } else {
            match members.iter().find(|&&i| store.get(i).rotation == Rotation::R0) {
                Some(&i) => vec![i],
                None => return Err(Error::MissingRotations(base_id.to_string())),
            }
        };
        let slot = index.base_ids.len();
        let footprint = members.iter().find_map(|&i| store.get(i).footprint);
        index.base_ids.push(base_id.to_string());
        index.base_footprints.push(footprint);
        index.base_centroids.push(footprint.map(|f| f.centroid()));
        for i in chosen {
            index.vectors.extend_from_slice(&store.get(i).vector);
            index.entry_base.push(slot);
        }
    }
    Ok(index)
}

/// Search restricted to database images near a nadir point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub nadir: GeoPoint,
    pub radius_km: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub base_id: String,
    #[serde(skip)]
    pub base: usize,
    pub similarity: f64,
}

fn rank_order(a: &(usize, f64), b: &(usize, f64), ids: &[String]) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| ids[a.0].cmp(&ids[b.0]))
}

/// Exact cosine search. Rotation variants are collapsed onto their base
/// image, which keeps its best similarity; the top `n` distinct bases are
/// returned, ties broken by ascending base id.
pub fn search(index: &RetrievalIndex, query: &[f64], n: usize, region: Option<&Region>) -> Result<Vec<Hit>> {
    if n == 0 {
        return Err(Error::InvalidArgument("N must be at least 1".into()));
    }
    if query.len() != index.dim {
        return Err(Error::DimensionMismatch {
            expected: index.dim,
            got: query.len(),
        });
    }
    let norm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::ZeroVector("query".into()));
    }
    let q: Vec<f64> = query.iter().map(|x| x / norm).collect();

    let allowed: Option<Vec<bool>> = region.map(|r| {
        index
            .base_centroids
            .iter()
            .map(|c| c.is_some_and(|c| great_circle_km(&r.nadir, &c) <= r.radius_km))
            .collect()
    });
    let mut best = vec![f64::NEG_INFINITY; index.num_bases()];
    let mut any = false;
    for (e, &base) in index.entry_base.iter().enumerate() {
        if allowed.as_ref().is_some_and(|a| !a[base]) {
            continue;
        }
        any = true;
        let s = index.entry(e).iter().zip(&q).map(|(&v, w)| v as f64 * w).sum::<f64>();
        if s > best[base] {
            best[base] = s;
        }
    }
    if !any {
        return Err(Error::EmptyIndex);
    }
    let mut ranked: Vec<(usize, f64)> = best
        .into_iter()
        .enumerate()
        .filter(|(_, s)| *s > f64::NEG_INFINITY)
        .collect();
    let n = n.min(ranked.len());
    if n < ranked.len() {
        ranked.select_nth_unstable_by(n - 1, |a, b| rank_order(a, b, &index.base_ids));
        ranked.truncate(n);
    }
    ranked.sort_by(|a, b| rank_order(a, b, &index.base_ids));
    Ok(ranked
        .into_iter()
        .map(|(base, similarity)| Hit {
            base_id: index.base_ids[base].clone(),
            base,
            similarity,
        })
        .collect())
}

/// A query to localize, with its ground-truth footprint.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalQuery {
    pub id: String,
    pub vector: Vec<f64>,
    pub footprint: Footprint,
    /// Point under the ISS when the photo was taken, if known.
    pub nadir: Option<GeoPoint>,
}

/// Un-rotated query records of a store as evaluation queries.
pub fn eval_queries(store: &EmbeddingStore) -> Result<Vec<EvalQuery>> {
    store
        .query_indices()
        .iter()
        .map(|&i| store.get(i))
        .filter(|r| r.kind == Kind::Query && r.rotation == Rotation::R0)
        .map(|r| {
            let footprint = r.footprint.ok_or_else(|| Error::MissingFootprint(r.id.clone()))?;
            Ok(EvalQuery {
                id: r.id.clone(),
                vector: r.vector.iter().map(|&v| v as f64).collect(),
                footprint,
                nadir: None,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Restrict each query with a known nadir to this radius (km).
    pub region_radius_km: Option<f64>,
    /// A prediction is correct when its IoU with the query exceeds this;
    /// 0 means any overlap.
    pub iou_threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            region_radius_km: None,
            iou_threshold: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub id: String,
    /// Distinct base ids, best first.
    pub top: Vec<String>,
    /// 1-based rank of the first correct prediction within `top`.
    pub first_correct: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    /// What the timing covers.
    pub scope: String,
    pub index_entries: usize,
    pub mean_micros: f64,
    pub p95_micros: f64,
    pub per_query: Vec<(String, f64)>,
}

impl LatencyReport {
    fn from_samples(index_entries: usize, per_query: Vec<(String, f64)>) -> Self {
        let mut sorted: Vec<f64> = per_query.iter().map(|(_, t)| *t).collect();
        sorted.sort_by(f64::total_cmp);
        let mean = if sorted.is_empty() {
            0.0
        } else {
            sorted.iter().sum::<f64>() / sorted.len() as f64
        };
        let p95 = if sorted.is_empty() {
            0.0
        } else {
            let rank = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
            sorted[rank - 1]
        };
        Self {
            scope: "search only; excludes feature extraction".into(),
            index_entries,
            mean_micros: mean,
            p95_micros: p95,
            per_query,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("query_id,micros\n");
        for (id, t) in &self.per_query {
            let _ = writeln!(out, "{id},{t:.3}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// Recall percentage per N.
    pub recall_at: BTreeMap<usize, f64>,
    pub num_queries: usize,
    pub num_db_base: usize,
    pub num_db_augmented: usize,
    pub per_query: Vec<QueryResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyReport>,
}

impl RecallReport {
    pub fn recall(&self, n: usize) -> Option<f64> {
        self.recall_at.get(&n).copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("N,recall_pct\n");
        for (n, r) in &self.recall_at {
            let _ = writeln!(out, "{n},{r:.4}");
        }
        out
    }
}

fn check_ns(ns: &[usize]) -> Result<usize> {
    if ns.is_empty() || ns.contains(&0) {
        return Err(Error::InvalidArgument("recall N values must be >= 1".into()));
    }
    Ok(*ns.iter().max().unwrap())
}

fn check_footprints(index: &RetrievalIndex) -> Result<()> {
    match index.base_footprints.iter().position(Option::is_none) {
        Some(b) => Err(Error::MissingFootprint(index.base_ids[b].clone())),
        None => Ok(()),
    }
}

fn evaluate_one(index: &RetrievalIndex, q: &EvalQuery, n_max: usize, opts: &EvalOptions) -> Result<QueryResult> {
    let region = match (opts.region_radius_km, q.nadir) {
        (Some(radius_km), Some(nadir)) => Some(Region { nadir, radius_km }),
        _ => None,
    };
    let hits = search(index, &q.vector, n_max, region.as_ref())?;
    let first_correct = hits.iter().position(|h| {
        let fp = index.base_footprints[h.base].as_ref().expect("checked");
        footprint_iou(&q.footprint, fp) > opts.iou_threshold
    });
    Ok(QueryResult {
        id: q.id.clone(),
        top: hits.into_iter().map(|h| h.base_id).collect(),
        first_correct: first_correct.map(|p| p + 1),
    })
}

fn summarize(index: &RetrievalIndex, ns: &[usize], per_query: Vec<QueryResult>) -> RecallReport {
    let total = per_query.len();
    let recall_at = ns
        .iter()
        .map(|&n| {
            let hit = per_query
                .iter()
                .filter(|r| r.first_correct.is_some_and(|rank| rank <= n))
                .count();
            let pct = if total == 0 { 0.0 } else { 100.0 * hit as f64 / total as f64 };
            (n, pct)
        })
        .collect();
    RecallReport {
        recall_at,
        num_queries: total,
        num_db_base: index.num_bases(),
        num_db_augmented: index.num_entries(),
        per_query,
        latency: None,
    }
}

/// Recall@N: a query counts at N when one of its first N distinct base
/// predictions overlaps its footprint. Queries with a nadir are searched
/// inside `opts.region_radius_km` when it is set.
pub fn recall_at_n(index: &RetrievalIndex, queries: &[EvalQuery], ns: &[usize], opts: &EvalOptions) -> Result<RecallReport> {
    let n_max = check_ns(ns)?;
    check_footprints(index)?;
    let per_query = queries
        .par_iter()
        .map(|q| evaluate_one(index, q, n_max, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(index, ns, per_query))
}

/// Recall over the whole index with per-query search latency. Queries run
/// one after another so the timings are not skewed by contention.
pub fn worldwide_eval(index: &RetrievalIndex, queries: &[EvalQuery], ns: &[usize]) -> Result<RecallReport> {
    let n_max = check_ns(ns)?;
    check_footprints(index)?;
    let opts = EvalOptions::default();
    let mut per_query = Vec::with_capacity(queries.len());
    let mut timings = Vec::with_capacity(queries.len());
    for q in queries {
        let world = EvalQuery { nadir: None, ..q.clone() };
        let start = Instant::now();
        let r = evaluate_one(index, &world, n_max, &opts)?;
        timings.push((q.id.clone(), start.elapsed().as_secs_f64() * 1e6));
        per_query.push(r);
    }
    let mut report = summarize(index, ns, per_query);
    report.latency = Some(LatencyReport::from_samples(index.num_entries(), timings));
    Ok(report)
}

/// Builds an index over the store's database (augmented when every base has
/// its rotations) and evaluates the store's own queries.
pub fn evaluate_store(store: &EmbeddingStore, ns: &[usize], opts: &EvalOptions) -> Result<RecallReport> {
    let index = build_index(store, has_all_rotations(store))?;
    recall_at_n(&index, &eval_queries(store)?, ns, opts)
}

/// True when every database base image has its four rotation variants.
pub fn has_all_rotations(store: &EmbeddingStore) -> bool {
    let mut counts: HashMap<&str, u8> = HashMap::new();
    for &i in store.db_indices() {
        let r = store.get(i);
        *counts.entry(r.base_id.as_str()).or_default() |= 1 << (r.rotation.degrees() / 90);
    }
    !counts.is_empty() && counts.values().all(|&m| m == 0b1111)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{synth_dataset, EmbeddingRecord, SynthConfig};

    fn toy() -> EmbeddingStore {
        let fp = |lat: f64| Footprint::from_bounds(lat, 0.0, lat + 1.0, 1.0).unwrap();
        let mut recs = Vec::new();
        for (b, v) in [("a", [1.0f32, 0.0]), ("b", [0.0, 1.0]), ("c", [0.6, 0.8])] {
            let lat = match b {
                "a" => 0.0,
                "b" => 10.0,
                _ => 20.0,
            };
            for rot in Rotation::ALL {
                let id = if rot == Rotation::R0 {
                    b.to_string()
                } else {
                    format!("{b}@{}", rot.degrees())
                };
                let vector = if rot == Rotation::R0 { v.to_vec() } else { vec![v[0] - 0.1 * rot.degrees() as f32 / 90.0, v[1]] };
                recs.push(EmbeddingRecord {
                    id,
                    base_id: b.into(),
                    rotation: rot,
                    kind: Kind::Db,
                    vector,
                    footprint: Some(fp(lat)),
                });
            }
        }
        EmbeddingStore::new(2, recs).unwrap()
    }

    #[test]
    fn index_sizes() {
        let s = toy();
        assert_eq!(build_index(&s, true).unwrap().num_entries(), 12);
        let plain = build_index(&s, false).unwrap();
        assert_eq!(plain.num_entries(), 3);
        assert_eq!(plain.memory_bytes(), 3 * 2 * 4);
        assert_eq!(index_memory_bytes(12_000, 512, true), 98_304_000);
        let synth = synth_dataset(&SynthConfig {
            n_locations: 5,
            db_per_location: 2,
            queries_per_location: 1,
            dim: 4,
            noise_sigma: 0.1,
            seed: 0,
            rotations: false,
        })
        .unwrap();
        assert!(matches!(build_index(&synth, true), Err(Error::MissingRotations(_))));
        assert_eq!(build_index(&synth, false).unwrap().num_entries(), 10);
    }

    #[test]
    fn search_collapses_rotations() {
        let idx = build_index(&toy(), true).unwrap();
        let hits = search(&idx, &[1.0, 0.0], 10, None).unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[0].base_id, "a");
        assert!((hits[0].similarity - 1.0).abs() < 1e-7);
        let ids: Vec<&str> = hits.iter().map(|h| h.base_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "c", "b"]);
        assert!(search(&idx, &[1.0, 0.0, 0.0], 1, None).is_err());
        assert!(search(&idx, &[1.0, 0.0], 0, None).is_err());
    }

    #[test]
    fn ties_break_by_base_id() {
        let fp = Footprint::from_bounds(0.0, 0.0, 1.0, 1.0).unwrap();
        let s = EmbeddingStore::new(
            2,
            vec![
                EmbeddingRecord::base("z", Kind::Db, vec![1.0, 0.0], Some(fp)),
                EmbeddingRecord::base("m", Kind::Db, vec![1.0, 0.0], Some(fp)),
            ],
        )
        .unwrap();
        let idx = build_index(&s, false).unwrap();
        let hits = search(&idx, &[1.0, 0.0], 1, None).unwrap();
        assert_eq!(hits[0].base_id, "m");
    }

    #[test]
    fn region_filter_excludes_far_bases() {
        let idx = build_index(&toy(), false).unwrap();
        let nadir = GeoPoint::new(20.5, 0.5).unwrap();
        let region = Region { nadir, radius_km: 500.0 };
        let hits = search(&idx, &[1.0, 0.0], 3, Some(&region)).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].base_id, "c");
        let nowhere = Region {
            nadir: nadir.antipode(),
            radius_km: 500.0,
        };
        assert!(matches!(search(&idx, &[1.0, 0.0], 3, Some(&nowhere)), Err(Error::EmptyIndex)));
    }

    #[test]
    fn recall_reports() {
        let s = toy();
        let idx = build_index(&s, true).unwrap();
        let q = |id: &str, v: [f64; 2], lat: f64| EvalQuery {
            id: id.into(),
            vector: v.to_vec(),
            footprint: Footprint::from_bounds(lat + 0.2, 0.2, lat + 0.8, 0.8).unwrap(),
            nadir: None,
        };
        let queries = vec![q("q1", [1.0, 0.0], 0.0), q("q2", [1.0, 0.0], 10.0)];
        let r = recall_at_n(&idx, &queries, &[1, 2, 3], &EvalOptions::default()).unwrap();
        assert_eq!(r.recall(1), Some(50.0));
        assert_eq!(r.recall(3), Some(100.0));
        assert_eq!(r.num_db_augmented, 12);
        assert_eq!(r.to_csv().lines().count(), 4);
        let w = worldwide_eval(&idx, &queries, &[1, 2, 3]).unwrap();
        assert_eq!(w.recall_at, r.recall_at);
        assert_eq!(w.latency.as_ref().unwrap().per_query.len(), 2);
        assert!(recall_at_n(&idx, &queries, &[], &EvalOptions::default()).is_err());
    }

    #[test]
    fn store_evaluation_helpers() {
        assert!(has_all_rotations(&toy()));
        let s = synth_dataset(&SynthConfig {
            n_locations: 10,
            db_per_location: 1,
            queries_per_location: 1,
            dim: 8,
            noise_sigma: 0.0,
            seed: 1,
            rotations: false,
        })
        .unwrap();
        assert!(!has_all_rotations(&s));
        let r = evaluate_store(&s, &[1], &EvalOptions::default()).unwrap();
        assert_eq!(r.recall(1), Some(100.0));
    }
}
