//! Training-data mining: query/database pairs from footprint overlap,
//! k-means clusters over database embeddings weighted by where the training
//! queries fall, and the batch builders for both losses.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{footprint_iou, footprints_overlap, Footprint, MercBounds};
use crate::losses::{PairBatch, QuadBatch};
use crate::store::{read_vector_block, write_vector_block, EmbeddingStore, Rotation};

pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOL: f64 = 1e-4;
/// Rejection budget per requested pair when filling a pair batch.
pub const PAIR_ATTEMPTS_PER_SLOT: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    /// Cluster of each fitted vector, in input order.
    pub assignments: Vec<usize>,
    /// Training queries per cluster.
    pub bins: Vec<u64>,
    /// Sampling probability per cluster.
    pub weights: Vec<f64>,
    /// Within-cluster sum of squares after initialization and after every
    /// Lloyd iteration.
    pub sse_history: Vec<f64>,
    pub seed: u64,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    pub fn nearest(&self, v: &[f64]) -> usize {
        nearest(&self.centroids, v).0
    }

    /// Members of each cluster, as indices into the fitted vectors.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k()];
        for (i, &c) in self.assignments.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    /// Assigns (normalized) query vectors to their nearest centroid and
    /// replaces the bins and sampling weights. Centroids are not touched.
    pub fn assign_queries(&mut self, queries: &[Vec<f64>]) -> Result<()> {
        let dim = self.dim();
        let mut bins = vec![0u64; self.k()];
        for q in queries {
            if q.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: q.len(),
                });
            }
            let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n > 0.0) {
                return Err(Error::ZeroVector(String::new()));
            }
            let unit: Vec<f64> = q.iter().map(|x| x / n).collect();
            bins[self.nearest(&unit)] += 1;
        }
        self.weights = weights_from_bins(&bins);
        self.bins = bins;
        Ok(())
    }

    /// Writes a JSON header line followed by the centroids as an `AEM1` block.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = ClusterHeader {
            k: self.k(),
            dim: self.dim(),
            bins: self.bins.clone(),
            seed: self.seed,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        let rows: Vec<Vec<f32>> = self.centroids.iter().map(|c| c.iter().map(|&v| v as f32).collect()).collect();
        let mut trailer = Vec::new();
        for (i, b) in self.bins.iter().enumerate() {
            writeln!(trailer, "{{\"cluster\":{i},\"bin\":{b}}}")?;
        }
        out.extend(write_vector_block(rows.iter().map(Vec::as_slice), rows.len(), header.dim, &trailer)?);
        fs::write(path, out)?;
        Ok(())
    }

    /// Reads a model written by [`ClusterModel::save`]; assignments are not
    /// persisted and come back empty.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Truncated("missing cluster header line".into()))?;
        let header: ClusterHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Format {
            line: 1,
            message: e.to_string(),
        })?;
        let block = read_vector_block(&bytes[nl + 1..])?;
        if block.count != header.k || block.dim != header.dim || header.bins.len() != header.k {
            return Err(Error::Format {
                line: 1,
                message: "cluster header disagrees with centroid block".into(),
            });
        }
        let centroids = block
            .values
            .chunks(block.dim.max(1))
            .take(block.count)
            .map(|c| c.iter().map(|&v| v as f64).collect())
            .collect();
        Ok(Self {
            centroids,
            assignments: Vec::new(),
            weights: weights_from_bins(&header.bins),
            bins: header.bins,
            sse_history: Vec::new(),
            seed: header.seed,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ClusterHeader {
    #[serde(rename = "K")]
    k: usize,
    dim: usize,
    bins: Vec<u64>,
    seed: u64,
}

/// `b_k / sum b`, or uniform when no query was assigned.
pub fn weights_from_bins(bins: &[u64]) -> Vec<f64> {
    let total: u64 = bins.iter().sum();
    if total == 0 {
        return vec![1.0 / bins.len() as f64; bins.len()];
    }
    bins.iter().map(|&b| b as f64 / total as f64).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid; ties go to the lowest index.
fn nearest(centroids: &[Vec<f64>], v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, v);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn sse(points: &[Vec<f64>], centroids: &[Vec<f64>], assign: &[usize]) -> f64 {
    points.iter().zip(assign).map(|(p, &c)| sq_dist(p, &centroids[c])).sum()
}

fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` just short of `target`.
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            let rest: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            rest[rng.gen_range(0..rest.len())]
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

fn assign_all(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points.par_iter().map(|p| nearest(centroids, p).0).collect()
}

/// Moves the farthest point of a multi-member cluster into each empty one.
fn repair_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assign: &mut [usize]) -> Result<bool> {
    let k = centroids.len();
    let mut repaired = false;
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assign.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return Ok(repaired);
        };
        let far = (0..points.len())
            .filter(|&i| sizes[assign[i]] > 1)
            .map(|i| (i, sq_dist(&points[i], &centroids[assign[i]])))
            .filter(|&(_, d)| d > 0.0)
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        let Some((i, _)) = far else {
            return Err(Error::InvalidArgument(format!(
                "fewer than {k} distinct vectors; cannot fill every cluster"
            )));
        };
        centroids[empty] = points[i].clone();
        assign[i] = empty;
        repaired = true;
    }
}

/// k-means++ seeding followed by Lloyd iterations until the largest centroid
/// shift drops below [`KMEANS_TOL`] with stable assignments, or
/// [`KMEANS_MAX_ITERS`] iterations. Bins start empty and weights uniform.
pub fn kmeans_fit(points: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterModel> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if points.len() < k {
        return Err(Error::TooFewVectors {
            needed: k,
            got: points.len(),
        });
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: p.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(points, k, &mut rng);
    let mut assign = assign_all(points, &centroids);
    repair_empty(points, &mut centroids, &mut assign)?;
    let mut history = vec![sse(points, &centroids, &assign)];

    for _ in 0..KMEANS_MAX_ITERS {
        // Update step; fixed-order summation keeps this reproducible.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assign) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let mean: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&mean, &centroids[c]).sqrt());
            centroids[c] = mean;
        }
        let mut next = assign_all(points, &centroids);
        let repaired = repair_empty(points, &mut centroids, &mut next)?;
        let stable = !repaired && next == assign;
        assign = next;
        history.push(sse(points, &centroids, &assign));
        if stable && shift < KMEANS_TOL {
            break;
        }
    }
    Ok(ClusterModel {
        weights: weights_from_bins(&vec![0; k]),
        bins: vec![0; k],
        centroids,
        assignments: assign,
        sse_history: history,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Uniform,
    #[default]
    Weighted,
}

/// Draws a cluster id, uniformly or by inverse CDF over the model weights.
pub fn sample_cluster<R: Rng>(model: &ClusterModel, mode: SamplingMode, rng: &mut R) -> usize {
    let k = model.k();
    match mode {
        SamplingMode::Uniform => rng.gen_range(0..k),
        SamplingMode::Weighted => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, &w) in model.weights.iter().enumerate() {
                acc += w;
                if w > 0.0 && u < acc {
                    return i;
                }
            }
            model.weights.iter().rposition(|&w| w > 0.0).unwrap_or(k - 1)
        }
    }
}

/// True on iterations where features are re-extracted and clusters refit.
pub fn refresh_schedule(iteration: usize, refresh_every: usize) -> bool {
    iteration % refresh_every == 0
}

/// A query paired with a base database image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinedPair {
    /// Store index of the query record.
    pub query: usize,
    /// Store index of the base (un-rotated or first-seen) database record.
    pub db_base: usize,
    pub iou: f64,
}

/// All query/database-base pairs above the IoU threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct PairIndex {
    pub pairs: Vec<MinedPair>,
    /// Store indices of every rotation variant, keyed by the base record.
    pub variants: BTreeMap<usize, Vec<usize>>,
}

impl PairIndex {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Groups database records by `base_id`; the key is the representative
/// record (the un-rotated one when present).
fn db_bases(store: &EmbeddingStore) -> BTreeMap<usize, Vec<usize>> {
    let mut by_base: HashMap<&str, Vec<usize>> = HashMap::new();
    for &i in store.db_indices() {
        by_base.entry(store.get(i).base_id.as_str()).or_default().push(i);
    }
    by_base
        .into_values()
        .map(|members| {
            let rep = members
                .iter()
                .copied()
                .find(|&i| store.get(i).rotation == Rotation::R0)
                .unwrap_or(members[0]);
            (rep, members)
        })
        .collect()
}

/// Every (query, base image) with footprint IoU strictly above `t_iou`.
/// Database images without a footprint cannot be paired and are skipped.
pub fn mine_pairs(store: &EmbeddingStore, t_iou: f64) -> Result<PairIndex> {
    let variants = db_bases(store);
    let bases: Vec<(usize, Footprint, MercBounds)> = variants
        .iter()
        .filter_map(|(&rep, members)| {
            members
                .iter()
                .find_map(|&i| store.get(i).footprint)
                .map(|f| (rep, f, f.bounds()))
        })
        .collect();
    let mut queries = Vec::with_capacity(store.query_indices().len());
    for &q in store.query_indices() {
        let rec = store.get(q);
        let fp = rec.footprint.ok_or_else(|| Error::MissingFootprint(rec.id.clone()))?;
        queries.push((q, fp));
    }
    let pairs: Vec<MinedPair> = queries
        .par_iter()
        .flat_map_iter(|&(q, qf)| {
            let qb = qf.bounds();
            bases.iter().filter_map(move |&(d, df, db)| {
                if !qb.intersects(&db) {
                    return None;
                }
                let iou = footprint_iou(&qf, &df);
                (iou > t_iou).then_some(MinedPair { query: q, db_base: d, iou })
            })
        })
        .collect();
    Ok(PairIndex { pairs, variants })
}

fn footprint_of(store: &EmbeddingStore, idx: usize) -> Result<Footprint> {
    let r = store.get(idx);
    r.footprint.ok_or_else(|| Error::MissingFootprint(r.id.clone()))
}

fn overlaps_any(f: &Footprint, taken: &[(Footprint, MercBounds)]) -> bool {
    let b = f.bounds();
    taken.iter().any(|(t, tb)| b.intersects(tb) && footprints_overlap(f, t))
}

/// Samples `b` pairs without replacement such that no footprint of one pair
/// overlaps a footprint of another; a random rotation variant stands in for
/// each database image.
pub fn build_pair_batch<R: Rng>(store: &EmbeddingStore, index: &PairIndex, b: usize, rng: &mut R) -> Result<PairBatch> {
    if b == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let budget = PAIR_ATTEMPTS_PER_SLOT * b;
    let mut used = vec![false; index.pairs.len()];
    let mut taken: Vec<(Footprint, MercBounds)> = Vec::with_capacity(2 * b);
    let mut pairs = Vec::with_capacity(b);
    let mut attempts = 0;
    while pairs.len() < b && attempts < budget && !index.pairs.is_empty() {
        attempts += 1;
        let i = rng.gen_range(0..index.pairs.len());
        if used[i] {
            continue;
        }
        used[i] = true;
        let p = index.pairs[i];
        let qf = footprint_of(store, p.query)?;
        let df = footprint_of(store, p.db_base)?;
        if overlaps_any(&qf, &taken) || overlaps_any(&df, &taken) {
            continue;
        }
        let variants = &index.variants[&p.db_base];
        let d = variants[rng.gen_range(0..variants.len())];
        taken.push((qf, qf.bounds()));
        taken.push((df, df.bounds()));
        pairs.push((p.query, d));
    }
    if pairs.len() < b {
        return Err(Error::CannotFillBatch {
            wanted: b,
            got: pairs.len(),
            attempts,
        });
    }
    Ok(PairBatch { pairs })
}

/// Checks the geometric invariants of a pair batch against the store.
pub fn validate_pair_batch(store: &EmbeddingStore, batch: &PairBatch, t_iou: f64) -> Result<()> {
    let mut fps = Vec::with_capacity(batch.pairs.len());
    for (i, &(q, d)) in batch.pairs.iter().enumerate() {
        let (qf, df) = (footprint_of(store, q)?, footprint_of(store, d)?);
        let iou = footprint_iou(&qf, &df);
        if !(iou > t_iou) {
            return Err(Error::InvalidBatch(format!("pair {i} has IoU {iou} <= {t_iou}")));
        }
        fps.push([qf, df]);
    }
    for i in 0..fps.len() {
        for j in (i + 1)..fps.len() {
            for a in &fps[i] {
                for b in &fps[j] {
                    if footprints_overlap(a, b) {
                        return Err(Error::InvalidBatch(format!("pairs {i} and {j} overlap")));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Database records grouped into places that can supply quadruplets.
///
/// A base image with all four rotation variants is a place of its own.
/// Remaining base images are merged into connected components of
/// footprint overlap, so distinct components never overlap.
#[derive(Debug, Clone)]
pub struct LocationIndex {
    pub locations: Vec<Vec<usize>>,
    rotation_groups: Vec<bool>,
}

impl LocationIndex {
    pub fn build(store: &EmbeddingStore) -> Result<Self> {
        let mut locations = Vec::new();
        let mut rotation_groups = Vec::new();
        let mut loose: Vec<(usize, Footprint)> = Vec::new();
        let mut loose_members: Vec<Vec<usize>> = Vec::new();
        for (rep, members) in db_bases(store) {
            let fp = footprint_of(store, rep)?;
            let mut rots: Vec<Rotation> = members.iter().map(|&i| store.get(i).rotation).collect();
            rots.sort();
            rots.dedup();
            if rots.len() == 4 {
                let mut m = members.clone();
                m.sort_by_key(|&i| store.get(i).rotation);
                locations.push(m);
                rotation_groups.push(true);
            } else {
                loose.push((rep, fp));
                loose_members.push(members);
            }
        }
        // Union-find over overlapping loose bases.
        let n = loose.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let bounds: Vec<MercBounds> = loose.iter().map(|(_, f)| f.bounds()).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| bounds[a].min_x.total_cmp(&bounds[b].min_x));
        for (oi, &a) in order.iter().enumerate() {
            for &b in &order[oi + 1..] {
                if bounds[b].min_x > bounds[a].max_x {
                    break;
                }
                if bounds[a].intersects(&bounds[b]) && footprints_overlap(&loose[a].1, &loose[b].1) {
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    if ra != rb {
                        parent[ra.max(rb)] = ra.min(rb);
                    }
                }
            }
        }
        let mut comps: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..n {
            let root = find(&mut parent, i);
            comps.entry(root).or_default().extend(loose_members[i].iter().copied());
        }
        for (_, mut members) in comps {
            members.sort_unstable();
            locations.push(members);
            rotation_groups.push(false);
        }
        Ok(Self {
            locations,
            rotation_groups,
        })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// Locations per cluster. A location belongs to the cluster holding the
    /// plurality of its records (ties to the lowest id); `model` must have
    /// been fitted on the store's database vectors in store order.
    pub fn by_cluster(&self, store: &EmbeddingStore, model: &ClusterModel) -> Result<Vec<Vec<usize>>> {
        let db = store.db_indices();
        if model.assignments.len() != db.len() {
            return Err(Error::InvalidArgument(format!(
                "cluster model covers {} vectors, store has {} database records",
                model.assignments.len(),
                db.len()
            )));
        }
        let pos: HashMap<usize, usize> = db.iter().enumerate().map(|(p, &i)| (i, p)).collect();
        let mut out = vec![Vec::new(); model.k()];
        for (l, members) in self.locations.iter().enumerate() {
            if members.len() < 4 {
                continue;
            }
            let mut votes = vec![0usize; model.k()];
            for m in members {
                votes[model.assignments[pos[m]]] += 1;
            }
            let best = votes
                .iter()
                .enumerate()
                .fold((0, 0), |b, (c, &v)| if v > b.1 { (c, v) } else { b });
            out[best.0].push(l);
        }
        Ok(out)
    }

    /// Four mutually overlapping records of a location, if it has them.
    fn pick_quad<R: Rng>(&self, store: &EmbeddingStore, loc: usize, rng: &mut R) -> Result<Option<[usize; 4]>> {
        let members = &self.locations[loc];
        if members.len() < 4 {
            return Ok(None);
        }
        if self.rotation_groups[loc] {
            return Ok(Some([members[0], members[1], members[2], members[3]]));
        }
        let mut order = members.clone();
        order.shuffle(rng);
        let fps: Vec<Footprint> = order.iter().map(|&i| footprint_of(store, i)).collect::<Result<_>>()?;
        for start in 0..order.len() {
            let mut chosen = vec![start];
            for cand in 0..order.len() {
                if chosen.len() == 4 {
                    break;
                }
                if cand != start && chosen.iter().all(|&c| footprints_overlap(&fps[c], &fps[cand])) {
                    chosen.push(cand);
                }
            }
            if chosen.len() == 4 {
                return Ok(Some([order[chosen[0]], order[chosen[1]], order[chosen[2]], order[chosen[3]]]));
            }
        }
        Ok(None)
    }
}

/// Builds quadruplet batches from one cluster at a time.
#[derive(Debug, Clone)]
pub struct QuadSampler<'a> {
    store: &'a EmbeddingStore,
    locations: &'a LocationIndex,
    by_cluster: Vec<Vec<usize>>,
}

impl<'a> QuadSampler<'a> {
    pub fn new(store: &'a EmbeddingStore, locations: &'a LocationIndex, model: &ClusterModel) -> Result<Self> {
        Ok(Self {
            store,
            locations,
            by_cluster: locations.by_cluster(store, model)?,
        })
    }

    /// Locations usable by cluster `k`.
    pub fn cluster_locations(&self, k: usize) -> &[usize] {
        &self.by_cluster[k]
    }

    /// `h` quadruplets from distinct, mutually non-overlapping locations of
    /// cluster `k`.
    pub fn build<R: Rng>(&self, k: usize, h: usize, rng: &mut R) -> Result<QuadBatch> {
        let mut candidates = self.by_cluster.get(k).cloned().unwrap_or_default();
        candidates.shuffle(rng);
        let mut taken: Vec<(Footprint, MercBounds)> = Vec::new();
        let mut quads = Vec::with_capacity(h);
        for loc in candidates {
            if quads.len() == h {
                break;
            }
            let Some(quad) = self.locations.pick_quad(self.store, loc, rng)? else {
                continue;
            };
            let fps: Vec<Footprint> = quad.iter().map(|&i| footprint_of(self.store, i)).collect::<Result<_>>()?;
            if fps.iter().any(|f| overlaps_any(f, &taken)) {
                continue;
            }
            taken.extend(fps.iter().map(|f| (*f, f.bounds())));
            quads.push(quad);
        }
        if quads.len() < h {
            return Err(Error::InsufficientCluster {
                cluster: k,
                available: quads.len(),
                needed: h,
            });
        }
        Ok(QuadBatch { quads, cluster_id: k })
    }
}

/// One-shot quadruplet batch; see [`QuadSampler`] for repeated draws.
pub fn build_quad_batch<R: Rng>(
    store: &EmbeddingStore,
    model: &ClusterModel,
    k: usize,
    h: usize,
    rng: &mut R,
) -> Result<QuadBatch> {
    let locations = LocationIndex::build(store)?;
    QuadSampler::new(store, &locations, model)?.build(k, h, rng)
}

/// Checks the geometric invariants of a quadruplet batch.
pub fn validate_quad_batch(store: &EmbeddingStore, batch: &QuadBatch) -> Result<()> {
    let fps: Vec<[Footprint; 4]> = batch
        .quads
        .iter()
        .map(|q| -> Result<[Footprint; 4]> {
            Ok([
                footprint_of(store, q[0])?,
                footprint_of(store, q[1])?,
                footprint_of(store, q[2])?,
                footprint_of(store, q[3])?,
            ])
        })
        .collect::<Result<_>>()?;
    for (i, quad) in fps.iter().enumerate() {
        for a in 0..4 {
            for b in (a + 1)..4 {
                if !footprints_overlap(&quad[a], &quad[b]) {
                    return Err(Error::InvalidBatch(format!("quadruplet {i} members do not overlap")));
                }
            }
        }
        for (j, other) in fps.iter().enumerate().skip(i + 1) {
            if quad.iter().any(|a| other.iter().any(|b| footprints_overlap(a, b))) {
                return Err(Error::InvalidBatch(format!("quadruplets {i} and {j} overlap")));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{synth_dataset, EmbeddingRecord, Kind, SynthConfig};
    use rand_distr::{Distribution, StandardNormal};

    fn synth(n: usize, db: usize, q: usize, rotations: bool) -> EmbeddingStore {
        synth_dataset(&SynthConfig {
            n_locations: n,
            db_per_location: db,
            queries_per_location: q,
            dim: 8,
            noise_sigma: 0.2,
            seed: 5,
            rotations,
        })
        .unwrap()
    }

    fn blobs(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = 0.1;
        let centers = [vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]];
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let l = i % 2;
            let p: Vec<f64> = centers[l]
                .iter()
                .map(|c| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    c + sigma * n
                })
                .collect();
            pts.push(p);
            labels.push(l);
        }
        (pts, labels)
    }

    #[test]
    fn kmeans_k_equals_n() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let m = kmeans_fit(&pts, 6, 3).unwrap();
        assert_eq!(*m.sse_history.last().unwrap(), 0.0);
        let mut seen = m.assignments.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn kmeans_recovers_blobs_and_is_deterministic() {
        let (pts, labels) = blobs(9);
        let m = kmeans_fit(&pts, 2, 1).unwrap();
        let flip = m.assignments[0] != labels[0];
        for (a, l) in m.assignments.iter().zip(&labels) {
            assert_eq!(*a, if flip { 1 - l } else { *l });
        }
        assert_eq!(m, kmeans_fit(&pts, 2, 1).unwrap());
        for w in m.sse_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn kmeans_errors() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(matches!(kmeans_fit(&pts, 3, 0), Err(Error::TooFewVectors { .. })));
        let dup = vec![vec![0.0], vec![0.0], vec![0.0]];
        assert!(kmeans_fit(&dup, 2, 0).is_err());
    }

    #[test]
    fn weights_and_fallback() {
        assert_eq!(weights_from_bins(&[10, 90, 0]), vec![0.1, 0.9, 0.0]);
        assert_eq!(weights_from_bins(&[0, 7, 0]), vec![0.0, 1.0, 0.0]);
        assert_eq!(weights_from_bins(&[0, 0, 0, 0]), vec![0.25; 4]);
    }

    #[test]
    fn assign_queries_counts_and_is_scale_free() {
        let pts = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0], vec![0.1, 0.9]];
        let mut m = kmeans_fit(&pts, 2, 0).unwrap();
        let c0 = m.nearest(&[1.0, 0.0]);
        let qs = vec![vec![1.0, 0.05], vec![0.95, 0.0], vec![0.0, 1.0]];
        m.assign_queries(&qs).unwrap();
        assert_eq!(m.bins[c0], 2);
        assert_eq!(m.bins[1 - c0], 1);
        let centroids = m.centroids.clone();
        let scaled: Vec<Vec<f64>> = qs.iter().map(|q| q.iter().map(|x| x * 37.0).collect()).collect();
        let bins = m.bins.clone();
        m.assign_queries(&scaled).unwrap();
        assert_eq!(m.bins, bins);
        assert_eq!(m.centroids, centroids);
        assert!(m.assign_queries(&[vec![1.0]]).is_err());
        m.assign_queries(&[]).unwrap();
        assert_eq!(m.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn sampling_respects_weights() {
        let mut m = kmeans_fit(&[vec![0.0], vec![1.0], vec![2.0]], 3, 0).unwrap();
        m.weights = vec![1.0, 0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| sample_cluster(&m, SamplingMode::Weighted, &mut rng) == 0));
        m.weights = vec![0.0, 0.0, 1.0];
        assert!((0..1000).all(|_| sample_cluster(&m, SamplingMode::Weighted, &mut rng) == 2));
    }

    #[test]
    fn refresh() {
        assert!(refresh_schedule(0, 5000));
        assert!(refresh_schedule(5000, 5000));
        assert!(!refresh_schedule(4999, 5000));
    }

    #[test]
    fn mine_pairs_on_synthetic_data() {
        let s = synth(10, 4, 1, false);
        let idx = mine_pairs(&s, 0.2).unwrap();
        assert_eq!(idx.len(), 40);
        // Brute-force check over every query/db combination.
        for &q in s.query_indices() {
            let mine: Vec<usize> = idx.pairs.iter().filter(|p| p.query == q).map(|p| p.db_base).collect();
            assert_eq!(mine.len(), 4);
            for &d in s.db_indices() {
                let iou = footprint_iou(&s.get(q).footprint.unwrap(), &s.get(d).footprint.unwrap());
                assert_eq!(iou > 0.2, mine.contains(&d));
            }
        }
    }

    #[test]
    fn mine_pairs_collapses_rotations() {
        let s = synth(3, 1, 1, true);
        let idx = mine_pairs(&s, 0.2).unwrap();
        assert_eq!(idx.len(), 3);
        for p in &idx.pairs {
            assert_eq!(idx.variants[&p.db_base].len(), 4);
            assert_eq!(s.get(p.db_base).rotation, Rotation::R0);
        }
    }

    #[test]
    fn mine_pairs_requires_query_footprints() {
        let s = EmbeddingStore::new(2, vec![EmbeddingRecord::base("q", Kind::Query, vec![1.0, 0.0], None)]).unwrap();
        assert!(matches!(mine_pairs(&s, 0.2), Err(Error::MissingFootprint(_))));
    }

    #[test]
    fn pair_batches() {
        let s = synth(60, 2, 1, false);
        let idx = mine_pairs(&s, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = build_pair_batch(&s, &idx, 48, &mut rng).unwrap();
        assert_eq!(b.pairs.len(), 48);
        validate_pair_batch(&s, &b, 0.2).unwrap();
        let b1 = build_pair_batch(&s, &idx, 1, &mut rng).unwrap();
        assert_eq!(b1.pairs.len(), 1);

        let small = synth(2, 2, 1, false);
        let idx = mine_pairs(&small, 0.2).unwrap();
        assert!(matches!(
            build_pair_batch(&small, &idx, 3, &mut rng),
            Err(Error::CannotFillBatch { got: 2, .. })
        ));
    }

    #[test]
    fn quad_batches() {
        let s = synth(1, 1, 1, true);
        let db_vecs: Vec<Vec<f64>> = s.db_indices().iter().map(|&i| s.vectors_f64()[i].clone()).collect();
        let model = kmeans_fit(&db_vecs, 1, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = build_quad_batch(&s, &model, 0, 1, &mut rng).unwrap();
        let mut got: Vec<usize> = b.quads[0].to_vec();
        got.sort();
        assert_eq!(got, s.db_indices().to_vec());
        assert!(matches!(build_quad_batch(&s, &model, 0, 2, &mut rng), Err(Error::InsufficientCluster { .. })));

        let s = synth(20, 4, 1, false);
        let all = s.vectors_f64();
        let db_vecs: Vec<Vec<f64>> = s.db_indices().iter().map(|&i| all[i].clone()).collect();
        let model = kmeans_fit(&db_vecs, 1, 0).unwrap();
        let b = build_quad_batch(&s, &model, 0, 8, &mut rng).unwrap();
        assert_eq!(b.quads.len(), 8);
        validate_quad_batch(&s, &b).unwrap();
    }

    #[test]
    fn cluster_model_persistence() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![(i as f64).sin(), (i as f64).cos(), 0.5]).collect();
        let mut m = kmeans_fit(&pts, 3, 42).unwrap();
        m.assign_queries(&pts[..4]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.clusters");
        m.save(&path).unwrap();
        let back = ClusterModel::load(&path).unwrap();
        assert_eq!(back.bins, m.bins);
        assert_eq!(back.weights, m.weights);
        assert_eq!(back.seed, 42);
        for (a, b) in back.centroids.iter().zip(&m.centroids) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"{\"K\":3,\"dim\":3,\"bins\":["));
    }
}
