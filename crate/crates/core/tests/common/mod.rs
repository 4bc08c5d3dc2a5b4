//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use astroloc::geo::{Footprint, GeoPoint, Merc};
use astroloc::losses::{LossConfig, PairBatch, QuadBatch};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian_vec<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Vectors with random direction and norm in [0.5, 2).
pub fn raw_vectors<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v = gaussian_vec(rng, dim);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = rng.gen_range(0.5..2.0) / n;
            v.into_iter().map(|x| x * scale).collect()
        })
        .collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Neumaier-compensated sum.
fn ksum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = 0.0f64;
    let mut c = 0.0f64;
    for x in xs {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

fn log1p_sum(terms: impl IntoIterator<Item = f64>) -> f64 {
    ksum(terms).ln_1p()
}

/// Pair loss transcribed term by term: attraction mean over pairs scaled by
/// 1/alpha1, plus four repulsion sets per pair scaled by 1/(beta1 B).
pub fn oracle_pair(v: &[Vec<f64>], batch: &PairBatch, cfg: &LossConfig) -> f64 {
    let b = batch.pairs.len();
    let pos = ksum(
        batch
            .pairs
            .iter()
            .map(|&(q, d)| log1p_sum([(-cfg.alpha1 * cos(&v[q], &v[d])).exp()])),
    ) / (cfg.alpha1 * b as f64);
    let mut neg_terms = Vec::new();
    for (i, &(q, d)) in batch.pairs.iter().enumerate() {
        for anchor in [q, d] {
            let others_q = batch.pairs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| p.0);
            let others_d = batch.pairs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| p.1);
            neg_terms.push(log1p_sum(others_q.map(|o| (cfg.beta1 * cos(&v[anchor], &v[o])).exp())));
            neg_terms.push(log1p_sum(others_d.map(|o| (cfg.beta1 * cos(&v[anchor], &v[o])).exp())));
        }
    }
    pos + ksum(neg_terms) / (cfg.beta1 * b as f64)
}

pub fn oracle_mum(v: &[Vec<f64>], batch: &QuadBatch, cfg: &LossConfig) -> f64 {
    let h = batch.quads.len();
    let mut terms = Vec::new();
    for (i, quad) in batch.quads.iter().enumerate() {
        for j in 0..4 {
            let a = &v[quad[j]];
            let pos = log1p_sum((0..4).filter(|&l| l != j).map(|l| (-cfg.alpha2 * cos(a, &v[quad[l]])).exp()));
            let neg = log1p_sum(
                batch
                    .quads
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| *k != i)
                    .flat_map(|(_, q)| q.iter())
                    .map(|&o| (cfg.beta2 * cos(a, &v[o])).exp()),
            );
            terms.push(pos / cfg.alpha2 + neg / cfg.beta2);
        }
    }
    ksum(terms) / (4.0 * h as f64)
}

pub fn oracle_total(v: &[Vec<f64>], pairs: &PairBatch, quads: &QuadBatch, cfg: &LossConfig) -> f64 {
    cfg.lambda1 * oracle_pair(v, pairs, cfg) + cfg.lambda2 * oracle_mum(v, quads, cfg)
}

/// A pair batch over vectors `0..2b` and a quad batch over the next `4h`.
pub fn disjoint_batches(b: usize, h: usize) -> (PairBatch, QuadBatch, usize) {
    let pairs = PairBatch {
        pairs: (0..b).map(|i| (2 * i, 2 * i + 1)).collect(),
    };
    let base = 2 * b;
    let quads = QuadBatch {
        quads: (0..h)
            .map(|i| [base + 4 * i, base + 4 * i + 1, base + 4 * i + 2, base + 4 * i + 3])
            .collect(),
        cluster_id: 0,
    };
    (pairs, quads, base + 4 * h)
}

/// Central finite-difference gradient of `f` with respect to `v[idx]`.
pub fn fd_gradient(f: &dyn Fn(&[Vec<f64>]) -> f64, v: &[Vec<f64>], idx: usize, h: f64) -> Vec<f64> {
    let mut work = v.to_vec();
    (0..v[idx].len())
        .map(|c| {
            let x = work[idx][c];
            work[idx][c] = x + h;
            let up = f(&work);
            work[idx][c] = x - h;
            let down = f(&work);
            work[idx][c] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)` over whole vectors.
pub fn rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Even-odd point in polygon on the Mercator plane.
pub fn point_in_poly(p: Merc, poly: &[Merc]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Monte-Carlo IoU over the joint Mercator bounding box.
pub fn monte_carlo_iou<R: Rng>(a: &Footprint, b: &Footprint, samples: usize, rng: &mut R) -> f64 {
    let (pa, pb) = (a.projected(), b.projected());
    let all: Vec<Merc> = pa.iter().chain(pb.iter()).copied().collect();
    let min_x = all.iter().map(|m| m.x).fold(f64::INFINITY, f64::min);
    let max_x = all.iter().map(|m| m.x).fold(f64::NEG_INFINITY, f64::max);
    let min_y = all.iter().map(|m| m.y).fold(f64::INFINITY, f64::min);
    let max_y = all.iter().map(|m| m.y).fold(f64::NEG_INFINITY, f64::max);
    let (mut both, mut either) = (0u64, 0u64);
    for _ in 0..samples {
        let p = Merc {
            x: rng.gen_range(min_x..max_x),
            y: rng.gen_range(min_y..max_y),
        };
        let (ia, ib) = (point_in_poly(p, &pa), point_in_poly(p, &pb));
        both += (ia && ib) as u64;
        either += (ia || ib) as u64;
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

/// Star-shaped (possibly non-convex) quadrilateral around a centre.
pub fn random_quad<R: Rng>(rng: &mut R, lat: f64, lon: f64, size_deg: f64) -> Footprint {
    loop {
        let mut angles: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let mut corner = |a: f64| {
            let r = size_deg * rng.gen_range(0.3..1.0);
            [lat + r * a.sin(), lon + r * a.cos()]
        };
        let corners = [corner(angles[0]), corner(angles[1]), corner(angles[2]), corner(angles[3])];
        if let Ok(f) = Footprint::from_latlon(corners) {
            if f.mercator_area() > 1e-12 {
                return f;
            }
        }
    }
}

pub fn square(lat: f64, lon: f64, half: f64) -> Footprint {
    Footprint::from_bounds(lat - half, lon - half, lat + half, lon + half).unwrap()
}

pub fn point(lat: f64, lon: f64) -> GeoPoint {
    GeoPoint::new(lat, lon).unwrap()
}
