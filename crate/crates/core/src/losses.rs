//! Pairwise query/database loss, the quadruplet multi-similarity (MUM) loss
//! and their weighted sum, with analytic gradients.
//!
//! Similarities are cosine similarities of the raw vectors passed in, and
//! gradients are taken with respect to those raw coordinates, so callers can
//! keep unconstrained parameters. Every `log(1 + sum exp(z))` goes through a
//! max-shifted evaluation so gains in the hundreds stay finite.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::cosine_similarity;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha1: f64,
    pub beta1: f64,
    pub alpha2: f64,
    pub beta2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Pairing threshold on footprint IoU (strict).
    pub t_iou: f64,
    /// Number of k-means clusters for mining.
    pub k: usize,
    pub batch_size: usize,
    /// Iterations between cluster refreshes.
    pub refresh_every: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            beta1: 50.0,
            alpha2: 1.0,
            beta2: 50.0,
            lambda1: 1.0,
            lambda2: 1.0,
            t_iou: 0.2,
            k: 50,
            batch_size: 48,
            refresh_every: 5000,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let gains = [self.alpha1, self.beta1, self.alpha2, self.beta2];
        if gains.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::InvalidArgument("loss gains must be finite and positive".into()));
        }
        if [self.lambda1, self.lambda2].iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidArgument("loss weights must be finite and non-negative".into()));
        }
        if !(self.t_iou > 0.0 && self.t_iou <= 1.0) {
            return Err(Error::InvalidArgument("t_iou must lie in (0, 1]".into()));
        }
        if self.k == 0 || self.batch_size == 0 || self.refresh_every == 0 {
            return Err(Error::InvalidArgument(
                "k, batch_size and refresh_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Matching (query, database) pairs; entries index a vector table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBatch {
    pub pairs: Vec<(usize, usize)>,
}

/// Quadruplets of database vectors drawn from one cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuadBatch {
    pub quads: Vec<[usize; 4]>,
    pub cluster_id: usize,
}

/// A loss value with its gradient for every vector the batch touches.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grads: BTreeMap<usize, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub pairs: f64,
    pub mum: f64,
    pub total: f64,
    pub grads: BTreeMap<usize, Vec<f64>>,
}

/// `log(1 + sum_j exp(z_j))`, and the weights `exp(z_j) / (1 + sum exp(z))`.
fn log1p_sum_exp(z: &[f64]) -> (f64, Vec<f64>) {
    if z.is_empty() {
        return (0.0, Vec::new());
    }
    let m = z.iter().cloned().fold(0.0, f64::max);
    let value = if m == 0.0 {
        z.iter().map(|v| v.exp()).sum::<f64>().ln_1p()
    } else {
        m + ((-m).exp() + z.iter().map(|v| (v - m).exp()).sum::<f64>()).ln()
    };
    let weights = z.iter().map(|v| (v - value).exp()).collect();
    (value, weights)
}

/// `log(1 + exp(-x s))`.
pub fn attraction(x: f64, s: f64) -> f64 {
    log1p_sum_exp(&[-x * s]).0
}

/// `log(1 + sum_j exp(x S(anchor, others_j)))`; zero for no others.
pub fn repulsion(x: f64, anchor: &[f64], others: &[&[f64]]) -> Result<f64> {
    let z = others
        .iter()
        .map(|o| cosine_similarity(anchor, o).map(|s| x * s))
        .collect::<Result<Vec<_>>>()?;
    Ok(log1p_sum_exp(&z).0)
}

/// Normalized copies of the vectors in a batch plus an accumulator for
/// dL/dS over pairs of them.
struct Workspace {
    slots: Vec<usize>,
    units: Vec<Vec<f64>>,
    norms: Vec<f64>,
    sim: Vec<f64>,
    dsim: Vec<f64>,
}

impl Workspace {
    fn new(vectors: &[Vec<f64>], ids: impl IntoIterator<Item = usize>) -> Result<(Self, HashMap<usize, usize>)> {
        let mut slot_of = HashMap::new();
        let mut slots = Vec::new();
        for id in ids {
            if id >= vectors.len() {
                return Err(Error::InvalidBatch(format!("vector index {id} out of range")));
            }
            slot_of.entry(id).or_insert_with(|| {
                slots.push(id);
                slots.len() - 1
            });
        }
        let dim = slots.first().map_or(0, |&i| vectors[i].len());
        let mut units = Vec::with_capacity(slots.len());
        let mut norms = Vec::with_capacity(slots.len());
        for &id in &slots {
            let v = &vectors[id];
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::Numeric(format!("vector {id} has norm {n}")));
            }
            units.push(v.iter().map(|x| x / n).collect::<Vec<_>>());
            norms.push(n);
        }
        let k = slots.len();
        let mut sim = vec![0.0; k * k];
        for a in 0..k {
            for b in a..k {
                let s = units[a].iter().zip(&units[b]).map(|(x, y)| x * y).sum::<f64>();
                sim[a * k + b] = s;
                sim[b * k + a] = s;
            }
        }
        Ok((
            Self {
                slots,
                units,
                norms,
                sim,
                dsim: vec![0.0; k * k],
            },
            slot_of,
        ))
    }

    fn s(&self, a: usize, b: usize) -> f64 {
        self.sim[a * self.slots.len() + b]
    }

    /// Adds `coef * log(1 + sum_b exp(gain * S(anchor, b)))` and its
    /// sensitivities; returns the unscaled log term.
    fn soft_term(&mut self, anchor: usize, others: &[usize], gain: f64, coef: f64) -> f64 {
        let z: Vec<f64> = others.iter().map(|&b| gain * self.s(anchor, b)).collect();
        let (value, weights) = log1p_sum_exp(&z);
        let k = self.slots.len();
        for (&b, w) in others.iter().zip(weights) {
            self.dsim[anchor * k + b] += coef * gain * w;
        }
        value
    }

    /// Chain rule from dL/dS through the cosine and the normalization.
    fn gradients(&self) -> BTreeMap<usize, Vec<f64>> {
        let k = self.slots.len();
        let dim = self.units.first().map_or(0, Vec::len);
        let mut out = BTreeMap::new();
        for a in 0..k {
            let mut g = vec![0.0; dim];
            for b in 0..k {
                // S(a, b) is symmetric, so both orderings feed into a.
                let c = self.dsim[a * k + b] + self.dsim[b * k + a];
                if c != 0.0 {
                    // d S(a,b) / d unit_a = unit_b, except S(a,a) which is constant.
                    if a != b {
                        for (gi, ub) in g.iter_mut().zip(&self.units[b]) {
                            *gi += c * ub;
                        }
                    }
                }
            }
            let radial = g.iter().zip(&self.units[a]).map(|(x, u)| x * u).sum::<f64>();
            let n = self.norms[a];
            let grad = g
                .iter()
                .zip(&self.units[a])
                .map(|(gi, u)| (gi - radial * u) / n)
                .collect();
            out.insert(self.slots[a], grad);
        }
        out
    }
}

fn check_pairs(batch: &PairBatch) -> Result<()> {
    if batch.pairs.is_empty() {
        return Err(Error::InvalidBatch("pair batch is empty".into()));
    }
    let mut owner = HashMap::new();
    for (i, &(q, d)) in batch.pairs.iter().enumerate() {
        for v in [q, d] {
            if let Some(&j) = owner.get(&v) {
                if j != i {
                    return Err(Error::InvalidBatch(format!("vector {v} appears in pairs {j} and {i}")));
                }
            }
            owner.insert(v, i);
        }
    }
    Ok(())
}

fn check_quads(batch: &QuadBatch) -> Result<()> {
    if batch.quads.is_empty() {
        return Err(Error::InvalidBatch("quadruplet batch is empty".into()));
    }
    let mut seen = HashMap::new();
    for (i, quad) in batch.quads.iter().enumerate() {
        for &v in quad {
            if seen.insert(v, i).is_some() {
                return Err(Error::InvalidBatch(format!("vector {v} used twice in quadruplet batch")));
            }
        }
    }
    Ok(())
}

/// Positive (attraction) and negative (repulsion) parts of the pairwise loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairParts {
    pub pos: f64,
    pub neg: f64,
}

fn pair_loss_into(ws: &mut Workspace, slot: &HashMap<usize, usize>, batch: &PairBatch, cfg: &LossConfig, weight: f64) -> PairParts {
    let b = batch.pairs.len() as f64;
    let qs: Vec<usize> = batch.pairs.iter().map(|p| slot[&p.0]).collect();
    let ds: Vec<usize> = batch.pairs.iter().map(|p| slot[&p.1]).collect();
    let pos_coef = weight / (cfg.alpha1 * b);
    let neg_coef = weight / (cfg.beta1 * b);
    let (mut pos, mut neg) = (0.0, 0.0);
    for i in 0..qs.len() {
        let (q, d) = (qs[i], ds[i]);
        pos += ws.soft_term(q, &[d], -cfg.alpha1, pos_coef);
        let other_q: Vec<usize> = qs.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).collect();
        let other_d: Vec<usize> = ds.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).collect();
        neg += ws.soft_term(q, &other_q, cfg.beta1, neg_coef);
        neg += ws.soft_term(q, &other_d, cfg.beta1, neg_coef);
        neg += ws.soft_term(d, &other_q, cfg.beta1, neg_coef);
        neg += ws.soft_term(d, &other_d, cfg.beta1, neg_coef);
    }
    PairParts {
        pos: pos / (cfg.alpha1 * b),
        neg: neg / (cfg.beta1 * b),
    }
}

fn mum_loss_into(ws: &mut Workspace, slot: &HashMap<usize, usize>, batch: &QuadBatch, cfg: &LossConfig, weight: f64) -> f64 {
    let h = batch.quads.len() as f64;
    let quads: Vec<[usize; 4]> = batch.quads.iter().map(|q| q.map(|v| slot[&v])).collect();
    let pos_coef = weight / (4.0 * h * cfg.alpha2);
    let neg_coef = weight / (4.0 * h * cfg.beta2);
    let mut total = 0.0;
    for (i, quad) in quads.iter().enumerate() {
        let outsiders: Vec<usize> = quads
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .flat_map(|(_, q)| q.iter().copied())
            .collect();
        for j in 0..4 {
            let partners: Vec<usize> = (0..4).filter(|&l| l != j).map(|l| quad[l]).collect();
            total += ws.soft_term(quad[j], &partners, -cfg.alpha2, pos_coef) / cfg.alpha2;
            total += ws.soft_term(quad[j], &outsiders, cfg.beta2, neg_coef) / cfg.beta2;
        }
    }
    total / (4.0 * h)
}

/// Pairwise loss, returning the attraction/repulsion split as well.
pub fn pair_loss_parts(vectors: &[Vec<f64>], batch: &PairBatch, cfg: &LossConfig) -> Result<(PairParts, LossOutput)> {
    check_pairs(batch)?;
    let ids = batch.pairs.iter().flat_map(|&(q, d)| [q, d]);
    let (mut ws, slot) = Workspace::new(vectors, ids)?;
    let parts = pair_loss_into(&mut ws, &slot, batch, cfg, 1.0);
    Ok((
        parts,
        LossOutput {
            value: parts.pos + parts.neg,
            grads: ws.gradients(),
        },
    ))
}

pub fn pair_loss(vectors: &[Vec<f64>], batch: &PairBatch, cfg: &LossConfig) -> Result<LossOutput> {
    pair_loss_parts(vectors, batch, cfg).map(|(_, out)| out)
}

pub fn mum_loss(vectors: &[Vec<f64>], batch: &QuadBatch, cfg: &LossConfig) -> Result<LossOutput> {
    check_quads(batch)?;
    let ids = batch.quads.iter().flatten().copied();
    let (mut ws, slot) = Workspace::new(vectors, ids)?;
    let value = mum_loss_into(&mut ws, &slot, batch, cfg, 1.0);
    Ok(LossOutput {
        value,
        grads: ws.gradients(),
    })
}

/// `lambda1 * pair_loss + lambda2 * mum_loss`. Either batch may be omitted,
/// which drops its term; vectors present in both accumulate gradients.
pub fn total_loss(
    vectors: &[Vec<f64>],
    pairs: Option<&PairBatch>,
    quads: Option<&QuadBatch>,
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    if let Some(p) = pairs {
        check_pairs(p)?;
    }
    if let Some(q) = quads {
        check_quads(q)?;
    }
    let ids = pairs
        .into_iter()
        .flat_map(|p| p.pairs.iter().flat_map(|&(q, d)| [q, d]))
        .chain(quads.into_iter().flat_map(|q| q.quads.iter().flatten().copied()))
        .collect::<Vec<_>>();
    let (mut ws, slot) = Workspace::new(vectors, ids)?;
    let pair_value = match pairs {
        Some(p) => {
            let parts = pair_loss_into(&mut ws, &slot, p, cfg, cfg.lambda1);
            parts.pos + parts.neg
        }
        None => 0.0,
    };
    let mum_value = match quads {
        Some(q) => mum_loss_into(&mut ws, &slot, q, cfg, cfg.lambda2),
        None => 0.0,
    };
    Ok(TotalLoss {
        pairs: pair_value,
        mum: mum_value,
        total: cfg.lambda1 * pair_value + cfg.lambda2 * mum_value,
        grads: ws.gradients(),
    })
}
