//! Desk-scale training loop over a free table of raw embedding vectors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, QuadBatch};
use crate::mining::{
    build_pair_batch, kmeans_fit, mine_pairs, refresh_schedule, sample_cluster, ClusterModel, LocationIndex,
    QuadSampler, SamplingMode,
};
use crate::retrieval::{evaluate_store, EvalOptions, RecallReport};
use crate::store::EmbeddingStore;

/// Recall cut-offs reported by [`eval_checkpoint`].
pub const CHECKPOINT_NS: [usize; 3] = [1, 10, 100];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub lr: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Upper bound on quadruplets per MUM batch; a cluster with fewer usable
    /// locations yields a smaller batch.
    pub quads_per_batch: usize,
    pub sampling: SamplingMode,
    /// Cluster draws before giving up on a quadruplet batch.
    pub max_batch_retries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            lr: 0.05,
            iterations: 2000,
            seed: 0,
            quads_per_batch: 48,
            sampling: SamplingMode::Weighted,
            max_batch_retries: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidArgument("lr must be finite and non-negative".into()));
        }
        if self.quads_per_batch == 0 || self.max_batch_retries == 0 {
            return Err(Error::InvalidArgument(
                "quads_per_batch and max_batch_retries must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub pairs: f64,
    pub mum: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Raw (unnormalized) vectors in store order.
    #[serde(skip)]
    pub raw_params: Vec<Vec<f64>>,
    pub iteration: usize,
    pub cfg: TrainConfig,
    pub loss_history: Vec<LossRecord>,
}

impl TrainState {
    /// The store with its vectors replaced by the normalized parameters.
    pub fn embeddings(&self, store: &EmbeddingStore) -> Result<EmbeddingStore> {
        store.with_vectors(&self.raw_params)
    }

    pub fn loss_csv(&self) -> String {
        let mut out = String::from("iteration,pair_loss,mum_loss,total\n");
        for r in &self.loss_history {
            out.push_str(&format!("{},{},{},{}\n", r.iteration, r.pairs, r.mum, r.total));
        }
        out
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Refits clusters on the current database vectors and counts the current
/// query vectors into them.
fn refresh_clusters(store: &EmbeddingStore, params: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterModel> {
    let db: Vec<Vec<f64>> = store.db_indices().iter().map(|&i| normalized(&params[i])).collect();
    let mut model = kmeans_fit(&db, k, seed)?;
    let queries: Vec<Vec<f64>> = store.query_indices().iter().map(|&i| params[i].clone()).collect();
    model.assign_queries(&queries)?;
    Ok(model)
}

fn draw_quads(sampler: &QuadSampler<'_>, model: &ClusterModel, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<QuadBatch> {
    for _ in 0..cfg.max_batch_retries {
        let k = sample_cluster(model, cfg.sampling, rng);
        let h = cfg.quads_per_batch.min(sampler.cluster_locations(k).len());
        if h == 0 {
            continue;
        }
        match sampler.build(k, h, rng) {
            Ok(batch) => return Ok(batch),
            Err(Error::InsufficientCluster { available, .. }) if available > 0 => {
                return sampler.build(k, available, rng);
            }
            Err(Error::InsufficientCluster { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Err(Error::InvalidBatch(format!(
        "no cluster supplied a quadruplet in {} draws; each needs a location with four overlapping db records",
        cfg.max_batch_retries
    )))
}

/// Runs `cfg.iterations` steps of sparse gradient descent on the total loss.
///
/// Each step draws one pair batch and one quadruplet batch from a cluster
/// chosen by `cfg.sampling`; a term whose weight is zero is skipped along
/// with its batch. Only vectors in the batches move.
pub fn train(store: &EmbeddingStore, cfg: &TrainConfig) -> Result<(TrainState, EmbeddingStore)> {
    cfg.validate()?;
    let lc = &cfg.loss;
    let use_pairs = lc.lambda1 > 0.0;
    let use_quads = lc.lambda2 > 0.0;

    let pair_index = mine_pairs(store, lc.t_iou)?;
    if use_pairs && pair_index.is_empty() {
        return Err(Error::InvalidArgument("no training pairs above the IoU threshold".into()));
    }
    let locations = LocationIndex::build(store)?;
    if use_quads && locations.len() < 2 {
        return Err(Error::InvalidArgument("need at least two training locations".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = store.vectors_f64();
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut model: Option<ClusterModel> = None;
    let mut sampler: Option<QuadSampler<'_>> = None;

    for it in 0..cfg.iterations {
        if use_quads && refresh_schedule(it, lc.refresh_every) {
            let m = refresh_clusters(store, &params, lc.k, cfg.seed.wrapping_add(it as u64))?;
            sampler = Some(QuadSampler::new(store, &locations, &m)?);
            model = Some(m);
        }
        let pairs = if use_pairs {
            Some(build_pair_batch(store, &pair_index, lc.batch_size, &mut rng)?)
        } else {
            None
        };
        let quads = match (&sampler, &model) {
            (Some(s), Some(m)) => Some(draw_quads(s, m, cfg, &mut rng)?),
            _ => None,
        };
        let loss = total_loss(&params, pairs.as_ref(), quads.as_ref(), lc)?;
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at iteration {it}")));
        }
        for (&i, g) in &loss.grads {
            for (p, d) in params[i].iter_mut().zip(g) {
                *p -= cfg.lr * d;
            }
            if params[i].iter().any(|p| !p.is_finite()) {
                return Err(Error::Numeric(format!("non-finite parameter at iteration {it}")));
            }
        }
        history.push(LossRecord {
            iteration: it,
            pairs: loss.pairs,
            mum: loss.mum,
            total: loss.total,
        });
    }

    let state = TrainState {
        raw_params: params,
        iteration: cfg.iterations,
        cfg: cfg.clone(),
        loss_history: history,
    };
    let out = if cfg.lr == 0.0 {
        store.clone()
    } else {
        state.embeddings(store)?
    };
    Ok((state, out))
}

/// Recall@{1,10,100} of the trained table: the current database vectors
/// are indexed and the store's own queries are searched.
pub fn eval_checkpoint(state: &TrainState, store: &EmbeddingStore) -> Result<RecallReport> {
    evaluate_store(&state.embeddings(store)?, &CHECKPOINT_NS, &EvalOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::PairBatch;
    use crate::store::{synth_dataset, SynthConfig};

    fn synth(n: usize, q: usize, dim: usize, noise: f64, seed: u64) -> EmbeddingStore {
        synth_dataset(&SynthConfig {
            n_locations: n,
            db_per_location: 4,
            queries_per_location: q,
            dim,
            noise_sigma: noise,
            seed,
            rotations: false,
        })
        .unwrap()
    }

    fn quick(iterations: usize) -> TrainConfig {
        TrainConfig {
            loss: LossConfig {
                k: 8,
                batch_size: 8,
                ..LossConfig::default()
            },
            iterations,
            seed: 5,
            quads_per_batch: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_is_identity() {
        let s = synth(20, 1, 8, 0.3, 1);
        let cfg = TrainConfig { lr: 0.0, ..quick(20) };
        let (state, out) = train(&s, &cfg).unwrap();
        assert_eq!(out, s);
        assert_eq!(state.embeddings(&s).unwrap(), s);
        assert_eq!(state.loss_history.len(), 20);
    }

    #[test]
    fn deterministic_history() {
        let s = synth(20, 1, 8, 0.3, 1);
        let (a, sa) = train(&s, &quick(30)).unwrap();
        let (b, sb) = train(&s, &quick(30)).unwrap();
        let bits = |st: &TrainState| -> Vec<u64> { st.loss_history.iter().map(|r| r.total.to_bits()).collect() };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(sa, sb);
        assert!(a.loss_history.windows(2).all(|w| w[0].iteration < w[1].iteration));
    }

    #[test]
    fn outputs_stay_unit_norm() {
        let s = synth(20, 1, 8, 0.5, 2);
        let (_, out) = train(&s, &quick(50)).unwrap();
        for r in out.records() {
            let n: f64 = r.vector.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_lambda_drops_term() {
        let s = synth(20, 1, 8, 0.3, 1);
        let mut cfg = quick(10);
        cfg.loss.lambda2 = 0.0;
        let (st, _) = train(&s, &cfg).unwrap();
        assert!(st.loss_history.iter().all(|r| r.mum == 0.0 && r.total == r.pairs));
        cfg.loss.lambda2 = 1.0;
        cfg.loss.lambda1 = 0.0;
        let (st, _) = train(&s, &cfg).unwrap();
        assert!(st.loss_history.iter().all(|r| r.pairs == 0.0 && r.total == r.mum));
    }

    #[test]
    fn total_loss_trends_down() {
        let s = synth(50, 2, 32, 0.6, 3);
        let cfg = TrainConfig {
            iterations: 2000,
            seed: 3,
            ..TrainConfig::default()
        };
        let (st, _) = train(&s, &cfg).unwrap();
        let window = |from: usize| st.loss_history[from..from + 100].iter().map(|r| r.total).sum::<f64>() / 100.0;
        assert!(window(1900) < window(0));
    }

    #[test]
    fn small_step_lowers_batch_loss() {
        let s = synth(10, 1, 8, 0.5, 4);
        let params = s.vectors_f64();
        let q = s.query_indices();
        let batch = PairBatch {
            pairs: vec![(q[0], s.db_indices()[0]), (q[1], s.db_indices()[4])],
        };
        let cfg = LossConfig::default();
        let before = total_loss(&params, Some(&batch), None, &cfg).unwrap();
        for lr in [1e-3, 1e-4] {
            let mut moved = params.clone();
            for (&i, g) in &before.grads {
                moved[i].iter_mut().zip(g).for_each(|(p, d)| *p -= lr * d);
            }
            let after = total_loss(&moved, Some(&batch), None, &cfg).unwrap();
            assert!(after.total < before.total);
        }
    }

    #[test]
    fn checkpoint_on_clean_data_is_perfect() {
        let s = synth(30, 1, 16, 0.0, 6);
        let (st, _) = train(&s, &TrainConfig { lr: 0.0, ..quick(1) }).unwrap();
        let r = eval_checkpoint(&st, &s).unwrap();
        assert_eq!(r.recall(1), Some(100.0));
    }

    #[test]
    fn bad_config_rejected() {
        let s = synth(5, 1, 4, 0.1, 1);
        assert!(train(&s, &TrainConfig { lr: f64::NAN, ..quick(1) }).is_err());
        assert!(train(&s, &TrainConfig { quads_per_batch: 0, ..quick(1) }).is_err());
    }
}
