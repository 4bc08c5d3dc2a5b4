mod common;

use astroloc::geo::{
    covering_tiles, footprint_area_sqkm, footprint_iou, tile_footprint, Footprint, GeoPoint, DATABASE_ZOOMS,
};
use astroloc::losses::{attraction, mum_loss, pair_loss, total_loss, LossConfig, PairBatch, QuadBatch};
use astroloc::mining::{kmeans_fit, weights_from_bins};
use astroloc::retrieval::{build_index, evaluate_store, search, EvalOptions};
use astroloc::store::{synth_dataset, EmbeddingStore, SynthConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

fn quad_strategy() -> impl Strategy<Value = Footprint> {
    (-60.0f64..60.0, -170.0f64..170.0, 0.1f64..3.0, any::<u64>())
        .prop_map(|(lat, lon, size, seed)| random_quad(&mut ChaCha8Rng::seed_from_u64(seed), lat, lon, size))
}

fn nearby_pair() -> impl Strategy<Value = (Footprint, Footprint)> {
    (-60.0f64..60.0, -170.0f64..170.0, 0.1f64..2.0, -2.0f64..2.0, -2.0f64..2.0, any::<u64>()).prop_map(
        |(lat, lon, size, dlat, dlon, seed)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let a = random_quad(&mut r, lat, lon, size);
            let b = random_quad(&mut r, lat + dlat * size, lon + dlon * size, size);
            (a, b)
        },
    )
}

fn rotate(f: &Footprint, k: usize) -> Footprint {
    let c = f.corners();
    Footprint::new([c[k % 4], c[(k + 1) % 4], c[(k + 2) % 4], c[(k + 3) % 4]]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn iou_symmetric_and_bounded((a, b) in nearby_pair()) {
        let ab = footprint_iou(&a, &b);
        let ba = footprint_iou(&b, &a);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert_eq!(footprint_iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_ignores_corner_order((a, b) in nearby_pair(), k in 0usize..4) {
        let base = footprint_iou(&a, &b);
        prop_assert!((footprint_iou(&rotate(&a, k), &b) - base).abs() < 1e-12);
        prop_assert!((footprint_iou(&a.reversed(), &b) - base).abs() < 1e-12);
    }

    #[test]
    fn area_ignores_corner_order(f in quad_strategy(), k in 0usize..4) {
        let a = footprint_area_sqkm(&f).unwrap();
        prop_assert!(a > 0.0);
        prop_assert!((footprint_area_sqkm(&rotate(&f, k)).unwrap() - a).abs() <= 1e-9 * a);
        prop_assert!((footprint_area_sqkm(&f.reversed()).unwrap() - a).abs() <= 1e-9 * a);
    }

    #[test]
    fn covering_tiles_contain_point(lat in -85.0f64..85.0, lon in -180.0f64..180.0, zi in 0usize..5) {
        let p = GeoPoint::new(lat, lon).unwrap();
        for t in covering_tiles(&p, DATABASE_ZOOMS[zi]).unwrap() {
            prop_assert!(tile_footprint(&t).unwrap().contains(&p));
        }
    }

    #[test]
    fn attraction_convexity(x in 0.1f64..60.0, s in -1.0f64..1.0) {
        let sum = attraction(x, s) + attraction(x, -s);
        prop_assert!(sum >= 2.0 * std::f64::consts::LN_2 - 1e-12);
        if s != 0.0 {
            prop_assert!(sum > 2.0 * std::f64::consts::LN_2);
        }
    }

    #[test]
    fn weights_sum_to_one(bins in prop::collection::vec(0u64..1000, 1..60)) {
        let w = weights_from_bins(&bins);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(w.iter().all(|x| (0.0..=1.0).contains(x)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_permutation_invariant(b in 1usize..6, h in 1usize..5, dim in 2usize..12, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (pairs, quads, n) = disjoint_batches(b, h);
        let v = raw_vectors(&mut r, n, dim);
        let cfg = LossConfig::default();
        let mut rp = pairs.pairs.clone();
        rp.reverse();
        let mut rq = quads.quads.clone();
        rq.rotate_left(1);
        let p0 = pair_loss(&v, &pairs, &cfg).unwrap().value;
        let p1 = pair_loss(&v, &PairBatch { pairs: rp }, &cfg).unwrap().value;
        let m0 = mum_loss(&v, &quads, &cfg).unwrap().value;
        let m1 = mum_loss(&v, &QuadBatch { quads: rq, cluster_id: 0 }, &cfg).unwrap().value;
        prop_assert!((p0 - p1).abs() < 1e-12);
        prop_assert!((m0 - m1).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences(b in 1usize..4, h in 1usize..4, dim in 2usize..10, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (pairs, quads, n) = disjoint_batches(b, h);
        let v = raw_vectors(&mut r, n, dim);
        let cfg = LossConfig::default();
        let out = total_loss(&v, Some(&pairs), Some(&quads), &cfg).unwrap();
        let f = |w: &[Vec<f64>]| total_loss(w, Some(&pairs), Some(&quads), &cfg).unwrap().total;
        for i in 0..n {
            let numeric = fd_gradient(&f, &v, i, 1e-5);
            prop_assert!(rel_error(&out.grads[&i], &numeric, 1e-6) < 1e-4);
        }
    }

    #[test]
    fn gradients_are_tangent(b in 1usize..4, h in 1usize..4, dim in 2usize..10, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (pairs, quads, n) = disjoint_batches(b, h);
        let v = raw_vectors(&mut r, n, dim);
        let out = total_loss(&v, Some(&pairs), Some(&quads), &LossConfig::default()).unwrap();
        for (i, g) in &out.grads {
            let along: f64 = g.iter().zip(&v[*i]).map(|(a, b)| a * b).sum();
            prop_assert!(along.abs() < 1e-10);
        }
    }

    #[test]
    fn kmeans_partitions_and_descends(n in 5usize..80, k in 1usize..5, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut r, 3)).collect();
        let m = kmeans_fit(&pts, k, seed).unwrap();
        prop_assert_eq!(m.assignments.len(), n);
        prop_assert!(m.members().iter().all(|c| !c.is_empty()));
        for w in m.sse_history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }
}

fn small_store(seed: u64, rotations: bool) -> EmbeddingStore {
    synth_dataset(&SynthConfig {
        n_locations: 12,
        db_per_location: 2,
        queries_per_location: 1,
        dim: 8,
        noise_sigma: 0.8,
        seed,
        rotations,
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn search_ignores_insertion_order(seed in any::<u64>(), rotations in any::<bool>(), n in 1usize..30) {
        let store = small_store(seed, rotations);
        let mut recs = store.records().to_vec();
        recs.reverse();
        let shuffled = EmbeddingStore::new(store.dim(), recs).unwrap();
        let q = gaussian_vec(&mut ChaCha8Rng::seed_from_u64(seed ^ 1), 8);
        let a = search(&build_index(&store, rotations).unwrap(), &q, n, None).unwrap();
        let b = search(&build_index(&shuffled, rotations).unwrap(), &q, n, None).unwrap();
        let ids = |h: &[astroloc::retrieval::Hit]| h.iter().map(|x| x.base_id.clone()).collect::<Vec<_>>();
        prop_assert_eq!(ids(&a), ids(&b));
        let mut seen = std::collections::HashSet::new();
        prop_assert!(a.iter().all(|h| seen.insert(h.base_id.clone())));
    }

    #[test]
    fn recall_monotone_in_n(seed in any::<u64>()) {
        let store = small_store(seed, false);
        let ns: Vec<usize> = (1..=24).collect();
        let r = evaluate_store(&store, &ns, &EvalOptions::default()).unwrap();
        let v: Vec<f64> = r.recall_at.values().copied().collect();
        prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(v.iter().all(|x| (0.0..=100.0).contains(x)));
    }

    #[test]
    fn store_round_trip(seed in any::<u64>(), rotations in any::<bool>()) {
        let store = small_store(seed, rotations);
        let back = EmbeddingStore::from_bytes(&store.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back, store);
    }

    #[test]
    fn query_scale_leaves_bins_unchanged(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec<f64>> = (0..30).map(|_| gaussian_vec(&mut r, 4)).collect();
        let qs: Vec<Vec<f64>> = (0..20).map(|_| gaussian_vec(&mut r, 4)).collect();
        let scaled: Vec<Vec<f64>> = qs.iter().map(|q| q.iter().map(|x| x * scale).collect()).collect();
        let mut a = kmeans_fit(&pts, 4, seed).unwrap();
        let mut b = a.clone();
        a.assign_queries(&qs).unwrap();
        b.assign_queries(&scaled).unwrap();
        prop_assert_eq!(a.bins, b.bins);
    }
}
