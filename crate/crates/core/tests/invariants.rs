use fssl_core::data::synth_blobs;
use fssl_core::defenses::{krum, krum_scores, majority_cluster};
use fssl_core::encoder::{init, Activation, LayerLayout, ModelParams};
use fssl_core::federation::{
    chi_square_heterogeneity, dirichlet_partition, fedavg, iid_partition, largest_remainder,
};
use fssl_core::hallucination::{
    closest_prototype, generate_positives, geodesic_offset, HallucinationConfig, PrototypeSet,
};
use fssl_core::linalg::{normalize_slice, softmax_lse, UnitVector};
use fssl_core::losses::{enqueue, info_nce, MemoryQueue};
use fssl_core::poisoning::{mask_to_bottom_k, selection_set, update_zeta, GradStats};
use fssl_core::rng::RngStream;
use proptest::prelude::*;

fn unit(rng: &mut RngStream, dim: usize) -> UnitVector<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        if let Ok(u) = normalize_slice(&v) {
            return u;
        }
    }
}

fn labels(classes: usize, per_class: usize) -> Vec<usize> {
    (0..classes)
        .flat_map(|c| std::iter::repeat(c).take(per_class))
        .collect()
}

fn assert_partition(assignment: &[Vec<usize>], n: usize) {
    let mut seen = vec![0u8; n];
    for a in assignment {
        assert!(!a.is_empty());
        for &i in a {
            seen[i] += 1;
        }
    }
    assert!(seen.iter().all(|&s| s == 1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dirichlet_is_a_partition(seed in any::<u64>(), k in 1usize..12, alpha in 0.01f64..50.0, per in 2usize..30) {
        let l = labels(10, per);
        let plan = dirichlet_partition(&l, 10, k, alpha, &mut RngStream::new(seed, 1)).unwrap();
        prop_assert_eq!(plan.assignment.len(), k);
        assert_partition(&plan.assignment, l.len());
        prop_assert!(chi_square_heterogeneity(&plan, &l, 10) >= 0.0);
    }

    #[test]
    fn iid_is_a_balanced_partition(seed in any::<u64>(), k in 1usize..12, per in 2usize..30) {
        let l = labels(10, per);
        let plan = iid_partition(&l, 10, k, &mut RngStream::new(seed, 2)).unwrap();
        assert_partition(&plan.assignment, l.len());
        let sizes = plan.sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn largest_remainder_sums_to_n(raw in prop::collection::vec(0.0f64..1.0, 1..10), n in 0usize..500) {
        let s: f64 = raw.iter().sum();
        prop_assume!(s > 1e-9);
        let props: Vec<f64> = raw.iter().map(|r| r / s).collect();
        let counts = largest_remainder(&props, n);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        for (c, p) in counts.iter().zip(&props) {
            prop_assert!((*c as f64 - p * n as f64).abs() < 1.0 + 1e-9);
        }
    }

    /// FedAvg is a convex combination: each coordinate lies within the
    /// range of the inputs, and identical inputs are returned unchanged.
    #[test]
    fn fedavg_is_convex(seed in any::<u64>(), k in 1usize..6, w in prop::collection::vec(1usize..100, 6)) {
        let layout = LayerLayout::uniform(3, &[4], 2, Activation::Tanh).unwrap();
        let mut rng = RngStream::new(seed, 3);
        let models: Vec<ModelParams<f64>> = (0..k).map(|_| init(&layout, &mut rng)).collect();
        let refs: Vec<&ModelParams<f64>> = models.iter().collect();
        let avg = fedavg(&refs, &w[..k]).unwrap();
        for i in 0..avg.len() {
            let lo = models.iter().map(|m| m.as_slice()[i]).fold(f64::INFINITY, f64::min);
            let hi = models.iter().map(|m| m.as_slice()[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(avg.as_slice()[i] >= lo - 1e-12 && avg.as_slice()[i] <= hi + 1e-12);
        }
        let same = vec![&models[0]; k];
        let back = fedavg(&same, &w[..k]).unwrap();
        for (a, b) in back.as_slice().iter().zip(models[0].as_slice()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn geodesic_stays_on_sphere(seed in any::<u64>(), dim in 2usize..12, t in 0.0f64..=1.0) {
        let mut rng = RngStream::new(seed, 4);
        let (a, b) = (unit(&mut rng, dim), unit(&mut rng, dim));
        prop_assume!(fssl_core::linalg::dot(&a, &b).abs() < 1.0 - 1e-6);
        let d = geodesic_offset(t, &b, &a).unwrap();
        let v: Vec<f64> = a.iter().zip(d.iter()).map(|(x, y)| x + y).collect();
        let n = fssl_core::linalg::norm(&v);
        prop_assert!((n - 1.0).abs() < 1e-9);
    }

    /// Every retained positive has the anchor's closest prototype.
    #[test]
    fn hallucinated_positives_keep_the_anchor_prototype(seed in any::<u64>(), dim in 2usize..8, l in 2usize..8) {
        let mut rng = RngStream::new(seed, 5);
        let ps = PrototypeSet::new((0..l).map(|_| unit(&mut rng, dim)).collect()).unwrap();
        let v_k = unit(&mut rng, dim);
        let cfg = HallucinationConfig::default();
        let h = generate_positives(&v_k, &ps, &cfg, &mut rng).unwrap();
        let star = closest_prototype(&v_k, &ps).0;
        for p in &h.positives {
            prop_assert_eq!(closest_prototype(p, &ps).0, star);
            prop_assert!((fssl_core::linalg::norm(p) - 1.0).abs() < 1e-9);
        }
        prop_assert!(h.selected() <= cfg.candidates);
    }

    #[test]
    fn info_nce_is_nonnegative_and_finite(seed in any::<u64>(), dim in 2usize..10, m in 1usize..40, tau in 0.05f64..2.0) {
        let mut rng = RngStream::new(seed, 6);
        let q = enqueue(MemoryQueue::new(m), (0..m).map(|_| unit(&mut rng, dim)).collect::<Vec<_>>());
        let lg = info_nce(&unit(&mut rng, dim), &unit(&mut rng, dim), &q, tau).unwrap();
        prop_assert!(lg.loss >= 0.0 && lg.loss.is_finite());
        prop_assert!(lg.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn softmax_sums_to_one(xs in prop::collection::vec(-500.0f64..500.0, 1..50)) {
        let (p, lse) = softmax_lse(&xs);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(lse >= xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - 1e-12);
    }

    /// The EWMA never exceeds the running max of |g|, and masked gradients
    /// vanish outside the selection set.
    #[test]
    fn zeta_bounded_and_mask_supported(
        grads in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 12), 1..6),
        k_frac in 0.05f64..1.0,
        track in 0.05f64..=1.0,
    ) {
        let mut gs = GradStats::new(12, k_frac).with_tracking(track, Default::default());
        for g in &grads {
            let prev = gs.zeta.iter().cloned().fold(0.0, f64::max);
            gs = update_zeta(gs, g).unwrap();
            let gmax = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
            prop_assert!(gs.zeta.iter().all(|&z| z >= 0.0 && z <= prev.max(gmax) + 1e-12));
        }
        let attack: Vec<f64> = (0..12).map(|i| i as f64 + 1.0).collect();
        let masked = mask_to_bottom_k(&attack, &gs).unwrap();
        let s = selection_set(&gs);
        prop_assert_eq!(s.len(), ((k_frac * 12.0) - 1e-9).ceil() as usize);
        for i in 0..12 {
            prop_assert_eq!(masked[i] != 0.0, s.contains(&i));
        }
    }

    #[test]
    fn krum_picks_the_minimum_score(seed in any::<u64>(), n in 4usize..8, dim in 1usize..5) {
        let mut rng = RngStream::new(seed, 7);
        let ups: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect();
        let f = n - 3;
        let scores = krum_scores(&ups, f).unwrap();
        let pick = krum(&ups, f).unwrap();
        prop_assert!(scores.iter().all(|&s| s >= scores[pick]));
    }

    #[test]
    fn majority_cluster_is_a_strict_majority(seed in any::<u64>(), n in 1usize..10) {
        let mut rng = RngStream::new(seed, 8);
        let ups: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let keep = majority_cluster(&ups);
        prop_assert!(2 * keep.len() > n);
        prop_assert!(keep.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn blobs_have_requested_shape() {
    let d = synth_blobs(10, 32, 7, 0.15, &mut RngStream::new(1, 1)).unwrap();
    assert_eq!(d.len(), 70);
    assert_eq!(d.class_counts(), vec![7; 10]);
    assert!(d.samples.iter().all(|s| s.len() == 32));
}
