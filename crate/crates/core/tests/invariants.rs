use dynroute::budget::{encode_scales, expected_budget, loss_aware_budget, ScaleEncoding, ScaleIntervals};
use dynroute::cost::{compile_cost_table, node_cost, CostTable};
use dynroute::similarity::{gt_similarity, local_similarity_loss, path_similarity, scale_similarity, SimilarityConfig};
use dynroute::supernet::{build_supernet, GateVector, SupernetSpec, KEEP};
use dynroute::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

fn table() -> &'static CostTable {
    static T: OnceLock<CostTable> = OnceLock::new();
    T.get_or_init(|| compile_cost_table(&SupernetSpec::default(), 64, 64).unwrap())
}

fn encoding(bits: &[bool]) -> ScaleEncoding {
    ScaleEncoding(bits.to_vec())
}

#[test]
fn keep_path_is_free_and_constants_are_nonnegative() {
    for (_, k) in &table().nodes {
        assert_eq!(k.keep, 0.0);
        assert!(k.conv > 0.0 && k.up >= 0.0 && k.down >= 0.0);
    }
    assert_eq!(&compile_cost_table(&SupernetSpec::default(), 64, 64).unwrap(), table());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn binary_routes_cost_between_zero_and_dense(mask in proptest::collection::vec(any::<[bool; 3]>(), 26)) {
        let t = table();
        prop_assert_eq!(mask.len(), t.nodes.len());
        let c: f64 = mask.iter().zip(&t.nodes).map(|(m, (_, k))| node_cost(GateVector::from_array(m.map(|o| o as u8 as f64)), k)).sum();
        prop_assert!(c >= 0.0 && c <= t.total() + 1e-9);
    }

    #[test]
    fn scale_and_gt_similarity_stay_in_range(
        pair in (1usize..6).prop_flat_map(|m| (proptest::collection::vec(any::<bool>(), m), proptest::collection::vec(any::<bool>(), m))),
        lo in 0.01f64..1.0,
        width in 0.0f64..1.0,
    ) {
        let (a, b) = (encoding(&pair.0), encoding(&pair.1));
        let s = scale_similarity(&a, &b).unwrap();
        prop_assert_eq!(s, scale_similarity(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(scale_similarity(&a, &a).unwrap(), 1.0);
        let hi = lo + (1.0 - lo) * width;
        let g = gt_similarity(s, lo, hi);
        prop_assert!(g >= lo - 1e-12 && g <= hi + 1e-12);
    }

    #[test]
    fn path_similarity_is_a_bounded_symmetric_cosine(
        pair in (1usize..30).prop_flat_map(|d| (proptest::collection::vec(0.0f64..1.0, d), proptest::collection::vec(0.0f64..1.0, d))),
    ) {
        let c = path_similarity(&pair.0, &pair.1);
        prop_assert_eq!(c, path_similarity(&pair.1, &pair.0));
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&c));
    }

    #[test]
    fn local_loss_is_nonnegative(routes in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 6), 0..6), seed in any::<u64>()) {
        let scales: Vec<_> = (0..routes.len()).map(|i| encoding(&[(seed >> i) & 1 == 1, (seed >> (i + 8)) & 1 == 1, true])).collect();
        let l = local_similarity_loss(&routes, &scales, &SimilarityConfig::default()).unwrap();
        prop_assert!(l >= 0.0);
        if routes.len() < 2 {
            prop_assert_eq!(l, 0.0);
        }
    }

    #[test]
    fn budgets_stay_within_their_bands(
        bits in proptest::collection::vec(any::<bool>(), 1..6),
        buffer in proptest::collection::vec(0.0f64..10.0, 0..40),
        current in 0.0f64..10.0,
        c0 in 0.001f64..1.0,
    ) {
        let e = expected_budget(&encoding(&bits), c0);
        prop_assert!(e >= 0.0 && e <= c0 + 1e-15);
        let la = loss_aware_budget(&buffer, current, c0);
        prop_assert!(la >= c0 && la <= 4.0 * c0 + 1e-15);
    }

    #[test]
    fn encoding_is_empty_only_without_boxes(boxes in proptest::collection::vec((0.5f64..200.0, 0.5f64..200.0), 0..8)) {
        let s = encode_scales(&boxes, &ScaleIntervals::default()).unwrap();
        prop_assert_eq!(s.len(), ScaleIntervals::default().len());
        prop_assert_eq!(s.count() == 0, boxes.is_empty());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn inference_gates_are_bounded_and_masked_at_the_boundary(net_seed in 0u64..1000, img_seed in any::<u64>(), bias in -1.0f64..3.0) {
        let spec = SupernetSpec { router_bias_init: bias, ..SupernetSpec::default() };
        let (net, params) = build_supernet(spec.clone(), net_seed).unwrap();
        let image = Tensor::uniform(&[1, 1, 64, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(img_seed));
        let (features, route, _) = net.infer_sample(&params, &image, None, 0).unwrap();
        prop_assert_eq!(route.route_vector().len(), 3 * spec.node_count());
        for n in &route.nodes {
            let g = n.gates.to_array();
            let valid = spec.valid_directions(n.node.scale);
            for d in 0..3 {
                prop_assert!((0.0..=1.0).contains(&g[d]));
                if !valid[d] {
                    prop_assert_eq!(g[d], 0.0);
                }
            }
            prop_assert!(valid[KEEP]);
        }
        prop_assert!(features.iter().all(|f| f.all_finite()));
    }
}
