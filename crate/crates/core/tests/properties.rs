use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rsb_core::cavity::{
    psi_bruteforce, psi_edge, psi_vertex, sample_couplings, CouplingPlan, MagnetizationVector, ModelParams, PsiKind,
};
use rsb_core::oracle::{exact_log_partition, exact_log_partition_halved, sample_rrg};
use rsb_core::parisi_measure::{discretize, sup_distance, DiscreteParisiMeasure, GeneralParisiMeasure};
use rsb_core::rsb_tree::{krsb_functional, Evaluator, HierarchicalMeasure, RsbExponents};
use rsb_core::SeedStream;

fn config() -> ProptestConfig {
    ProptestConfig { cases: 64, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn factorized_psi_matches_enumeration(seed in any::<u64>(), c in 1usize..=3, beta in 0.0f64..3.0, two_c in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ModelParams::new(beta, c).unwrap().with_2c_couplings(two_c);
        let j = sample_couplings(&p, &mut rng);
        let m: Vec<f64> = (0..2 * c).map(|_| rand::Rng::gen_range(&mut rng, -1.0..=1.0)).collect();
        let m = MagnetizationVector::new(m).unwrap();
        let e = psi_edge(&p, &j, &m).unwrap();
        let v = psi_vertex(&p, &j, &m).unwrap();
        prop_assert!((e - psi_bruteforce(PsiKind::Edge, &p, &j, &m).unwrap()).abs() <= 1e-12 * e.abs().max(1.0));
        prop_assert!((v - psi_bruteforce(PsiKind::Vertex, &p, &j, &m).unwrap()).abs() <= 1e-12 * v.abs().max(1.0));
    }

    #[test]
    fn psi_is_even_under_global_flip(seed in any::<u64>(), c in 1usize..=4, beta in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ModelParams::new(beta, c).unwrap();
        let j = sample_couplings(&p, &mut rng);
        let raw: Vec<f64> = (0..2 * c).map(|_| rand::Rng::gen_range(&mut rng, -0.99..0.99)).collect();
        let flipped = MagnetizationVector::new(raw.iter().map(|v| -v).collect()).unwrap();
        let m = MagnetizationVector::new(raw).unwrap();
        prop_assert!((psi_edge(&p, &j, &m).unwrap() - psi_edge(&p, &j, &flipped).unwrap()).abs() < 1e-12);
        prop_assert!((psi_vertex(&p, &j, &m).unwrap() - psi_vertex(&p, &j, &flipped).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn measure_json_round_trip_and_monotone_cdf(mut q in prop::collection::vec(0.0f64..1.0, 0..4), mut x in prop::collection::vec(0.0f64..1.0, 0..4)) {
        let k = q.len().min(x.len());
        q.truncate(k);
        x.truncate(k);
        q.sort_by(f64::total_cmp);
        x.sort_by(f64::total_cmp);
        q.insert(0, 0.0);
        q.push(1.0);
        x.push(1.0);
        let mu = DiscreteParisiMeasure::from_grid(&q, &x).unwrap();
        prop_assert_eq!(&DiscreteParisiMeasure::from_json(&mu.to_json()).unwrap(), &mu);
        let values: Vec<f64> = (0..=50).map(|i| mu.cdf_at(i as f64 / 50.0).unwrap()).collect();
        prop_assert!(values.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(values[50], 1.0);
    }

    #[test]
    fn discretization_meets_tolerance(a in 0.2f64..4.0, bits in 2i32..8) {
        let tol = 2f64.powi(-bits);
        let mu = GeneralParisiMeasure::new(move |q: f64| q.powf(a)).unwrap();
        let d = discretize(&mu, tol).unwrap();
        prop_assert!(sup_distance(&mu, &d) <= tol);
    }

    #[test]
    fn tree_json_round_trip(seed in any::<u64>(), b1 in 1usize..=3, b2 in 1usize..=3, amp in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = HierarchicalMeasure::random(&[b1, b2], amp, &mut rng).unwrap();
        let back = HierarchicalMeasure::from_json(&tree.to_json()).unwrap();
        prop_assert_eq!(back.leaf_values(), tree.leaf_values());
        let total: f64 = tree.leaf_probabilities().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_partition_symmetry_and_bounds(seed in any::<u64>(), half_n in 2usize..=5, beta in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 * half_n;
        let g = sample_rrg(n, 3, &mut rng).unwrap();
        let j: Vec<f64> = g.edges.iter().map(|_| if rand::Rng::gen::<bool>(&mut rng) { 1.0 } else { -1.0 }).collect();
        let f = exact_log_partition(&g, &j, beta).unwrap();
        prop_assert!((f - exact_log_partition_halved(&g, &j, beta).unwrap()).abs() < 1e-12);
        // log 2 <= f <= log 2 + beta * (edges per spin)
        let ln2 = std::f64::consts::LN_2;
        prop_assert!(f >= ln2 - 1e-12 && f <= ln2 + 1.5 * beta + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn krsb_is_invariant_under_tree_negation(seed in any::<u64>(), beta in 0.1f64..2.0, x1 in 0.05f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = HierarchicalMeasure::random(&[2, 2], 0.9, &mut rng).unwrap();
        let x = RsbExponents::new(vec![0.0, x1, 1.0]).unwrap();
        let p = ModelParams::new(beta, 2).unwrap();
        let s = SeedStream::new(seed);
        let a = krsb_functional(&tree, &x, &p, CouplingPlan::Exact, &Evaluator::Exact, s).unwrap();
        let b = krsb_functional(&tree.negated(), &x, &p, CouplingPlan::Exact, &Evaluator::Exact, s).unwrap();
        prop_assert!((a.value - b.value).abs() < 1e-10 * a.value.abs().max(1.0));
    }
}

#[test]
fn seed_streams_are_reproducible() {
    use rand::Rng;
    let s = SeedStream::new(11);
    let a: Vec<u64> = (0..4).map(|_| s.substream(3).rng().gen()).collect();
    assert!(a.windows(2).all(|w| w[0] == w[1]));
    assert_ne!(s.substream(3).rng().gen::<u64>(), s.substream(4).rng().gen::<u64>());
}
