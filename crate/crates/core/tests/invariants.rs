use cwlab_core::bench::sample_candidates;
use cwlab_core::causal::{dag_penalty, threshold_support};
use cwlab_core::eval::{compute_metrics, rank_of, shd, spearman, top_k_overlap};
use cwlab_core::fusion::{decay_rate_for, effective_alpha, fusion_alpha, mix, FusionSchedule};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn square(d: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-2.0f64..2.0, d * d).prop_map(move |v| Array2::from_shape_vec((d, d), v).unwrap())
}

proptest! {
    #[test]
    fn metrics_are_bounded(ranks in prop::collection::vec(1usize..12, 1..40)) {
        let m = compute_metrics(&ranks).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.h1));
        prop_assert!((0.0..=1.0).contains(&m.mrr));
        prop_assert!(m.h1 <= m.mrr + 1e-12);
    }

    #[test]
    fn rank_lies_in_list(scores in prop::collection::vec(-5.0f64..5.0, 1..12), pick in 0usize..12) {
        let p = pick % scores.len();
        let r = rank_of(&scores, p);
        prop_assert!(r >= 1 && r <= scores.len());
    }

    #[test]
    fn penalty_is_non_negative(a in (2usize..6).prop_flat_map(square)) {
        prop_assert!(dag_penalty(&a) >= -1e-12);
    }

    #[test]
    fn upper_triangular_is_acyclic(a in (2usize..6).prop_flat_map(square)) {
        let mut t = a.clone();
        for i in 0..t.nrows() {
            for j in 0..=i {
                t[[i, j]] = 0.0;
            }
        }
        prop_assert!(dag_penalty(&t).abs() < 1e-8);
    }

    #[test]
    fn support_excludes_diagonal(a in (2usize..6).prop_flat_map(square), ratio in 0.0f64..1.0) {
        let s = threshold_support(&a, ratio, 0.0);
        for i in 0..a.nrows() {
            prop_assert!(!s[[i, i]]);
        }
    }

    #[test]
    fn shd_is_a_metric_on_supports(a in (3usize..5).prop_flat_map(square), b in square(3)) {
        let sa = threshold_support(&a, 0.3, 0.1);
        prop_assert_eq!(shd(&sa, &sa), 0);
        if a.nrows() == 3 {
            let sb = threshold_support(&b, 0.3, 0.1);
            prop_assert_eq!(shd(&sa, &sb), shd(&sb, &sa));
        }
    }

    #[test]
    fn spearman_is_bounded(v in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 2..20)) {
        let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let r = spearman(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&r));
    }

    #[test]
    fn overlap_is_a_fraction(a in square(4), b in square(4), k in 1usize..8) {
        let o = top_k_overlap(&a, &b, k);
        prop_assert!((0.0..=1.0).contains(&o));
    }

    #[test]
    fn alpha_decays_monotonically(alpha0 in 0.0f64..1.0, steps in 1u64..500) {
        let s = FusionSchedule { alpha0, k_alpha: decay_rate_for(0.1, steps), ..Default::default() };
        let mut last = f64::INFINITY;
        for t in 0..=steps {
            let a = fusion_alpha(&s, t);
            prop_assert!(a <= last + 1e-15 && a >= 0.0 && a <= alpha0 + 1e-15);
            last = a;
        }
        prop_assert!((fusion_alpha(&s, steps) - 0.1 * alpha0).abs() < 1e-12);
    }

    #[test]
    fn gated_alpha_never_exceeds_schedule(alpha in 0.0f64..1.0, delta in prop::collection::vec(0.0f64..10.0, 1..10)) {
        let s = FusionSchedule::default();
        for a in effective_alpha(&s, alpha, &delta) {
            prop_assert!(a >= 0.0 && a <= alpha);
        }
    }

    #[test]
    fn mixing_interpolates(z in square(3), zt in square(3), a in 0.0f64..1.0) {
        let m = mix(&z, &zt, &[a; 3]);
        for ((x, y), v) in z.iter().zip(zt.iter()).zip(m.iter()) {
            prop_assert!(*v >= x.min(*y) - 1e-12 && *v <= x.max(*y) + 1e-12);
        }
    }

    #[test]
    fn candidates_hold_the_query_once(pool_size in 12usize..40, query in 0usize..12, seed in 0u64..1000) {
        let pool: Vec<usize> = (0..pool_size).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (eps, pos) = sample_candidates(&pool, query, 11, &mut rng).unwrap();
        prop_assert_eq!(eps.len(), 11);
        prop_assert_eq!(eps[pos], query);
        prop_assert_eq!(eps.iter().filter(|&&e| e == query).count(), 1);
        let mut sorted = eps.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), 11);
    }
}
