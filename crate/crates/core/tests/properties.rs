use gcprune::oracle::{perf_drop, DropMetric};
use gcprune::scheduler::{solve_lambda, threshold_product, thresholds};
use proptest::prelude::*;

const METRICS: [DropMetric; 4] = [DropMetric::Linf, DropMetric::L1Sum, DropMetric::L2, DropMetric::Min];

proptest! {
    #[test]
    fn drop_ignores_task_order_and_sign(mut delta in prop::collection::vec(-2.0f64..2.0, 1..6), flip in any::<u8>()) {
        let before: Vec<f64> = METRICS.iter().map(|&m| perf_drop(&delta, m).0).collect();
        delta.reverse();
        for (i, d) in delta.iter_mut().enumerate() {
            if flip >> (i % 8) & 1 == 1 {
                *d = -*d;
            }
        }
        for (&m, b) in METRICS.iter().zip(&before) {
            let (v, t) = perf_drop(&delta, m);
            prop_assert!((v - b).abs() <= 1e-12 * b.max(1.0));
            prop_assert!(t < delta.len());
        }
    }

    #[test]
    fn drop_metrics_are_ordered(delta in prop::collection::vec(-2.0f64..2.0, 1..6)) {
        let v = |m| perf_drop(&delta, m).0;
        let (min, linf, l2, l1) = (v(DropMetric::Min), v(DropMetric::Linf), v(DropMetric::L2), v(DropMetric::L1Sum));
        prop_assert!(min <= linf);
        prop_assert!(linf <= l2 + 1e-12);
        prop_assert!(l2 <= l1 + 1e-12);
        let (_, t) = perf_drop(&delta, DropMetric::Linf);
        prop_assert_eq!(delta[t].abs(), linf);
    }

    #[test]
    fn solved_schedule_hits_alpha(alpha in 1.5f64..12.0, d1 in 0.01f64..0.1, layers in 2usize..150) {
        let lambda = solve_lambda(alpha, d1, layers).unwrap();
        prop_assert!((threshold_product(d1, lambda, layers) - alpha).abs() <= 1e-9 * alpha);
        let d = thresholds(d1, lambda, layers);
        prop_assert_eq!(d.len(), layers);
        prop_assert!((d[0] - d1).abs() <= 1e-15);
        for w in d.windows(2) {
            prop_assert!((w[1] / w[0] - lambda).abs() <= 1e-9 * lambda);
        }
    }
}
