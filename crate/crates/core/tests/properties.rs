use proptest::prelude::*;

use sbsp_core::model::{log_marginal, posterior};
use sbsp_core::planning::{global_band, invert_band, point_estimate_dm};
use sbsp_core::special::{gamma_accum, GammaTable};
use sbsp_core::{DayBound, HyperParams, ModelKind, RngStream, SufficientStats};

fn arb_hyper() -> impl Strategy<Value = HyperParams> {
    (0.02f64..0.98, 0.05f64..300.0, 0.05f64..20.0).prop_map(|(a, c, b)| HyperParams::new(a, c, b).unwrap())
}

fn arb_stats() -> impl Strategy<Value = SufficientStats> {
    (1u32..25, prop::sample::select(vec![ModelKind::Bernoulli, ModelKind::Geometric]))
        .prop_flat_map(|(d, kind)| {
            prop::collection::vec(1..=d, 0..60).prop_map(move |counts| SufficientStats::new(d, kind, counts).unwrap())
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn marginal_ignores_user_order(stats in arb_stats(), hyper in arb_hyper(), rot in 0usize..60) {
        let a = log_marginal(&stats, &hyper).unwrap();
        let mut counts = stats.counts.clone();
        if !counts.is_empty() {
            let k = rot % counts.len();
            counts.rotate_left(k);
            counts.reverse();
        }
        let shuffled = SufficientStats::new(stats.d, stats.kind, counts).unwrap();
        let b = log_marginal(&shuffled, &hyper).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn gamma_accumulation_is_positive_and_additive(alpha in 0.01f64..0.99, a in 0u64..500, b in 1u64..300, e in 1u64..300) {
        let first = gamma_accum(alpha, a, b).unwrap();
        let whole = gamma_accum(alpha, a, b + e).unwrap();
        prop_assert!(first > 0.0 && whole > first);
        let mut table = GammaTable::new(alpha).unwrap();
        let split = table.accum(a, b) + table.accum(a + b, e);
        prop_assert!((whole - split).abs() <= 1e-12 * whole);
    }

    #[test]
    fn predictive_mean_matches_trajectory(stats in arb_stats(), hyper in arb_hyper(), horizon in 1u32..40) {
        let post = posterior(&stats, &hyper).unwrap();
        let law = post.predict_new_users(horizon).unwrap();
        let means = post.trajectory_means(horizon).unwrap();
        let last = means[horizon as usize - 1] - stats.n_users() as f64;
        prop_assert!((law.mean() - last).abs() <= 1e-9 * last.max(1.0));
        prop_assert!(means.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn point_estimate_is_monotone_in_target(stats in arb_stats(), hyper in arb_hyper(), extra in 1u64..50) {
        let post = posterior(&stats, &hyper).unwrap();
        let n = stats.n_users();
        let near = point_estimate_dm(&post, n + extra, 5000).unwrap();
        let far = point_estimate_dm(&post, n + 2 * extra, 5000).unwrap();
        prop_assert!(near <= far);
        prop_assert!(near >= DayBound::Days(1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 30, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn band_edges_are_ordered_and_inversion_is_consistent(
        stats in arb_stats(),
        hyper in arb_hyper(),
        horizon in 1u32..30,
        seed in any::<u64>(),
        level in 0.5f64..0.99,
    ) {
        let post = posterior(&stats.clone(), &hyper).unwrap();
        let band = global_band(&post, level, horizon, 300, &mut RngStream::new(seed, 0)).unwrap();
        let n = stats.n_users();
        prop_assert_eq!(band.trajectories_kept, (level * 300.0 - 1e-9).ceil() as usize);
        for l in 0..horizon as usize {
            prop_assert!(n <= band.lo[l] && band.lo[l] <= band.hi[l]);
            if l > 0 {
                prop_assert!(band.lo[l - 1] <= band.lo[l] && band.hi[l - 1] <= band.hi[l]);
            }
        }
        let top = band.hi[horizon as usize - 1];
        if top > n {
            let iv = invert_band(&band, top).unwrap();
            prop_assert!(iv.lower <= iv.upper);
            prop_assert!(iv.lower <= DayBound::Days(horizon));
        }
    }
}
