//! Property tests over schedules, digests, MACs, and the AUC summary.

use proptest::prelude::*;
use supernet_core::arch::{demo_space, ArchConfig};
use supernet_core::eval::mean_pareto_accuracy;
use supernet_core::schedule::{EpsilonSchedule, LrSchedule};
use supernet_core::supernet::count_macs;

fn arb_config() -> impl Strategy<Value = ArchConfig> {
    // Index into each choice list of the demo space.
    let space = demo_space();
    let per_stage: Vec<_> = space
        .stages
        .iter()
        .map(|st| {
            (
                0..st.depth_choices.len(),
                proptest::collection::vec(0..st.width_fraction_choices.len(), st.max_depth),
                proptest::collection::vec(0..st.kernel_choices.len(), st.max_depth),
            )
        })
        .collect();
    (per_stage, 0..space.resolution_choices.len()).prop_map(move |(stages, r)| {
        let space = demo_space();
        ArchConfig {
            depth: stages
                .iter()
                .zip(&space.stages)
                .map(|((d, _, _), st)| st.depth_choices[*d])
                .collect(),
            width_frac: stages
                .iter()
                .zip(&space.stages)
                .map(|((_, ws, _), st)| {
                    ws.iter().map(|&w| st.width_fraction_choices[w]).collect()
                })
                .collect(),
            kernel: stages
                .iter()
                .zip(&space.stages)
                .map(|((_, _, ks), st)| ks.iter().map(|&k| st.kernel_choices[k]).collect())
                .collect(),
            resolution: space.resolution_choices[r],
        }
    })
}

proptest! {
    #[test]
    fn digest_round_trips(config in arb_config()) {
        let parsed: ArchConfig = config.digest().parse().unwrap();
        prop_assert_eq!(parsed, config);
    }

    #[test]
    fn configs_are_members_and_macs_bounded(config in arb_config()) {
        let space = demo_space();
        space.validate_config(&config).unwrap();
        let m = count_macs(&space, &config).unwrap();
        prop_assert!(count_macs(&space, &space.a_min()).unwrap() <= m);
        prop_assert!(m <= count_macs(&space, &space.a_full()).unwrap());
    }

    #[test]
    fn macs_monotone_under_domination(a in arb_config(), b in arb_config()) {
        let space = demo_space();
        if a.dominated_by(&b) {
            prop_assert!(count_macs(&space, &a).unwrap() <= count_macs(&space, &b).unwrap());
        }
    }

    #[test]
    fn epsilon_monotone_and_saturates(
        eps0 in 1e-6f64..=1.0,
        warmup in 1u64..5000,
        t in 0u64..20000,
    ) {
        let s = EpsilonSchedule::new(eps0, warmup);
        let e = s.epsilon_at(t);
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert!(e >= s.epsilon_at(t.saturating_sub(1)) - 1e-15);
        if t >= warmup {
            prop_assert_eq!(e, 1.0);
        }
    }

    #[test]
    fn lr_bounded_and_floored(
        eta0 in 1e-4f64..10.0,
        total in 1u64..10000,
        t in 0u64..10000,
        floor in 0.0f64..0.5,
    ) {
        let plain = LrSchedule::cosine(eta0, total);
        let e = plain.eta_at(t);
        prop_assert!(e >= -1e-12 && e <= eta0 + 1e-12);
        let ce = LrSchedule::cosine_constant_ending(eta0, total, floor);
        prop_assert!(ce.eta_at(t) >= floor * eta0 - 1e-12);
    }

    #[test]
    fn auc_stays_within_accuracy_envelope(
        points in proptest::collection::btree_map(1u64..1000, 0.0f64..1.0, 2..12),
    ) {
        let pts: Vec<(u64, f64)> = points.into_iter().collect();
        let (lo, hi) = (pts.first().unwrap().0, pts.last().unwrap().0);
        prop_assume!(hi > lo);
        let v = mean_pareto_accuracy(&pts, lo, hi).unwrap();
        let min = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let max = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= min - 1e-12 && v <= max + 1e-12);
    }
}
