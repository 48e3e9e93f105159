mod common;

use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_op_matches_finite_differences(h in 1usize..=8, w in 1usize..=8, c in 1usize..=8, seed in any::<u64>()) {
        for case in common::op_cases(seed, (h, w, c)) {
            let report = case.check(1e-4);
            prop_assert!(report.passed(), "{} at {h}x{w}x{c}: {report:?}", case.name);
        }
    }
}
