use lacp::harness::{txn_fault_run, FaultSpec, Outcome, TxnSimConfig};
use proptest::prelude::*;

fn lossy_spec() -> impl Strategy<Value = FaultSpec> {
    (0.0..0.3f64, 0.0..0.3f64, 0.0..0.5f64, 0.0..3.0f64, any::<bool>()).prop_map(
        |(drop, duplicate, delay, max_delay, duplicate_commits)| FaultSpec {
            drop,
            duplicate,
            delay,
            max_delay,
            duplicate_commits,
            ..FaultSpec::none()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lossy_networks_keep_atomicity(n in 1usize..5, seed in any::<u64>(), faults in lossy_spec()) {
        let report = txn_fault_run(TxnSimConfig::new(n, seed, faults)).unwrap();
        prop_assert!(report.pass(), "{}", report);
        prop_assert!(report.all_acked, "{}", report);
        let committed = report.coordinator == Outcome::Committed;
        for p in &report.participants {
            prop_assert_eq!(p.effects, u64::from(committed));
        }
    }

    #[test]
    fn one_refusal_aborts_everyone(n in 1usize..5, seed in any::<u64>(), who in any::<prop::sample::Index>(), faults in lossy_spec()) {
        let mut faults = faults;
        faults.refuse.insert(who.index(n));
        let report = txn_fault_run(TxnSimConfig::new(n, seed, faults)).unwrap();
        prop_assert!(report.pass(), "{}", report);
        prop_assert_eq!(report.coordinator, Outcome::Aborted);
        prop_assert!(report.participants.iter().all(|p| p.effects == 0));
    }
}

#[test]
fn silence_aborts_at_the_prepare_timeout() {
    for seed in 0..5 {
        let report = txn_fault_run(TxnSimConfig::new(3, seed, "silence".parse().unwrap())).unwrap();
        assert!(report.pass(), "{report}");
        assert_eq!(report.coordinator, Outcome::Aborted);
        assert!(report.participants.iter().all(|p| p.effects == 0));
    }
}
