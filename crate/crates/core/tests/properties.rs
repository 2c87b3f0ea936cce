mod common;

use common::*;
use proptest::prelude::*;

proptest! {
    #[test]
    fn streams_survive_text(fibers in fiber_sets()) {
        stream_round_trip(fibers)?;
    }

    #[test]
    fn storage_survives_every_format((d, fmts) in (1usize..=3).prop_flat_map(|o| (dense(o), fmt_list(o)))) {
        storage_round_trip(d, fmts)?;
    }

    #[test]
    fn scanner_then_writer_is_identity(d in dense(2)) {
        scan_write_round_trip(d)?;
    }

    #[test]
    fn merges_follow_set_algebra(a in set(), b in set()) {
        merge_laws(a, b)?;
    }

    #[test]
    fn reducers_conserve_sums(fibers in fiber_sets(), seed in any::<u64>()) {
        sum_conservation(fibers, seed)?;
    }

    #[test]
    fn dropper_is_exact(fibers in fiber_sets()) {
        crd_drop_exact(fibers)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn timing_never_changes_results(b in dense(2), c in dense(2), order in 0usize..6) {
        // align the shared dimension
        let c = samkit::storage::gen_sparse(&[b.shape[1], c.shape[1]], 0.5, 9, c.data.len() as u64);
        timing_independence(b, c, order)?;
    }

    #[test]
    fn simulation_is_deterministic(b in dense(2), seed in any::<u64>()) {
        let c = samkit::storage::gen_sparse(&[b.shape[1], 4], 0.5, 9, seed);
        determinism(b, c)?;
    }

    #[test]
    fn compiled_graphs_match_oracle(case in 0usize..14, seed in any::<u64>()) {
        compiler_correct(case, seed, 12)?;
    }
}
