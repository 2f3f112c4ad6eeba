mod common;

#[test]
fn every_building_block_matches_central_differences() {
    for seed in [0, 1, 2] {
        for (name, err) in common::gradient_suite(seed) {
            assert!(err <= 1e-4, "{name} (seed {seed}): relative error {err:.3e}");
        }
    }
}
