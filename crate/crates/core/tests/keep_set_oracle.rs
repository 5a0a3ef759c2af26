use depthforge::keep_set::{solve_keep_set, solve_keep_set_flagged};
use depthforge::oracle::brute_force_keep_set;
use depthforge::synth::{random_network, NetSpec};
use depthforge::tables::enumerate_variants;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn keep_sets_match_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6ee9);
    let mut checked = 0;
    while checked < 500 {
        let mut spec = NetSpec::small(rng.gen_range(2..=12));
        spec.barrier_prob = 0.0;
        let net = random_network(&mut rng, &spec);
        let i = rng.gen_range(0..net.len());
        let j = rng.gen_range(i + 1..=net.len());
        if !net.segment_allowed(i, j) {
            continue;
        }
        let variants = enumerate_variants(i, j, &net).unwrap();
        let (k, depthwise) = variants[rng.gen_range(0..variants.len())];

        let oracle = brute_force_keep_set(i, j, k, None, &net).unwrap();
        let sol = solve_keep_set(i, j, k, &net).unwrap();
        assert_eq!(Some(sol.total_l1), oracle.objective, "segment ({i}, {j}] k={k}");

        let oracle = brute_force_keep_set(i, j, k, Some(depthwise), &net).unwrap();
        let flagged = solve_keep_set_flagged(i, j, k, depthwise, &net).unwrap();
        assert_eq!(Some(flagged.total_l1), oracle.objective);
        assert_eq!(flagged.depthwise_result, depthwise);

        // Feasibility re-derived from the keep set itself.
        assert_eq!(net.merged_size_of(i, j, &flagged.keep), k);
        assert_eq!(net.merged_is_depthwise(i, j, &flagged.keep), depthwise);
        for l in i + 1..=j {
            if net.irreducible().contains(&l) {
                assert!(flagged.keep.contains(&l));
            }
            if !flagged.keep.contains(&l) {
                assert!(net.is_substitutable(l));
            }
        }
        assert_eq!(solve_keep_set_flagged(i, j, k, depthwise, &net).unwrap(), flagged);
        checked += 1;
    }
}

#[test]
fn every_reported_variant_is_realizable() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..100 {
        let net = random_network(&mut rng, &NetSpec::small(8));
        for (i, j) in net.admissible_segments() {
            let variants = enumerate_variants(i, j, &net).unwrap();
            let span = j - i;
            for k in 1..=40 {
                for dw in [false, true] {
                    let listed = variants.contains(&(k, dw));
                    let found = brute_force_keep_set(i, j, k, Some(dw), &net)
                        .unwrap()
                        .objective
                        .is_some();
                    assert_eq!(listed, found, "({i}, {j}] k={k} dw={dw} span={span}");
                }
            }
        }
    }
}
