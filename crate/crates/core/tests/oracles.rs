mod common;

use common::oracle;

const INSTANCES: usize = 60;

#[test]
fn avgpool_same_matches_nested_loops() {
    oracle::avgpool_same_matches_nested_loops(INSTANCES);
}

#[test]
fn conv2d_fixed_matches_nested_loops_for_all_kernels() {
    oracle::conv2d_fixed_matches_nested_loops_for_all_kernels(INSTANCES);
}

#[test]
fn channel_pool_matches_nested_loops() {
    oracle::channel_pool_matches_nested_loops(INSTANCES);
}

#[test]
fn low_freq_branch_matches_reference() {
    oracle::low_freq_branch_matches_reference(INSTANCES);
}

#[test]
fn high_freq_branch_matches_reference() {
    oracle::high_freq_branch_matches_reference(INSTANCES);
}

#[test]
fn ranking_and_metrics_match_brute_force() {
    oracle::ranking_and_metrics_match_brute_force(INSTANCES);
}

#[test]
fn batch_all_mining_matches_exhaustive_enumeration() {
    oracle::batch_all_mining_matches_exhaustive_enumeration(INSTANCES);
}

#[test]
fn batch_hard_mining_picks_extreme_pairs() {
    oracle::batch_hard_mining_picks_extreme_pairs(INSTANCES);
}
