mod common;

use common::*;
use pasa::aggregation::PartitionTree;
use pasa::mdp::{
    bellman_residual_max, exact_action_values, sample_skeleton, stationary_distribution_of, transition_matrix,
    MdpModel, NoiseKind, Policy, QTable,
};
use pasa::metrics::{bellman_score, mse_score, restricted_score};
use pasa::rl::CellValueTable;
use pasa::skeleton::compute_cycles;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn skeleton_successors_are_uniform_across_seeds() {
    let s = 1000;
    let seeds = 100_000u64;
    let mut counts = vec![0u64; s];
    for seed in 0..seeds {
        counts[sample_skeleton(s, 1, seed).unwrap()[0]] += 1;
    }
    let expected = seeds as f64 / s as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((s - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.001, "chi-square = {stat}, p = {p}");
}

#[test]
fn kernel_rows_match_enumeration() {
    for (s, a, noise) in [(1, 1, NoiseKind::Uniform), (5, 3, NoiseKind::UniformExcludingCurrent), (64, 2, NoiseKind::Uniform)] {
        let mut inst = instance(s, a, 0.2, 0.3, 0.9, s as u64);
        inst.model = MdpModel::new(
            s,
            a,
            inst.model.skeleton().to_vec(),
            inst.model.rewards().to_vec(),
            if s == 1 { 0.0 } else { 0.2 },
            0.9,
            noise,
        )
        .unwrap();
        let dense = dense_kernel(&inst.model);
        for i in 0..s {
            for j in 0..a {
                let row_sum: f64 = dense[i][j].iter().sum();
                assert!((row_sum - 1.0).abs() < 1e-12);
                for t in 0..s {
                    assert!((inst.model.transition_prob(i, j, t) - dense[i][j][t]).abs() < 1e-15);
                }
            }
        }
        let m = transition_matrix(&inst.model, &inst.policy);
        let oracle = chain(&inst.model, &inst.policy);
        for i in 0..s {
            for t in 0..s {
                assert!((m.get(i, t) - oracle[i][t]).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn stationary_distribution_matches_power_iteration() {
    for seed in 0..10 {
        let s = 3 + seed as usize;
        let inst = instance(s, 2, 0.15, 0.25, 0.9, 100 + seed);
        let psi = stationary_distribution_of(&inst.model, &inst.policy, 1e-13).unwrap();
        let brute = brute_stationary(&inst.model, &inst.policy);
        for (x, y) in psi.probs().iter().zip(&brute) {
            assert!((x - y).abs() < 1e-11, "seed {seed}: {x} vs {y}");
        }
    }
}

#[test]
fn exact_values_match_value_iteration() {
    for seed in 0..5 {
        let inst = instance(8, 3, 0.1, 0.2, 0.9, 200 + seed);
        let q = exact_action_values(&inst.model, &inst.policy, 1e-12).unwrap();
        let vi = value_iteration(&inst.model, &inst.policy);
        for s in 0..8 {
            for a in 0..3 {
                assert!((q.get(s, a) - vi[s][a]).abs() < 1e-9);
            }
        }
        assert!(bellman_residual_max(&inst.model, &inst.policy, q.values()) < 1e-10);
    }
}

#[test]
fn scores_match_triple_loop() {
    for seed in 0..6 {
        let s = 12;
        let inst = instance(s, 2, 0.05 + 0.05 * seed as f64, 0.1, 0.8, 300 + seed);
        let psi = stationary_distribution_of(&inst.model, &inst.policy, 1e-13).unwrap();
        let map = PartitionTree::new(s, 2, 5).unwrap().convert().unwrap();
        let mut table = CellValueTable::new(5, 2, 0.1).unwrap();
        for (i, w) in table.weights_mut().iter_mut().enumerate() {
            *w = ((i + seed as usize) as f64 * 0.731).cos() * 4.0;
        }
        let l = bellman_score(&table, &map, &inst.model, &inst.policy, &psi).unwrap();
        assert!((l - brute_l(&table, &map, &inst.model, &inst.policy, psi.probs())).abs() < 1e-12);

        let vi = value_iteration(&inst.model, &inst.policy);
        let q = QTable::new(s, 2, vi.iter().flatten().copied().collect()).unwrap();
        let mse = mse_score(&table, &map, Some(&q), &psi).unwrap();
        assert!((mse - brute_mse(&table, &map, &vi, psi.probs())).abs() < 1e-12);
    }
}

#[test]
fn restricted_scores_add_up() {
    let inst = instance(40, 2, 0.002, 0.002, 0.9, 400);
    let psi = stationary_distribution_of(&inst.model, &inst.policy, 1e-13).unwrap();
    let map = PartitionTree::new(40, 4, 12).unwrap().convert().unwrap();
    let mut table = CellValueTable::new(12, 2, 0.1).unwrap();
    for (i, w) in table.weights_mut().iter_mut().enumerate() {
        *w = (i as f64).sqrt();
    }
    let cycles = compute_cycles(&inst.skeleton_map()).unwrap();
    let inside = cycles.recurrent_mask().to_vec();
    let outside: Vec<bool> = inside.iter().map(|b| !b).collect();
    let full = bellman_score(&table, &map, &inst.model, &inst.policy, &psi).unwrap();
    let a = restricted_score(&table, &map, &inst.model, &inst.policy, &psi, &outside).unwrap();
    let b = restricted_score(&table, &map, &inst.model, &inst.policy, &psi, &inside).unwrap();
    assert!((full - b - a).abs() < 1e-12);
    // Near-deterministic: almost all stationary mass sits on the cycles.
    assert!(psi.mass(cycles.union_states()) > 0.9);
}

#[test]
fn single_action_policy_ignores_deviation() {
    let p = Policy::new(vec![0, 0, 0], 1, 0.4).unwrap();
    assert_eq!(p.delta_pi(), 0.0);
    assert_eq!(p.prob(1, 0), 1.0);
}
