//! Naive reference implementations used as test oracles. Everything here is
//! written from the definitions with dense loops and shares no code with the
//! library beyond the model accessors.

#![allow(dead_code)]

use pasa::aggregation::CellMap;
use pasa::mdp::{Instance, InstanceParams, MdpModel, NoiseKind, Policy};
use pasa::rl::CellValueTable;

pub fn instance(s: usize, a: usize, delta: f64, delta_pi: f64, gamma: f64, seed: u64) -> Instance {
    Instance::generate(
        &InstanceParams {
            num_states: s,
            num_actions: a,
            delta,
            delta_pi,
            gamma,
            noise: NoiseKind::Uniform,
        },
        seed,
    )
    .unwrap()
}

/// `P(s' | s, a)` built entry by entry from the kernel definition.
pub fn dense_kernel(model: &MdpModel) -> Vec<Vec<Vec<f64>>> {
    let n = model.num_states();
    let delta = model.delta();
    (0..n)
        .map(|s| {
            (0..model.num_actions())
                .map(|a| {
                    (0..n)
                        .map(|t| {
                            let noise = match model.noise() {
                                NoiseKind::Uniform => 1.0 / n as f64,
                                NoiseKind::UniformExcludingCurrent => {
                                    if t == s {
                                        0.0
                                    } else {
                                        1.0 / (n - 1) as f64
                                    }
                                }
                            };
                            let det = if model.successor(s, a) == t { 1.0 } else { 0.0 };
                            (1.0 - delta) * det + delta * noise
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn pi(policy: &Policy, s: usize, a: usize) -> f64 {
    let n = policy.num_actions();
    if n == 1 {
        return 1.0;
    }
    if a == policy.preferred_action(s) {
        1.0 - policy.delta_pi()
    } else {
        policy.delta_pi() / (n - 1) as f64
    }
}

/// State-to-state matrix under the policy.
pub fn chain(model: &MdpModel, policy: &Policy) -> Vec<Vec<f64>> {
    let p = dense_kernel(model);
    let n = model.num_states();
    (0..n)
        .map(|s| {
            (0..n)
                .map(|t| (0..model.num_actions()).map(|a| pi(policy, s, a) * p[s][a][t]).sum())
                .collect()
        })
        .collect()
}

/// Power iteration on the dense chain, run to a fixed point.
pub fn brute_stationary(model: &MdpModel, policy: &Policy) -> Vec<f64> {
    let m = chain(model, policy);
    let n = m.len();
    let mut x = vec![1.0 / n as f64; n];
    for _ in 0..200_000 {
        let mut y = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                y[j] += x[i] * m[i][j];
            }
        }
        let diff: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum();
        x = y;
        if diff < 1e-16 {
            break;
        }
    }
    let total: f64 = x.iter().sum();
    x.iter().map(|v| v / total).collect()
}

/// Value iteration on the `(s, a)` table until the update stalls.
pub fn value_iteration(model: &MdpModel, policy: &Policy) -> Vec<Vec<f64>> {
    let p = dense_kernel(model);
    let n = model.num_states();
    let na = model.num_actions();
    let mut q = vec![vec![0.0; na]; n];
    loop {
        let mut next = vec![vec![0.0; na]; n];
        let mut delta = 0.0f64;
        for s in 0..n {
            for a in 0..na {
                let mut acc = model.reward(s, a);
                for t in 0..n {
                    for b in 0..na {
                        acc += model.gamma() * p[s][a][t] * pi(policy, t, b) * q[t][b];
                    }
                }
                delta = delta.max((acc - q[s][a]).abs());
                next[s][a] = acc;
            }
        }
        q = next;
        if delta < 1e-14 {
            return q;
        }
    }
}

/// `L` by the triple loop over `(s, a)`, `s'` and `a'`.
pub fn brute_l(table: &CellValueTable, map: &CellMap, model: &MdpModel, policy: &Policy, psi: &[f64]) -> f64 {
    let p = dense_kernel(model);
    let n = model.num_states();
    let na = model.num_actions();
    let qh = |s: usize, a: usize| table.get(map.cell(s), a);
    let mut total = 0.0;
    for s in 0..n {
        let mut row = 0.0;
        for a in 0..na {
            let mut t = model.reward(s, a);
            for s2 in 0..n {
                for a2 in 0..na {
                    t += model.gamma() * p[s][a][s2] * pi(policy, s2, a2) * qh(s2, a2);
                }
            }
            row += (t - qh(s, a)).powi(2);
        }
        total += psi[s] * row;
    }
    total
}

pub fn brute_mse(table: &CellValueTable, map: &CellMap, q: &[Vec<f64>], psi: &[f64]) -> f64 {
    let mut total = 0.0;
    for (s, row) in q.iter().enumerate() {
        for (a, v) in row.iter().enumerate() {
            total += psi[s] * (v - table.get(map.cell(s), a)).powi(2);
        }
    }
    total
}
