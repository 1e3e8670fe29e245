//! Cycle structure of the deterministic skeleton map.
//!
//! With noise switched off and every state taking its preferred action, the
//! dynamics are a function `f: [0, S) -> [0, S)`. Walks are started from each
//! state in index order; a walk stops at the first state seen before, and if
//! that state lies on the walk's own path the closed loop is recorded as that
//! walk's cycle. The union of the recorded cycles is the recurrent set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::mdp::sample_skeleton_with;
use crate::rng::{derive_seed, rng_from_seed, tag};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleDecomposition {
    cycles: Vec<Vec<usize>>,
    terminated_on_self: Vec<bool>,
    on_cycle: Vec<bool>,
    total: usize,
}

impl CycleDecomposition {
    pub fn num_states(&self) -> usize {
        self.on_cycle.len()
    }

    /// Cycle recorded by the walk started from state `i` (empty when the walk
    /// ran into an earlier walk).
    pub fn cycle(&self, i: usize) -> &[usize] {
        &self.cycles[i]
    }

    pub fn cycles(&self) -> &[Vec<usize>] {
        &self.cycles
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.cycles.iter().map(Vec::len).collect()
    }

    pub fn terminated_on_self(&self) -> &[bool] {
        &self.terminated_on_self
    }

    /// Length of the first walk's cycle.
    pub fn first_length(&self) -> usize {
        self.cycles[0].len()
    }

    /// Number of recurrent states.
    pub fn total(&self) -> usize {
        self.total
    }

    /// Number of distinct cycles.
    pub fn num_cycles(&self) -> usize {
        self.terminated_on_self.iter().filter(|&&t| t).count()
    }

    pub fn contains(&self, state: usize) -> bool {
        self.on_cycle[state]
    }

    pub fn recurrent_mask(&self) -> &[bool] {
        &self.on_cycle
    }

    /// Recurrent states in increasing order.
    pub fn union_states(&self) -> Vec<usize> {
        (0..self.on_cycle.len()).filter(|&s| self.on_cycle[s]).collect()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mark {
    Unvisited,
    OnPath,
    Done,
}

fn check_map(successor: &[usize]) -> Result<()> {
    let n = successor.len();
    if n == 0 {
        return Err(Error::InvalidDimension("empty successor map".into()));
    }
    match successor.iter().find(|&&s| s >= n) {
        Some(&bad) => Err(Error::index("successor", bad, n)),
        None => Ok(()),
    }
}

/// Decomposes a successor map into per-walk cycles in `O(S)`.
pub fn compute_cycles(successor: &[usize]) -> Result<CycleDecomposition> {
    check_map(successor)?;
    let n = successor.len();
    let mut mark = vec![Mark::Unvisited; n];
    let mut cycles = vec![Vec::new(); n];
    let mut terminated_on_self = vec![false; n];
    let mut on_cycle = vec![false; n];
    let mut total = 0;
    let mut path = Vec::new();

    for start in 0..n {
        if mark[start] == Mark::Done {
            continue;
        }
        path.clear();
        let mut v = start;
        while mark[v] == Mark::Unvisited {
            mark[v] = Mark::OnPath;
            path.push(v);
            v = successor[v];
        }
        if mark[v] == Mark::OnPath {
            let pos = path.iter().rposition(|&p| p == v).expect("state is on the current path");
            let cycle = path[pos..].to_vec();
            for &c in &cycle {
                on_cycle[c] = true;
            }
            total += cycle.len();
            cycles[start] = cycle;
            terminated_on_self[start] = true;
        }
        for &p in &path {
            mark[p] = Mark::Done;
        }
    }

    Ok(CycleDecomposition {
        cycles,
        terminated_on_self,
        on_cycle,
        total,
    })
}

/// `(C_1, C)` without materialising the cycles; `marks` is reusable scratch.
fn cycle_counts(successor: &[usize], marks: &mut Vec<u32>) -> (usize, usize) {
    // 0 = unvisited, otherwise the 1-based index of the walk that visited it.
    let n = successor.len();
    marks.clear();
    marks.resize(n, 0);
    let mut first = 0;
    let mut total = 0;
    for start in 0..n {
        if marks[start] != 0 {
            continue;
        }
        let walk = start as u32 + 1;
        let mut v = start;
        while marks[v] == 0 {
            marks[v] = walk;
            v = successor[v];
        }
        if marks[v] == walk {
            let mut len = 1;
            let mut w = successor[v];
            while w != v {
                len += 1;
                w = successor[w];
            }
            if start == 0 {
                first = len;
            }
            total += len;
        }
    }
    (first, total)
}

/// Leading term of `E(C_1)`: `sqrt(pi S / 8)`.
pub fn predicted_c1_mean(num_states: usize) -> f64 {
    (std::f64::consts::PI * num_states as f64 / 8.0).sqrt()
}

/// Leading term of `Var(C_1)`: `(32 - 8 pi) S / 24`.
pub fn predicted_c1_variance(num_states: usize) -> f64 {
    (32.0 - 8.0 * std::f64::consts::PI) * num_states as f64 / 24.0
}

/// Upper bound on `E(C)` with the leading term standing in for `E(C_1)`:
/// `sqrt(pi S / 8) (ln S + 1)`.
///
/// Because only the leading term is used the bound is not an upper bound for
/// tiny `S` (at `S = 1` it gives 0.63 while `C = 1`).
pub fn mean_cycle_bound(num_states: usize) -> f64 {
    if num_states == 0 {
        return 0.0;
    }
    predicted_c1_mean(num_states) * ((num_states as f64).ln() + 1.0)
}

/// Monte Carlo summary of `C_1` and `C` over uniform random maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleStats {
    pub num_states: usize,
    pub trials: usize,
    pub confidence: f64,
    pub mean_c1: f64,
    pub var_c1: f64,
    pub mean_c: f64,
    pub var_c: f64,
    /// Confidence interval of the mean of `C_1`.
    pub mean_c1_ci: (f64, f64),
    /// Confidence interval of the mean of `C`.
    pub mean_c_ci: (f64, f64),
    /// Asymptotic confidence interval of the sample variance of `C_1`.
    pub var_c1_ci: (f64, f64),
    pub predicted_mean_c1: f64,
    pub predicted_var_c1: f64,
    pub mean_c_bound: f64,
    /// `Var(C) / (S ln S)`, NaN at `S = 1`.
    pub var_c_ratio: f64,
}

/// One row of the cycle-study CSV.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleStudyRow {
    pub S: usize,
    pub trials: usize,
    pub mean_c1: f64,
    pub var_c1: f64,
    pub mean_c: f64,
    pub var_c: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub predicted_mean_c1: f64,
    pub predicted_var_c1: f64,
    pub mean_c_bound: f64,
}

impl CycleStats {
    pub fn to_row(&self) -> CycleStudyRow {
        CycleStudyRow {
            S: self.num_states,
            trials: self.trials,
            mean_c1: self.mean_c1,
            var_c1: self.var_c1,
            mean_c: self.mean_c,
            var_c: self.var_c,
            ci_low: self.mean_c1_ci.0,
            ci_high: self.mean_c1_ci.1,
            predicted_mean_c1: self.predicted_mean_c1,
            predicted_var_c1: self.predicted_var_c1,
            mean_c_bound: self.mean_c_bound,
        }
    }
}

struct Moments {
    mean: f64,
    var: f64,
    m4: f64,
}

fn moments(xs: &[f64]) -> Moments {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let (m2, m4) = xs.iter().fold((0.0, 0.0), |(a, b), x| {
        let d = x - mean;
        (a + d * d, b + d * d * d * d)
    });
    Moments {
        mean,
        var: m2 / (n - 1.0),
        m4: m4 / n,
    }
}

/// Samples `trials` uniform random maps on `num_states` states (one action)
/// and summarises `C_1` and `C` with 99% normal-approximation intervals.
pub fn monte_carlo_cycle_stats(num_states: usize, trials: usize, seed: u64) -> Result<CycleStats> {
    monte_carlo_cycle_stats_at(num_states, trials, seed, 0.99)
}

pub fn monte_carlo_cycle_stats_at(num_states: usize, trials: usize, seed: u64, confidence: f64) -> Result<CycleStats> {
    if num_states == 0 {
        return Err(Error::InvalidDimension("S must be positive".into()));
    }
    if trials < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 trials, got {trials}")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidParameter(format!("confidence {confidence} not in (0, 1)")));
    }

    let samples: Vec<(usize, usize)> = (0..trials)
        .into_par_iter()
        .map_init(
            || (Vec::new(), Vec::new()),
            |(succ, marks), trial| {
                let mut rng = rng_from_seed(derive_seed(seed, trial as u64, tag::CYCLE_TRIAL));
                *succ = sample_skeleton_with(num_states, 1, &mut rng);
                cycle_counts(succ, marks)
            },
        )
        .collect();

    let c1: Vec<f64> = samples.iter().map(|&(a, _)| a as f64).collect();
    let c: Vec<f64> = samples.iter().map(|&(_, b)| b as f64).collect();
    let m1 = moments(&c1);
    let mc = moments(&c);

    let z = Normal::standard().inverse_cdf(0.5 + confidence / 2.0);
    let n = trials as f64;
    let half = |var: f64| z * (var / n).sqrt();
    // Asymptotic variance of the sample variance: (mu4 - (n-3)/(n-1) sigma^4) / n.
    let var_of_var = ((m1.m4 - (n - 3.0) / (n - 1.0) * m1.var * m1.var) / n).max(0.0);

    let s_f = num_states as f64;
    Ok(CycleStats {
        num_states,
        trials,
        confidence,
        mean_c1: m1.mean,
        var_c1: m1.var,
        mean_c: mc.mean,
        var_c: mc.var,
        mean_c1_ci: (m1.mean - half(m1.var), m1.mean + half(m1.var)),
        mean_c_ci: (mc.mean - half(mc.var), mc.mean + half(mc.var)),
        var_c1_ci: (m1.var - z * var_of_var.sqrt(), m1.var + z * var_of_var.sqrt()),
        predicted_mean_c1: predicted_c1_mean(num_states),
        predicted_var_c1: predicted_c1_variance(num_states),
        mean_c_bound: mean_cycle_bound(num_states),
        var_c_ratio: if num_states > 1 { mc.var / (s_f * s_f.ln()) } else { f64::NAN },
    })
}
