//! Scoring of value-function estimates.
//!
//! `L = sum_i psi_i sum_j (T Q_hat(s_i, a_j) - Q_hat(s_i, a_j))^2` and
//! `MSE = sum_i psi_i sum_j (Q(s_i, a_j) - Q_hat(s_i, a_j))^2`. Actions are
//! summed unweighted. The next-state expectation uses the mixture form of the
//! kernel, so each term costs `O(1)` after one `O(S A)` pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::CellMap;
use crate::error::{Error, Result};
use crate::mdp::{expected_next, MdpModel, NoiseAverage, Policy, QTable, StationaryDistribution};
use crate::rl::CellValueTable;
use crate::rng::rng_from_seed;

/// Default bound on the number of `(s, a)` terms summed exactly.
pub const DEFAULT_TERM_CAP: usize = 1_000_000;

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::default();
        iter.into_iter().for_each(|x| acc.add(x));
        acc
    }
}

/// Monte Carlo estimate of `L`: states drawn from `psi`, all actions summed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampledScore {
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreOptions {
    pub term_cap: usize,
    /// Used instead of exact summation once `S * A` exceeds `term_cap`.
    pub sampling: Option<SampledScore>,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions {
            term_cap: DEFAULT_TERM_CAP,
            sampling: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    #[serde(rename = "L")]
    pub l: f64,
    pub mse: Option<f64>,
    /// Contribution to `L` from states outside the recurrent set.
    pub l_outside_recurrent: f64,
    pub psi_used: Vec<f64>,
}

fn check_shapes(table: &CellValueTable, map: &CellMap, model: &MdpModel, policy: &Policy, psi: &StationaryDistribution) -> Result<()> {
    let s = model.num_states();
    if map.num_states() != s || psi.len() != s || policy.num_states() != s {
        return Err(Error::InvalidDimension(format!(
            "state counts disagree: model {s}, map {}, psi {}, policy {}",
            map.num_states(),
            psi.len(),
            policy.num_states()
        )));
    }
    if table.num_actions() != model.num_actions() || policy.num_actions() != model.num_actions() {
        return Err(Error::InvalidDimension("action counts disagree".into()));
    }
    if table.num_cells() != map.num_cells() {
        return Err(Error::InvalidDimension(format!(
            "table has {} cells, mapping has {}",
            table.num_cells(),
            map.num_cells()
        )));
    }
    Ok(())
}

/// Per-state `sum_j (T Q_hat - Q_hat)^2` evaluator.
struct Residuals<'a> {
    model: &'a MdpModel,
    q: Vec<f64>,
    v: Vec<f64>,
    noise: NoiseAverage,
}

impl<'a> Residuals<'a> {
    fn new(table: &CellValueTable, map: &CellMap, model: &'a MdpModel, policy: &Policy) -> Self {
        let q = table.q_hat(map);
        let v = policy.average(&q);
        let noise = NoiseAverage::new(model.noise(), &v);
        Residuals { model, q, v, noise }
    }

    #[inline]
    fn state_term(&self, s: usize) -> f64 {
        let a_n = self.model.num_actions();
        let gamma = self.model.gamma();
        let mut acc = CompensatedSum::default();
        for a in 0..a_n {
            let t = self.model.reward(s, a) + gamma * expected_next(self.model, &self.v, &self.noise, s, a);
            let d = t - self.q[s * a_n + a];
            acc.add(d * d);
        }
        acc.value()
    }
}

pub fn bellman_score(
    table: &CellValueTable,
    map: &CellMap,
    model: &MdpModel,
    policy: &Policy,
    psi: &StationaryDistribution,
) -> Result<f64> {
    bellman_score_with(table, map, model, policy, psi, &ScoreOptions::default())
}

pub fn bellman_score_with(
    table: &CellValueTable,
    map: &CellMap,
    model: &MdpModel,
    policy: &Policy,
    psi: &StationaryDistribution,
    opts: &ScoreOptions,
) -> Result<f64> {
    check_shapes(table, map, model, policy, psi)?;
    let terms = model.num_states() * model.num_actions();
    let res = Residuals::new(table, map, model, policy);
    if terms <= opts.term_cap {
        return Ok(psi
            .probs()
            .iter()
            .enumerate()
            .map(|(s, p)| p * res.state_term(s))
            .collect::<CompensatedSum>()
            .value());
    }
    let spec = opts.sampling.ok_or_else(|| {
        Error::Capacity(format!(
            "S*A = {terms} exceeds the exact scoring cap {}; enable sampling",
            opts.term_cap
        ))
    })?;
    if spec.samples == 0 {
        return Err(Error::InvalidParameter("sampled score needs at least one sample".into()));
    }
    // Inverse-CDF sampling of states from psi.
    let mut cdf = Vec::with_capacity(psi.len());
    let mut acc = 0.0;
    for p in psi.probs() {
        acc += p;
        cdf.push(acc);
    }
    let mut rng = rng_from_seed(spec.seed);
    let total: CompensatedSum = (0..spec.samples)
        .map(|_| {
            let x = rng.gen::<f64>() * acc;
            let s = cdf.partition_point(|&c| c <= x).min(cdf.len() - 1);
            res.state_term(s)
        })
        .collect();
    Ok(total.value() / spec.samples as f64)
}

/// `L` with the outer sum restricted to the states flagged in `subset`.
pub fn restricted_score(
    table: &CellValueTable,
    map: &CellMap,
    model: &MdpModel,
    policy: &Policy,
    psi: &StationaryDistribution,
    subset: &[bool],
) -> Result<f64> {
    check_shapes(table, map, model, policy, psi)?;
    if subset.len() != model.num_states() {
        return Err(Error::InvalidDimension(format!(
            "subset mask has {} entries, expected {}",
            subset.len(),
            model.num_states()
        )));
    }
    let res = Residuals::new(table, map, model, policy);
    Ok(psi
        .probs()
        .iter()
        .zip(subset)
        .enumerate()
        .filter(|(_, (_, &keep))| keep)
        .map(|(s, (p, _))| p * res.state_term(s))
        .collect::<CompensatedSum>()
        .value())
}

pub fn mse_score(
    table: &CellValueTable,
    map: &CellMap,
    q_true: Option<&QTable>,
    psi: &StationaryDistribution,
) -> Result<f64> {
    let q_true = q_true.ok_or(Error::Unavailable("true action values"))?;
    let (s_n, a_n) = (q_true.num_states(), q_true.num_actions());
    if map.num_states() != s_n || psi.len() != s_n || table.num_actions() != a_n || table.num_cells() != map.num_cells() {
        return Err(Error::InvalidDimension("table, mapping, Q and psi shapes disagree".into()));
    }
    let mut acc = CompensatedSum::default();
    for (s, p) in psi.probs().iter().enumerate() {
        let c = map.cell(s);
        let mut row = CompensatedSum::default();
        for a in 0..a_n {
            let d = q_true.get(s, a) - table.get(c, a);
            row.add(d * d);
        }
        acc.add(p * row.value());
    }
    Ok(acc.value())
}

/// `L`, the optional MSE and the part of `L` outside `recurrent`.
pub fn score_report(
    table: &CellValueTable,
    map: &CellMap,
    model: &MdpModel,
    policy: &Policy,
    psi: &StationaryDistribution,
    q_true: Option<&QTable>,
    recurrent: &[bool],
) -> Result<ScoreReport> {
    let l = bellman_score(table, map, model, policy, psi)?;
    let outside: Vec<bool> = recurrent.iter().map(|r| !r).collect();
    let l_outside_recurrent = restricted_score(table, map, model, policy, psi, &outside)?;
    let mse = match q_true {
        Some(q) => Some(mse_score(table, map, Some(q), psi)?),
        None => None,
    };
    Ok(ScoreReport {
        l,
        mse,
        l_outside_recurrent: l_outside_recurrent.min(l),
        psi_used: psi.probs().to_vec(),
    })
}
