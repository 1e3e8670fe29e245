//! Near-deterministic finite MDPs under a fixed policy.
//!
//! The transition kernel is a mixture: with probability `1 - delta` the
//! deterministic skeleton successor is taken, otherwise the successor is drawn
//! from a noise distribution ([`NoiseKind`]). Policies are likewise a
//! preferred action perturbed with probability `delta_pi`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, tag};

/// Largest chain solved by a dense direct solve; above this power iteration is used.
pub const DIRECT_SOLVE_MAX_STATES: usize = 2048;
/// Iteration cap for power iteration.
pub const POWER_ITERATION_CAP: usize = 1_000_000;
/// Default bound on `S * A` for [`exact_action_values`].
pub const DEFAULT_EXACT_SOLVE_CAP: usize = 16_384;

/// Distribution used by the perturbation branch of the transition kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Uniform over all states.
    #[default]
    Uniform,
    /// Uniform over all states except the current one.
    UniformExcludingCurrent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdpModel {
    num_states: usize,
    num_actions: usize,
    skeleton: Vec<usize>,
    noise: NoiseKind,
    delta: f64,
    rewards: Vec<f64>,
    gamma: f64,
}

impl MdpModel {
    /// `skeleton` and `rewards` are row-major `S x A` tables.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        skeleton: Vec<usize>,
        rewards: Vec<f64>,
        delta: f64,
        gamma: f64,
        noise: NoiseKind,
    ) -> Result<Self> {
        check_dims(num_states, num_actions)?;
        let cells = num_states * num_actions;
        if skeleton.len() != cells || rewards.len() != cells {
            return Err(Error::InvalidDimension(format!(
                "expected {cells} skeleton and reward entries, got {} and {}",
                skeleton.len(),
                rewards.len()
            )));
        }
        if let Some(&bad) = skeleton.iter().find(|&&s| s >= num_states) {
            return Err(Error::index("successor", bad, num_states));
        }
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::InvalidParameter(format!("delta = {delta} not in [0, 1]")));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidParameter(format!("gamma = {gamma} not in [0, 1)")));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidParameter("rewards must be finite".into()));
        }
        if noise == NoiseKind::UniformExcludingCurrent && num_states < 2 && delta > 0.0 {
            return Err(Error::InvalidParameter(
                "uniform-excluding-current noise needs at least two states".into(),
            ));
        }
        Ok(MdpModel {
            num_states,
            num_actions,
            skeleton,
            noise,
            delta,
            rewards,
            gamma,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn noise(&self) -> NoiseKind {
        self.noise
    }

    pub fn skeleton(&self) -> &[usize] {
        &self.skeleton
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    #[inline]
    pub fn successor(&self, state: usize, action: usize) -> usize {
        self.skeleton[state * self.num_actions + action]
    }

    #[inline]
    pub fn reward(&self, state: usize, action: usize) -> f64 {
        self.rewards[state * self.num_actions + action]
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.rewards.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// Probability that the noise branch moves `from` to `to`.
    pub fn noise_prob(&self, from: usize, to: usize) -> f64 {
        match self.noise {
            NoiseKind::Uniform => 1.0 / self.num_states as f64,
            NoiseKind::UniformExcludingCurrent if from == to => 0.0,
            NoiseKind::UniformExcludingCurrent => 1.0 / (self.num_states - 1) as f64,
        }
    }

    /// `P(to | state, action)`.
    pub fn transition_prob(&self, state: usize, action: usize, to: usize) -> f64 {
        let det = if self.successor(state, action) == to { 1.0 } else { 0.0 };
        (1.0 - self.delta) * det + self.delta * self.noise_prob(state, to)
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, from: usize, rng: &mut R) -> usize {
        match self.noise {
            NoiseKind::Uniform => rng.gen_range(0..self.num_states),
            NoiseKind::UniformExcludingCurrent => {
                let x = rng.gen_range(0..self.num_states - 1);
                if x >= from {
                    x + 1
                } else {
                    x
                }
            }
        }
    }

    #[inline]
    pub fn sample_next<R: Rng + ?Sized>(&self, state: usize, action: usize, rng: &mut R) -> usize {
        if self.delta > 0.0 && rng.gen_bool(self.delta) {
            self.sample_noise(state, rng)
        } else {
            self.successor(state, action)
        }
    }

    pub(crate) fn check_state(&self, state: usize) -> Result<()> {
        if state < self.num_states {
            Ok(())
        } else {
            Err(Error::index("state", state, self.num_states))
        }
    }
}

/// A fixed stochastic policy: a preferred action per state, deviated from with
/// probability `delta_pi`, spread uniformly over the other actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    num_actions: usize,
    preferred: Vec<usize>,
    delta_pi: f64,
}

impl Policy {
    /// With a single action `delta_pi` is forced to zero.
    pub fn new(preferred: Vec<usize>, num_actions: usize, delta_pi: f64) -> Result<Self> {
        check_dims(preferred.len(), num_actions)?;
        if !(0.0..=1.0).contains(&delta_pi) {
            return Err(Error::InvalidParameter(format!("delta_pi = {delta_pi} not in [0, 1]")));
        }
        if let Some(&bad) = preferred.iter().find(|&&a| a >= num_actions) {
            return Err(Error::index("action", bad, num_actions));
        }
        let delta_pi = if num_actions == 1 { 0.0 } else { delta_pi };
        Ok(Policy {
            num_actions,
            preferred,
            delta_pi,
        })
    }

    pub fn num_states(&self) -> usize {
        self.preferred.len()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn delta_pi(&self) -> f64 {
        self.delta_pi
    }

    pub fn preferred(&self) -> &[usize] {
        &self.preferred
    }

    #[inline]
    pub fn preferred_action(&self, state: usize) -> usize {
        self.preferred[state]
    }

    /// `pi(action | state)`.
    #[inline]
    pub fn prob(&self, state: usize, action: usize) -> f64 {
        if action == self.preferred[state] {
            1.0 - self.delta_pi
        } else {
            self.delta_pi / (self.num_actions - 1) as f64
        }
    }

    #[inline]
    pub fn sample_action<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        let preferred = self.preferred[state];
        if self.delta_pi > 0.0 && rng.gen_bool(self.delta_pi) {
            let x = rng.gen_range(0..self.num_actions - 1);
            if x >= preferred {
                x + 1
            } else {
                x
            }
        } else {
            preferred
        }
    }

    /// `sum_a pi(a | s) q(s, a)` for every state of a row-major `S x A` table.
    pub fn average(&self, q: &[f64]) -> Vec<f64> {
        let a_n = self.num_actions;
        let off = if a_n > 1 { self.delta_pi / (a_n - 1) as f64 } else { 0.0 };
        q.chunks_exact(a_n)
            .zip(&self.preferred)
            .map(|(row, &p)| {
                let total: f64 = row.iter().sum();
                (1.0 - self.delta_pi) * row[p] + off * (total - row[p])
            })
            .collect()
    }
}

fn check_dims(num_states: usize, num_actions: usize) -> Result<()> {
    if num_states == 0 || num_actions == 0 {
        Err(Error::InvalidDimension(format!(
            "S = {num_states}, A = {num_actions}; both must be positive"
        )))
    } else {
        Ok(())
    }
}

/// Draws every `(s, a)` successor independently and uniformly.
pub fn sample_skeleton(num_states: usize, num_actions: usize, seed: u64) -> Result<Vec<usize>> {
    check_dims(num_states, num_actions)?;
    let mut rng = rng_from_seed(seed);
    Ok(sample_skeleton_with(num_states, num_actions, &mut rng))
}

pub(crate) fn sample_skeleton_with<R: Rng + ?Sized>(
    num_states: usize,
    num_actions: usize,
    rng: &mut R,
) -> Vec<usize> {
    (0..num_states * num_actions)
        .map(|_| rng.gen_range(0..num_states))
        .collect()
}

/// I.i.d. rewards, uniform on `[0, 1)`.
pub fn sample_rewards(num_states: usize, num_actions: usize, seed: u64) -> Result<Vec<f64>> {
    check_dims(num_states, num_actions)?;
    let mut rng = rng_from_seed(seed);
    Ok((0..num_states * num_actions).map(|_| rng.gen::<f64>()).collect())
}

pub fn sample_policy(num_states: usize, num_actions: usize, delta_pi: f64, seed: u64) -> Result<Policy> {
    check_dims(num_states, num_actions)?;
    if !(0.0..=1.0).contains(&delta_pi) {
        return Err(Error::InvalidParameter(format!("delta_pi = {delta_pi} not in [0, 1]")));
    }
    let mut rng = rng_from_seed(seed);
    let preferred = (0..num_states).map(|_| rng.gen_range(0..num_actions)).collect();
    Policy::new(preferred, num_actions, delta_pi)
}

/// One simulated transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub action: usize,
    pub next_state: usize,
    pub reward: f64,
}

pub fn step<R: Rng + ?Sized>(model: &MdpModel, policy: &Policy, state: usize, rng: &mut R) -> Result<Step> {
    model.check_state(state)?;
    let action = policy.sample_action(state, rng);
    let next_state = model.sample_next(state, action, rng);
    Ok(Step {
        action,
        next_state,
        reward: model.reward(state, action),
    })
}

/// Parameters for generating a random [`Instance`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceParams {
    pub num_states: usize,
    pub num_actions: usize,
    pub delta: f64,
    pub delta_pi: f64,
    pub gamma: f64,
    #[serde(default)]
    pub noise: NoiseKind,
}

/// A model together with the policy being evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InstanceDocument", into = "InstanceDocument")]
pub struct Instance {
    pub model: MdpModel,
    pub policy: Policy,
    /// Seed the instance was generated from, if any.
    pub seed: Option<u64>,
}

impl Instance {
    /// Skeleton, rewards and policy each come from their own stream derived from `seed`.
    pub fn generate(params: &InstanceParams, seed: u64) -> Result<Self> {
        let s = params.num_states;
        let a = params.num_actions;
        let skeleton = sample_skeleton(s, a, derive_seed(seed, 0, tag::SKELETON))?;
        let rewards = sample_rewards(s, a, derive_seed(seed, 0, tag::REWARDS))?;
        let model = MdpModel::new(s, a, skeleton, rewards, params.delta, params.gamma, params.noise)?;
        let policy = sample_policy(s, a, params.delta_pi, derive_seed(seed, 0, tag::POLICY))?;
        Ok(Instance {
            model,
            policy,
            seed: Some(seed),
        })
    }

    /// Successor of each state under its preferred action with no noise.
    pub fn skeleton_map(&self) -> Vec<usize> {
        (0..self.model.num_states())
            .map(|s| self.model.successor(s, self.policy.preferred_action(s)))
            .collect()
    }
}

/// On-disk form of an [`Instance`]; tables are row-major.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDocument {
    pub S: usize,
    pub A: usize,
    pub delta: f64,
    pub delta_pi: f64,
    pub gamma: f64,
    #[serde(default)]
    pub noise: NoiseKind,
    pub skeleton: Vec<usize>,
    pub preferred: Vec<usize>,
    pub rewards: Vec<f64>,
    pub seed: Option<u64>,
}

impl TryFrom<InstanceDocument> for Instance {
    type Error = Error;

    fn try_from(doc: InstanceDocument) -> Result<Self> {
        let model = MdpModel::new(doc.S, doc.A, doc.skeleton, doc.rewards, doc.delta, doc.gamma, doc.noise)?;
        if doc.preferred.len() != doc.S {
            return Err(Error::InvalidDimension(format!(
                "preferred has {} entries, expected {}",
                doc.preferred.len(),
                doc.S
            )));
        }
        let policy = Policy::new(doc.preferred, doc.A, doc.delta_pi)?;
        Ok(Instance {
            model,
            policy,
            seed: doc.seed,
        })
    }
}

impl From<Instance> for InstanceDocument {
    fn from(inst: Instance) -> Self {
        InstanceDocument {
            S: inst.model.num_states,
            A: inst.model.num_actions,
            delta: inst.model.delta,
            delta_pi: inst.policy.delta_pi,
            gamma: inst.model.gamma,
            noise: inst.model.noise,
            skeleton: inst.model.skeleton,
            preferred: inst.policy.preferred,
            rewards: inst.model.rewards,
            seed: inst.seed,
        }
    }
}

/// Dense row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    n: usize,
    data: Vec<f64>,
}

impl TransitionMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidDimension("matrix must be square and non-empty".into()));
        }
        Ok(TransitionMatrix {
            n,
            data: rows.concat(),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data.chunks_exact(self.n).map(|r| r.iter().sum()).collect()
    }
}

/// State-to-state matrix `M[i, j] = sum_a pi(a | i) P(j | i, a)`.
pub fn transition_matrix(model: &MdpModel, policy: &Policy) -> TransitionMatrix {
    let n = model.num_states();
    let mut data = vec![0.0; n * n];
    for (s, row) in data.chunks_exact_mut(n).enumerate() {
        for a in 0..model.num_actions() {
            row[model.successor(s, a)] += (1.0 - model.delta()) * policy.prob(s, a);
        }
        if model.delta() > 0.0 {
            for (to, m) in row.iter_mut().enumerate() {
                *m += model.delta() * model.noise_prob(s, to);
            }
        }
    }
    TransitionMatrix { n, data }
}

/// A chain that can be applied from the left: `y = x^T M`.
pub trait LeftOperator {
    fn dim(&self) -> usize;
    fn apply_left(&self, x: &[f64], y: &mut [f64]);
}

impl LeftOperator for TransitionMatrix {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply_left(&self, x: &[f64], y: &mut [f64]) {
        y.fill(0.0);
        for (xi, row) in x.iter().zip(self.data.chunks_exact(self.n)) {
            if *xi != 0.0 {
                for (yj, m) in y.iter_mut().zip(row) {
                    *yj += xi * m;
                }
            }
        }
    }
}

/// The policy-induced chain of a model, applied in `O(S * A)` without
/// materialising the dense matrix.
pub struct ChainOperator<'a> {
    pub model: &'a MdpModel,
    pub policy: &'a Policy,
}

impl LeftOperator for ChainOperator<'_> {
    fn dim(&self) -> usize {
        self.model.num_states()
    }

    fn apply_left(&self, x: &[f64], y: &mut [f64]) {
        let m = self.model;
        let n = m.num_states();
        let keep = 1.0 - m.delta();
        y.fill(0.0);
        for (s, &xs) in x.iter().enumerate() {
            if xs == 0.0 {
                continue;
            }
            for a in 0..m.num_actions() {
                y[m.successor(s, a)] += keep * self.policy.prob(s, a) * xs;
            }
        }
        if m.delta() > 0.0 {
            let total: f64 = x.iter().sum();
            match m.noise() {
                NoiseKind::Uniform => {
                    let add = m.delta() * total / n as f64;
                    y.iter_mut().for_each(|v| *v += add);
                }
                NoiseKind::UniformExcludingCurrent => {
                    let scale = m.delta() / (n - 1) as f64;
                    for (v, xs) in y.iter_mut().zip(x) {
                        *v += scale * (total - xs);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDistribution {
    psi: Vec<f64>,
}

impl StationaryDistribution {
    /// Checks nonnegativity and normalisation (within `1e-12`).
    pub fn new(psi: Vec<f64>) -> Result<Self> {
        if psi.is_empty() || psi.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidParameter("distribution entries must be finite and nonnegative".into()));
        }
        let total: f64 = psi.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("distribution sums to {total}")));
        }
        Ok(StationaryDistribution { psi })
    }

    pub fn probs(&self) -> &[f64] {
        &self.psi
    }

    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }

    /// Total mass of a set of states.
    pub fn mass(&self, states: impl IntoIterator<Item = usize>) -> f64 {
        states.into_iter().map(|s| self.psi[s]).sum()
    }
}

/// `max_j |(x^T M)_j - x_j|`.
pub fn stationarity_residual(op: &impl LeftOperator, x: &[f64]) -> f64 {
    let mut y = vec![0.0; op.dim()];
    op.apply_left(x, &mut y);
    y.iter().zip(x).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
}

/// Direct solve for chains up to [`DIRECT_SOLVE_MAX_STATES`], power iteration above.
pub fn stationary_distribution(matrix: &TransitionMatrix, tol: f64) -> Result<StationaryDistribution> {
    check_tol(tol)?;
    if matrix.dim() <= DIRECT_SOLVE_MAX_STATES {
        stationary_direct(matrix, tol)
    } else {
        stationary_power(matrix, tol, POWER_ITERATION_CAP)
    }
}

/// Same contract as [`stationary_distribution`], working from the model so the
/// large-chain path never builds the dense matrix.
pub fn stationary_distribution_of(model: &MdpModel, policy: &Policy, tol: f64) -> Result<StationaryDistribution> {
    check_tol(tol)?;
    if model.num_states() <= DIRECT_SOLVE_MAX_STATES {
        stationary_direct(&transition_matrix(model, policy), tol)
    } else {
        stationary_power(&ChainOperator { model, policy }, tol, POWER_ITERATION_CAP)
    }
}

fn check_tol(tol: f64) -> Result<()> {
    if tol > 0.0 && tol.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("tolerance {tol} must be positive")))
    }
}

/// Solves `(M^T - I) psi = 0` with the last balance equation replaced by `sum psi = 1`.
fn stationary_direct(matrix: &TransitionMatrix, tol: f64) -> Result<StationaryDistribution> {
    let n = matrix.dim();
    let mut a = DMatrix::<f64>::from_fn(n, n, |i, j| matrix.get(j, i) - if i == j { 1.0 } else { 0.0 });
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = nalgebra::DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;

    let lu = a.lu();
    let u = lu.u();
    let pivots: Vec<f64> = (0..n).map(|i| u[(i, i)].abs()).collect();
    let max_pivot = pivots.iter().cloned().fold(0.0, f64::max);
    let min_pivot = pivots.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-12 * max_pivot) {
        return Err(Error::SingularChain(format!(
            "balance equations are singular (pivot ratio {:e})",
            min_pivot / max_pivot
        )));
    }
    let x = lu
        .solve(&b)
        .ok_or_else(|| Error::SingularChain("balance equations are singular".into()))?;

    if x.iter().any(|v| !v.is_finite() || *v < -tol) {
        return Err(Error::SingularChain("solution has negative mass".into()));
    }
    let mut psi: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = psi.iter().sum();
    psi.iter_mut().for_each(|p| *p /= total);

    let residual = stationarity_residual(matrix, &psi);
    if residual > tol {
        return Err(Error::ConvergenceFailure { residual, iterations: 0 });
    }
    StationaryDistribution::new(psi)
}

pub(crate) fn stationary_power(op: &impl LeftOperator, tol: f64, cap: usize) -> Result<StationaryDistribution> {
    let n = op.dim();
    let mut x = vec![1.0 / n as f64; n];
    let mut y = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for it in 1..=cap {
        op.apply_left(&x, &mut y);
        let total: f64 = y.iter().sum();
        y.iter_mut().for_each(|v| *v /= total);
        residual = y.iter().zip(&x).fold(0.0, |m, (a, b)| m.max((a - b).abs()));
        std::mem::swap(&mut x, &mut y);
        if residual <= tol {
            let check = stationarity_residual(op, &x);
            if check <= tol {
                return StationaryDistribution::new(x);
            }
            residual = check;
        }
        if it == cap {
            break;
        }
    }
    Err(Error::ConvergenceFailure { residual, iterations: cap })
}

/// Row-major `S x A` table of action values.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    num_states: usize,
    num_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn new(num_states: usize, num_actions: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(num_states, num_actions)?;
        if values.len() != num_states * num_actions {
            return Err(Error::InvalidDimension(format!(
                "expected {} values, got {}",
                num_states * num_actions,
                values.len()
            )));
        }
        Ok(QTable {
            num_states,
            num_actions,
            values,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[state * self.num_actions + action]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Average of a state function under the noise distribution from each state.
#[derive(Debug, Clone, Copy)]
pub struct NoiseAverage {
    kind: NoiseKind,
    sum: f64,
    n: usize,
}

impl NoiseAverage {
    pub fn new(kind: NoiseKind, v: &[f64]) -> Self {
        NoiseAverage {
            kind,
            sum: v.iter().sum(),
            n: v.len(),
        }
    }

    #[inline]
    pub fn from_state(&self, state: usize, v: &[f64]) -> f64 {
        match self.kind {
            NoiseKind::Uniform => self.sum / self.n as f64,
            NoiseKind::UniformExcludingCurrent if self.n < 2 => 0.0,
            NoiseKind::UniformExcludingCurrent => (self.sum - v[state]) / (self.n - 1) as f64,
        }
    }
}

/// `E[v(s') | s, a]` under the mixture kernel.
#[inline]
pub fn expected_next(model: &MdpModel, v: &[f64], noise: &NoiseAverage, state: usize, action: usize) -> f64 {
    let det = v[model.successor(state, action)];
    if model.delta() > 0.0 {
        (1.0 - model.delta()) * det + model.delta() * noise.from_state(state, v)
    } else {
        det
    }
}

/// `max_{s,a} |R(s,a) + gamma E[sum_a' pi(a'|s') q(s',a')] - q(s,a)|`.
pub fn bellman_residual_max(model: &MdpModel, policy: &Policy, q: &[f64]) -> f64 {
    let v = policy.average(q);
    let noise = NoiseAverage::new(model.noise(), &v);
    let mut worst: f64 = 0.0;
    for s in 0..model.num_states() {
        for a in 0..model.num_actions() {
            let target = model.reward(s, a) + model.gamma() * expected_next(model, &v, &noise, s, a);
            worst = worst.max((target - q[s * model.num_actions() + a]).abs());
        }
    }
    worst
}

/// Solves the policy-evaluation Bellman system exactly.
///
/// The state-value system `(I - gamma M) v = r_pi` is solved by dense LU (or by
/// iterating the structured operator above [`DIRECT_SOLVE_MAX_STATES`]), then
/// `Q(s, a) = R(s, a) + gamma E[v(s') | s, a]`. The result's Bellman residual
/// is re-checked against `tol`.
pub fn exact_action_values(model: &MdpModel, policy: &Policy, tol: f64) -> Result<QTable> {
    exact_action_values_capped(model, policy, tol, DEFAULT_EXACT_SOLVE_CAP)
}

pub fn exact_action_values_capped(model: &MdpModel, policy: &Policy, tol: f64, cap: usize) -> Result<QTable> {
    check_tol(tol)?;
    let n = model.num_states();
    let a_n = model.num_actions();
    if n * a_n > cap {
        return Err(Error::Capacity(format!(
            "S*A = {} exceeds the exact-solve cap {cap}; use sampled evaluation",
            n * a_n
        )));
    }
    let gamma = model.gamma();
    let r_pi = policy.average(model.rewards());

    let v: Vec<f64> = if n <= DIRECT_SOLVE_MAX_STATES {
        let m = transition_matrix(model, policy);
        let a = DMatrix::<f64>::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - gamma * m.get(i, j));
        let b = nalgebra::DVector::from_vec(r_pi);
        let x = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::SingularChain("policy evaluation system is singular".into()))?;
        x.iter().copied().collect()
    } else {
        iterate_state_values(model, policy, &r_pi, tol)?
    };

    let noise = NoiseAverage::new(model.noise(), &v);
    let mut values = Vec::with_capacity(n * a_n);
    for s in 0..n {
        for a in 0..a_n {
            values.push(model.reward(s, a) + gamma * expected_next(model, &v, &noise, s, a));
        }
    }
    let residual = bellman_residual_max(model, policy, &values);
    if residual > tol {
        return Err(Error::ConvergenceFailure { residual, iterations: 0 });
    }
    QTable::new(n, a_n, values)
}

fn iterate_state_values(model: &MdpModel, policy: &Policy, r_pi: &[f64], tol: f64) -> Result<Vec<f64>> {
    let n = model.num_states();
    let gamma = model.gamma();
    let stop = tol * (1.0 - gamma) / 4.0;
    let mut v = r_pi.to_vec();
    let mut next = vec![0.0; n];
    let mut diff = f64::INFINITY;
    for _ in 0..POWER_ITERATION_CAP {
        let noise = NoiseAverage::new(model.noise(), &v);
        for (s, out) in next.iter_mut().enumerate() {
            let mut acc = 0.0;
            for a in 0..model.num_actions() {
                acc += policy.prob(s, a) * expected_next(model, &v, &noise, s, a);
            }
            *out = r_pi[s] + gamma * acc;
        }
        diff = next.iter().zip(&v).fold(0.0, |m, (x, y)| m.max((x - y).abs()));
        std::mem::swap(&mut v, &mut next);
        if diff <= stop {
            return Ok(v);
        }
    }
    Err(Error::ConvergenceFailure {
        residual: diff,
        iterations: POWER_ITERATION_CAP,
    })
}
