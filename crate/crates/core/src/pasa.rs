//! Visit-frequency tracking and split reselection.
//!
//! Every iteration the visited state's indicator vector (the cells whose
//! creation interval contains it) is folded into an exponential moving average
//! `u_bar`. Every `nu` iterations a scratch copy `u` is peeled level by level:
//! at level `k` the non-singleton cell with the largest `u` becomes the split
//! target if it beats the incumbent `rho[k]` by more than `theta`, the new
//! cell's frequency is subtracted from the target, and the split is applied.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::aggregation::{CellMap, PartitionTree};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PasaConfig {
    /// Step size of the frequency average, in `(0, 1]`.
    pub eta: f64,
    /// Margin a challenger must exceed to displace the incumbent split target.
    pub theta_threshold: f64,
    /// Reselection interval.
    pub nu: u64,
}

impl PasaConfig {
    pub fn new(eta: f64, theta_threshold: f64, nu: u64) -> Result<Self> {
        let cfg = PasaConfig {
            eta,
            theta_threshold,
            nu,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `eta = 0.01`, `theta = 0.02`, `nu = max(1000, 10 X)`.
    pub fn defaults_for(num_cells: usize) -> Self {
        PasaConfig {
            eta: 0.01,
            theta_threshold: 0.02,
            nu: 1000.max(10 * num_cells as u64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::InvalidParameter(format!("eta = {} not in (0, 1]", self.eta)));
        }
        if !(self.theta_threshold > 0.0 && self.theta_threshold.is_finite()) {
            return Err(Error::InvalidParameter(format!("theta = {} must be positive", self.theta_threshold)));
        }
        if self.nu == 0 {
            return Err(Error::InvalidParameter("nu must be at least 1".into()));
        }
        Ok(())
    }
}

/// Exponential moving average of the visit indicators.
///
/// Decay is applied lazily: entry `i` stores its value as of iteration
/// `stamps[i]`, and reads multiply in the `(1 - eta)` factors accrued since.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitEstimator {
    eta: f64,
    values: Vec<f64>,
    stamps: Vec<u64>,
    clock: u64,
}

impl VisitEstimator {
    pub fn new(num_cells: usize, eta: f64) -> Self {
        VisitEstimator {
            eta,
            values: vec![0.0; num_cells],
            stamps: vec![0; num_cells],
            clock: 0,
        }
    }

    /// Starts every entry at the fraction of states in the cell's creation interval.
    pub fn with_prior(tree: &PartitionTree, eta: f64) -> Self {
        let mut est = Self::new(tree.num_cells(), eta);
        let s = tree.num_states() as f64;
        for (i, v) in est.values.iter_mut().enumerate().take(tree.existing_cells()) {
            *v = tree.creation_interval(i).len() as f64 / s;
        }
        est
    }

    pub fn from_values(values: Vec<f64>, eta: f64) -> Self {
        let n = values.len();
        VisitEstimator {
            eta,
            values,
            stamps: vec![0; n],
            clock: 0,
        }
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of observations folded in.
    pub fn observations(&self) -> u64 {
        self.clock
    }

    #[inline]
    fn decay(&self, elapsed: u64) -> f64 {
        let keep = 1.0 - self.eta;
        if elapsed <= i32::MAX as u64 {
            keep.powi(elapsed as i32)
        } else {
            keep.powf(elapsed as f64)
        }
    }

    /// Current value of entry `i`.
    #[inline]
    pub fn value(&self, i: usize) -> f64 {
        self.values[i] * self.decay(self.clock - self.stamps[i])
    }

    /// `u_bar <- u_bar + eta (x_bar - u_bar)` for the indicator of `state`.
    pub fn observe(&mut self, tree: &PartitionTree, state: usize) {
        let now = self.clock;
        let keep = 1.0 - self.eta;
        let eta = self.eta;
        let (values, stamps) = (&mut self.values, &mut self.stamps);
        let decay = |elapsed: u64| {
            if elapsed <= i32::MAX as u64 {
                keep.powi(elapsed as i32)
            } else {
                keep.powf(elapsed as f64)
            }
        };
        tree.for_each_indicator(state, |i| {
            values[i] = values[i] * decay(now - stamps[i]) * keep + eta;
            stamps[i] = now + 1;
        });
        self.clock += 1;
    }

    /// Materialised copy of `u_bar`.
    pub fn snapshot(&self) -> Vec<f64> {
        (0..self.values.len()).map(|i| self.value(i)).collect()
    }

    pub fn memory_entries(&self) -> usize {
        self.values.len() + self.stamps.len()
    }
}

/// One level of a reselection pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReselectStep {
    /// Split level, 0-based (the new cell is `B + level`).
    pub level: usize,
    pub u_max: f64,
    pub i_max: usize,
    pub incumbent: usize,
    pub target: usize,
    /// Scratch vector after the subtraction at this level.
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reselection {
    pub tree: PartitionTree,
    /// Levels whose split target changed.
    pub changed_levels: Vec<usize>,
    pub steps: Vec<ReselectStep>,
}

/// Runs the reselection sequence against frequencies `u_bar` and the split
/// vector of `current`, returning the rebuilt partition.
///
/// Singleton flags are taken from the partition being built, starting from
/// the base partition, so a singleton base cell is never a candidate. If the
/// incumbent target has become a singleton it is always replaced by the best
/// candidate.
pub fn reselect(u_bar: &[f64], current: &PartitionTree, theta: f64) -> Result<Reselection> {
    run_reselect(u_bar, current, theta, false)
}

/// [`reselect`] that also records every level in [`Reselection::steps`].
pub fn reselect_traced(u_bar: &[f64], current: &PartitionTree, theta: f64) -> Result<Reselection> {
    run_reselect(u_bar, current, theta, true)
}

fn run_reselect(u_bar: &[f64], current: &PartitionTree, theta: f64, record: bool) -> Result<Reselection> {
    let x = current.num_cells();
    let b = current.base_cells();
    if u_bar.len() != x {
        return Err(Error::InvalidDimension(format!("u has {} entries, expected X = {x}", u_bar.len())));
    }
    if !current.is_complete() {
        return Err(Error::Precondition("current partition is incomplete".into()));
    }
    let mut u = u_bar.to_vec();
    let mut tree = PartitionTree::base(current.num_states(), b, x)?;
    let mut changed_levels = Vec::new();
    let mut steps = Vec::new();

    for (level, &incumbent) in current.rho().iter().enumerate() {
        let existing = b + level;
        let mut i_max = usize::MAX;
        let mut u_max = f64::NEG_INFINITY;
        for (i, &ui) in u.iter().enumerate().take(existing) {
            if !tree.is_singleton(i) && ui > u_max {
                u_max = ui;
                i_max = i;
            }
        }
        debug_assert!(i_max != usize::MAX, "a non-singleton cell exists while X <= S");

        let incumbent_single = tree.is_singleton(incumbent);
        let incumbent_score = if incumbent_single { 0.0 } else { u[incumbent] };
        let target = if incumbent_single || u_max - theta > incumbent_score {
            i_max
        } else {
            incumbent
        };
        if target != incumbent {
            changed_levels.push(level);
        }
        u[target] -= u[existing];
        tree.split_next(target)?;
        if record {
            steps.push(ReselectStep {
                level,
                u_max,
                i_max,
                incumbent,
                target,
                u: u.clone(),
            });
        }
    }

    Ok(Reselection {
        tree,
        changed_levels,
        steps,
    })
}

/// Per-reselection diagnostic record, written as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: u64,
    pub rho: Vec<usize>,
    pub changed: usize,
    /// The largest `u_bar` entries as `(cell, value)`.
    pub top_cells: Vec<(usize, f64)>,
}

/// Result of a reselection that ran during a tick.
#[derive(Debug, Clone, PartialEq)]
pub struct Reselected {
    pub changed: usize,
    /// Partition in force before the reselection, when it changed.
    pub previous: Option<PartitionTree>,
}

/// A PASA instance: the partition, its flat mapping and the frequency estimator.
#[derive(Debug, Clone)]
pub struct Pasa {
    config: PasaConfig,
    tree: PartitionTree,
    map: CellMap,
    estimator: VisitEstimator,
    rho_changes: u64,
    reselections: u64,
    trace: Option<Vec<TraceRecord>>,
}

const TRACE_TOP: usize = 5;

impl Pasa {
    /// Starts from the size-proportional initial partition and a matching prior on `u_bar`.
    pub fn new(num_states: usize, base_cells: usize, num_cells: usize, config: PasaConfig) -> Result<Self> {
        config.validate()?;
        let tree = PartitionTree::new(num_states, base_cells, num_cells)?;
        Self::from_tree(tree, config)
    }

    pub fn from_tree(tree: PartitionTree, config: PasaConfig) -> Result<Self> {
        config.validate()?;
        let map = tree.convert()?;
        let estimator = VisitEstimator::with_prior(&tree, config.eta);
        Ok(Pasa {
            config,
            tree,
            map,
            estimator,
            rho_changes: 0,
            reselections: 0,
            trace: None,
        })
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> Option<&[TraceRecord]> {
        self.trace.as_deref()
    }

    pub fn write_trace<W: Write>(&self, mut out: W) -> Result<()> {
        for rec in self.trace.iter().flatten() {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn config(&self) -> &PasaConfig {
        &self.config
    }

    pub fn tree(&self) -> &PartitionTree {
        &self.tree
    }

    pub fn cell_map(&self) -> &CellMap {
        &self.map
    }

    pub fn estimator(&self) -> &VisitEstimator {
        &self.estimator
    }

    /// Total number of split-vector entries changed so far.
    pub fn rho_changes(&self) -> u64 {
        self.rho_changes
    }

    pub fn reselections(&self) -> u64 {
        self.reselections
    }

    pub fn observe(&mut self, state: usize) {
        self.estimator.observe(&self.tree, state);
    }

    /// Runs one reselection pass at iteration `t`; the partition and mapping are
    /// replaced only if some target changed.
    pub fn reselect(&mut self, t: u64) -> Result<Reselected> {
        let u = self.estimator.snapshot();
        let res = reselect(&u, &self.tree, self.config.theta_threshold)?;
        self.reselections += 1;
        let changed = res.changed_levels.len();
        self.rho_changes += changed as u64;
        let previous = if changed > 0 {
            self.map = res.tree.convert()?;
            Some(std::mem::replace(&mut self.tree, res.tree))
        } else {
            None
        };
        if let Some(trace) = self.trace.as_mut() {
            let mut top: Vec<(usize, f64)> = u.iter().copied().enumerate().collect();
            top.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            top.truncate(TRACE_TOP);
            trace.push(TraceRecord {
                t,
                rho: self.tree.rho().to_vec(),
                changed,
                top_cells: top,
            });
        }
        Ok(Reselected { changed, previous })
    }

    /// Observes `state`, then reselects when `t mod nu == 0`.
    pub fn tick(&mut self, t: u64, state: usize) -> Result<Option<Reselected>> {
        if state >= self.tree.num_states() {
            return Err(Error::index("state", state, self.tree.num_states()));
        }
        self.observe(state);
        if t % self.config.nu == 0 {
            self.reselect(t).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Stored slots across the partition, mapping, estimator and the scratch copy.
    pub fn memory_entries(&self) -> usize {
        self.tree.memory_entries() + self.map.memory_entries() + self.estimator.memory_entries() + self.tree.num_cells()
    }
}
