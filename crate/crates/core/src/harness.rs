//! Seeded experiments: policy-evaluation runs, cycle studies and the
//! singleton-cell mechanism check, with CSV and JSON persistence.
//!
//! Replication `k` of a run with root seed `r` uses the instance seed
//! `derive_seed(r, k, INSTANCE)` and draws its trajectory from
//! `derive_seed(r, k, TRAJECTORY)` (start state from `START`), so replications
//! never share a stream and adding replications leaves earlier ones unchanged.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::aggregation::{CellMap, PartitionTree};
use crate::error::{Error, Result};
use crate::mdp::{
    exact_action_values_capped, stationary_distribution_of, Instance, InstanceParams, NoiseKind, QTable,
    StationaryDistribution,
};
use crate::metrics::{bellman_score_with, mse_score, restricted_score, SampledScore, ScoreOptions};
use crate::pasa::{Pasa, PasaConfig};
use crate::rl::{CellValueTable, Transition};
use crate::rng::{derive_seed, rng_from_seed, tag};
use crate::skeleton::{compute_cycles, monte_carlo_cycle_stats_at, CycleDecomposition, CycleStats};

/// Tolerance for the stationary distribution and the exact action values.
pub const SOLVE_TOL: f64 = 1e-10;
/// States drawn when `L` has to be estimated by sampling.
pub const SCORE_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(rename = "S")]
    pub num_states: usize,
    #[serde(rename = "A")]
    pub num_actions: usize,
    #[serde(rename = "B")]
    pub base_cells: usize,
    /// `None` picks `C * ceil(log2 S) + B` per instance, clamped to `S`.
    #[serde(rename = "X")]
    pub num_cells: Option<usize>,
    pub delta: f64,
    pub delta_pi: f64,
    pub gamma: f64,
    pub noise: NoiseKind,
    pub eta: f64,
    pub theta_threshold: f64,
    /// `None` means `max(1000, 10 X)`.
    pub nu: Option<u64>,
    pub alpha: f64,
    pub iterations: u64,
    pub replications: u64,
    pub seed: u64,
    /// Absolute bound on `L` for the mechanism check.
    pub epsilon2_target: Option<f64>,
    /// Bound on `L` relative to a static uniform aggregation trained on the same trajectory.
    pub baseline_ratio: Option<f64>,
    pub k_const: f64,
    pub confidence: f64,
    /// `None` means every `10 nu` iterations.
    pub score_interval: Option<u64>,
    /// `false` runs a static uniform `X`-cell aggregation instead of PASA.
    pub adaptive: bool,
    pub exact_solve_cap: usize,
    pub s_grid: Vec<usize>,
    pub trials: usize,
    /// Fraction of replications that must pass the mechanism check.
    pub min_pass_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            num_states: 256,
            num_actions: 2,
            base_cells: 16,
            num_cells: None,
            delta: 1e-3,
            delta_pi: 1e-3,
            gamma: 0.9,
            noise: NoiseKind::Uniform,
            eta: 0.01,
            theta_threshold: 0.02,
            nu: None,
            alpha: 0.05,
            iterations: 500_000,
            replications: 1,
            seed: 0,
            epsilon2_target: None,
            baseline_ratio: Some(0.1),
            k_const: 0.7,
            confidence: 0.99,
            score_interval: None,
            adaptive: true,
            exact_solve_cap: crate::mdp::DEFAULT_EXACT_SOLVE_CAP,
            s_grid: vec![256, 1024, 4096],
            trials: 2000,
            min_pass_fraction: 1.0,
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    /// Parses JSON (if the text starts with `{`) or flat `key = value` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        let cfg: ExperimentConfig = if trimmed.starts_with('{') {
            serde_json::from_str(trimmed).map_err(|e| bad(e.to_string()))?
        } else {
            let mut map = Map::new();
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| bad(format!("line {}: expected key = value", n + 1)))?;
                map.insert(normalize_key(k), parse_value(v));
            }
            serde_json::from_value(Value::Object(map)).map_err(|e| bad(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `key = value` overrides on top of `self`.
    pub fn with_overrides<K: AsRef<str>, V: AsRef<str>>(&self, pairs: &[(K, V)]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        let obj = value.as_object_mut().expect("config serialises to an object");
        for (k, v) in pairs {
            obj.insert(normalize_key(k.as_ref()), parse_value(v.as_ref()));
        }
        let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, b) = (self.num_states, self.base_cells);
        if s == 0 || self.num_actions == 0 {
            return Err(bad("S and A must be positive"));
        }
        if !(1..=s).contains(&b) {
            return Err(bad(format!("B = {b} must lie in [1, S = {s}]")));
        }
        if let Some(x) = self.num_cells {
            if !(b..=s).contains(&x) {
                return Err(bad(format!("X = {x} must lie in [B = {b}, S = {s}]")));
            }
        }
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(bad(format!("{name} = {v} not in [0, 1]")))
            }
        };
        unit("delta", self.delta)?;
        unit("delta_pi", self.delta_pi)?;
        unit("min_pass_fraction", self.min_pass_fraction)?;
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(bad(format!("gamma = {} not in [0, 1)", self.gamma)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(bad(format!("alpha = {} not in (0, 1]", self.alpha)));
        }
        PasaConfig::new(self.eta, self.theta_threshold, self.nu.unwrap_or(1)).map_err(|e| bad(e.to_string()))?;
        if self.replications == 0 {
            return Err(bad("replications must be at least 1"));
        }
        if self.score_interval == Some(0) {
            return Err(bad("score_interval must be positive"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(bad(format!("confidence = {} not in (0, 1)", self.confidence)));
        }
        if !(self.k_const > 0.0) {
            return Err(bad("k_const must be positive"));
        }
        for (name, v) in [("epsilon2_target", self.epsilon2_target), ("baseline_ratio", self.baseline_ratio)] {
            if let Some(v) = v {
                if !(v >= 0.0) {
                    return Err(bad(format!("{name} = {v} must be non-negative")));
                }
            }
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the config's JSON form.
    pub fn run_id(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn instance_params(&self) -> InstanceParams {
        InstanceParams {
            num_states: self.num_states,
            num_actions: self.num_actions,
            delta: self.delta,
            delta_pi: self.delta_pi,
            gamma: self.gamma,
            noise: self.noise,
        }
    }

    pub fn instance_seed(&self, replication: u64) -> u64 {
        derive_seed(self.seed, replication, tag::INSTANCE)
    }

    /// `X` for an instance whose skeleton has `C` recurrent states.
    pub fn cells_for(&self, recurrent: usize) -> usize {
        self.num_cells.unwrap_or_else(|| {
            (recurrent * ceil_log2(self.num_states) + self.base_cells).clamp(self.base_cells, self.num_states)
        })
    }

    pub fn nu_for(&self, num_cells: usize) -> u64 {
        self.nu.unwrap_or_else(|| PasaConfig::defaults_for(num_cells).nu)
    }
}

fn normalize_key(k: &str) -> String {
    let k = k.trim().trim_start_matches("--").replace('-', "_");
    match k.as_str() {
        "theta" => "theta_threshold".into(),
        "s" | "a" | "b" | "x" => k.to_uppercase(),
        _ => k,
    }
}

fn parse_value(v: &str) -> Value {
    let v = v.trim();
    if let Ok(x) = serde_json::from_str(v) {
        return x;
    }
    if v.contains(',') {
        if let Ok(x) = serde_json::from_str(&format!("[{v}]")) {
            return x;
        }
    }
    Value::String(v.to_string())
}

/// `ceil(log2 n)`, with `ceil_log2(0) = ceil_log2(1) = 0`.
pub fn ceil_log2(n: usize) -> usize {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePoint {
    pub t: u64,
    #[serde(rename = "L")]
    pub l: f64,
    pub mse: Option<f64>,
    pub rho_changes: u64,
    pub singleton_coverage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RhoEvent {
    pub t: u64,
    pub changed: usize,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleSummary {
    pub C: usize,
    pub C1: usize,
    pub num_cycles: usize,
    /// Lengths of the distinct cycles, in discovery order.
    pub lengths: Vec<usize>,
}

impl From<&CycleDecomposition> for CycleSummary {
    fn from(d: &CycleDecomposition) -> Self {
        CycleSummary {
            C: d.total(),
            C1: d.first_length(),
            num_cycles: d.num_cycles(),
            lengths: d.lengths().into_iter().filter(|&l| l > 0).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalScore {
    #[serde(rename = "L")]
    pub l: f64,
    pub mse: Option<f64>,
    #[serde(rename = "L_outside_recurrent")]
    pub l_outside_recurrent: f64,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub replication: u64,
    pub config: ExperimentConfig,
    pub instance_seed: u64,
    pub adaptive: bool,
    pub X: usize,
    pub nu: u64,
    pub series: Vec<ScorePoint>,
    pub rho_events: Vec<RhoEvent>,
    pub cycles: CycleSummary,
    #[serde(rename = "final")]
    pub final_score: FinalScore,
    pub final_rho: Vec<usize>,
    pub singleton_coverage: f64,
    /// The only field that is not a function of the config.
    pub wall_clock_ms: u64,
}

impl RunRecord {
    /// Split-vector entries changed at iterations `t > after`.
    pub fn rho_changes_after(&self, after: u64) -> usize {
        self.rho_events.iter().filter(|e| e.t > after).map(|e| e.changed).sum()
    }
}

/// Everything a run needs that depends only on the instance.
#[derive(Debug, Clone)]
pub struct PreparedInstance {
    pub replication: u64,
    pub seed: u64,
    pub instance: Instance,
    pub psi: StationaryDistribution,
    pub q_true: Option<QTable>,
    pub cycles: CycleDecomposition,
}

pub fn prepare_instance(config: &ExperimentConfig, replication: u64) -> Result<PreparedInstance> {
    let ctx = |e: Error| e.in_context(format!("replication {replication} (seed {})", config.seed));
    let seed = config.instance_seed(replication);
    let instance = Instance::generate(&config.instance_params(), seed).map_err(ctx)?;
    let psi = stationary_distribution_of(&instance.model, &instance.policy, SOLVE_TOL).map_err(ctx)?;
    let q_true = match exact_action_values_capped(&instance.model, &instance.policy, SOLVE_TOL, config.exact_solve_cap) {
        Ok(q) => Some(q),
        Err(Error::Capacity(_)) => None,
        Err(e) => return Err(ctx(e)),
    };
    let cycles = compute_cycles(&instance.skeleton_map()).map_err(ctx)?;
    Ok(PreparedInstance {
        replication,
        seed,
        instance,
        psi,
        q_true,
        cycles,
    })
}

fn coverage(tree: &PartitionTree, cycles: &CycleDecomposition) -> f64 {
    let recurrent = cycles.union_states();
    if recurrent.is_empty() {
        return 1.0;
    }
    let covered = recurrent
        .iter()
        .filter(|&&s| tree.cell_of(s).map(|c| tree.is_singleton(c)).unwrap_or(false))
        .count();
    covered as f64 / recurrent.len() as f64
}

struct Scorer<'a> {
    prep: &'a PreparedInstance,
    opts: ScoreOptions,
}

impl Scorer<'_> {
    fn l(&self, table: &CellValueTable, map: &CellMap) -> Result<f64> {
        let inst = &self.prep.instance;
        bellman_score_with(table, map, &inst.model, &inst.policy, &self.prep.psi, &self.opts)
    }

    fn mse(&self, table: &CellValueTable, map: &CellMap) -> Result<Option<f64>> {
        self.prep
            .q_true
            .as_ref()
            .map(|q| mse_score(table, map, Some(q), &self.prep.psi))
            .transpose()
    }
}

/// Runs SARSA(0) with PASA (or a static uniform aggregation when `adaptive`
/// is false) on a prepared instance.
pub fn simulate(config: &ExperimentConfig, prep: &PreparedInstance, adaptive: bool) -> Result<RunRecord> {
    let rep = prep.replication;
    simulate_inner(config, prep, adaptive).map_err(|e| e.in_context(format!("replication {rep} (seed {})", config.seed)))
}

fn simulate_inner(config: &ExperimentConfig, prep: &PreparedInstance, adaptive: bool) -> Result<RunRecord> {
    let started = Instant::now();
    let rep = prep.replication;
    let model = &prep.instance.model;
    let policy = &prep.instance.policy;
    let s_n = model.num_states();
    let x = config.cells_for(prep.cycles.total());
    let nu = config.nu_for(x);
    let interval = config.score_interval.unwrap_or(10 * nu).max(1);

    let mut pasa = None;
    let mut fixed = None;
    if adaptive {
        let pc = PasaConfig::new(config.eta, config.theta_threshold, nu)?;
        pasa = Some(Pasa::new(s_n, config.base_cells, x, pc)?);
    } else {
        let tree = PartitionTree::new(s_n, x, x)?;
        let map = tree.convert()?;
        fixed = Some((tree, map));
    }
    let mut table = CellValueTable::new(x, model.num_actions(), config.alpha)?;
    let scorer = Scorer {
        prep,
        opts: ScoreOptions {
            sampling: Some(SampledScore {
                samples: SCORE_SAMPLES,
                seed: derive_seed(config.seed, rep, tag::SCORE_SAMPLE),
            }),
            ..ScoreOptions::default()
        },
    };

    let view = |pasa: &Option<Pasa>, fixed: &Option<(PartitionTree, CellMap)>| -> (PartitionTree, CellMap) {
        match (pasa, fixed) {
            (Some(p), _) => (p.tree().clone(), p.cell_map().clone()),
            (None, Some((t, m))) => (t.clone(), m.clone()),
            _ => unreachable!(),
        }
    };
    let point = |t: u64, table: &CellValueTable, pasa: &Option<Pasa>, fixed: &Option<(PartitionTree, CellMap)>| -> Result<ScorePoint> {
        let (tree, map) = view(pasa, fixed);
        Ok(ScorePoint {
            t,
            l: scorer.l(table, &map)?,
            mse: scorer.mse(table, &map)?,
            rho_changes: pasa.as_ref().map_or(0, |p| p.rho_changes()),
            singleton_coverage: coverage(&tree, &prep.cycles),
        })
    };

    let mut traj = rng_from_seed(derive_seed(config.seed, rep, tag::TRAJECTORY));
    let mut state = rng_from_seed(derive_seed(config.seed, rep, tag::START)).gen_range(0..s_n);
    let mut action = policy.sample_action(state, &mut traj);
    let gamma = model.gamma();
    let mut series = vec![point(0, &table, &pasa, &fixed)?];
    let mut rho_events = Vec::new();

    for t in 1..=config.iterations {
        let next = model.sample_next(state, action, &mut traj);
        let next_action = policy.sample_action(next, &mut traj);
        let tr = Transition {
            state,
            action,
            reward: model.reward(state, action),
            next_state: next,
            next_action,
        };
        match (&mut pasa, &fixed) {
            (Some(p), _) => {
                table.td_update(p.cell_map(), &tr, gamma);
                if let Some(res) = p.tick(t, state)? {
                    if let Some(prev) = res.previous {
                        table.handle_resplit(&prev, p.tree())?;
                        rho_events.push(RhoEvent { t, changed: res.changed });
                    }
                }
            }
            (None, Some((_, map))) => {
                table.td_update(map, &tr, gamma);
            }
            _ => unreachable!(),
        }
        state = next;
        action = next_action;
        if t % interval == 0 || t == config.iterations {
            series.push(point(t, &table, &pasa, &fixed)?);
        }
    }

    let (tree, map) = view(&pasa, &fixed);
    let l = scorer.l(&table, &map)?;
    let outside: Vec<bool> = prep.cycles.recurrent_mask().iter().map(|r| !r).collect();
    let l_out = restricted_score(&table, &map, model, policy, &prep.psi, &outside)?;
    let final_score = FinalScore {
        l,
        mse: scorer.mse(&table, &map)?,
        l_outside_recurrent: l_out.min(l),
    };
    Ok(RunRecord {
        run_id: config.run_id(),
        replication: rep,
        config: config.clone(),
        instance_seed: prep.seed,
        adaptive,
        X: x,
        nu,
        series,
        rho_events,
        cycles: CycleSummary::from(&prep.cycles),
        final_score,
        final_rho: tree.rho().to_vec(),
        singleton_coverage: coverage(&tree, &prep.cycles),
        wall_clock_ms: started.elapsed().as_millis() as u64,
    })
}

pub fn run_replication(config: &ExperimentConfig, replication: u64) -> Result<RunRecord> {
    let prep = prepare_instance(config, replication)?;
    simulate(config, &prep, config.adaptive)
}

/// All replications, run in parallel and returned in replication order.
pub fn run_policy_evaluation(config: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    config.validate()?;
    (0..config.replications)
        .into_par_iter()
        .map(|rep| run_replication(config, rep))
        .collect()
}

/// One row of the score time-series CSV.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub run_id: String,
    pub replication: u64,
    pub t: u64,
    pub L: f64,
    pub mse: Option<f64>,
    pub rho_changes: u64,
    pub singleton_coverage: f64,
}

pub fn series_rows(records: &[RunRecord]) -> Vec<SeriesRow> {
    records
        .iter()
        .flat_map(|r| {
            r.series.iter().map(|p| SeriesRow {
                run_id: r.run_id.clone(),
                replication: r.replication,
                t: p.t,
                L: p.l,
                mse: p.mse,
                rho_changes: p.rho_changes,
                singleton_coverage: p.singleton_coverage,
            })
        })
        .collect()
}

pub fn write_series_csv<W: Write>(records: &[RunRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in series_rows(records) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_series_csv<R: Read>(input: R) -> Result<Vec<SeriesRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn json_sibling(path: &Path) -> PathBuf {
    path.with_extension("json")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationOutput {
    pub run_id: String,
    pub config: ExperimentConfig,
    pub records: Vec<RunRecord>,
}

/// Writes the series CSV to `path` and the full records to the `.json` sibling.
pub fn write_evaluation(config: &ExperimentConfig, records: &[RunRecord], path: &Path) -> Result<PathBuf> {
    write_series_csv(records, fs::File::create(path)?)?;
    let json = json_sibling(path);
    let doc = EvaluationOutput {
        run_id: config.run_id(),
        config: config.clone(),
        records: records.to_vec(),
    };
    serde_json::to_writer_pretty(fs::File::create(&json)?, &doc)?;
    Ok(json)
}

/// Monte Carlo cycle statistics for every `S` in the grid.
pub fn run_cycle_study(config: &ExperimentConfig) -> Result<Vec<CycleStats>> {
    if config.trials < 2 {
        return Err(bad("the cycle study needs at least two trials"));
    }
    if config.s_grid.is_empty() {
        return Err(bad("s_grid is empty"));
    }
    config
        .s_grid
        .iter()
        .map(|&s| monte_carlo_cycle_stats_at(s, config.trials, config.seed, config.confidence))
        .collect()
}

pub fn write_cycle_csv<W: Write>(stats: &[CycleStats], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in stats {
        w.serialize(s.to_row())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub passed: bool,
    pub detail: String,
}

impl Clause {
    fn new(passed: bool, detail: String) -> Self {
        Clause { passed, detail }
    }
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub replication: u64,
    pub instance_seed: u64,
    pub S: usize,
    pub C: usize,
    pub X: usize,
    /// `C * ceil(log2 S) + B`, the cell count the mechanism needs.
    pub required_X: usize,
    /// `K sqrt(S) ln S log2 S`.
    pub literal_bound: f64,
    pub singleton_coverage: f64,
    pub rho_changes_in_final_third: usize,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "L_outside_recurrent")]
    pub l_outside_recurrent: f64,
    #[serde(rename = "L_baseline")]
    pub l_baseline: Option<f64>,
    pub coverage_clause: Clause,
    pub stability_clause: Clause,
    pub score_clause: Clause,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremSummary {
    pub run_id: String,
    pub reports: Vec<TheoremReport>,
    pub passed: usize,
    pub pass_fraction: f64,
    pub verified: bool,
}

/// `K sqrt(S) ln S log2 S`.
pub fn literal_cell_bound(k: f64, num_states: usize) -> f64 {
    let s = num_states as f64;
    k * s.sqrt() * s.ln() * s.log2()
}

fn check_replication(config: &ExperimentConfig, rep: u64) -> Result<TheoremReport> {
    let prep = prepare_instance(config, rep)?;
    let run = simulate(config, &prep, true)?;
    let baseline = match config.baseline_ratio {
        Some(_) => Some(simulate(config, &prep, false)?.final_score.l),
        None => None,
    };
    let s = config.num_states;
    let c = prep.cycles.total();
    let window = config.iterations - config.iterations / 3;
    let late = run.rho_changes_after(window);
    let f = run.final_score;

    let coverage_clause = Clause::new(
        run.singleton_coverage >= 1.0,
        format!("{:.1}% of {c} recurrent states in singleton cells", 100.0 * run.singleton_coverage),
    );
    let stability_clause = Clause::new(late == 0, format!("{late} split changes after t = {window}"));
    let mut ok = true;
    let mut parts = Vec::new();
    if let Some(eps) = config.epsilon2_target {
        ok &= f.l <= eps && f.l_outside_recurrent <= eps;
        parts.push(format!("L = {:.4e}, L outside = {:.4e} vs {eps:.4e}", f.l, f.l_outside_recurrent));
    }
    if let (Some(ratio), Some(base)) = (config.baseline_ratio, baseline) {
        ok &= f.l <= ratio * base;
        parts.push(format!("L = {:.4e} vs {ratio} x baseline {base:.4e} (ratio {:.3})", f.l, f.l / base));
    }
    let score_clause = Clause::new(ok, parts.join("; "));
    let passed = coverage_clause.passed && stability_clause.passed && score_clause.passed;
    Ok(TheoremReport {
        replication: rep,
        instance_seed: prep.seed,
        S: s,
        C: c,
        X: run.X,
        required_X: c * ceil_log2(s) + config.base_cells,
        literal_bound: literal_cell_bound(config.k_const, s),
        singleton_coverage: run.singleton_coverage,
        rho_changes_in_final_third: late,
        l: f.l,
        l_outside_recurrent: f.l_outside_recurrent,
        l_baseline: baseline,
        coverage_clause,
        stability_clause,
        score_clause,
        passed,
    })
}

/// Runs the singleton-cell mechanism check on every replication. Clause
/// failures are reported in the summary, not as errors.
pub fn run_theorem_check(config: &ExperimentConfig) -> Result<TheoremSummary> {
    config.validate()?;
    if config.delta == 0.0 {
        return Err(bad("delta = 0 leaves the stationary distribution undefined"));
    }
    if config.epsilon2_target.is_none() && config.baseline_ratio.is_none() {
        return Err(bad("set epsilon2_target or baseline_ratio for the score clause"));
    }
    if !config.adaptive {
        return Err(bad("the mechanism check needs adaptive = true"));
    }
    let reports: Vec<TheoremReport> = (0..config.replications)
        .into_par_iter()
        .map(|rep| check_replication(config, rep))
        .collect::<Result<_>>()?;
    let passed = reports.iter().filter(|r| r.passed).count();
    let pass_fraction = passed as f64 / reports.len() as f64;
    Ok(TheoremSummary {
        run_id: config.run_id(),
        passed,
        pass_fraction,
        verified: pass_fraction >= config.min_pass_fraction,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            num_states: 24,
            base_cells: 2,
            num_cells: Some(8),
            delta: 0.05,
            delta_pi: 0.05,
            nu: Some(100),
            iterations: 3000,
            replications: 2,
            seed: 11,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn ceil_log2_values() {
        let got: Vec<usize> = [0, 1, 2, 3, 4, 5, 255, 256, 257].iter().map(|&n| ceil_log2(n)).collect();
        assert_eq!(got, vec![0, 0, 1, 2, 2, 3, 8, 8, 9]);
    }

    #[test]
    fn key_value_and_json_agree() {
        let kv = "# comment\nS = 64\nB = 4\nX=12\ndelta-pi = 0.01\ntheta = 0.05\nnoise = uniform_excluding_current\ns_grid = 16, 32\n";
        let json = r#"{"S": 64, "B": 4, "X": 12, "delta_pi": 0.01, "theta_threshold": 0.05,
                      "noise": "uniform_excluding_current", "s_grid": [16, 32]}"#;
        let a = ExperimentConfig::parse(kv).unwrap();
        let b = ExperimentConfig::parse(json).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_cells, Some(12));
        assert_eq!(a.s_grid, vec![16, 32]);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::parse("bogus = 1").is_err());
        assert!(ExperimentConfig::parse("S = 8\nX = 9").is_err());
        assert!(ExperimentConfig::parse("replications = 0").is_err());
        assert!(ExperimentConfig::parse("gamma = 1").is_err());
        assert!(ExperimentConfig::parse("no equals sign").is_err());
        assert!(ExperimentConfig::default().with_overrides(&[("alpha", "0")]).is_err());
    }

    #[test]
    fn overrides_apply() {
        let c = ExperimentConfig::default()
            .with_overrides(&[("--S", "32"), ("b", "4"), ("--X", "8"), ("--seed", "5")])
            .unwrap();
        assert_eq!((c.num_states, c.num_cells, c.seed), (32, Some(8), 5));
    }

    #[test]
    fn run_id_tracks_config() {
        let a = small();
        let mut b = small();
        assert_eq!(a.run_id(), b.run_id());
        b.seed += 1;
        assert_ne!(a.run_id(), b.run_id());
        assert_eq!(a.run_id().len(), 16);
    }

    #[test]
    fn empty_run_has_initial_score_only() {
        let cfg = ExperimentConfig {
            iterations: 0,
            ..small()
        };
        let recs = run_policy_evaluation(&cfg).unwrap();
        assert_eq!(recs.len(), 2);
        for r in &recs {
            assert_eq!(r.series.len(), 1);
            assert_eq!(r.series[0].t, 0);
            assert!(r.rho_events.is_empty());
        }
    }

    #[test]
    fn series_is_monotone_and_ends_at_horizon() {
        let cfg = ExperimentConfig {
            score_interval: Some(700),
            ..small()
        };
        let r = run_replication(&cfg, 0).unwrap();
        let ts: Vec<u64> = r.series.iter().map(|p| p.t).collect();
        assert_eq!(ts, vec![0, 700, 1400, 2100, 2800, 3000]);
        assert!(r.series.windows(2).all(|w| w[0].rho_changes <= w[1].rho_changes));
    }

    #[test]
    fn theorem_rejects_zero_delta() {
        let cfg = ExperimentConfig { delta: 0.0, ..small() };
        assert!(matches!(run_theorem_check(&cfg), Err(Error::Config(_))));
    }
}
