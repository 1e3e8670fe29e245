use std::process::Command;

use pasa::harness::{
    prepare_instance, read_series_csv, run_cycle_study, run_policy_evaluation, run_replication, run_theorem_check,
    series_rows, simulate, write_cycle_csv, write_series_csv, ExperimentConfig, RunRecord,
};
use pasa::Error;

fn small() -> ExperimentConfig {
    ExperimentConfig {
        num_states: 48,
        base_cells: 4,
        num_cells: Some(16),
        delta: 0.05,
        delta_pi: 0.05,
        nu: Some(500),
        iterations: 20_000,
        replications: 3,
        seed: 21,
        ..ExperimentConfig::default()
    }
}

fn without_clock(mut recs: Vec<RunRecord>) -> Vec<RunRecord> {
    recs.iter_mut().for_each(|r| r.wall_clock_ms = 0);
    recs
}

#[test]
fn runs_are_reproducible() {
    let a = without_clock(run_policy_evaluation(&small()).unwrap());
    let b = without_clock(run_policy_evaluation(&small()).unwrap());
    assert_eq!(a, b);
    let other = ExperimentConfig { seed: 22, ..small() };
    assert_ne!(a, without_clock(run_policy_evaluation(&other).unwrap()));
}

#[test]
fn adding_replications_leaves_earlier_ones_alone() {
    let one = ExperimentConfig {
        replications: 1,
        ..small()
    };
    let a = run_replication(&one, 0).unwrap();
    let b = run_replication(&small(), 0).unwrap();
    assert_eq!(a.series, b.series);
    assert_eq!(a.final_rho, b.final_rho);
    assert_eq!(a.instance_seed, b.instance_seed);
    let recs = run_policy_evaluation(&small()).unwrap();
    let seeds: std::collections::HashSet<u64> = recs.iter().map(|r| r.instance_seed).collect();
    assert_eq!(seeds.len(), 3);
}

#[test]
fn csv_round_trips() {
    let recs = run_policy_evaluation(&small()).unwrap();
    let mut buf = Vec::new();
    write_series_csv(&recs, &mut buf).unwrap();
    let header = String::from_utf8(buf.clone()).unwrap();
    assert!(header.starts_with("run_id,replication,t,L,mse,rho_changes,singleton_coverage\n"));
    let back = read_series_csv(buf.as_slice()).unwrap();
    assert_eq!(back, series_rows(&recs));
    assert!(back.iter().all(|r| r.mse.is_some()));
}

#[test]
fn missing_exact_values_leave_mse_empty() {
    let cfg = ExperimentConfig {
        exact_solve_cap: 10,
        replications: 1,
        ..small()
    };
    let recs = run_policy_evaluation(&cfg).unwrap();
    assert!(recs[0].final_score.mse.is_none());
    let mut buf = Vec::new();
    write_series_csv(&recs, &mut buf).unwrap();
    let back = read_series_csv(buf.as_slice()).unwrap();
    assert!(back.iter().all(|r| r.mse.is_none()));
    assert_eq!(back, series_rows(&recs));
}

#[test]
fn tabular_sarsa_converges_to_exact_values() {
    // PASA never runs: nu exceeds the horizon and X = S makes every cell a singleton.
    let cfg = ExperimentConfig {
        num_states: 6,
        base_cells: 2,
        num_cells: Some(6),
        delta: 0.3,
        delta_pi: 0.3,
        alpha: 0.01,
        nu: Some(10_000_000),
        iterations: 2_000_000,
        replications: 1,
        seed: 3,
        ..ExperimentConfig::default()
    };
    let rec = run_replication(&cfg, 0).unwrap();
    let prep = prepare_instance(&cfg, 0).unwrap();
    let q = prep.q_true.as_ref().unwrap();
    let tol = (0.02 * q.max_abs()).powi(2);
    let mse = rec.final_score.mse.unwrap();
    assert!(mse < tol, "mse {mse} vs {tol}");
    assert!(rec.rho_events.is_empty());
}

#[test]
fn static_baseline_never_changes_partition() {
    let cfg = small();
    let prep = prepare_instance(&cfg, 1).unwrap();
    let rec = simulate(&cfg, &prep, false).unwrap();
    assert!(rec.rho_events.is_empty());
    assert!(rec.final_rho.is_empty());
    assert!(rec.series.iter().all(|p| p.rho_changes == 0));
}

#[test]
fn theorem_check_with_generous_cells_passes() {
    let cfg = ExperimentConfig {
        num_cells: Some(256),
        delta: 0.3,
        delta_pi: 0.3,
        eta: 0.005,
        theta_threshold: 0.1,
        nu: Some(10_000),
        baseline_ratio: None,
        epsilon2_target: Some(0.05),
        replications: 2,
        seed: 4,
        ..ExperimentConfig::default()
    };
    let summary = run_theorem_check(&cfg).unwrap();
    for r in &summary.reports {
        assert!(r.passed, "{r:?}");
    }
    assert!(summary.verified);
}

#[test]
fn theorem_check_without_headroom_fails_coverage() {
    let cfg = ExperimentConfig {
        num_cells: Some(16),
        iterations: 50_000,
        replications: 2,
        ..ExperimentConfig::default()
    };
    let summary = run_theorem_check(&cfg).unwrap();
    assert!(!summary.verified);
    for r in &summary.reports {
        assert!(!r.coverage_clause.passed);
        assert!(!r.passed);
        assert!(r.X < r.required_X);
        assert!(r.literal_bound > cfg.num_states as f64);
    }
}

#[test]
fn theorem_check_guards() {
    let zero = ExperimentConfig {
        delta: 0.0,
        ..ExperimentConfig::default()
    };
    assert!(matches!(run_theorem_check(&zero), Err(Error::Config(_))));
    let no_target = ExperimentConfig {
        baseline_ratio: None,
        epsilon2_target: None,
        ..ExperimentConfig::default()
    };
    assert!(matches!(run_theorem_check(&no_target), Err(Error::Config(_))));
}

#[test]
fn cycle_study_with_two_trials() {
    let cfg = ExperimentConfig {
        s_grid: vec![16, 64],
        trials: 2,
        ..ExperimentConfig::default()
    };
    let stats = run_cycle_study(&cfg).unwrap();
    assert_eq!(stats.len(), 2);
    let mut buf = Vec::new();
    write_cycle_csv(&stats, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("S,trials,mean_c1,var_c1,mean_c,var_c,ci_low,ci_high,"));
    let one = ExperimentConfig { trials: 1, ..cfg };
    assert!(run_cycle_study(&one).is_err());
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pasa"))
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(&cfg_path, "S = 32\nB = 4\nX = 8\niterations = 2000\nnu = 100\n").unwrap();
    let out = dir.path().join("scores.csv");

    let ok = cli()
        .args(["evaluate", "--config"])
        .arg(&cfg_path)
        .args(["--seed", "9", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let rows = read_series_csv(std::fs::File::open(&out).unwrap()).unwrap();
    assert_eq!(rows.first().unwrap().t, 0);
    assert_eq!(rows.last().unwrap().t, 2000);
    let json: serde_json::Value = serde_json::from_reader(std::fs::File::open(out.with_extension("json")).unwrap()).unwrap();
    assert_eq!(json["config"]["seed"], 9);

    let bad = cli().args(["evaluate", "--S", "4", "--X", "8"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let unknown = cli().args(["evaluate", "--set", "nonsense=1"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(2));

    let fail = cli()
        .args(["theorem", "--X", "16", "--iterations", "20000"])
        .output()
        .unwrap();
    assert_eq!(fail.status.code(), Some(1));

    let cycles = cli().args(["cycles", "--trials", "2", "--set", "s_grid=8,16"]).output().unwrap();
    assert_eq!(cycles.status.code(), Some(0));
    let stdout = String::from_utf8(cycles.stdout).unwrap();
    assert!(stdout.contains("S,trials,mean_c1"));
}
