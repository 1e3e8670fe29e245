use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pasa::harness::{
    run_cycle_study, run_policy_evaluation, run_theorem_check, write_cycle_csv, write_evaluation,
    ExperimentConfig,
};
use pasa::Error;

#[derive(Parser)]
#[command(name = "pasa", version, about = "Adaptive state aggregation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// SARSA(0) policy evaluation with PASA; writes the score series.
    Evaluate(Common),
    /// Monte Carlo cycle statistics of random skeletons over an S grid.
    Cycles(Common),
    /// Singleton-cell mechanism check; exits 1 if too few replications pass.
    Theorem(Common),
}

#[allow(non_snake_case)]
#[derive(Args)]
struct Common {
    /// Config file, JSON or `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV output path; a `.json` sibling holds the full records.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides for any config field.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[arg(long = "S")]
    S: Option<String>,
    #[arg(long = "A")]
    A: Option<String>,
    #[arg(long = "B")]
    B: Option<String>,
    #[arg(long = "X")]
    X: Option<String>,
    #[arg(long)]
    delta: Option<String>,
    #[arg(long = "delta-pi")]
    delta_pi: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    eta: Option<String>,
    #[arg(long)]
    theta: Option<String>,
    #[arg(long)]
    nu: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    iterations: Option<String>,
    #[arg(long)]
    replications: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    trials: Option<String>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let flags = [
            ("S", &self.S),
            ("A", &self.A),
            ("B", &self.B),
            ("X", &self.X),
            ("delta", &self.delta),
            ("delta_pi", &self.delta_pi),
            ("gamma", &self.gamma),
            ("noise", &self.noise),
            ("eta", &self.eta),
            ("theta_threshold", &self.theta),
            ("nu", &self.nu),
            ("alpha", &self.alpha),
            ("iterations", &self.iterations),
            ("replications", &self.replications),
            ("seed", &self.seed),
            ("trials", &self.trials),
        ];
        let mut pairs: Vec<(String, String)> = flags
            .iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv}")))?;
            pairs.push((k.to_string(), v.to_string()));
        }
        base.with_overrides(&pairs)
    }
}

fn evaluate(args: &Common) -> Result<ExitCode, Error> {
    let cfg = args.config()?;
    let records = run_policy_evaluation(&cfg)?;
    for r in &records {
        let mse = r.final_score.mse.map_or("n/a".to_string(), |m| format!("{m:.6e}"));
        println!(
            "replication {}: X = {}, C = {}, L = {:.6e}, mse = {mse}, rho changes = {}, coverage = {:.3}, {} ms",
            r.replication,
            r.X,
            r.cycles.C,
            r.final_score.l,
            r.rho_events.iter().map(|e| e.changed).sum::<usize>(),
            r.singleton_coverage,
            r.wall_clock_ms
        );
    }
    if let Some(out) = &args.out {
        let json = write_evaluation(&cfg, &records, out)?;
        println!("wrote {} and {}", out.display(), json.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cycles(args: &Common) -> Result<ExitCode, Error> {
    let cfg = args.config()?;
    let stats = run_cycle_study(&cfg)?;
    for s in &stats {
        println!(
            "S = {}: mean C1 = {:.3} (predicted {:.3}), var C1 = {:.1} (predicted {:.1}), mean C = {:.3} < bound {:.3}, Var(C)/(S ln S) = {:.4}",
            s.num_states,
            s.mean_c1,
            s.predicted_mean_c1,
            s.var_c1,
            s.predicted_var_c1,
            s.mean_c,
            s.mean_c_bound,
            s.var_c_ratio
        );
    }
    match &args.out {
        Some(out) => write_cycle_csv(&stats, fs::File::create(out)?)?,
        None => write_cycle_csv(&stats, std::io::stdout().lock())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn theorem(args: &Common) -> Result<ExitCode, Error> {
    let cfg = args.config()?;
    let summary = run_theorem_check(&cfg)?;
    for r in &summary.reports {
        println!(
            "replication {} (C = {}, X = {}, needed {}, literal bound {:.0}): {}",
            r.replication,
            r.C,
            r.X,
            r.required_X,
            r.literal_bound,
            if r.passed { "pass" } else { "FAIL" }
        );
        for (name, c) in [("coverage", &r.coverage_clause), ("stability", &r.stability_clause), ("score", &r.score_clause)] {
            println!("  {name}: {} ({})", if c.passed { "pass" } else { "FAIL" }, c.detail);
        }
    }
    println!(
        "{} of {} replications passed (required fraction {})",
        summary.passed,
        summary.reports.len(),
        cfg.min_pass_fraction
    );
    if let Some(out) = &args.out {
        serde_json::to_writer_pretty(fs::File::create(out)?, &summary)?;
    }
    Ok(if summary.verified { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Evaluate(a) => evaluate(a),
        Command::Cycles(a) => cycles(a),
        Command::Theorem(a) => theorem(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
