//! The `ambs` command: run experiments, sweep seeds, validate the
//! statistical guarantees on fresh random instances, check every gradient
//! against finite differences, and aggregate per-seed metrics for plotting.
//!
//! Exit codes: 0 success; 1 a verified inequality failed (theory/gradcheck);
//! 2 bad configuration or malformed inputs; 3 runtime failure, with the
//! failing phase named on stderr.

use std::collections::BTreeMap;
use std::fmt::Write as FmtWrite;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use ambs::agent::gradients::{finite_difference_sweep, FD_TOLERANCE};
use ambs::theory::{self, TheoryRow, COVERAGE_REPS};
use ambs::trainer::{AnyTrainer, ExperimentConfig, MetricsLog, MetricsRow};

#[derive(Parser)]
#[command(name = "ambs", version, about = "Safe model-based RL with run-time verification")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one training experiment from a JSON config.
    Train {
        /// Experiment config (JSON, schema `exp-v1`).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory: resolved.json, metrics.csv, checkpoint.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved checkpoint with frozen policies.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: u64,
    },
    /// Validate the statistical guarantees on freshly randomized instances.
    Theory {
        /// Which guarantee to exercise.
        #[arg(long)]
        suite: SuiteArg,
        /// Instances per suite (suite-specific default when omitted).
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare every policy-gradient rule against finite differences.
    Gradcheck {
        /// Random (policy, batch) points; each exercises all five rules.
        #[arg(long, default_value_t = 50)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run one config across several seeds as independent child processes.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated master seeds, one child run each.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Parent directory; each run writes to `<out>/seed-<k>`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate per-seed metrics CSVs into gnuplot-ready columns.
    Plotdata {
        /// metrics.csv files from runs of the same config.
        #[arg(long, num_args = 1.., required = true)]
        metrics: Vec<PathBuf>,
        /// Output directory; one `<quantity>.dat` per metrics column.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    /// Monte Carlo coverage of the exact reachability measure.
    Thm1,
    /// Measure gap between a system and its KL-bounded perturbation.
    Thm2,
    /// State-level vs belief-level divergence on tiny POMDPs.
    Thm3,
    /// t-step error amplification under one-step KL budgets.
    Lemma,
    /// Total variation against the square-root KL bound.
    Pinsker,
    /// Every suite at its default size.
    All,
}

enum Failure {
    /// Bad config or malformed input files → exit 2.
    Config(String),
    /// A phase crashed mid-run → exit 3, phase named on stderr.
    Runtime { phase: &'static str, msg: String },
    /// Verified inequalities failed → exit 1; that is a build-stopping bug.
    Checks { what: &'static str, failed: usize, total: usize },
}

impl Failure {
    fn report(self) -> ExitCode {
        match self {
            Failure::Config(msg) => {
                eprintln!("config error: {msg}");
                ExitCode::from(2)
            }
            Failure::Runtime { phase, msg } => {
                eprintln!("error during {phase}: {msg}");
                ExitCode::from(3)
            }
            Failure::Checks { what, failed, total } => {
                eprintln!("{what}: {failed} of {total} checks FAILED");
                ExitCode::from(1)
            }
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn runtime(phase: &'static str) -> impl Fn(ambs::Error) -> Failure {
    move |e| Failure::Runtime { phase, msg: e.to_string() }
}

fn io_runtime(phase: &'static str) -> impl Fn(std::io::Error) -> Failure {
    move |e| Failure::Runtime { phase, msg: e.to_string() }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Train { config, seed, out } => cmd_train(&config, seed, &out),
        Cmd::Eval { checkpoint, episodes } => cmd_eval(&checkpoint, episodes),
        Cmd::Theory { suite, instances, seed, out } => cmd_theory(suite, instances, seed, out),
        Cmd::Gradcheck { points, seed } => cmd_gradcheck(points, seed),
        Cmd::Sweep { config, seeds, out } => cmd_sweep(&config, &seeds, &out),
        Cmd::Plotdata { metrics, out } => cmd_plotdata(&metrics, &out),
    }
}

// ---------------------------------------------------------------------------
// train / eval

fn load_config(path: &Path, seed_override: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("reading {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text).map_err(config_err)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn cmd_train(config: &Path, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let cfg = load_config(config, seed)?;

    fs::create_dir_all(out).map_err(io_runtime("setup"))?;
    let resolved = cfg.to_resolved_json().map_err(runtime("setup"))?;
    fs::write(out.join("resolved.json"), resolved).map_err(io_runtime("setup"))?;

    let mut trainer = AnyTrainer::build(cfg).map_err(runtime("setup"))?;
    trainer.run().map_err(runtime("training"))?;

    let mut csv = Vec::new();
    trainer.metrics().write_csv(&mut csv).map_err(runtime("reporting"))?;
    fs::write(out.join("metrics.csv"), csv).map_err(io_runtime("reporting"))?;
    trainer.save(&out.join("checkpoint.json")).map_err(runtime("reporting"))?;

    let last = trainer.metrics().rows.last().expect("a finished run has at least one row");
    println!(
        "{} frames done: {} violations, {} interventions; outputs in {}",
        trainer.frames(),
        last.cum_violations,
        last.interventions,
        out.display()
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, episodes: u64) -> Result<(), Failure> {
    let mut trainer = AnyTrainer::load(checkpoint, None).map_err(config_err)?;
    let summary = trainer.evaluate(episodes).map_err(runtime("evaluation"))?;
    println!("{}", serde_json::to_string_pretty(&summary).map_err(|e| runtime("reporting")(e.into()))?);
    Ok(())
}

// ---------------------------------------------------------------------------
// theory / gradcheck

fn cmd_theory(
    suite: SuiteArg,
    instances: Option<usize>,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let run = runtime("theory suites");
    let rows = match suite {
        SuiteArg::Thm1 => {
            theory::coverage_suite(instances.unwrap_or(5), COVERAGE_REPS, &mut rng).map_err(&run)?
        }
        SuiteArg::Thm2 => {
            theory::measure_gap_suite(instances.unwrap_or(100), 0.2, 4, &mut rng).map_err(&run)?
        }
        SuiteArg::Thm3 => {
            theory::marginalisation_suite(instances.unwrap_or(100), &mut rng).map_err(&run)?
        }
        SuiteArg::Lemma => {
            theory::amplification_suite(instances.unwrap_or(100), 8, &mut rng).map_err(&run)?
        }
        SuiteArg::Pinsker => theory::pinsker_suite(instances.unwrap_or(100), &mut rng).map_err(&run)?,
        SuiteArg::All => match instances {
            None => theory::run_all(&mut rng).map_err(&run)?,
            Some(k) => {
                let mut rows = theory::coverage_suite(k, COVERAGE_REPS, &mut rng).map_err(&run)?;
                rows.extend(theory::measure_gap_suite(k, 0.2, 4, &mut rng).map_err(&run)?);
                rows.extend(theory::amplification_suite(k, 8, &mut rng).map_err(&run)?);
                rows.extend(theory::pinsker_suite(k, &mut rng).map_err(&run)?);
                rows.extend(theory::marginalisation_suite(k, &mut rng).map_err(&run)?);
                rows
            }
        },
    };

    let csv = theory_csv(&rows);
    match out {
        Some(path) => fs::write(&path, csv).map_err(io_runtime("reporting"))?,
        None => print!("{csv}"),
    }
    let failed = rows.iter().filter(|r| !r.pass).count();
    eprintln!("theory: {} checks, {} failed", rows.len(), failed);
    if failed > 0 {
        return Err(Failure::Checks { what: "theory", failed, total: rows.len() });
    }
    Ok(())
}

fn theory_csv(rows: &[TheoryRow]) -> String {
    let mut csv = String::from("suite,instance,quantity,bound,pass\n");
    for r in rows {
        writeln!(csv, "{},{},{},{},{}", r.suite, r.instance, r.value, r.bound, r.pass)
            .expect("string write");
    }
    csv
}

fn cmd_gradcheck(points: usize, seed: u64) -> Result<(), Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let checks = finite_difference_sweep(points, &mut rng).map_err(runtime("gradient check"))?;
    let mut failed = 0;
    for op in ["vanilla", "penl", "plpg", "copt", "safe"] {
        let worst = checks
            .iter()
            .filter(|c| c.op == op)
            .map(|c| c.rel_err)
            .fold(0.0f64, f64::max);
        let ok = worst <= FD_TOLERANCE;
        failed += checks.iter().filter(|c| c.op == op && c.rel_err > FD_TOLERANCE).count();
        println!(
            "{op:8} worst rel err {worst:.3e} over {points} points: {}",
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed > 0 {
        return Err(Failure::Checks { what: "gradcheck", failed, total: checks.len() });
    }
    println!("all gradients within {FD_TOLERANCE:e} of central differences");
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep

fn cmd_sweep(config: &Path, seeds: &[u64], out: &Path) -> Result<(), Failure> {
    // Refuse obviously bad inputs before spawning anything.
    load_config(config, None)?;
    if seeds.is_empty() {
        return Err(Failure::Config("sweep needs at least one seed".into()));
    }
    fs::create_dir_all(out).map_err(io_runtime("setup"))?;
    let exe = std::env::current_exe().map_err(io_runtime("setup"))?;

    let mut children = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run_dir = out.join(format!("seed-{seed}"));
        let child = Command::new(&exe)
            .arg("train")
            .arg("--config")
            .arg(config)
            .arg("--seed")
            .arg(seed.to_string())
            .arg("--out")
            .arg(&run_dir)
            .spawn()
            .map_err(io_runtime("sweep"))?;
        children.push((seed, child));
    }

    let mut failures = Vec::new();
    for (seed, mut child) in children {
        let status = child.wait().map_err(io_runtime("sweep"))?;
        if !status.success() {
            failures.push(format!("seed {seed} exited with {status}"));
        }
    }
    if !failures.is_empty() {
        return Err(Failure::Runtime { phase: "sweep", msg: failures.join("; ") });
    }
    println!("{} runs completed under {}", seeds.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// plotdata

const QUANTITIES: [(&str, fn(&MetricsRow) -> f64); 8] = [
    ("episode_return", |r| r.episode_return),
    ("cum_violations", |r| r.cum_violations as f64),
    ("interventions", |r| r.interventions as f64),
    ("mu_mean", |r| r.mu_mean),
    ("mu_min", |r| r.mu_min),
    ("model_kl_max", |r| r.model_kl_max),
    ("lambda", |r| r.lambda),
    ("mu_k", |r| r.mu_k),
];

fn cmd_plotdata(metrics: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let mut logs = Vec::with_capacity(metrics.len());
    for path in metrics {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("reading {}: {e}", path.display())))?;
        let log = MetricsLog::parse_csv(&text)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        logs.push(log);
    }

    fs::create_dir_all(out).map_err(io_runtime("setup"))?;
    for (name, extract) in QUANTITIES {
        // Bucket by exact frame count; runs of one config share the cadence.
        let mut buckets: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for log in &logs {
            for row in &log.rows {
                let v = extract(row);
                if v.is_finite() {
                    buckets.entry(row.frames).or_default().push(v);
                }
            }
        }
        let mut data = String::from("# frames mean ci95\n");
        for (frames, samples) in &buckets {
            let (mean, ci) = mean_ci95(samples);
            writeln!(data, "{frames} {mean} {ci}").expect("string write");
        }
        fs::write(out.join(format!("{name}.dat")), data).map_err(io_runtime("reporting"))?;
    }
    println!("wrote {} series to {}", QUANTITIES.len(), out.display());
    Ok(())
}

/// Mean and the half-width of the 95% confidence interval, Student-t with
/// n−1 degrees of freedom. A single sample has no spread estimate: CI 0.
fn mean_ci95(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    (mean, t_multiplier(n) * se)
}

fn t_multiplier(n: usize) -> f64 {
    StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("valid dof for n >= 2")
        .inverse_cdf(0.975)
}
