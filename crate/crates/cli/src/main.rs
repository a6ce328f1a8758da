//! `xteam`: run and validate experiment configs, query the quadratic
//! oracle, and aggregate suites of configs.
//!
//! Exit codes: 0 all verdicts pass, 1 verdict failure, 2 config error,
//! 3 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use xteam_core::error::Error;
use xteam_core::harness::{
    run_experiment, validate_config, write_outputs, ExperimentConfig, OutputFormat, ResultRecord,
};
use xteam_core::lqg::{build_operators, solve_open_loop, verify_convexity, LqgSpec};

#[derive(Parser)]
#[command(name = "xteam", about = "exchangeable stochastic team laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunFlags {
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results are byte-identical for
    /// any value.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory root.
    #[arg(long, default_value = "runs")]
    outdir: PathBuf,
    /// Metric emission format.
    #[arg(long, default_value = "jsonl")]
    format: String,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config and write its result record.
    Run {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Parse and cross-check a config without running it.
    Validate { config: PathBuf },
    /// Solve an LQG spec exactly and print {cost, residual, min_eig_M1}.
    Oracle {
        spec: PathBuf,
        /// Initial state (one value per agent coordinate, comma separated).
        #[arg(long)]
        x0: Option<String>,
        /// Time grid as horizon,steps.
        #[arg(long, default_value = "1.0,100")]
        grid: String,
    },
    /// Run every *.json config in a directory and aggregate verdicts.
    Suite {
        dir: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                Error::ParseError(_) | Error::SemanticError(_) | Error::ConfigError(_) => 2,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Validate { config } => {
            let raw = std::fs::read_to_string(&config)?;
            let parsed = validate_config(&raw)?;
            println!(
                "ok: {} experiment, seed {}, digest {}",
                parsed.tag(),
                parsed.seed,
                parsed.digest()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { config, flags } => {
            let record = run_config(&config, &flags)?;
            print_record(&record);
            Ok(exit_for(&[record]))
        }
        Command::Suite { dir, flags } => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().map(|e| e == "json").unwrap_or(false))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(Error::ConfigError(format!(
                    "no *.json configs under {}",
                    dir.display()
                )));
            }
            let mut records = Vec::new();
            for path in paths {
                println!("== {}", path.display());
                let record = run_config(&path, &flags)?;
                print_record(&record);
                records.push(record);
            }
            let total: usize = records.iter().map(|r| r.verdicts.len()).sum();
            let passed: usize = records
                .iter()
                .flat_map(|r| &r.verdicts)
                .filter(|v| v.pass)
                .count();
            println!("suite: {passed}/{total} verdicts passed");
            Ok(exit_for(&records))
        }
        Command::Oracle { spec, x0, grid } => {
            let raw = std::fs::read_to_string(&spec)?;
            let spec: LqgSpec =
                serde_json::from_str(&raw).map_err(|e| Error::ParseError(e.to_string()))?;
            spec.validate()?;
            let (horizon, steps) = parse_grid(&grid)?;
            let tg = xteam_core::TimeGrid::new(horizon, steps)?;
            let dq = build_operators(&spec, tg)?;
            let (d, _) = spec.dims();
            let x0: Vec<f64> = match x0 {
                Some(s) => s
                    .split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<f64>()
                            .map_err(|e| Error::ParseError(format!("bad x0 entry: {e}")))
                    })
                    .collect::<Result<_, _>>()?,
                None => vec![1.0; spec.n_agents * d],
            };
            let sol = solve_open_loop(&dq, &x0)?;
            let cert = verify_convexity(&dq);
            println!(
                "{}",
                serde_json::json!({
                    "cost": sol.total_cost,
                    "residual": sol.residual,
                    "min_eig_M1": cert.min_eigenvalue,
                })
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn parse_grid(s: &str) -> Result<(f64, usize), Error> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::ParseError("grid must be horizon,steps".into()));
    }
    let horizon = parts[0]
        .trim()
        .parse()
        .map_err(|e| Error::ParseError(format!("bad horizon: {e}")))?;
    let steps = parts[1]
        .trim()
        .parse()
        .map_err(|e| Error::ParseError(format!("bad steps: {e}")))?;
    Ok((horizon, steps))
}

fn run_config(path: &PathBuf, flags: &RunFlags) -> Result<ResultRecord, Error> {
    let raw = std::fs::read_to_string(path)?;
    let mut config: ExperimentConfig = validate_config(&raw)?;
    if let Some(seed) = flags.seed {
        config.seed = seed;
    }
    let format: OutputFormat = flags.format.parse()?;
    let record = match flags.threads {
        None => run_experiment(&config)?,
        Some(workers) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::ConfigError(format!("thread pool: {e}")))?;
            pool.install(|| run_experiment(&config))?
        }
    };
    write_outputs(&record, &flags.outdir, format)?;
    Ok(record)
}

fn print_record(record: &ResultRecord) {
    for v in &record.verdicts {
        println!(
            "  [{}] {}: {}",
            if v.pass { "pass" } else { "FAIL" },
            v.name,
            v.detail
        );
    }
}

fn exit_for(records: &[ResultRecord]) -> ExitCode {
    if records.iter().all(|r| r.all_pass()) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
