use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use ltdyn::output::emit_scan;
use ltdyn::{dump_scenario, emit_outputs, parse_scenario};
use ltdyn_core::engine::{run_scenario, RunResult};
use ltdyn_core::reduced_system::{build_preset, tune_report};
use ltdyn_core::scenario::Scenario;

const EXIT_INPUT: u8 = 2;
const EXIT_IO: u8 = 1;

#[derive(Parser)]
#[command(name = "ltdyn", version, about = "Long-term voltage and inverter stability simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Output directory (default: out/<scenario name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Integration step override, s.
    #[arg(long)]
    dt: Option<f64>,
    /// Horizon override, s.
    #[arg(long = "t-end")]
    t_end: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario file and write all outputs.
    Run {
        scenario: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Simulate a built-in study case (1-4).
    Preset {
        case: u8,
        #[command(flatten)]
        o: Overrides,
        /// Print the scenario file instead of running it.
        #[arg(long)]
        dump: bool,
    },
    /// Simulate and write only the eigenvalue scan and summary.
    Scan {
        scenario: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Parse and validate; prints the normalized scenario.
    Check { scenario: PathBuf },
    /// Run several scenario files in parallel, one output directory each.
    Batch {
        scenarios: Vec<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long = "t-end")]
        t_end: Option<f64>,
    },
    /// Print the scaled anchors of the built-in corridor system.
    Tune,
}

/// Failure with the exit code it maps to.
struct Failure(u8, anyhow::Error);

fn input_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure(EXIT_INPUT, e.into())
}

fn apply(mut s: Scenario, dt: Option<f64>, t_end: Option<f64>) -> Result<Scenario, Failure> {
    if let Some(dt) = dt {
        s.simulation.dt = dt;
    }
    if let Some(t) = t_end {
        s.simulation.t_end = t;
    }
    s.validate().map_err(input_err)?;
    Ok(s)
}

fn out_dir(o: &Overrides, s: &Scenario) -> PathBuf {
    o.out.clone().unwrap_or_else(|| Path::new("out").join(&s.name))
}

fn simulate(s: &Scenario) -> Result<RunResult, Failure> {
    run_scenario(s).map_err(|e| input_err(anyhow::Error::new(e).context(format!("scenario '{}'", s.name))))
}

fn report(run: &RunResult, dir: &Path) {
    let r = &run.report;
    println!("verdict: {} (exit code {})", r.verdict.name(), r.verdict.exit_code());
    for c in &r.crossings {
        println!("crossing: {:.3} s {}{}", c.t, c.kind.name(), if c.destabilizing { "" } else { " (stabilizing)" });
    }
    println!("outputs: {}", dir.display());
}

fn run_and_emit(s: &Scenario, dir: &Path) -> Result<RunResult, Failure> {
    let run = simulate(s)?;
    emit_outputs(dir, s, &run)
        .with_context(|| format!("writing outputs to {}", dir.display()))
        .map_err(|e| Failure(EXIT_IO, e))?;
    Ok(run)
}

fn execute(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::Run { scenario, o } => {
            let s = apply(parse_scenario(&scenario).map_err(input_err)?, o.dt, o.t_end)?;
            let dir = out_dir(&o, &s);
            let run = run_and_emit(&s, &dir)?;
            report(&run, &dir);
            Ok(run.verdict.exit_code() as u8)
        }
        Command::Preset { case, o, dump } => {
            let s = apply(build_preset(case).map_err(input_err)?, o.dt, o.t_end)?;
            if dump {
                print!("{}", dump_scenario(&s));
                return Ok(0);
            }
            let dir = out_dir(&o, &s);
            let run = run_and_emit(&s, &dir)?;
            report(&run, &dir);
            Ok(run.verdict.exit_code() as u8)
        }
        Command::Scan { scenario, o } => {
            let s = apply(parse_scenario(&scenario).map_err(input_err)?, o.dt, o.t_end)?;
            let dir = out_dir(&o, &s);
            let run = simulate(&s)?;
            emit_scan(&dir, &s, &run)
                .with_context(|| format!("writing outputs to {}", dir.display()))
                .map_err(|e| Failure(EXIT_IO, e))?;
            report(&run, &dir);
            Ok(run.verdict.exit_code() as u8)
        }
        Command::Check { scenario } => {
            let s = parse_scenario(&scenario).map_err(input_err)?;
            print!("{}", dump_scenario(&s));
            Ok(0)
        }
        Command::Batch { scenarios, out, dt, t_end } => {
            let parsed = scenarios
                .iter()
                .map(|p| {
                    let s = apply(parse_scenario(p).map_err(input_err)?, dt, t_end)?;
                    let stem = p.file_stem().map_or_else(|| s.name.clone(), |x| x.to_string_lossy().into_owned());
                    Ok((out.join(stem), s))
                })
                .collect::<Result<Vec<_>, Failure>>()?;
            let results: Vec<Result<RunResult, Failure>> = parsed.par_iter().map(|(dir, s)| run_and_emit(s, dir)).collect();
            let mut code = 0u8;
            for ((dir, s), r) in parsed.iter().zip(results) {
                match r {
                    Ok(run) => {
                        println!("{}: {} -> {}", s.name, run.verdict.name(), dir.display());
                        code = code.max(run.verdict.exit_code() as u8);
                    }
                    Err(Failure(c, e)) => {
                        eprintln!("{}: error: {e:#}", s.name);
                        code = code.max(c);
                    }
                }
            }
            Ok(code)
        }
        Command::Tune => {
            print!("{}", tune_report().map_err(input_err)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
