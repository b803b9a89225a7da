//! Command line front end: `run`, `builtin` and `explore`.
//!
//! Exit codes: 0 safe and live, 2 fork detected, 3 liveness failure only,
//! 1 usage, parse or i/o error.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::checker::{self, Budget, LivenessBounds, Verdict, VERDICT_SENTINEL};
use crate::error::{Error, Result};
use crate::model::{Config, Protocol};
use crate::scenario::{self, Scenario, BUILTINS, DEFAULT_MAX_TICKS};
use crate::sim::Simulation;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FORK: i32 = 2;
pub const EXIT_LIVENESS: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "dbft", about = "Simulate dBFT consensus runs and check them for forks and stalls")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario file, or `builtin <name>`, and print its verdict.
    Run {
        target: String,
        name: Option<String>,
        #[arg(long)]
        protocol: Option<Protocol>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "t-star")]
        t_star: Option<u64>,
        #[arg(long = "max-views")]
        max_views: Option<u64>,
        /// Write the trace followed by the verdict to this file.
        #[arg(long = "trace-out")]
        trace_out: Option<PathBuf>,
    },
    /// Print or write the canonical scenario file of a built-in scenario.
    Builtin {
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search random adversary plans and fault rules for a fork.
    Explore {
        #[arg(long, default_value_t = 7)]
        n: u32,
        #[arg(long, default_value = "two-phase")]
        protocol: Protocol,
        #[arg(long, default_value_t = 2000)]
        runs: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "max-ticks", default_value_t = DEFAULT_MAX_TICKS)]
        max_ticks: u64,
        /// Where to write a minimized counterexample.
        #[arg(long, default_value = "counterexample.dbft")]
        out: PathBuf,
    },
}

fn load(target: &str, name: Option<&str>) -> Result<Scenario> {
    if target == "builtin" {
        let name = name.ok_or_else(|| Error::Config("`run builtin` needs a scenario name".into()))?;
        return scenario::builtin(name).ok_or_else(|| unknown_builtin(name));
    }
    if let Some(extra) = name {
        return Err(Error::Config(format!("unexpected argument `{extra}`")));
    }
    let text = std::fs::read_to_string(target).map_err(|e| Error::Io(format!("{target}: {e}")))?;
    Scenario::parse(&text)
}

fn unknown_builtin(name: &str) -> Error {
    Error::Config(format!("unknown builtin `{name}` (known: {})", BUILTINS.join(", ")))
}

/// Runs `scenario` and returns the rendered trace and its verdict.
pub fn execute(scenario: &Scenario) -> Result<(String, Verdict)> {
    let mut sim = Simulation::new(scenario)?;
    sim.run();
    let verdict = Verdict::of(
        sim.trace(),
        LivenessBounds {
            max_views: scenario.config.max_views,
            t0: scenario.config.t0,
        },
    );
    Ok((sim.trace().render(), verdict))
}

fn report(out: &mut dyn Write, verdict: &Verdict) -> std::io::Result<()> {
    writeln!(out, "{VERDICT_SENTINEL}")?;
    out.write_all(verdict.to_text().as_bytes())
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::Run {
            target,
            name,
            protocol,
            seed,
            t_star,
            max_views,
            trace_out,
        } => {
            let mut s = load(&target, name.as_deref())?;
            if let Some(p) = protocol {
                s.config.protocol = p;
            }
            if let Some(seed) = seed {
                s.config.seed = seed;
            }
            if let Some(t) = t_star {
                s.set_t_star(t);
            }
            if let Some(m) = max_views {
                s.config.max_views = m;
            }
            let (trace, verdict) = execute(&s)?;
            if let Some(path) = trace_out {
                let mut file = std::fs::File::create(&path)?;
                file.write_all(trace.as_bytes())?;
                report(&mut file, &verdict)?;
            }
            report(out, &verdict)?;
            Ok(verdict.exit_code())
        }
        Command::Builtin { name, out: path } => {
            let s = scenario::builtin(&name).ok_or_else(|| unknown_builtin(&name))?;
            match path {
                Some(path) => std::fs::write(path, s.to_text())?,
                None => out.write_all(s.to_text().as_bytes())?,
            }
            Ok(EXIT_OK)
        }
        Command::Explore {
            n,
            protocol,
            runs,
            seed,
            max_ticks,
            out: path,
        } => {
            let config = Config::new(n).with_protocol(protocol);
            config.validate()?;
            let result = checker::explore(&config, Budget { runs, max_ticks }, seed);
            writeln!(out, "runs={} forks={}", result.runs, result.forks.len())?;
            match result.counterexample {
                Some((scenario, verdict)) => {
                    std::fs::write(&path, scenario.to_text())?;
                    writeln!(out, "counterexample={}", path.display())?;
                    report(out, &verdict)?;
                    Ok(EXIT_FORK)
                }
                None => Ok(EXIT_OK),
            }
        }
    }
}

/// Entry point shared by the binary and the tests.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_USAGE
        }
    }
}
