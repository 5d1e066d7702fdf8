//! The `rwre` command line.
//!
//! Every command reads its environment from a JSON file and prints JSON to
//! standard output. Exit codes: 0 on success, 2 on usage or configuration
//! errors, 3 when a resource cap is hit, 1 when the input is numerically
//! degenerate.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::brw::{self, Martingale};
use crate::env::{Environment, EnvironmentSpec};
use crate::error::{Error, Result};
use crate::exact;
use crate::harness::{self, ExperimentPlan};
use crate::json;
use crate::regime::{self, RegimeReport};
use crate::walk::StopRule;

#[derive(Debug, Parser)]
#[command(name = "rwre", version, about = "Random walks in random environment on Galton-Watson trees")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Classify the recurrence regime and print the predicted constants.
    Classify {
        #[arg(long)]
        env: PathBuf,
        #[arg(long, default_value_t = regime::DEFAULT_TOL)]
        tol: f64,
    },
    /// Run a replica experiment and write raw, summary and plot files.
    Simulate {
        #[arg(long)]
        env: PathBuf,
        /// `steps:N`, `returns:N` or `hitgen:M`.
        #[arg(long, value_parser = parse_stop)]
        stop: StopRule,
        /// `dyadic:J0:J1`, checkpoints at 2^J0..2^J1.
        #[arg(long, value_parser = parse_grid)]
        grid: Option<(u32, u32)>,
        #[arg(long)]
        replicas: u64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Per-replica step cap (default 2^28 for `returns`, none otherwise).
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long, default_value_t = harness::DEFAULT_MAX_RESAMPLES)]
        max_resamples: u32,
    },
    /// Exact hitting quantities on a frozen tree.
    Exact {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        depth: u32,
        #[arg(long)]
        m: u32,
        #[arg(long)]
        seed: u64,
        /// Also solve the first-step equations.
        #[arg(long)]
        oracle: bool,
    },
    /// Branching random walk checks.
    Verify {
        #[arg(long)]
        env: PathBuf,
        #[arg(long, value_enum)]
        suite: Suite,
        /// Generations (biggins, martingale) or levels (maxpot).
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<u32>>,
        /// Threshold for biggins; defaults to the median of S_n.
        #[arg(long, allow_hyphen_values = true)]
        c: Option<f64>,
        #[arg(long, value_enum, default_value_t = WhichMartingale::W)]
        which: WhichMartingale,
        #[arg(long, default_value_t = 100_000)]
        replicas: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Classify every `*.json` environment in a directory.
    Sweep {
        #[arg(long)]
        env_dir: PathBuf,
        #[arg(long, default_value_t = regime::DEFAULT_TOL)]
        tol: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Biggins,
    Martingale,
    Maxpot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WhichMartingale {
    #[value(name = "W", alias = "w")]
    W,
    #[value(name = "M", alias = "m")]
    M,
}

fn parse_stop(s: &str) -> std::result::Result<StopRule, String> {
    let (kind, n) = s.split_once(':').ok_or("expected KIND:N")?;
    let n: u64 = n.parse().map_err(|e| format!("bad count {n:?}: {e}"))?;
    if n == 0 {
        return Err("stop parameter must be positive".into());
    }
    match kind {
        "steps" => Ok(StopRule::Steps(n)),
        "returns" => Ok(StopRule::RootReturns(n)),
        "hitgen" => Ok(StopRule::HitGeneration(n)),
        _ => Err(format!("unknown stop kind {kind:?} (steps, returns, hitgen)")),
    }
}

fn parse_grid(s: &str) -> std::result::Result<(u32, u32), String> {
    let mut parts = s.split(':');
    match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some("dyadic"), Some(a), Some(b), None) => {
            let a: u32 = a.parse().map_err(|e| format!("bad exponent {a:?}: {e}"))?;
            let b: u32 = b.parse().map_err(|e| format!("bad exponent {b:?}: {e}"))?;
            if a > b || b > 62 {
                return Err(format!("bad dyadic range {a}..{b}"));
            }
            Ok((a, b))
        }
        _ => Err("expected dyadic:J0:J1".into()),
    }
}

/// Stop grid for `simulate`: the dyadic checkpoints plus the stop itself.
pub fn simulate_grid(stop: StopRule, grid: Option<(u32, u32)>) -> Result<Vec<StopRule>> {
    let mut points = match grid {
        Some((a, b)) => harness::dyadic_grid(stop, a, b)?,
        None => Vec::new(),
    };
    if points.last().is_some_and(|p| p.parameter() > stop.parameter()) {
        return Err(Error::Config(format!("grid extends beyond the stop parameter {}", stop.parameter())));
    }
    if points.last() != Some(&stop) {
        points.push(stop);
    }
    Ok(points)
}

fn load_env(path: &Path) -> Result<EnvironmentSpec> {
    EnvironmentSpec::load(path)
}

#[derive(Serialize)]
struct SweepLine<'a> {
    env: &'a str,
    report: Option<RegimeReport>,
    error: Option<String>,
}

/// Report line of `verify`.
#[derive(Debug, Serialize)]
pub struct VerifyLine {
    pub suite: &'static str,
    pub n: u32,
    pub c: Option<f64>,
    pub lhs: f64,
    pub stderr: f64,
    pub rhs: f64,
    pub z: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub which: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_max_bar_v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_max_bar_v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<u64>,
}

fn emit<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    writeln!(out, "{}", json::to_string(value)?)?;
    Ok(())
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Classify { env, tol } => {
            let spec = load_env(&env)?;
            emit(out, &regime::classify(&spec, tol)?)
        }
        Command::Simulate { env, stop, grid, replicas, seed, out: dir, threads, max_steps, max_resamples } => {
            let spec = load_env(&env)?;
            let mut plan = ExperimentPlan::new(spec, simulate_grid(stop, grid)?, replicas, seed);
            plan.threads = threads;
            plan.max_resamples_per_replica = max_resamples;
            if max_steps.is_some() {
                plan.max_steps = max_steps;
            }
            let result = harness::run_plan(&plan)?;
            harness::write_outputs(&dir, &result)?;
            if result.manifest.truncated > 0 {
                eprintln!(
                    "warning: {} of {} replicas hit the step cap and are missing from later grid points",
                    result.manifest.truncated, result.manifest.replicas
                );
            }
            emit(out, &result.manifest)
        }
        Command::Exact { env, depth, m, seed, oracle } => {
            let spec = load_env(&env)?;
            let env = Environment::new(spec)?;
            if m < 1 || m > depth {
                return Err(Error::Config(format!("m = {m} outside 1..={depth}")));
            }
            let tree = exact::freeze(&env, depth, seed)?;
            emit(out, &exact::exact_report(&tree, m, oracle)?)
        }
        Command::Verify { env, suite, n, c, which, replicas, seed, threads } => {
            let spec = load_env(&env)?;
            let environment = Environment::new(spec.clone())?;
            match suite {
                Suite::Biggins => {
                    for n in n.unwrap_or_else(|| vec![4, 6]) {
                        let c = match c {
                            Some(c) => c,
                            None => brw::sn_median(&spec, n)?,
                        };
                        let r = brw::verify_many_to_one(&environment, n, c, replicas, seed, threads)?;
                        emit(
                            out,
                            &VerifyLine {
                                suite: "biggins",
                                n,
                                c: Some(c),
                                lhs: r.lhs_estimate,
                                stderr: r.lhs_stderr,
                                rhs: r.rhs_exact,
                                z: r.z_score,
                                which: None,
                                mean_max_bar_v: None,
                                sample_max_bar_v: None,
                                count: Some(replicas),
                            },
                        )?;
                    }
                    Ok(())
                }
                Suite::Martingale => {
                    let (m, tag) = match which {
                        WhichMartingale::W => (Martingale::W, "W"),
                        WhichMartingale::M => (Martingale::M, "M"),
                    };
                    for n in n.unwrap_or_else(|| vec![8]) {
                        let e = brw::martingale_mean(&environment, m, n, replicas, seed, threads)?;
                        emit(
                            out,
                            &VerifyLine {
                                suite: "martingale",
                                n,
                                c: None,
                                lhs: e.mean,
                                stderr: e.stderr,
                                rhs: 1.0,
                                z: brw::z_score(e.mean, e.stderr, 1.0),
                                which: Some(tag),
                                mean_max_bar_v: None,
                                sample_max_bar_v: None,
                                count: Some(e.count),
                            },
                        )?;
                    }
                    Ok(())
                }
                Suite::Maxpot => {
                    let gamma = regime::gamma_tilde(&spec, regime::DEFAULT_TOL)?;
                    let levels = n.unwrap_or_else(|| vec![15, 20]);
                    for a in brw::max_potential_profile(&environment, &levels, replicas, seed, threads)? {
                        emit(
                            out,
                            &VerifyLine {
                                suite: "maxpot",
                                n: a.level,
                                c: None,
                                lhs: a.mean_max_v,
                                stderr: a.stderr_max_v,
                                rhs: gamma,
                                z: brw::z_score(a.mean_max_v, a.stderr_max_v, gamma),
                                which: None,
                                mean_max_bar_v: Some(a.mean_max_bar_v),
                                sample_max_bar_v: Some(a.sample_max_bar_v),
                                count: Some(a.count),
                            },
                        )?;
                    }
                    Ok(())
                }
            }
        }
        Command::Sweep { env_dir, tol } => {
            let mut files: Vec<PathBuf> =
                std::fs::read_dir(&env_dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
            files.retain(|p| p.extension().is_some_and(|e| e == "json"));
            files.sort();
            for f in files {
                let name = f.file_name().expect("file").to_string_lossy().into_owned();
                let line = match load_env(&f).and_then(|s| regime::classify(&s, tol)) {
                    Ok(report) => SweepLine { env: &name, report: Some(report), error: None },
                    Err(e) => SweepLine { env: &name, report: None, error: Some(e.to_string()) },
                };
                emit(out, &line)?;
            }
            Ok(())
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "rwre: {e}");
            e.exit_code()
        }
    }
}
