use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use citadel::config::JobConfig;
use citadel::costmodel::{estimate_mask, estimate_tree, recommend_mode};
use citadel::simnet::{cost_params, emit_metrics, run_job, SimError};
use citadel::verify::{run_suite, VerifyError};

const EXIT_FAILURE: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_PRIVACY: u8 = 3;

#[derive(Parser)]
#[command(name = "citadel", version, about = "Simulated enclave-based collaborative training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a job and write its outputs to a directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Print cost-model estimates as CSV.
    Costmodel {
        #[arg(long)]
        config: PathBuf,
        /// Inclusive range, e.g. `1..64`.
        #[arg(long)]
        n: String,
        /// Comma-separated fan-outs.
        #[arg(long, value_delimiter = ',')]
        c: Vec<usize>,
    },
    /// Run a self-check suite.
    Verify {
        #[arg(long)]
        suite: String,
    },
    /// Print a job config template.
    GenConfig {
        #[arg(long)]
        template: String,
    },
}

/// An error plus the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn invalid(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_INVALID,
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self {
            code: EXIT_FAILURE,
            error,
        }
    }
}

fn load_config(path: &Path) -> Result<JobConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::invalid)?;
    JobConfig::from_toml(&text).map_err(Failure::invalid)
}

fn parse_range(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::invalid(anyhow::anyhow!("--n: expected a..b with 1 <= a <= b, got {s:?}"));
    let (a, b) = match s.split_once("..") {
        Some((a, b)) => (a, b.strip_prefix('=').unwrap_or(b)),
        None => (s, s),
    };
    let a: usize = a.trim().parse().map_err(|_| bad())?;
    let b: usize = b.trim().parse().map_err(|_| bad())?;
    if a == 0 || a > b {
        return Err(bad());
    }
    Ok((a, b))
}

fn cmd_run(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let job = run_job(&cfg).map_err(|e| match e {
        SimError::Config(_) => Failure::invalid(e),
        SimError::PrivacyViolation { .. } => Failure {
            code: EXIT_PRIVACY,
            error: e.into(),
        },
        other => anyhow::Error::from(other).into(),
    });
    let job = job?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    emit_metrics(&job.metrics, &out.join("metrics.csv")).context("writing metrics.csv")?;
    std::fs::write(out.join("model.bin"), &job.final_model_blob).context("writing model.bin")?;
    std::fs::write(out.join("provisioning.csv"), job.provisioning_log())
        .context("writing provisioning.csv")?;
    std::fs::write(out.join("taint.csv"), job.taint_log_csv()).context("writing taint.csv")?;
    println!("{}", job.summary());
    Ok(())
}

fn cmd_costmodel(config: &Path, n: &str, cs: &[usize]) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let (lo, hi) = parse_range(n)?;
    if cs.is_empty() {
        return Err(Failure::invalid(anyhow::anyhow!("--c: empty list")));
    }
    if let Some(c) = cs.iter().find(|c| **c < 2) {
        return Err(Failure::invalid(anyhow::anyhow!("--c: fan-out {c} is below 2")));
    }
    let p = cost_params(&cfg).map_err(Failure::invalid)?;
    println!("n,c,t_mask,t_tree,recommended");
    for n in lo..=hi {
        for &c in cs {
            println!(
                "{n},{c},{},{},{}",
                estimate_mask(&p, n),
                estimate_tree(&p, n, c),
                recommend_mode(&p, n, c)
            );
        }
    }
    Ok(())
}

fn cmd_verify(suite: &str) -> Result<(), Failure> {
    let checks = run_suite(suite).map_err(|e: VerifyError| Failure::invalid(e))?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        println!("{c}");
    }
    if failed > 0 {
        return Err(anyhow::anyhow!("{failed} of {} checks failed", checks.len()).into());
    }
    Ok(())
}

fn cmd_gen_config(template: &str) -> Result<(), Failure> {
    let cfg = JobConfig::template(template).ok_or_else(|| {
        Failure::invalid(anyhow::anyhow!("unknown template {template:?}; expected mask, tree or ssp"))
    })?;
    print!("{}", cfg.to_toml());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INVALID)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Run {
            config,
            out,
            seed_override,
        } => cmd_run(config, out, *seed_override),
        Command::Costmodel { config, n, c } => cmd_costmodel(config, n, c),
        Command::Verify { suite } => cmd_verify(suite),
        Command::GenConfig { template } => cmd_gen_config(template),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
