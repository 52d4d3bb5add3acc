use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ampo::harness::{self, RunConfig};
use ampo::parallel::Execution;
use ampo::theory::{self, SuiteConfig};
use ampo::{Error, Result};

/// Output directory used when neither `--out` nor the environment sets one.
const DEFAULT_OUT: &str = "runs";

#[derive(Parser)]
#[command(name = "ampo", about = "Model-based RL with unsupervised model adaptation")]
struct Cli {
    /// Output directory. Overrides AMPO_OUT_DIR.
    #[arg(long, global = true, env = "AMPO_OUT_DIR")]
    out: Option<PathBuf>,
    /// Force single-threaded execution.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed listed in a config file; one CSV per seed.
    Train {
        config: PathBuf,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Randomized check of the return bounds on tabular MDPs.
    TheoryCheck {
        #[arg(long, default_value_t = 500)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        max_states: usize,
        #[arg(long, default_value_t = 4)]
        max_actions: usize,
    },
    /// Run a config over several values of one field.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        axis: String,
        /// Comma-separated values; each is read as a TOML literal when possible.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Print the version.
    Version,
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn train(config: &Path, seed: Option<u64>, out: &Path, exec: Execution) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if exec == Execution::Sequential {
        cfg.execution = exec;
    }
    let seeds = seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
    let stem = config.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    for s in seeds {
        let path = out.join(format!("{stem}_seed{s}.csv"));
        let recs = harness::run_to_csv(&cfg, s, &path)?;
        let last = recs.last().map_or(f64::NAN, |r| r.eval_return);
        println!("seed {s}: {} records, final return {last:.2} -> {}", recs.len(), path.display());
    }
    Ok(())
}

fn theory_check(cfg: SuiteConfig, out: &Path, exec: Execution) -> Result<bool> {
    let report = theory::run_suite(&cfg, exec)?;
    std::fs::create_dir_all(out)?;
    let path = out.join("theory_slacks.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &report.results {
        w.serialize(r)?;
    }
    w.flush()?;
    let count = |f: fn(&theory::InstanceResult) -> bool| report.results.iter().filter(|r| !f(r)).count();
    println!("instances: {}", report.results.len());
    println!("lemma1 violations: {}", count(|r| r.lemma1_holds));
    println!("theorem1 violations: {}", count(|r| r.theorem1_holds));
    println!("appendix_e violations: {}", count(|r| r.appendix_e_holds));
    println!("pinsker violations: {}", count(|r| r.pinsker_ok));
    println!("max identity residual: {:.3e}", report.max_identity_residual());
    println!("slacks written to {}", path.display());
    let ok = report.violations() == 0;
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn sweep(config: &Path, axis: &str, values: &[String], out: &Path, exec: Execution) -> Result<()> {
    let base = RunConfig::load(config)?;
    let values: Vec<toml::Value> = values.iter().map(|v| harness::parse_value(v.trim())).collect();
    let rows = harness::sweep(&base, axis, &values, out, exec)?;
    println!("{} cells; manifest at {}", rows.len(), out.join("manifest.csv").display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let out = cli.out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let exec = execution(cli.sequential);
    let result = match cli.command {
        Command::Train { config, seed } => train(&config, seed, &out, exec),
        Command::TheoryCheck { instances, seed, max_states, max_actions } => {
            let cfg = SuiteConfig { instances, seed, max_states, max_actions };
            match theory_check(cfg, &out, exec) {
                Ok(true) => Ok(()),
                Ok(false) => Err(Error::Numerical("theory check found bound violations".into())),
                Err(e) => Err(e),
            }
        }
        Command::Sweep { config, axis, values } => sweep(&config, &axis, &values, &out, exec),
        Command::Version => {
            println!("ampo {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.class());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
