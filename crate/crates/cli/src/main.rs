//! `relsync` command-line front end.
//!
//! Exit codes: 0 success, 1 usage/config/I-O error, 2 certification failure,
//! 3 numeric abort.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{error, info};
use relsync_core::Error;

use relsync_core::scenario::{
    cmd_check, cmd_compare, cmd_simulate, cmd_sweep, cmd_synth, default_sweep_taus, gen_random,
    parse_config, CommandOutput, ScenarioConfig, Topology,
};

#[derive(Parser)]
#[command(name = "relsync", version)]
#[command(about = "Synchronize arrays of relatively actuated discrete-time linear systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario config (JSON)
    #[arg(long)]
    config: PathBuf,

    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,

    /// Directory for the report and CSV outputs
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Relative controllability and observability rank tests
    Check(Common),
    /// Gains, Kleinman matrices, spectra and horizon thresholds
    Synth(Common),
    /// Simulate the configured mode and write the trace CSV
    Simulate(Common),
    /// Integrated algorithm vs. closed form at step h and h/2
    Compare(Common),
    /// Perturbed closed-loop radii over a list of horizons
    Sweep {
        #[command(flatten)]
        common: Common,

        /// Comma-separated horizons; defaults to the config list or 0.25, 0.5, ..., 32
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
    },
    /// Print a random certified scenario config
    Gen {
        #[arg(long, default_value_t = 3)]
        q: usize,
        #[arg(long, default_value_t = 2)]
        n: usize,
        /// complete, ring or path
        #[arg(long, default_value = "ring")]
        topology: Topology,
        /// Inputs per coupled pair
        #[arg(long, default_value_t = 1)]
        p: usize,
        /// Outputs per coupled pair
        #[arg(long, default_value_t = 1)]
        m: usize,
        /// Entries of A are uniform in [-amp, amp]
        #[arg(long, default_value_t = 1.0)]
        amp: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<ScenarioConfig> {
    let text =
        fs::read(&common.config).with_context(|| format!("reading {}", common.config.display()))?;
    let mut cfg = parse_config(&text)
        .with_context(|| format!("invalid config {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Writes via a temp file in the target directory, then renames into place.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn emit(out: &CommandOutput, cfg: &ScenarioConfig, out_dir: &Path) -> Result<()> {
    let report_path = out_dir.join(&cfg.outputs.report);
    write_atomic(&report_path, &out.report.to_json())?;
    info!("report written to {}", report_path.display());
    if let Some(csv) = &out.trace_csv {
        let path = out_dir.join(&cfg.outputs.trace);
        write_atomic(&path, csv)?;
        info!("trace written to {}", path.display());
    }
    if let Some(csv) = &out.sweep_csv {
        let path = out_dir.join(&cfg.outputs.sweep);
        write_atomic(&path, csv)?;
        info!("sweep written to {}", path.display());
    }
    for d in &out.report.diagnostics {
        error!("{d}");
    }
    println!(
        "{}: {:?} -> {}",
        out.report.command,
        out.report.status,
        report_path.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<i32> {
    let (common, output) = match &cli.command {
        Command::Gen {
            q,
            n,
            topology,
            p,
            m,
            amp,
            seed,
            out,
        } => {
            let spec = gen_random(*q, *n, *topology, *p, *m, *amp, *seed)?;
            let mut cfg = ScenarioConfig::for_spec(&spec);
            cfg.seed = *seed;
            let json = cfg.to_json() + "\n";
            match out {
                Some(path) => write_atomic(path, &json)?,
                None => print!("{json}"),
            }
            return Ok(0);
        }
        Command::Check(c) => (c, cmd_check as fn(&ScenarioConfig) -> _),
        Command::Synth(c) => (c, cmd_synth as fn(&ScenarioConfig) -> _),
        Command::Simulate(c) => (c, cmd_simulate as fn(&ScenarioConfig) -> _),
        Command::Compare(c) => (c, cmd_compare as fn(&ScenarioConfig) -> _),
        Command::Sweep { common, taus } => {
            let cfg = load(common)?;
            let taus = taus
                .clone()
                .or_else(|| cfg.sweep_taus.clone())
                .unwrap_or_else(default_sweep_taus);
            if let Some(bad) = taus.iter().find(|t| !(**t > 0.0)) {
                anyhow::bail!("--taus entries must be > 0, got {bad}");
            }
            let out = cmd_sweep(&cfg, &taus)?;
            emit(&out, &cfg, &common.out_dir)?;
            return Ok(out.exit_code());
        }
    };
    let cfg = load(common)?;
    let out = output(&cfg)?;
    emit(&out, &cfg, &common.out_dir)?;
    Ok(out.exit_code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RELSYNC_LOG", "error"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => match e.downcast_ref::<Error>() {
            Some(inner) if !matches!(inner, Error::Config { .. } | Error::InvalidParam(_)) => {
                eprintln!("error: {e:#}");
                ExitCode::from(if inner.is_certification_failure() {
                    2
                } else {
                    3
                })
            }
            _ => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}
