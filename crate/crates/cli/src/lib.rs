//! `fedtee` command-line front end.
//!
//! `run` executes one experiment from a TOML config and writes
//! `metrics.jsonl` and `transcript.jsonl` into the output directory;
//! `summarize` turns a metrics file back into a short report.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use fedtee_core::config::{parse_config, ConfigError};
use fedtee_core::metrics::{MetricsLog, RoundRecord, StopReason};
use fedtee_core::protocol::Simulation;
use fedtee_core::{Error, ExperimentConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";

#[derive(Debug, Parser)]
#[command(name = "fedtee", version, about = "Federated learning across simulated enclaves")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `master_seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `stopping.max_rounds`.
        #[arg(long)]
        rounds: Option<u32>,
        /// Dotted-path override, e.g. `--set training.lr=0.05`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print a report for a metrics file.
    Summarize {
        #[arg(long)]
        metrics: PathBuf,
    },
}

/// Failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(e: impl std::fmt::Display) -> Self {
        Self { code: EXIT_CONFIG, message: e.to_string() }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Self { code: EXIT_RUNTIME, message: e.to_string() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::config(e),
            other => CliError::runtime(other),
        }
    }
}

/// Loads `path` and applies `--seed`, `--rounds` and every `--set`.
pub fn load_config(
    path: &Path,
    seed: Option<u64>,
    rounds: Option<u32>,
    overrides: &[String],
) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = parse_config(path)?;
    for o in overrides {
        cfg = cfg.with_override(o)?;
    }
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    if let Some(r) = rounds {
        cfg.stopping.max_rounds = r;
    }
    cfg.validated()
}

pub fn format_round(r: &RoundRecord) -> String {
    let mut line = format!(
        "round {:>3}  loss {:.6}  accuracy {:.4}  submitted {}",
        r.round,
        r.global_loss,
        r.global_accuracy,
        r.selected.len() + r.discarded.len()
    );
    if !r.discarded.is_empty() {
        let _ = write!(line, "  discarded {:?}", r.discarded);
    }
    if let Some(b) = r.backdoor_success_rate {
        let _ = write!(line, "  backdoor {b:.4}");
    }
    line
}

/// Executes `run`, printing one line per round to `out`. The metrics file
/// is only created once the config is valid.
pub fn run_command(
    config: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    rounds: Option<u32>,
    overrides: &[String],
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let cfg = load_config(config, seed, rounds, overrides).map_err(CliError::config)?;
    let sim = Simulation::setup(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::runtime(format!("creating {}: {e}", out_dir.display())))?;

    let mut io_err = None;
    let result = sim.run_with(|r| {
        if let Err(e) = writeln!(out, "{}", format_round(r)) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(CliError::runtime(format!("writing progress: {e}")));
    }

    let write_file = |name: &str, f: &dyn Fn(&mut BufWriter<File>) -> std::io::Result<()>| {
        let path = out_dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        f(&mut w)?;
        w.flush()
    };
    write_file(METRICS_FILE, &|w| result.metrics.write_jsonl(w))
        .and_then(|_| write_file(TRANSCRIPT_FILE, &|w| w.write_all(result.transcript.to_jsonl().as_bytes())))
        .map_err(|e| CliError::runtime(format!("writing results to {}: {e}", out_dir.display())))?;

    if let Some(s) = &result.metrics.summary {
        writeln!(
            out,
            "done: {} rounds, final loss {:.6}, accuracy {:.4}; metrics in {}",
            s.rounds_executed,
            s.final_loss,
            s.final_accuracy,
            out_dir.join(METRICS_FILE).display()
        )
        .map_err(CliError::runtime)?;
    }
    Ok(())
}

/// Human-readable report. The attacker section only appears when the run
/// configured adversarial parties.
pub fn summarize(log: &MetricsLog) -> Result<String, CliError> {
    let s = log
        .summary
        .as_ref()
        .ok_or_else(|| CliError::runtime("metrics file has no summary record"))?;
    let mut r = String::new();
    let stop = match s.stop_reason {
        StopReason::LossThreshold => "loss threshold reached",
        StopReason::MaxRounds => "round limit reached",
    };
    let _ = writeln!(r, "rounds executed: {} ({stop})", s.rounds_executed);
    let _ = writeln!(r, "final loss:      {:.6}", s.final_loss);
    let _ = writeln!(r, "final accuracy:  {:.4}", s.final_accuracy);
    if s.krum_enabled {
        let _ = writeln!(r, "multi-krum:      on, k = {}", s.krum_k);
    } else {
        let _ = writeln!(r, "multi-krum:      off");
    }
    if !s.rejected.is_empty() {
        let _ = writeln!(r, "rejected:        {:?}", s.rejected);
    }
    let _ = writeln!(r, "final broadcast: {}", if s.broadcast_verified { "verified" } else { "unverified" });
    if !s.attackers.is_empty() {
        let _ = writeln!(r, "attackers:");
        for &id in &s.attackers {
            match log.discard_rate(id) {
                Some(rate) => {
                    let scored = log.rounds.iter().filter(|x| x.krum_scores.iter().any(|k| k.party_id == id)).count();
                    let hits = (rate * scored as f64).round() as usize;
                    let _ = writeln!(r, "  party {id}: discarded in {hits}/{scored} rounds (rate {rate:.3})");
                }
                None => {
                    let _ = writeln!(r, "  party {id}: never scored (multi-krum off or no submissions)");
                }
            }
        }
    }
    if let Some(b) = s.final_backdoor_success_rate {
        let _ = writeln!(r, "backdoor success rate: {b:.4}");
    }
    Ok(r)
}

pub fn summarize_command(metrics: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let file = File::open(metrics).map_err(|e| CliError::runtime(format!("{}: {e}", metrics.display())))?;
    let log = MetricsLog::read_jsonl(BufReader::new(file))
        .map_err(|e| CliError::runtime(format!("{}: {e}", metrics.display())))?;
    let report = summarize(&log)?;
    out.write_all(report.as_bytes()).map_err(CliError::runtime)
}

/// Dispatches a parsed command; returns the process exit code. Errors are
/// written to `err`.
pub fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let res = match cli.command {
        Command::Run { config, out: dir, seed, rounds, overrides } => {
            run_command(&config, &dir, seed, rounds, &overrides, out)
        }
        Command::Summarize { metrics } => summarize_command(&metrics, out),
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}
