//! `fstta`: generate streams, run adaptation experiments and compare reports.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fastslow_tta::harness::{self, compare_reports, read_report, read_reports, write_report};
use fastslow_tta::stream::{build_stream_seeded, write_stream_csv, StreamSpec};
use fastslow_tta::TtaError;

#[derive(Parser)]
#[command(name = "fstta", version, about = "Fast-slow test-time adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize a stream spec into a CSV file.
    GenStream {
        spec: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Override the seed in the spec.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an experiment and write its report directory.
    Run {
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Override the seed list (repeatable).
        #[arg(long = "seed")]
        seeds: Vec<u64>,
    },
    /// Tabulate report directories produced on the same stream.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Write smoothed error-difference curves to this CSV file.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Print forward/backward step counts of a report.
    Counters { dir: PathBuf },
}

fn gen_stream(spec: &Path, output: &Path, seed: Option<u64>) -> Result<()> {
    let spec = StreamSpec::load(spec).with_context(|| format!("loading {}", spec.display()))?;
    let stream = build_stream_seeded(&spec, seed.unwrap_or(spec.seed))?;
    let file = File::create(output).with_context(|| format!("creating {}", output.display()))?;
    write_stream_csv(&stream, BufWriter::new(file))?;
    println!(
        "wrote {} utterances ({} segments, {} boundaries) to {}",
        stream.len(),
        stream.segments.len(),
        stream.boundaries.len(),
        output.display()
    );
    Ok(())
}

fn run(config: &Path, output: &Path, seeds: Vec<u64>) -> Result<()> {
    let (mut cfg, spec) = harness::load_run(config).with_context(|| format!("loading {}", config.display()))?;
    if !seeds.is_empty() {
        cfg.seeds = seeds;
    }
    let report = harness::run_experiment(&cfg, &spec)?;
    write_report(&report, output)?;
    for s in &report.seeds {
        println!(
            "{} seed {}: TER {:.2}% forwards {} backwards {} resets {}",
            report.label,
            s.seed,
            100.0 * s.token_error_rate,
            s.counters.forwards,
            s.counters.backwards,
            s.resets.len()
        );
    }
    println!("mean TER {:.2}% -> {}", 100.0 * report.token_error_rate, output.display());
    if let Some(msg) = report.seeds.iter().find_map(|s| s.failed.as_ref()) {
        return Err(Aborted(msg.clone()).into());
    }
    Ok(())
}

fn compare(dirs: &[PathBuf], curves: Option<&Path>) -> Result<()> {
    let reports = read_reports(dirs)?;
    let cmp = compare_reports(&reports)?;
    print!("{}", cmp.render_table());
    if let Some(path) = curves {
        std::fs::write(path, cmp.curves_csv()).with_context(|| format!("writing {}", path.display()))?;
        println!("difference curves vs {} -> {}", cmp.baseline, path.display());
    }
    Ok(())
}

fn counters(dir: &Path) -> Result<()> {
    let report = read_report(dir)?;
    println!("{:<8} {:>12} {:>12} {:>8}", "seed", "forwards", "backwards", "resets");
    for s in &report.seeds {
        println!("{:<8} {:>12} {:>12} {:>8}", s.seed, s.counters.forwards, s.counters.backwards, s.resets.len());
    }
    Ok(())
}

/// A seed stopped early; the message starts with `[category]`.
#[derive(Debug)]
struct Aborted(String);

impl std::fmt::Display for Aborted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "run aborted, partial report written: {}", self.0)
    }
}

impl std::error::Error for Aborted {}

/// Diagnostic category and exit code for an error chain.
fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    let category = err
        .chain()
        .find_map(|e| {
            if let Some(t) = e.downcast_ref::<TtaError>() {
                return Some(t.category());
            }
            e.downcast_ref::<Aborted>().map(|a| {
                ["config", "usage", "numeric", "parse"]
                    .into_iter()
                    .find(|c| a.0.starts_with(&format!("[{c}]")))
                    .unwrap_or("io")
            })
        })
        .unwrap_or("io");
    let code = match category {
        "config" => 2,
        "usage" => 3,
        "numeric" => 4,
        "parse" => 5,
        _ => 6,
    };
    (category, code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenStream { spec, output, seed } => gen_stream(&spec, &output, seed),
        Command::Run { config, output, seeds } => run(&config, &output, seeds),
        Command::Compare { dirs, curves } => compare(&dirs, curves.as_deref()),
        Command::Counters { dir } => counters(&dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (category, code) = classify(&err);
            eprintln!("error[{category}]: {err:#}");
            ExitCode::from(code)
        }
    }
}
