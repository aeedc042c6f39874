//! Command-line front end.
//!
//! Exit codes: 0 success, 1 failed checks, 2 config or usage error, 3
//! numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use infovla::config::{ExperimentConfig, Preset};
use infovla::experiment::{run_comparison, run_experiment, Progress};
use infovla::gradsuite::{run_suite, TOLERANCE};
use infovla::io::write_json_atomic;
use infovla::metrics::{Metrics, SuccessMatrix};
use infovla::trainer::{StageReport, Strategy};
use infovla::Error;

#[derive(Parser)]
#[command(name = "infovla", version, about = "Continual imitation learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one strategy over every configured seed.
    Run {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        strategy: Option<Strategy>,
    },
    /// Recompute metrics from a run directory or an R.csv file.
    Metrics {
        path: PathBuf,
    },
    /// Finite-difference check of every primitive and loss.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturbs the analytic gradient of the named case.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Run several strategies on identical suite and seeds.
    Compare {
        #[command(flatten)]
        source: Source,
        #[arg(long, value_delimiter = ',', default_values_t = [Strategy::Sequential, Strategy::Er, Strategy::Infovla])]
        strategies: Vec<Strategy>,
        /// Exit with status 1 when an ordering check fails.
        #[arg(long)]
        strict: bool,
    },
    /// Print a preset as JSON.
    Preset {
        #[arg(value_enum)]
        preset: Preset,
    },
}

#[derive(Args)]
struct Source {
    /// JSON config file; defaults to the selected preset.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, conflicts_with = "config")]
    preset: Option<Preset>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    iterations_base: Option<usize>,
    #[arg(long)]
    iterations_incremental: Option<usize>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    parallel_eval: bool,
    /// Continue from the checkpoints already in the run directory.
    #[arg(long)]
    resume: bool,
    #[arg(long, short)]
    quiet: bool,
}

impl Source {
    fn resolve(&self, strategy: Option<Strategy>) -> infovla::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::preset(self.preset.unwrap_or(Preset::Ci)),
        };
        if let Some(s) = strategy {
            c.strategy = s;
        }
        if let Some(seeds) = &self.seeds {
            c.seeds = seeds.clone();
        }
        if let Some(dir) = &self.output {
            c.output_dir = dir.clone();
        }
        if let Some(n) = self.iterations_base {
            c.train.iterations_base = n;
        }
        if let Some(n) = self.iterations_incremental {
            c.train.iterations_incremental = n;
        }
        if let Some(n) = self.eval_episodes {
            c.train.eval_episodes = n;
        }
        c.train.parallel_eval |= self.parallel_eval;
        c.validate()?;
        Ok(c)
    }
}

struct Log {
    quiet: bool,
}

impl Progress for Log {
    fn stage(&mut self, strategy: Strategy, r: &StageReport, restored: bool) {
        if self.quiet {
            return;
        }
        let success: Vec<String> = r.success.iter().map(|(t, v)| format!("T{t}={:.2}", v)).collect();
        let tag = if restored { " (restored)" } else { "" };
        eprintln!(
            "{strategy} seed {} stage {}{tag}: {} entropy {:.4} {:.1}s",
            r.seed,
            r.stage,
            success.join(" "),
            r.probe_entropy,
            r.wall_clock_secs
        );
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical { .. } | Error::NonFinite(_) => 3,
        Error::Config { .. } | Error::Format(_) | Error::Json(_) => 2,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn cmd_metrics(path: &Path) -> infovla::Result<()> {
    let (csv, out) = if path.is_dir() {
        (path.join("R.csv"), path.join("metrics.json"))
    } else {
        let dir = path.parent().unwrap_or(Path::new("."));
        (path.to_path_buf(), dir.join("metrics.json"))
    };
    let text = std::fs::read_to_string(&csv)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", csv.display())))?;
    let metrics = Metrics::compute(&SuccessMatrix::from_csv(&text)?);
    print!("{}", metrics.table());
    write_json_atomic(&out, &metrics)
}

fn cmd_gradcheck(instances: usize, seed: u64, fault: Option<&str>) -> infovla::Result<bool> {
    let reports = run_suite(instances, seed, fault)?;
    if let Some(f) = fault {
        if !reports.iter().any(|r| r.name == f) {
            return Err(Error::config("inject-fault", format!("no case named `{f}`")));
        }
    }
    println!("{:<24} {:>12} {:>8}", "case", "max rel err", "checked");
    for r in &reports {
        println!(
            "{:<24} {:>12.3e} {:>8} {}",
            r.name,
            r.max_rel_error,
            r.checked,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let ok = reports.iter().all(|r| r.passed);
    println!("{} (tolerance {TOLERANCE:e})", if ok { "all cases passed" } else { "gradient check failed" });
    Ok(ok)
}

fn run(cli: Cli) -> infovla::Result<bool> {
    match cli.command {
        Command::Run { source, strategy } => {
            let config = source.resolve(strategy)?;
            let agg = run_experiment(&config, source.resume, &mut Log { quiet: source.quiet })?;
            print!("{}", agg.report());
            Ok(true)
        }
        Command::Metrics { path } => cmd_metrics(&path).map(|_| true),
        Command::Gradcheck {
            instances,
            seed,
            inject_fault,
        } => cmd_gradcheck(instances, seed, inject_fault.as_deref()),
        Command::Compare {
            source,
            strategies,
            strict,
        } => {
            let config = source.resolve(None)?;
            let cmp = run_comparison(&config, &strategies, source.resume, &mut Log { quiet: source.quiet })?;
            print!("{}", cmp.table());
            Ok(!strict || cmp.all_passed())
        }
        Command::Preset { preset } => {
            println!("{}", serde_json::to_string_pretty(&ExperimentConfig::preset(preset))?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
