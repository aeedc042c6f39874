//! Run directories: per-seed runs with checkpoints, resumption, and
//! aggregation across seeds and strategies.
//!
//! Layout under the output directory:
//!
//! ```text
//! <strategy>/seed-<s>/config.json          resolved single-seed config
//! <strategy>/seed-<s>/checkpoints/stage-<j>.json
//! <strategy>/seed-<s>/stages/stage-<j>.json
//! <strategy>/seed-<s>/losses.csv
//! <strategy>/seed-<s>/memory_manifest.json
//! <strategy>/seed-<s>/R.csv
//! <strategy>/seed-<s>/metrics.json
//! <strategy>/aggregate.json
//! <strategy>/report.txt
//! compare.json, compare.txt               written by `compare`
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::io::{write_atomic, write_json_atomic};
use crate::metrics::{similarity_drift, Metrics, SuccessMatrix};
use crate::policy::ParamStore;
use crate::trainer::{losses_csv, ContinualRun, StageReport, Strategy, LOSS_HEADER};

pub fn strategy_dir(root: &Path, strategy: Strategy) -> PathBuf {
    root.join(strategy.name())
}

pub fn seed_dir(root: &Path, strategy: Strategy, seed: u64) -> PathBuf {
    strategy_dir(root, strategy).join(format!("seed-{seed}"))
}

fn checkpoint_path(dir: &Path, stage: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("stage-{stage}.json"))
}

fn report_path(dir: &Path, stage: usize) -> PathBuf {
    dir.join("stages").join(format!("stage-{stage}.json"))
}

/// Outcome of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub metrics: Metrics,
    /// Task-0 probe attention entropy after each stage.
    pub probe_entropy: Vec<f64>,
    /// Frobenius change of the task-0 probe similarity matrix after each
    /// stage relative to the first stage.
    pub similarity_drift: Vec<f64>,
    /// Stages restored from disk rather than trained.
    pub resumed_stages: usize,
}

impl SeedOutcome {
    fn new(seed: u64, matrix: &SuccessMatrix, reports: &[StageReport], resumed_stages: usize) -> Result<Self> {
        let Some(first) = reports.first() else {
            return Err(Error::contract("run has no stage reports"));
        };
        Ok(Self {
            seed,
            metrics: Metrics::compute(matrix),
            probe_entropy: reports.iter().map(|r| r.probe_entropy).collect(),
            similarity_drift: reports
                .iter()
                .map(|r| similarity_drift(&first.probe_similarity, &r.probe_similarity))
                .collect::<Result<_>>()?,
            resumed_stages,
        })
    }
}

/// Called after every finished or restored stage.
pub trait Progress {
    fn stage(&mut self, _strategy: Strategy, _report: &StageReport, _restored: bool) {}
}

impl Progress for () {}

/// Runs (or resumes) one seed of `config.strategy` into its seed directory.
/// With `resume`, stages whose checkpoint and report exist are restored and
/// only the remainder is trained; the stored config must match.
pub fn run_seed(
    config: &ExperimentConfig,
    root: &Path,
    seed: u64,
    resume: bool,
    progress: &mut dyn Progress,
) -> Result<SeedOutcome> {
    let dir = seed_dir(root, config.strategy, seed);
    let resolved = ExperimentConfig {
        seeds: vec![seed],
        ..config.clone()
    };
    let config_path = dir.join("config.json");
    if resume && config_path.exists() {
        let stored = ExperimentConfig::load(&config_path)?;
        if stored != resolved {
            return Err(Error::config(
                "config",
                format!("{} was written by a different config", config_path.display()),
            ));
        }
    }
    resolved.save(&config_path)?;

    let mut run = ContinualRun::new(resolved.tasks()?, &resolved.setup(), config.strategy, seed)?;
    let mut losses_text = format!("{LOSS_HEADER}\n");
    let mut restored = 0;
    if resume {
        let previous = std::fs::read_to_string(dir.join("losses.csv")).unwrap_or_default();
        while !run.is_finished() {
            let stage = run.next_stage();
            let (ckpt, rep) = (checkpoint_path(&dir, stage), report_path(&dir, stage));
            if !(ckpt.exists() && rep.exists()) {
                break;
            }
            let params = ParamStore::load(&ckpt)?;
            let report: StageReport = serde_json::from_str(&std::fs::read_to_string(&rep)?)?;
            run.restore_stage(&params, report)?;
            progress.stage(config.strategy, run.reports().last().expect("restored"), true);
            restored += 1;
        }
        for line in previous.lines().skip(1) {
            let stage = line.split(',').next().and_then(|s| s.parse::<usize>().ok());
            if stage.is_some_and(|s| s < restored) {
                losses_text.push_str(line);
                losses_text.push('\n');
            }
        }
    }

    while !run.is_finished() {
        let report = run.run_next_stage()?;
        let stage = report.stage;
        losses_text.push_str(losses_csv(&report.losses).split_once('\n').map_or("", |(_, rest)| rest));
        run.policy().params().save(&checkpoint_path(&dir, stage))?;
        write_json_atomic(&report_path(&dir, stage), &report)?;
        write_atomic(&dir.join("losses.csv"), losses_text.as_bytes())?;
        write_json_atomic(&dir.join("memory_manifest.json"), &run.memory().manifest())?;
        progress.stage(config.strategy, &report, false);
    }
    // Restored-only runs never rewrite these above.
    write_atomic(&dir.join("losses.csv"), losses_text.as_bytes())?;
    write_json_atomic(&dir.join("memory_manifest.json"), &run.memory().manifest())?;

    let matrix = run.matrix()?;
    matrix.write_csv(&dir.join("R.csv"))?;
    let outcome = SeedOutcome::new(seed, &matrix, run.reports(), restored)?;
    write_json_atomic(&dir.join("metrics.json"), &outcome.metrics)?;
    Ok(outcome)
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, std: var.sqrt() }
    }

    fn pct(&self) -> String {
        format!("{:.1} ± {:.1}", 100.0 * self.mean, 100.0 * self.std)
    }
}

/// Cross-seed summary of one strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub strategy: Strategy,
    pub benchmark: String,
    pub seeds: Vec<u64>,
    pub auc: Stat,
    pub fwt: Stat,
    pub nbt: Stat,
    pub faa: Stat,
    pub aa: Stat,
    pub per_stage_all: Vec<Stat>,
    pub per_stage_old: Vec<Option<Stat>>,
    /// Per-stage task-0 probe entropy.
    pub probe_entropy: Vec<Stat>,
    pub similarity_drift: Vec<Stat>,
    pub runs: Vec<SeedOutcome>,
}

impl Aggregate {
    pub fn new(strategy: Strategy, benchmark: String, runs: Vec<SeedOutcome>) -> Result<Self> {
        let Some(first) = runs.first() else {
            return Err(Error::contract("aggregate needs at least one run"));
        };
        let stages = first.metrics.per_stage_all.len();
        let stat = |f: &dyn Fn(&SeedOutcome) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
        let per_stage_old = (0..stages)
            .map(|j| {
                let vals: Option<Vec<f64>> = runs.iter().map(|r| r.metrics.per_stage_old[j]).collect();
                vals.map(|v| Stat::of(&v))
            })
            .collect();
        Ok(Self {
            strategy,
            benchmark,
            seeds: runs.iter().map(|r| r.seed).collect(),
            auc: stat(&|r| r.metrics.auc),
            fwt: stat(&|r| r.metrics.fwt),
            nbt: stat(&|r| r.metrics.nbt),
            faa: stat(&|r| r.metrics.faa),
            aa: stat(&|r| r.metrics.aa),
            per_stage_all: (0..stages).map(|j| stat(&|r| r.metrics.per_stage_all[j])).collect(),
            per_stage_old,
            probe_entropy: (0..stages).map(|j| stat(&|r| r.probe_entropy[j])).collect(),
            similarity_drift: (0..stages).map(|j| stat(&|r| r.similarity_drift[j])).collect(),
            runs,
        })
    }

    /// Per-stage table plus the summary metrics, in percent.
    pub fn report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} on {} over seeds {:?}", self.strategy, self.benchmark, self.seeds);
        let _ = writeln!(
            out,
            "{:<8} {:>14} {:>14} {:>10} {:>10}",
            "stage", "Old", "All", "entropy", "drift"
        );
        for (j, all) in self.per_stage_all.iter().enumerate() {
            let old = self.per_stage_old[j].map_or("-".into(), |s| s.pct());
            let _ = writeln!(
                out,
                "{:<8} {:>14} {:>14} {:>10.4} {:>10.4}",
                crate::metrics::stage_label(j),
                old,
                all.pct(),
                self.probe_entropy[j].mean,
                self.similarity_drift[j].mean
            );
        }
        let _ = writeln!(
            out,
            "AUC {}  FWT {}  NBT {}  FAA {}  AA {}",
            self.auc.pct(),
            self.fwt.pct(),
            self.nbt.pct(),
            self.faa.pct(),
            self.aa.pct()
        );
        out
    }
}

/// Runs every seed of `config` and writes the strategy aggregate.
pub fn run_experiment(config: &ExperimentConfig, resume: bool, progress: &mut dyn Progress) -> Result<Aggregate> {
    config.validate()?;
    let root = config.resolved_output_dir();
    let runs = config
        .seeds
        .iter()
        .map(|&seed| run_seed(config, &root, seed, resume, progress))
        .collect::<Result<Vec<_>>>()?;
    let agg = Aggregate::new(config.strategy, config.benchmark.label(), runs)?;
    let dir = strategy_dir(&root, config.strategy);
    write_json_atomic(&dir.join("aggregate.json"), &agg)?;
    write_atomic(&dir.join("report.txt"), agg.report().as_bytes())?;
    Ok(agg)
}

/// One ordering assertion over strategy means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub name: String,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub aggregates: Vec<Aggregate>,
    pub checks: Vec<OrderingCheck>,
}

impl Comparison {
    pub fn new(aggregates: Vec<Aggregate>) -> Self {
        let checks = ordering_checks(&aggregates);
        Self { aggregates, checks }
    }

    pub fn get(&self, strategy: Strategy) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.strategy == strategy)
    }

    /// One row per strategy; `drift1` is the probe similarity drift after
    /// the first incremental stage.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<11} {:>12} {:>12} {:>12} {:>12} {:>12} {:>8}",
            "strategy", "AUC", "FWT", "NBT", "FAA", "AA", "drift1"
        );
        for a in &self.aggregates {
            let _ = writeln!(
                out,
                "{:<11} {:>12} {:>12} {:>12} {:>12} {:>12} {:>8.4}",
                a.strategy.name(),
                a.auc.pct(),
                a.fwt.pct(),
                a.nbt.pct(),
                a.faa.pct(),
                a.aa.pct(),
                a.similarity_drift.get(1).map_or(0.0, |s| s.mean)
            );
        }
        for c in &self.checks {
            let _ = writeln!(out, "{} {}", if c.passed { "PASS" } else { "FAIL" }, c.name);
        }
        out
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// FAA ordering assertions over whichever strategies are present.
pub fn ordering_checks(aggregates: &[Aggregate]) -> Vec<OrderingCheck> {
    let faa = |s: Strategy| aggregates.iter().find(|a| a.strategy == s).map(|a| a.faa.mean);
    let mut checks = Vec::new();
    let mut push = |name: String, passed: bool| checks.push(OrderingCheck { name, passed });
    let (info, er, seq) = (faa(Strategy::Infovla), faa(Strategy::Er), faa(Strategy::Sequential));
    if let (Some(i), Some(e)) = (info, er) {
        push(format!("FAA infovla {:.1} >= er {:.1}", 100.0 * i, 100.0 * e), i >= e);
    }
    if let (Some(e), Some(s)) = (er, seq) {
        push(format!("FAA er {:.1} >= sequential {:.1}", 100.0 * e, 100.0 * s), e >= s);
    }
    if let (Some(i), Some(s)) = (info, seq) {
        push(
            format!("FAA infovla - sequential = {:.1} pp >= 15", 100.0 * (i - s)),
            i - s >= 0.15,
        );
    }
    if let Some(mt) = aggregates.iter().find(|a| a.strategy == Strategy::Multitask) {
        push(format!("multitask |NBT| {:.1} <= 5", 100.0 * mt.nbt.mean.abs()), mt.nbt.mean.abs() <= 0.05);
        let best = aggregates
            .iter()
            .filter(|a| a.strategy != Strategy::Multitask)
            .all(|a| mt.faa.mean >= a.faa.mean);
        if aggregates.len() > 1 {
            push(format!("multitask FAA {:.1} is the highest", 100.0 * mt.faa.mean), best);
        }
    }
    checks
}

/// Runs each strategy on the same suite and seeds and writes the comparison.
pub fn run_comparison(
    config: &ExperimentConfig,
    strategies: &[Strategy],
    resume: bool,
    progress: &mut dyn Progress,
) -> Result<Comparison> {
    if strategies.is_empty() {
        return Err(Error::config("strategies", "must name at least one strategy"));
    }
    let aggregates = strategies
        .iter()
        .map(|&strategy| {
            let c = ExperimentConfig {
                strategy,
                ..config.clone()
            };
            run_experiment(&c, resume, progress)
        })
        .collect::<Result<Vec<_>>>()?;
    let cmp = Comparison::new(aggregates);
    let root = config.resolved_output_dir();
    write_json_atomic(&root.join("compare.json"), &cmp)?;
    write_atomic(&root.join("compare.txt"), cmp.table().as_bytes())?;
    Ok(cmp)
}

#[cfg(test)]
mod tests;
