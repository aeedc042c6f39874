//! Stage loop of continual imitation learning and the baseline strategies.

use std::ops::Range;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::losses::{
    cmi_terms, ewc_penalty, fisher_diagonal, flow_matching_loss, rac_loss, total_loss, EstimatorConfig, EwcAnchor,
    FlowDraws, LossWeights, MiEstimator,
};
use crate::metrics::{attention_diffusion, representation_similarity, SuccessMatrix};
use crate::optim::Adam;
use crate::policy::{
    BoundParams, InputBatch, Instruction, Observation, ParamStore, Partition, Policy, PolicyConfig, Teacher,
};
use crate::replay::{make_batch, ManifestEntry, ReplayMemory};
use crate::suite::{
    collect_demos, render, rollout, vocab_for, Step, SuiteConfig, TaskSpec, Trajectory, ACTION_DIM, PROPRIO_DIM,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Multitask,
    Sequential,
    Er,
    Ewc,
    Infovla,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Multitask,
        Strategy::Sequential,
        Strategy::Er,
        Strategy::Ewc,
        Strategy::Infovla,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Multitask => "multitask",
            Strategy::Sequential => "sequential",
            Strategy::Er => "er",
            Strategy::Ewc => "ewc",
            Strategy::Infovla => "infovla",
        }
    }

    pub fn uses_memory(self) -> bool {
        matches!(self, Strategy::Er | Strategy::Infovla)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `B{base}-{steps}N{per_step}`: `base` tasks trained jointly as stage 0,
/// then `steps` stages of `per_step` tasks. With `base == 0` the first
/// incremental group is stage 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Benchmark {
    pub n_tasks: usize,
    pub base: usize,
    pub steps: usize,
    pub per_step: usize,
}

impl Default for Benchmark {
    fn default() -> Self {
        Self::one_by_one(5)
    }
}

impl Benchmark {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 {
            return Err(Error::config("benchmark.n_tasks", "must be positive"));
        }
        if self.base + self.steps * self.per_step != self.n_tasks {
            return Err(Error::config(
                "benchmark",
                format!(
                    "base + steps * per_step = {} must equal n_tasks = {}",
                    self.base + self.steps * self.per_step,
                    self.n_tasks
                ),
            ));
        }
        if self.steps > 0 && self.per_step == 0 {
            return Err(Error::config("benchmark.per_step", "must be positive when steps > 0"));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.steps + usize::from(self.base > 0)
    }

    /// Task ids trained in `stage`.
    pub fn stage_tasks(&self, stage: usize) -> Range<usize> {
        if self.base > 0 {
            if stage == 0 {
                0..self.base
            } else {
                let s = self.base + (stage - 1) * self.per_step;
                s..s + self.per_step
            }
        } else {
            stage * self.per_step..(stage + 1) * self.per_step
        }
    }

    /// Stage that introduces `task`.
    pub fn stage_of(&self, task: usize) -> usize {
        (0..self.num_stages())
            .find(|&s| self.stage_tasks(s).contains(&task))
            .unwrap_or(0)
    }

    /// One base task followed by single-task steps.
    pub fn one_by_one(n_tasks: usize) -> Self {
        Self {
            n_tasks,
            base: 1,
            steps: n_tasks.saturating_sub(1),
            per_step: 1,
        }
    }

    pub fn label(&self) -> String {
        format!("B{}-{}N{}", self.base, self.steps, self.per_step)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations_base: usize,
    pub iterations_incremental: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub replay_fraction: f64,
    pub loss: LossWeights,
    pub lambda_ewc: f64,
    pub fisher_samples: usize,
    pub estimator: EstimatorConfig,
    pub estimator_lr: f64,
    pub demos_per_task: usize,
    pub eval_episodes: usize,
    pub probe_count: usize,
    pub parallel_eval: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations_base: 600,
            iterations_incremental: 200,
            batch_size: 32,
            lr: 3e-4,
            replay_fraction: 0.5,
            loss: LossWeights::default(),
            lambda_ewc: 1000.0,
            fisher_samples: 64,
            estimator: EstimatorConfig::default(),
            estimator_lr: 1e-3,
            demos_per_task: 10,
            eval_episodes: 20,
            probe_count: 16,
            parallel_eval: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::Config {
                field: format!("train.{field}"),
                reason,
            },
            other => other,
        })?;
        let positive = [
            ("train.batch_size", self.batch_size),
            ("train.demos_per_task", self.demos_per_task),
            ("train.eval_episodes", self.eval_episodes),
            ("train.fisher_samples", self.fisher_samples),
            ("train.probe_count", self.probe_count),
            ("train.estimator.bins", self.estimator.bins),
            ("train.estimator.hidden", self.estimator.hidden),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::config("train.batch_size", "must be at least 2"));
        }
        if self.probe_count < 2 {
            return Err(Error::config("train.probe_count", "must be at least 2"));
        }
        for (field, v) in [("train.lr", self.lr), ("train.estimator_lr", self.estimator_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be a finite value > 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.replay_fraction) {
            return Err(Error::config("train.replay_fraction", "must lie in [0, 1]"));
        }
        if !(self.lambda_ewc >= 0.0 && self.lambda_ewc.is_finite()) {
            return Err(Error::config("train.lambda_ewc", "must be a finite value >= 0"));
        }
        Ok(())
    }

    pub fn iterations(&self, stage: usize) -> usize {
        if stage == 0 {
            self.iterations_base
        } else {
            self.iterations_incremental
        }
    }
}

/// Independent random streams of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Demos = 1,
    Init = 2,
    Batches = 3,
    Flow = 4,
    Estimator = 5,
    Fisher = 6,
    Eval = 7,
    Replay = 8,
    Probes = 9,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stream for `purpose` keyed by up to three indices under `seed`.
pub fn derive_rng(seed: u64, purpose: Purpose, keys: &[u64]) -> ChaCha8Rng {
    let mixed = keys.iter().fold(splitmix(seed), |acc, &k| splitmix(acc ^ splitmix(k)));
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    rng.set_stream(purpose as u64);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: usize,
    pub iter: usize,
    pub cl: f64,
    pub rac: f64,
    pub mi: f64,
    pub mc: f64,
    pub ewc: f64,
    pub total: f64,
}

pub const LOSS_HEADER: &str = "stage,iter,L_CL,L_RAC,L_MI,L_MC,L_EWC,total";

pub fn losses_csv(records: &[LossRecord]) -> String {
    let mut out = String::from(LOSS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}\n",
            r.stage, r.iter, r.cl, r.rac, r.mi, r.mc, r.ewc, r.total
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub trained_tasks: Vec<usize>,
    /// `(task, success rate)` for every task introduced so far.
    pub success: Vec<(usize, f64)>,
    #[serde(skip)]
    pub losses: Vec<LossRecord>,
    pub wall_clock_secs: f64,
    /// Mean fusion-attention entropy on the task-0 probes.
    pub probe_entropy: f64,
    /// Cosine similarity of `z_fused` over the task-0 probes.
    pub probe_similarity: Vec<Vec<f64>>,
}

/// Per-stage inputs of [`run_stage`] beyond the policy.
pub struct StageContext<'a> {
    pub stage: usize,
    pub strategy: Strategy,
    pub config: &'a TrainConfig,
    pub seed: u64,
    /// Steps of the stage's training set.
    pub data: &'a [Step],
    pub teacher: Option<&'a Teacher>,
    pub memory: &'a ReplayMemory,
    pub ewc: &'a [EwcAnchor],
}

/// Runs the optimizer steps of one stage and returns the per-iteration
/// losses.
pub fn run_stage(policy: &mut Policy, ctx: &StageContext<'_>) -> Result<Vec<LossRecord>> {
    let StageContext {
        stage,
        strategy,
        config,
        seed,
        data,
        teacher,
        memory,
        ewc,
    } = *ctx;
    let distill = strategy == Strategy::Infovla && stage > 0;
    if distill != teacher.is_some() {
        return Err(Error::contract(if distill {
            format!("infovla stage {stage} needs a teacher")
        } else {
            format!("{strategy} stage {stage} must not have a teacher")
        }));
    }
    if !strategy.uses_memory() && !memory.is_empty() {
        return Err(Error::contract(format!("{strategy} must not use replay memory")));
    }
    if strategy != Strategy::Ewc && !ewc.is_empty() {
        return Err(Error::contract(format!("{strategy} must not carry consolidation anchors")));
    }
    let key = stage as u64;
    let mut batch_rng = derive_rng(seed, Purpose::Batches, &[key]);
    let mut flow_rng = derive_rng(seed, Purpose::Flow, &[key]);
    let mut estimator = MiEstimator::new(
        policy.config().latent_dim,
        config.estimator,
        &mut derive_rng(seed, Purpose::Estimator, &[key]),
    );
    let mut adam = Adam::new(config.lr, policy.params());
    let mut est_adam = Adam::new(config.estimator_lr, estimator.params());
    let chunk_len = policy.config().chunk_len();
    let replay_fraction = if strategy.uses_memory() { config.replay_fraction } else { 0.0 };

    let mut records = Vec::with_capacity(config.iterations(stage));
    for iter in 0..config.iterations(stage) {
        let outcome = (|| -> Result<LossRecord> {
            let batch = make_batch(data, memory, config.batch_size, replay_fraction, &mut batch_rng)?;
            let items: Vec<(&Observation, &Instruction)> = batch.steps.iter().map(|s| (&s.obs, &s.instr)).collect();
            let input = InputBatch::new(policy.config(), &items)?;
            let chunks = Tensor::from_rows(&batch.steps.iter().map(|s| s.chunk.data.clone()).collect::<Vec<_>>())?;
            let draws = FlowDraws::sample(batch.steps.len(), chunk_len, &mut flow_rng);

            let tape = Tape::new();
            let bound = policy.bind(&tape, stage);
            let student = policy.encode_batch(&tape, &bound, &input)?;
            let cl = flow_matching_loss(policy, &bound, student.z_fused, &chunks, &draws)?;
            let mut record = LossRecord {
                stage,
                iter,
                cl: cl.item()?,
                rac: 0.0,
                mi: 0.0,
                mc: 0.0,
                ewc: 0.0,
                total: 0.0,
            };
            let mut est_bound = None;
            let total = match (teacher, strategy) {
                (Some(teacher), _) => {
                    let old = teacher.encode_batch(&tape, &input)?;
                    let rac = if batch.replay_mask.iter().any(|&m| m) {
                        let r = rac_loss(
                            student.z_fused,
                            old.z_fused,
                            &batch.replay_mask,
                            config.loss.temperature,
                            config.loss.negatives,
                        )?;
                        record.rac = r.item()?;
                        Some(r)
                    } else {
                        None
                    };
                    let est = estimator.bind(&tape, true);
                    let terms = cmi_terms(&old, &student, &est)?;
                    record.mi = terms.mi.item()?;
                    record.mc = terms.mc.item()?;
                    let total = total_loss(cl, rac, Some(terms.total), &config.loss)?;
                    est_bound = Some(BoundParams::from_vars(est.vars().vars().to_vec()));
                    total
                }
                (None, Strategy::Ewc) if !ewc.is_empty() => {
                    let pen = ewc_penalty(&tape, &bound, ewc, config.lambda_ewc)?;
                    record.ewc = pen.item()?;
                    cl.add(&pen)?
                }
                _ => cl,
            };
            record.total = total.item()?;
            if !record.total.is_finite() {
                return Err(Error::NonFinite(format!("loss is {}", record.total)));
            }
            total.backward()?;
            let grads = policy.params().collect_grads(&bound);
            adam.step(policy.params_mut(), &grads)?;
            if let Some(vars) = est_bound {
                let grads = estimator.params().collect_grads(&vars);
                est_adam.step(estimator.params_mut(), &grads)?;
            }
            Ok(record)
        })();
        // Any non-finite value during the step aborts the stage.
        let record = outcome.map_err(|e| match e {
            Error::NonFinite(detail) => Error::Numerical {
                stage,
                iteration: iter,
                detail,
            },
            other => other,
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Success rate of `policy` on `spec` over `episodes` rollouts, each with
/// its own stream keyed by `(stage, task, episode)`.
pub fn evaluate(
    policy: &Policy,
    spec: &TaskSpec,
    stage: usize,
    episodes: usize,
    seed: u64,
    parallel: bool,
) -> Result<f64> {
    let horizon = policy.config().horizon;
    let episode = |e: usize| -> Result<bool> {
        let mut rng = derive_rng(seed, Purpose::Eval, &[stage as u64, spec.task_id as u64, e as u64]);
        Ok(rollout(policy, spec, horizon, &mut rng, spec.t_max)?.0)
    };
    let outcomes: Vec<bool> = if parallel {
        (0..episodes).into_par_iter().map(episode).collect::<Result<_>>()?
    } else {
        (0..episodes).map(episode).collect::<Result<_>>()?
    };
    Ok(outcomes.iter().filter(|&&s| s).count() as f64 / episodes as f64)
}

/// Rendered initial layouts of `spec`, fixed for the run.
pub fn probe_set(spec: &TaskSpec, count: usize, seed: u64) -> Vec<(Observation, Instruction)> {
    let mut rng = derive_rng(seed, Purpose::Probes, &[spec.task_id as u64]);
    (0..count)
        .map(|_| (render(&spec.initial_state(&mut rng), spec), spec.instruction))
        .collect()
}

/// Everything a run needs besides the task list, strategy and seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSetup {
    pub benchmark: Benchmark,
    pub policy: PolicyConfig,
    pub suite: SuiteConfig,
    pub train: TrainConfig,
}

impl RunSetup {
    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate()?;
        self.policy.validate()?;
        self.suite.validate()?;
        self.train.validate()?;
        if self.policy.image_size != self.suite.image_size {
            return Err(Error::config("policy.image_size", "must equal suite.image_size"));
        }
        if self.policy.action_dim != ACTION_DIM || self.policy.proprio_dim != PROPRIO_DIM {
            return Err(Error::config(
                "policy",
                format!("action_dim and proprio_dim must be {ACTION_DIM} and {PROPRIO_DIM} for the suite"),
            ));
        }
        Ok(())
    }
}

/// Outcome of a full continual run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub matrix: SuccessMatrix,
    pub reports: Vec<StageReport>,
    pub memory: Vec<ManifestEntry>,
    pub policy: Policy,
}

/// A continual run advanced one stage at a time.
pub struct ContinualRun {
    strategy: Strategy,
    config: TrainConfig,
    benchmark: Benchmark,
    seed: u64,
    tasks: Vec<TaskSpec>,
    demos: Vec<Vec<Trajectory>>,
    probes: Vec<(Observation, Instruction)>,
    policy: Policy,
    memory: ReplayMemory,
    teacher: Option<Teacher>,
    ewc: Vec<EwcAnchor>,
    cells: Vec<Vec<Option<f64>>>,
    reports: Vec<StageReport>,
    next_stage: usize,
}

impl ContinualRun {
    /// Collects demonstrations for every task and initialises the policy.
    /// The policy vocabulary is sized from `tasks`.
    pub fn new(tasks: Vec<TaskSpec>, setup: &RunSetup, strategy: Strategy, seed: u64) -> Result<Self> {
        setup.validate()?;
        let RunSetup {
            benchmark,
            policy: mut policy_config,
            suite,
            train: config,
        } = setup.clone();
        if tasks.len() != benchmark.n_tasks {
            return Err(Error::config(
                "benchmark.n_tasks",
                format!("{} tasks supplied, benchmark declares {}", tasks.len(), benchmark.n_tasks),
            ));
        }
        policy_config.vocab = vocab_for(&tasks);
        let policy = Policy::new(policy_config, Partition::default(), &mut derive_rng(seed, Purpose::Init, &[]))?;
        let demos = tasks
            .iter()
            .map(|t| {
                let mut rng = derive_rng(seed, Purpose::Demos, &[t.task_id as u64]);
                collect_demos(
                    t,
                    config.demos_per_task,
                    policy.config().horizon,
                    suite.demo_retry_factor,
                    suite.demo_noise,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let probes = probe_set(&tasks[0], config.probe_count, seed);
        let n = tasks.len();
        let stages = benchmark.num_stages();
        Ok(Self {
            strategy,
            config,
            benchmark,
            seed,
            tasks,
            demos,
            probes,
            policy,
            memory: ReplayMemory::new(),
            teacher: None,
            ewc: Vec::new(),
            cells: vec![vec![None; stages]; n],
            reports: Vec::new(),
            next_stage: 0,
        })
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn memory(&self) -> &ReplayMemory {
        &self.memory
    }

    pub fn teacher(&self) -> Option<&Teacher> {
        self.teacher.as_ref()
    }

    pub fn demos(&self, task: usize) -> &[Trajectory] {
        &self.demos[task]
    }

    pub fn probes(&self) -> &[(Observation, Instruction)] {
        &self.probes
    }

    pub fn next_stage(&self) -> usize {
        self.next_stage
    }

    pub fn is_finished(&self) -> bool {
        self.next_stage >= self.benchmark.num_stages()
    }

    /// Training set of `stage`: the stage's tasks, or every task introduced
    /// so far for the multitask strategy.
    fn stage_data(&self, stage: usize) -> Vec<Step> {
        let range = self.benchmark.stage_tasks(stage);
        let tasks = if self.strategy == Strategy::Multitask { 0..range.end } else { range };
        tasks
            .flat_map(|t| self.demos[t].iter().flat_map(|d| d.steps.iter().cloned()))
            .collect()
    }

    /// Trains and evaluates the next stage, then applies the stage-boundary
    /// protocol of the strategy.
    pub fn run_next_stage(&mut self) -> Result<StageReport> {
        if self.is_finished() {
            return Err(Error::contract("all stages already ran"));
        }
        let stage = self.next_stage;
        let started = Instant::now();
        let data = self.stage_data(stage);
        let ctx = StageContext {
            stage,
            strategy: self.strategy,
            config: &self.config,
            seed: self.seed,
            data: &data,
            teacher: self.teacher.as_ref(),
            memory: &self.memory,
            ewc: &self.ewc,
        };
        let losses = run_stage(&mut self.policy, &ctx)?;

        let seen = self.benchmark.stage_tasks(stage).end;
        let success = (0..seen)
            .map(|t| {
                let rate = evaluate(
                    &self.policy,
                    &self.tasks[t],
                    stage,
                    self.config.eval_episodes,
                    self.seed,
                    self.config.parallel_eval,
                )?;
                Ok((t, rate))
            })
            .collect::<Result<Vec<_>>>()?;
        for &(t, rate) in &success {
            self.cells[t][stage] = Some(rate);
        }

        self.stage_boundary(stage, &data)?;
        let report = StageReport {
            stage,
            seed: self.seed,
            strategy: self.strategy,
            trained_tasks: self.benchmark.stage_tasks(stage).collect(),
            success,
            losses,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            probe_entropy: attention_diffusion(&self.policy, &self.probes)?,
            probe_similarity: representation_similarity(&self.policy, &self.probes)?,
        };
        self.reports.push(report.clone());
        self.next_stage += 1;
        Ok(report)
    }

    /// Replays a completed stage from its checkpoint and report instead of
    /// training it. Memory, teacher and EWC anchors are rebuilt exactly as
    /// [`run_next_stage`](Self::run_next_stage) left them.
    pub fn restore_stage(&mut self, params: &ParamStore, report: StageReport) -> Result<()> {
        if self.is_finished() {
            return Err(Error::contract("all stages already ran"));
        }
        let stage = self.next_stage;
        if report.stage != stage || report.seed != self.seed || report.strategy != self.strategy {
            return Err(Error::contract(format!("stage report does not continue stage {stage}")));
        }
        let seen = self.benchmark.stage_tasks(stage).end;
        if report.success.len() != seen || report.success.iter().enumerate().any(|(i, &(t, _))| i != t) {
            return Err(Error::contract(format!("stage {stage} report lists the wrong tasks")));
        }
        self.policy.load_params(params)?;
        for &(t, rate) in &report.success {
            self.cells[t][stage] = Some(rate);
        }
        let data = self.stage_data(stage);
        self.stage_boundary(stage, &data)?;
        self.reports.push(report);
        self.next_stage += 1;
        Ok(())
    }

    fn stage_boundary(&mut self, stage: usize, data: &[Step]) -> Result<()> {
        match self.strategy {
            Strategy::Er | Strategy::Infovla => {
                for t in self.benchmark.stage_tasks(stage) {
                    let mut rng = derive_rng(self.seed, Purpose::Replay, &[t as u64]);
                    self.memory.store(t, &self.demos[t], &mut rng)?;
                }
                if self.strategy == Strategy::Infovla {
                    self.teacher = Some(self.policy.snapshot_teacher());
                }
            }
            Strategy::Ewc => {
                // Penalise only what later stages can still train.
                let mut rng = derive_rng(self.seed, Purpose::Fisher, &[stage as u64]);
                let fisher = fisher_diagonal(&self.policy, stage + 1, data, self.config.fisher_samples, &mut rng)?;
                let params = self.policy.params().iter().map(|p| p.value.clone()).collect();
                self.ewc.push(EwcAnchor { params, fisher });
            }
            Strategy::Sequential | Strategy::Multitask => {}
        }
        Ok(())
    }

    pub fn matrix(&self) -> Result<SuccessMatrix> {
        SuccessMatrix::new(self.cells.clone())
    }

    pub fn reports(&self) -> &[StageReport] {
        &self.reports
    }

    pub fn finish(self) -> Result<RunResult> {
        if !self.is_finished() {
            return Err(Error::contract("run has stages left"));
        }
        Ok(RunResult {
            matrix: SuccessMatrix::new(self.cells)?,
            reports: self.reports,
            memory: self.memory.manifest(),
            policy: self.policy,
        })
    }
}

/// Runs every stage of the benchmark.
pub fn run_sequence(tasks: Vec<TaskSpec>, setup: &RunSetup, strategy: Strategy, seed: u64) -> Result<RunResult> {
    let mut run = ContinualRun::new(tasks, setup, strategy, seed)?;
    while !run.is_finished() {
        run.run_next_stage()?;
    }
    run.finish()
}

#[cfg(test)]
mod tests;
