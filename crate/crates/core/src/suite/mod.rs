//! Procedural 2-D pick-and-place suite.
//!
//! A kinematic point gripper moves in the unit box. Every task asks for one
//! object to be carried into one target region; all tasks of a suite share
//! the same objects and targets, and consecutive tasks reuse an object with a
//! different target so that their instructions conflict.

mod expert;
mod render;

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::policy::{ActionChunk, Instruction, Observation, Policy, Vocab};

pub use expert::{expert_action, scripted_expert, ScriptedExpert};
pub use render::{render, render_image, COLORS};

const DEMO_SCHEMA: &str = "infovla-demos";
const SUITE_SCHEMA: &str = "infovla-suite";
const SCHEMA_VERSION: u32 = 1;

/// Proprio layout: gripper x, gripper y, closed flag, heading.
pub const PROPRIO_DIM: usize = 4;
/// Action layout: Δx, Δy, grip command.
pub const ACTION_DIM: usize = 3;

/// Geometry and timing shared by every task of a suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub image_size: usize,
    /// Displacement per unit action.
    pub max_step: f64,
    pub grasp_radius: f64,
    pub target_radius: f64,
    /// Half-width of the per-episode uniform layout jitter.
    pub jitter: f64,
    pub t_max: usize,
    /// Expert attempts allowed per requested demo.
    pub demo_retry_factor: usize,
    /// Half-width of the execution noise on expert motion during demo
    /// collection.
    pub demo_noise: f64,
    /// Tasks per object block; also the number of target regions.
    pub targets_per_object: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            max_step: 0.1,
            grasp_radius: 0.08,
            target_radius: 0.12,
            jitter: 0.05,
            t_max: 32,
            demo_retry_factor: 10,
            demo_noise: 0.3,
            targets_per_object: 3,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("suite.max_step", self.max_step),
            ("suite.grasp_radius", self.grasp_radius),
            ("suite.target_radius", self.target_radius),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(field, "must lie in (0, 1)"));
            }
        }
        if !(0.0..0.2).contains(&self.jitter) {
            return Err(Error::config("suite.jitter", "must lie in [0, 0.2)"));
        }
        if self.image_size == 0 {
            return Err(Error::config("suite.image_size", "must be positive"));
        }
        if self.t_max == 0 {
            return Err(Error::config("suite.t_max", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.demo_noise) {
            return Err(Error::config("suite.demo_noise", "must lie in [0, 1]"));
        }
        if !(2..=5).contains(&self.targets_per_object) {
            return Err(Error::config("suite.targets_per_object", "must lie in [2, 5]"));
        }
        if self.demo_retry_factor == 0 {
            return Err(Error::config("suite.demo_retry_factor", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    /// Index into [`COLORS`].
    pub color: usize,
    pub shape: usize,
    /// Nominal position before jitter.
    pub position: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub instruction: Instruction,
    pub objects: Vec<ObjectSpec>,
    pub targets: Vec<TargetSpec>,
    pub jitter: f64,
    pub t_max: usize,
    pub max_step: f64,
    pub grasp_radius: f64,
    pub image_size: usize,
}

impl TaskSpec {
    pub fn object(&self) -> usize {
        self.instruction.object
    }

    pub fn target(&self) -> usize {
        self.instruction.target
    }

    pub fn validate(&self) -> Result<()> {
        if self.object() >= self.objects.len() || self.target() >= self.targets.len() {
            return Err(Error::contract(format!(
                "task {} references a missing object or target",
                self.task_id
            )));
        }
        let inside = |p: &[f64; 2]| p.iter().all(|v| (0.0..=1.0).contains(v));
        if !self.objects.iter().all(|o| inside(&o.position))
            || !self.targets.iter().all(|t| inside(&t.center))
        {
            return Err(Error::contract("layout outside the unit box"));
        }
        Ok(())
    }

    /// Samples an initial state: nominal layout plus uniform jitter.
    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> SimState {
        let mut jit = |p: [f64; 2]| -> [f64; 2] {
            if self.jitter == 0.0 {
                return p;
            }
            p.map(|v| (v + rng.gen_range(-self.jitter..=self.jitter)).clamp(0.0, 1.0))
        };
        let gripper = jit([0.5, 0.5]);
        let objects = self.objects.iter().map(|o| jit(o.position)).collect();
        let targets = self.targets.iter().map(|t| jit(t.center)).collect();
        SimState {
            gripper,
            closed: false,
            held: None,
            heading: 0.0,
            objects,
            targets,
            t: 0,
        }
    }

    /// Success predicate: task object inside its target and not held.
    pub fn is_success(&self, state: &SimState) -> bool {
        let obj = state.objects[self.object()];
        let tgt = state.targets[self.target()];
        state.held != Some(self.object()) && dist(obj, tgt) <= self.targets[self.target()].radius
    }
}

/// Instruction vocabulary covering a task list.
pub fn vocab_for(tasks: &[TaskSpec]) -> Vocab {
    let first = &tasks[0];
    Vocab {
        verbs: 1,
        objects: first.objects.len(),
        targets: first.targets.len(),
    }
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Simulator state. Held objects move with the gripper.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub gripper: [f64; 2],
    pub closed: bool,
    pub held: Option<usize>,
    /// Direction of the last displacement, as a fraction of π.
    pub heading: f64,
    pub objects: Vec<[f64; 2]>,
    pub targets: Vec<[f64; 2]>,
    pub t: usize,
}

impl SimState {
    pub fn proprio(&self) -> Vec<f64> {
        vec![
            self.gripper[0],
            self.gripper[1],
            if self.closed { 1.0 } else { 0.0 },
            self.heading,
        ]
    }

    /// Applies one action: move by `max_step·(Δx, Δy)` inside the box, then
    /// grasp the nearest object within `grasp_radius` if the grip command is
    /// positive, or release if it is not.
    pub fn step(&mut self, spec: &TaskSpec, action: &[f64]) -> Result<()> {
        if action.len() != ACTION_DIM {
            return Err(Error::shape("sim_step", format!("{} action values", action.len())));
        }
        if action.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("action".into()));
        }
        let a: Vec<f64> = action.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        let (dx, dy) = (a[0] * spec.max_step, a[1] * spec.max_step);
        let before = self.gripper;
        self.gripper = [
            (self.gripper[0] + dx).clamp(0.0, 1.0),
            (self.gripper[1] + dy).clamp(0.0, 1.0),
        ];
        let moved = [self.gripper[0] - before[0], self.gripper[1] - before[1]];
        if moved[0] != 0.0 || moved[1] != 0.0 {
            self.heading = moved[1].atan2(moved[0]) / std::f64::consts::PI;
        }
        if let Some(h) = self.held {
            self.objects[h] = self.gripper;
        }
        self.closed = a[2] > 0.0;
        if self.closed {
            if self.held.is_none() {
                self.held = self
                    .objects
                    .iter()
                    .enumerate()
                    .map(|(i, &o)| (i, dist(o, self.gripper)))
                    .filter(|&(_, d)| d <= spec.grasp_radius)
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(i, _)| i);
                if let Some(h) = self.held {
                    self.objects[h] = self.gripper;
                }
            }
        } else {
            self.held = None;
        }
        self.t += 1;
        self.check()
    }

    fn check(&self) -> Result<()> {
        let inside = |p: &[f64; 2]| p.iter().all(|v| (0.0..=1.0).contains(v));
        if !inside(&self.gripper) || !self.objects.iter().all(inside) {
            return Err(Error::contract("simulator state left the unit box"));
        }
        if let Some(h) = self.held {
            if self.objects[h] != self.gripper {
                return Err(Error::contract("held object detached from gripper"));
            }
        }
        Ok(())
    }
}

/// Builds `n` tasks over an `objects × targets_per_object` grid of (object, target) pairs,
/// ordered so that consecutive tasks share an object and differ in target.
/// The seed permutes target order within each object block.
pub fn generate_tasks(n: usize, seed: u64, config: &SuiteConfig) -> Result<Vec<TaskSpec>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if n == 0 {
        return Err(Error::contract("generate_tasks needs n >= 1"));
    }
    config.validate()?;
    let n_targets = config.targets_per_object;
    let n_objects = n.div_ceil(n_targets).max(2);
    if n_objects > COLORS.len() {
        return Err(Error::contract(format!("at most {} tasks supported", COLORS.len() * n_targets)));
    }
    let spread = |k: usize, count: usize| {
        let span = (0.2 * (count as f64 - 1.0)).clamp(0.6, 0.8);
        0.5 - span / 2.0 + span * k as f64 / (count - 1).max(1) as f64
    };
    let objects: Vec<ObjectSpec> = (0..n_objects)
        .map(|k| ObjectSpec {
            color: k,
            shape: 0,
            position: [spread(k, n_objects), 0.2],
        })
        .collect();
    let targets: Vec<TargetSpec> = (0..n_targets)
        .map(|k| TargetSpec {
            center: [spread(k, n_targets), 0.8],
            radius: config.target_radius,
        })
        .collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    for object in 0..n_objects {
        let mut order: Vec<usize> = (0..n_targets).collect();
        order.shuffle(&mut rng);
        pairs.extend(order.into_iter().map(|target| (object, target)));
    }
    let tasks = pairs
        .into_iter()
        .take(n)
        .enumerate()
        .map(|(task_id, (object, target))| TaskSpec {
            task_id,
            instruction: Instruction {
                verb: 0,
                object,
                target,
            },
            objects: objects.clone(),
            targets: targets.clone(),
            jitter: config.jitter,
            t_max: config.t_max,
            max_step: config.max_step,
            grasp_radius: config.grasp_radius,
            image_size: config.image_size,
        })
        .collect::<Vec<_>>();
    for t in &tasks {
        t.validate()?;
    }
    Ok(tasks)
}

/// One demonstration step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub obs: Observation,
    pub chunk: ActionChunk,
    pub instr: Instruction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: usize,
    pub steps: Vec<Step>,
    pub success: bool,
}

/// Anything that proposes an action chunk for the current state.
pub trait ChunkPolicy {
    fn plan(&self, spec: &TaskSpec, state: &SimState, obs: &Observation, rng: &mut dyn rand::RngCore)
        -> Result<ActionChunk>;
}

impl ChunkPolicy for Policy {
    fn plan(&self, spec: &TaskSpec, _: &SimState, obs: &Observation, rng: &mut dyn rand::RngCore)
        -> Result<ActionChunk> {
        self.sample_actions(obs, &spec.instruction, self.config().euler_steps, rng)
    }
}

/// Executed actions and visited states of one episode.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RolloutTrace {
    pub states: Vec<SimState>,
    pub actions: Vec<Vec<f64>>,
}

/// Runs one episode from a freshly sampled layout, re-planning a chunk every
/// `H` steps. Success is checked after every step.
pub fn rollout<P, R>(policy: &P, spec: &TaskSpec, horizon: usize, rng: &mut R, t_max: usize)
    -> Result<(bool, RolloutTrace)>
where
    P: ChunkPolicy + ?Sized,
    R: rand::RngCore,
{
    let mut state = spec.initial_state(rng);
    let mut trace = RolloutTrace {
        states: vec![state.clone()],
        actions: Vec::new(),
    };
    while state.t < t_max {
        let obs = render(&state, spec);
        let chunk = policy.plan(spec, &state, &obs, rng)?;
        for k in 0..horizon.min(chunk.horizon) {
            let action = chunk.step(k);
            state.step(spec, action)?;
            trace.actions.push(action.to_vec());
            trace.states.push(state.clone());
            if spec.is_success(&state) {
                return Ok((true, trace));
            }
            if state.t >= t_max {
                break;
            }
        }
    }
    Ok((false, trace))
}

/// Runs the scripted expert closed loop and records, at every step, the
/// observation and the chunk the expert plans from there.
///
/// The executed motion is the expert's first action plus uniform noise of
/// half-width `exec_noise` on the motion components; recorded chunks stay
/// noise-free, so demos cover recovery from off-path states.
pub fn expert_episode<R: Rng + ?Sized>(spec: &TaskSpec, horizon: usize, exec_noise: f64, rng: &mut R)
    -> Result<Trajectory> {
    let mut state = spec.initial_state(rng);
    let mut steps = Vec::new();
    let mut success = false;
    while state.t < spec.t_max {
        let obs = render(&state, spec);
        let chunk = scripted_expert(spec, &state, horizon)?;
        let mut action = chunk.step(0).to_vec();
        if exec_noise > 0.0 {
            for a in &mut action[..2] {
                *a = (*a + rng.gen_range(-exec_noise..=exec_noise)).clamp(-1.0, 1.0);
            }
        }
        state.step(spec, &action)?;
        steps.push(Step {
            obs,
            chunk,
            instr: spec.instruction,
        });
        if spec.is_success(&state) {
            success = true;
            break;
        }
    }
    Ok(Trajectory {
        task_id: spec.task_id,
        steps,
        success,
    })
}

/// Collects `n_demos` successful expert demonstrations, attempting at most
/// `retry_factor · n_demos` episodes.
pub fn collect_demos<R: Rng + ?Sized>(
    spec: &TaskSpec,
    n_demos: usize,
    horizon: usize,
    retry_factor: usize,
    exec_noise: f64,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    let mut demos = Vec::with_capacity(n_demos);
    let budget = n_demos * retry_factor.max(1);
    for _ in 0..budget {
        if demos.len() == n_demos {
            break;
        }
        let traj = expert_episode(spec, horizon, exec_noise, rng)?;
        if traj.success {
            demos.push(traj);
        }
    }
    if demos.len() < n_demos {
        return Err(Error::contract(format!(
            "expert produced {} of {n_demos} demos for task {} within {budget} attempts",
            demos.len(),
            spec.task_id
        )));
    }
    Ok(demos)
}

#[derive(Serialize, Deserialize)]
struct DemoHeader {
    schema: String,
    version: u32,
    task_id: usize,
    count: usize,
}

/// Writes demos as JSON lines: a header line, then one trajectory per line.
pub fn write_demos(path: &Path, task_id: usize, demos: &[Trajectory]) -> Result<()> {
    let header = DemoHeader {
        schema: DEMO_SCHEMA.into(),
        version: SCHEMA_VERSION,
        task_id,
        count: demos.len(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for d in demos {
        out.push_str(&serde_json::to_string(d)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_demos(path: &Path) -> Result<Vec<Trajectory>> {
    let mut lines = BufReader::new(fs::File::open(path)?).lines();
    let header: DemoHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => return Err(Error::Format("empty demo file".into())),
    };
    if header.schema != DEMO_SCHEMA || header.version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported demo schema {} v{}",
            header.schema, header.version
        )));
    }
    let demos = lines
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect::<Result<Vec<Trajectory>>>()?;
    if demos.len() != header.count {
        return Err(Error::Format(format!(
            "header announces {} trajectories, found {}",
            header.count,
            demos.len()
        )));
    }
    Ok(demos)
}

#[derive(Serialize, Deserialize)]
pub struct SuiteManifest {
    pub schema: String,
    pub version: u32,
    pub suite_seed: u64,
    pub demo_seed: u64,
    pub tasks: Vec<TaskSpec>,
}

impl SuiteManifest {
    pub fn new(suite_seed: u64, demo_seed: u64, tasks: Vec<TaskSpec>) -> Self {
        Self {
            schema: SUITE_SCHEMA.into(),
            version: SCHEMA_VERSION,
            suite_seed,
            demo_seed,
            tasks,
        }
    }
}
